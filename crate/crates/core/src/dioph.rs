//! Affine Diophantine conditions, affine `(Q, L)`-nondegeneracy and
//! empirical measure estimates for dependent frequency vectors.
//!
//! Every Diophantine verdict here is certified only up to the Fourier cutoff
//! it was computed with; reports always carry that cutoff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Default Fourier cutoff for Diophantine scans.
pub const DEFAULT_KMAX: u32 = 200;
/// Default number of sphere samples used by `ρ^Q` / `Ξ^Q`.
pub const SPHERE_POINTS: usize = 2000;
/// Coordinate-descent refinement steps after sphere sampling.
pub const REFINE_STEPS: usize = 20;
/// Values at or below this are treated as zero in nondegeneracy decisions.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiophParams {
    pub tau: f64,
    pub gamma: f64,
    /// cap on `|l|`
    #[serde(rename = "L")]
    pub l_max: u32,
}

impl DiophParams {
    pub fn new(tau: f64, gamma: f64, l_max: u32) -> Result<Self> {
        if !(tau >= 0.0) || !(gamma > 0.0) || l_max < 1 {
            return Err(Error::InvalidConfig(format!(
                "Diophantine parameters need tau >= 0, gamma > 0, L >= 1 (got {tau}, {gamma}, {l_max})"
            )));
        }
        Ok(Self { tau, gamma, l_max })
    }

    /// Small-divisor bound `γ|k|^{-τ}` for a mode of ℓ1 norm `k1`.
    pub fn bound(&self, k1: f64) -> f64 {
        self.gamma * k1.powf(-self.tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiophReport {
    pub verdict: Verdict,
    pub worst_k: Vec<i64>,
    pub worst_l: Vec<i64>,
    /// `min |⟨F,k⟩ + ⟨β,l⟩|·|k|^τ` over the scanned range
    pub worst_ratio: f64,
    pub cutoff: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl DiophReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// Calls `f` on every integer vector of length `dim` with `1 ≤ |k|₁ ≤ kmax`
/// whose first non-zero entry is positive, in lexicographic order.
fn for_each_half_mode(dim: usize, kmax: i64, mut f: impl FnMut(&[i64])) {
    fn rec(k: &mut Vec<i64>, i: usize, budget: i64, lead: bool, f: &mut impl FnMut(&[i64])) {
        if i == k.len() {
            if !lead {
                f(k);
            }
            return;
        }
        // while all previous entries are zero only non-negative values keep
        // the first non-zero entry positive
        let lo = if lead { 0 } else { -budget };
        for v in lo..=budget {
            k[i] = v;
            rec(k, i + 1, budget - v.abs(), lead && v == 0, f);
        }
        k[i] = 0;
    }
    let mut k = vec![0; dim];
    rec(&mut k, 0, kmax, true, &mut f);
}

/// All integer vectors with `|l|₁ ≤ lmax`, lexicographic order.
pub fn l_vectors(dim: usize, lmax: i64) -> Vec<Vec<i64>> {
    fn rec(l: &mut Vec<i64>, i: usize, budget: i64, out: &mut Vec<Vec<i64>>) {
        if i == l.len() {
            out.push(l.clone());
            return;
        }
        for v in -budget..=budget {
            l[i] = v;
            rec(l, i + 1, budget - v.abs(), out);
        }
        l[i] = 0;
    }
    let mut out = Vec::new();
    rec(&mut vec![0; dim], 0, lmax, &mut out);
    out
}

/// Exhaustive scan of the affine Diophantine inequality over
/// `0 < |k|₁ ≤ k_max`, `|l|₁ ≤ L`.
pub fn affine_dioph_check(f: &[f64], beta: &[f64], params: &DiophParams, k_max: u32) -> Result<DiophReport> {
    if k_max < 1 {
        return Err(Error::CutoffTooSmall);
    }
    if f.is_empty() {
        return Ok(DiophReport {
            verdict: Verdict::Pass,
            worst_k: Vec::new(),
            worst_l: Vec::new(),
            worst_ratio: f64::INFINITY,
            cutoff: k_max,
        });
    }
    let ls = l_vectors(beta.len(), params.l_max as i64);
    let lvals: Vec<f64> = ls
        .iter()
        .map(|l| l.iter().zip(beta).map(|(a, b)| *a as f64 * b).sum())
        .collect();
    let mut best = f64::INFINITY;
    let mut best_k = Vec::new();
    let mut best_l = Vec::new();
    for_each_half_mode(f.len(), k_max as i64, |k| {
        let fk: f64 = k.iter().zip(f).map(|(a, b)| *a as f64 * b).sum();
        let norm: i64 = k.iter().map(|v| v.abs()).sum();
        let w = (norm as f64).powf(params.tau);
        for (li, lv) in lvals.iter().enumerate() {
            let r = (fk + lv).abs() * w;
            if r < best {
                best = r;
                best_k = k.to_vec();
                best_l = ls[li].clone();
            }
        }
    });
    Ok(DiophReport {
        verdict: if best >= params.gamma { Verdict::Pass } else { Verdict::Fail },
        worst_k: best_k,
        worst_l: best_l,
        worst_ratio: best,
        cutoff: k_max,
    })
}

/// Taylor jet of a pair of maps `F: R^s → R^n`, `β: R^s → R^ν` at a point.
///
/// `coeffs[i]` is the multi-index `q` with coefficient vectors
/// `D^q F(μ)/q!` and `D^q β(μ)/q!`.
#[derive(Clone, Debug, PartialEq)]
pub struct JetData {
    pub center: Vec<f64>,
    pub order: u32,
    pub n: usize,
    pub nu: usize,
    pub coeffs: Vec<(Vec<u32>, Vec<f64>, Vec<f64>)>,
}

/// Multi-indices of `s` variables with total degree between 1 and `order`.
pub fn multi_indices(s: usize, order: u32) -> Vec<Vec<u32>> {
    fn rec(q: &mut Vec<u32>, i: usize, budget: u32, out: &mut Vec<Vec<u32>>) {
        if i == q.len() {
            out.push(q.clone());
            return;
        }
        for v in 0..=budget {
            q[i] = v;
            rec(q, i + 1, budget - v, out);
        }
        q[i] = 0;
    }
    let mut out = Vec::new();
    rec(&mut vec![0; s], 0, order, &mut out);
    out.retain(|q| q.iter().sum::<u32>() >= 1);
    out.sort_by_key(|q| (q.iter().sum::<u32>(), std::cmp::Reverse(q.clone())));
    out
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

impl JetData {
    /// Jet from explicit Taylor coefficients (missing indices are zero).
    pub fn from_taylor(
        center: Vec<f64>,
        order: u32,
        n: usize,
        nu: usize,
        taylor: impl Fn(&[u32]) -> (Vec<f64>, Vec<f64>),
    ) -> Self {
        let coeffs = multi_indices(center.len(), order)
            .into_iter()
            .map(|q| {
                let (a, b) = taylor(&q);
                (q, a, b)
            })
            .collect();
        Self { center, order, n, nu, coeffs }
    }

    /// Jet of a pair of maps obtained by a least-squares polynomial fit of
    /// degree `order` on the stencil `center + h·{-order..order}^s`.
    ///
    /// Exact for polynomial maps of degree `≤ order`.
    pub fn from_fn(
        center: &[f64],
        order: u32,
        h: f64,
        f: impl Fn(&[f64]) -> Vec<f64>,
        beta: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Self {
        let s = center.len();
        let f0 = f(center);
        let b0 = beta(center);
        let (n, nu) = (f0.len(), b0.len());
        let idx = multi_indices(s, order);
        let side = 2 * order as i64 + 1;
        let npts = (side as usize).pow(s as u32);
        let mut pts = Vec::with_capacity(npts);
        for lin in 0..npts {
            let mut rem = lin;
            let mut off = vec![0i64; s];
            for o in off.iter_mut() {
                *o = (rem % side as usize) as i64 - order as i64;
                rem /= side as usize;
            }
            pts.push(off);
        }
        // design matrix in the scaled offsets t = (μ - c)/h
        let ncols = idx.len() + 1;
        let a = nalgebra::DMatrix::from_fn(pts.len(), ncols, |r, c| {
            if c == 0 {
                1.0
            } else {
                idx[c - 1]
                    .iter()
                    .zip(&pts[r])
                    .map(|(e, t)| (*t as f64).powi(*e as i32))
                    .product()
            }
        });
        let pa = linalg::pinv(&a);
        let vals: Vec<(Vec<f64>, Vec<f64>)> = pts
            .iter()
            .map(|off| {
                let mu: Vec<f64> = center.iter().zip(off).map(|(c, o)| c + h * *o as f64).collect();
                (f(&mu), beta(&mu))
            })
            .collect();
        let mut coeffs = Vec::with_capacity(idx.len());
        for (ci, q) in idx.iter().enumerate() {
            let scale = h.powi(q.iter().sum::<u32>() as i32);
            let fit = |comp: usize, which: bool| -> f64 {
                let mut acc = 0.0;
                for (r, (fv, bv)) in vals.iter().enumerate() {
                    let y = if which { bv[comp] } else { fv[comp] };
                    acc += pa[(ci + 1, r)] * y;
                }
                acc / scale
            };
            let fc = (0..n).map(|i| fit(i, false)).collect();
            let bc = (0..nu).map(|i| fit(i, true)).collect();
            coeffs.push((q.clone(), fc, bc));
        }
        Self { center: center.to_vec(), order, n, nu, coeffs }
    }

    /// `J! Σ_{|q|=J} c_q u^q` for the F part (`which = false`) or β part.
    fn directional(&self, j: u32, u: &[f64], which: bool) -> Vec<f64> {
        let dim = if which { self.nu } else { self.n };
        let mut out = vec![0.0; dim];
        let fj = factorial(j);
        for (q, fc, bc) in &self.coeffs {
            if q.iter().sum::<u32>() != j {
                continue;
            }
            let w: f64 = q.iter().zip(u).map(|(e, v)| v.powi(*e as i32)).product();
            let c = if which { bc } else { fc };
            for (o, v) in out.iter_mut().zip(c) {
                *o += fj * w * v;
            }
        }
        out
    }

    /// `D^q F` and `D^q β` (not divided by `q!`).
    pub fn derivative(&self, q: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let qf: f64 = q.iter().map(|v| factorial(*v)).product();
        self.coeffs
            .iter()
            .find(|(e, _, _)| e.as_slice() == q)
            .map(|(_, a, b)| {
                (a.iter().map(|v| v * qf).collect(), b.iter().map(|v| v * qf).collect())
            })
            .unwrap_or_else(|| (vec![0.0; self.n], vec![0.0; self.nu]))
    }
}

/// Numerical sphere optimum with certified-style bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereBounds {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl SphereBounds {
    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Sample points on the unit sphere of `R^d` up to the sign symmetry
/// `u ~ -u`, plus the angular covering radius of the sample.
fn sphere_samples(d: usize, npts: usize) -> (Vec<Vec<f64>>, f64) {
    match d {
        0 => (vec![vec![]], 0.0),
        1 => (vec![vec![1.0]], 0.0),
        2 => {
            let pts = (0..npts)
                .map(|i| {
                    let t = std::f64::consts::PI * i as f64 / npts as f64;
                    vec![t.cos(), t.sin()]
                })
                .collect();
            (pts, std::f64::consts::PI / (2.0 * npts as f64))
        }
        3 => {
            // Fibonacci lattice on the full sphere
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let pts = (0..npts)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / npts as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    vec![r * phi.cos(), r * phi.sin(), z]
                })
                .collect();
            (pts, (4.0 / npts as f64).sqrt() * 1.2)
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let pts = (0..npts * d)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect();
            // heuristic covering radius for random samples
            (pts, 2.0 * ((npts * d) as f64).powf(-1.0 / (d as f64 - 1.0)))
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Coordinate descent on the sphere, maximizing `g` (minimize with `-g`).
fn refine_max(mut u: Vec<f64>, start_step: f64, g: &impl Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let mut best = g(&u);
    let mut step = start_step;
    for _ in 0..REFINE_STEPS {
        let mut improved = false;
        for i in 0..u.len() {
            for sgn in [1.0, -1.0] {
                let mut c = u.clone();
                c[i] += sgn * step;
                normalize(&mut c);
                let v = g(&c);
                if v > best {
                    best = v;
                    u = c;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (u, best)
}

/// `max_J J! max_{|u|=1} |Σ_{|q|=J} ⟨c_q, w⟩ u^q|` with bounds, for a linear
/// functional `w` on the F part (`which = false`) or β part.
fn inner_max(jet: &JetData, q_order: u32, w: &[f64], which: bool) -> SphereBounds {
    let s = jet.center.len();
    let mut lower = 0.0f64;
    let mut upper = 0.0f64;
    for j in 1..=q_order {
        // coefficients a_q = ⟨c_q, w⟩ for |q| = j
        let terms: Vec<(&Vec<u32>, f64)> = jet
            .coeffs
            .iter()
            .filter(|(q, _, _)| q.iter().sum::<u32>() == j)
            .map(|(q, fc, bc)| {
                let c = if which { bc } else { fc };
                (q, c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect();
        let fj = factorial(j);
        let g = |u: &[f64]| -> f64 {
            fj * terms
                .iter()
                .map(|(q, a)| a * q.iter().zip(u).map(|(e, v)| v.powi(*e as i32)).product::<f64>())
                .sum::<f64>()
                .abs()
        };
        if j == 1 {
            // linear form: the max over the unit sphere is the gradient norm
            let mut grad = vec![0.0; s];
            for (q, a) in &terms {
                if let Some(i) = q.iter().position(|e| *e == 1) {
                    grad[i] += a;
                }
            }
            let v = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
            lower = lower.max(v);
            upper = upper.max(v);
            continue;
        }
        let (pts, h) = sphere_samples(s, SPHERE_POINTS);
        let (arg, best) = pts
            .iter()
            .map(|u| (u, g(u)))
            .fold((&pts[0], f64::NEG_INFINITY), |acc, (u, v)| if v > acc.1 { (u, v) } else { acc });
        let (_, refined) = if s > 1 { refine_max(arg.clone(), h, &g) } else { (arg.clone(), best) };
        let lip = j as f64 * fj * terms.iter().map(|(_, a)| a.abs()).sum::<f64>();
        lower = lower.max(refined);
        upper = upper.max(if s > 1 { refined + lip * h } else { refined });
    }
    SphereBounds { value: lower, lower, upper }
}

/// `ρ^Q(μ)`: min over unit `e ∈ R^n` of the directional-derivative maximum.
pub fn rho_q(jet: &JetData, q_order: u32) -> Result<SphereBounds> {
    if jet.n == 0 {
        return Err(Error::EmptyTarget);
    }
    if q_order > jet.order || q_order < 1 {
        return Err(Error::InvalidConfig(format!("Q = {q_order} outside jet order {}", jet.order)));
    }
    let n = jet.n;
    if n == 1 {
        let b = inner_max(jet, q_order, &[1.0], false);
        return Ok(b);
    }
    let (pts, h) = sphere_samples(n, SPHERE_POINTS);
    let evals: Vec<SphereBounds> = pts.iter().map(|e| inner_max(jet, q_order, e, false)).collect();
    let (imin, _) = evals
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, b)| if b.value < acc.1 { (i, b.value) } else { acc });
    let neg = |e: &[f64]| -inner_max(jet, q_order, e, false).value;
    let (e_best, negv) = refine_max(pts[imin].clone(), h, &neg);
    let at_best = inner_max(jet, q_order, &e_best, false);
    let value = -negv;
    // |⟨w, e⟩| is Lipschitz in e with constant |w|; bound |w| by the largest
    // directional derivative norm seen on the u-samples
    let wmax = (1..=q_order)
        .flat_map(|j| {
            let (us, _) = sphere_samples(jet.center.len(), 64);
            us.into_iter().map(move |u| (j, u))
        })
        .map(|(j, u)| {
            let v = jet.directional(j, &u, false);
            v.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    let lower_all = evals.iter().map(|b| b.lower).fold(f64::INFINITY, f64::min);
    let lower = (lower_all.min(at_best.lower) - wmax * 1.5 * h).max(0.0);
    let upper = evals.iter().map(|b| b.upper).fold(at_best.upper, f64::min);
    Ok(SphereBounds { value, lower, upper: upper.max(value) })
}

/// `Ξ_l^Q(μ)`.
pub fn xi_q(jet: &JetData, q_order: u32, l: &[i64]) -> Result<SphereBounds> {
    if l.iter().all(|v| *v == 0) {
        return Err(Error::ZeroL);
    }
    if l.len() != jet.nu {
        return Err(Error::DimensionMismatch(format!("l has length {}, ν = {}", l.len(), jet.nu)));
    }
    if q_order > jet.order || q_order < 1 {
        return Err(Error::InvalidConfig(format!("Q = {q_order} outside jet order {}", jet.order)));
    }
    let w: Vec<f64> = l.iter().map(|v| *v as f64).collect();
    Ok(inner_max(jet, q_order, &w, true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NondegReport {
    pub pass: bool,
    /// which of the four cases (by `n > 0`, `ν > 0`) applied
    pub case: u8,
    pub rho: Option<SphereBounds>,
    /// failing `(k, l)` in case 1, or failing `l` in case 3
    pub witness: Option<(Vec<i64>, Vec<i64>)>,
    /// number of `(k, l)` pairs examined in case 1
    pub scanned: usize,
}

/// Affine `(Q, L)`-nondegeneracy at the jet's center.
pub fn nondegeneracy_check(jet: &JetData, q_order: u32, l_max: u32) -> Result<NondegReport> {
    let (n, nu) = (jet.n, jet.nu);
    if n == 0 && nu == 0 {
        return Ok(NondegReport { pass: true, case: 4, rho: None, witness: None, scanned: 0 });
    }
    let ls: Vec<Vec<i64>> = l_vectors(nu, l_max as i64)
        .into_iter()
        .filter(|l| l.iter().any(|v| *v != 0))
        .collect();
    if n == 0 {
        for l in &ls {
            let xi = xi_q(jet, q_order, l)?;
            if xi.value <= ZERO_TOL {
                return Ok(NondegReport {
                    pass: false,
                    case: 3,
                    rho: None,
                    witness: Some((vec![], l.clone())),
                    scanned: 0,
                });
            }
        }
        return Ok(NondegReport { pass: true, case: 3, rho: None, witness: None, scanned: 0 });
    }
    let rho = rho_q(jet, q_order)?;
    if nu == 0 {
        return Ok(NondegReport {
            pass: rho.lower > ZERO_TOL,
            case: 2,
            rho: Some(rho),
            witness: None,
            scanned: 0,
        });
    }
    if rho.lower <= ZERO_TOL {
        return Ok(NondegReport { pass: false, case: 1, rho: Some(rho), witness: None, scanned: 0 });
    }
    let derivs: Vec<(Vec<f64>, Vec<f64>)> = jet
        .coeffs
        .iter()
        .filter(|(q, _, _)| q.iter().sum::<u32>() <= q_order)
        .map(|(q, _, _)| jet.derivative(q))
        .collect();
    let mut scanned = 0;
    for l in &ls {
        let xi = xi_q(jet, q_order, l)?;
        // non-strict bound; conservative with the upper Ξ and lower ρ
        let radius = xi.upper / rho.lower;
        let kb = radius.floor() as i64;
        let mut k = vec![0i64; n];
        let mut fail: Option<Vec<i64>> = None;
        let mut visit = |k: &[i64]| {
            if fail.is_some() {
                return;
            }
            let norm2 = k.iter().map(|v| (*v * *v) as f64).sum::<f64>();
            if norm2.sqrt() > radius * (1.0 + 1e-12) {
                return;
            }
            scanned += 1;
            let best = derivs
                .iter()
                .map(|(df, db)| {
                    let a: f64 = df.iter().zip(k.iter()).map(|(x, kk)| x * *kk as f64).sum();
                    let b: f64 = db.iter().zip(l).map(|(x, ll)| x * *ll as f64).sum();
                    (a + b).abs()
                })
                .fold(0.0, f64::max);
            if best <= ZERO_TOL {
                fail = Some(k.to_vec());
            }
        };
        box_scan(&mut k, 0, kb, &mut visit);
        if let Some(kf) = fail {
            return Ok(NondegReport {
                pass: false,
                case: 1,
                rho: Some(rho),
                witness: Some((kf, l.clone())),
                scanned,
            });
        }
    }
    Ok(NondegReport { pass: true, case: 1, rho: Some(rho), witness: None, scanned })
}

fn box_scan(k: &mut Vec<i64>, i: usize, b: i64, f: &mut impl FnMut(&[i64])) {
    if i == k.len() {
        f(k);
        return;
    }
    for v in -b..=b {
        k[i] = v;
        box_scan(k, i + 1, b, f);
    }
    k[i] = 0;
}

/// Closed ball in `R^s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn contains(&self, mu: &[f64]) -> bool {
        let d2: f64 = mu.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        d2.sqrt() <= self.radius * (1.0 + 1e-12)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    /// uniform grid over the bounding cube, restricted to the ball
    Grid { points_per_axis: usize },
    /// seeded uniform samples in the ball
    MonteCarlo { points: usize, seed: u64 },
}

impl Sampler {
    pub fn points(&self, ball: &Ball) -> Vec<Vec<f64>> {
        let s = ball.dim();
        match self {
            Sampler::Grid { points_per_axis } => grid_points(ball, *points_per_axis),
            Sampler::MonteCarlo { points, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut out = Vec::with_capacity(*points);
                while out.len() < *points {
                    let mu: Vec<f64> = ball
                        .center
                        .iter()
                        .map(|c| c + ball.radius * (rng.random::<f64>() * 2.0 - 1.0))
                        .collect();
                    if s == 0 || ball.contains(&mu) {
                        out.push(mu);
                    }
                }
                out
            }
        }
    }
}

/// Grid over the cube `center ± radius` with `per_axis` points per axis
/// (endpoints included), restricted to the ball.
pub fn grid_points(ball: &Ball, per_axis: usize) -> Vec<Vec<f64>> {
    let s = ball.dim();
    if per_axis == 0 {
        return Vec::new();
    }
    let coord = |i: usize, c: f64| -> f64 {
        if per_axis == 1 {
            c
        } else {
            c - ball.radius + 2.0 * ball.radius * i as f64 / (per_axis - 1) as f64
        }
    };
    let total = per_axis.pow(s as u32);
    (0..total)
        .map(|lin| {
            let mut rem = lin;
            ball.center
                .iter()
                .map(|c| {
                    let i = rem % per_axis;
                    rem /= per_axis;
                    coord(i, *c)
                })
                .collect::<Vec<f64>>()
        })
        .filter(|mu| ball.contains(mu))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub fraction: f64,
    pub n_points: usize,
    pub n_pass: usize,
    pub cutoff: u32,
    pub min_worst_ratio: f64,
    pub median_worst_ratio: f64,
}

/// Fraction of sample points `μ ∈ K` at which `((F̃(μ), Ω), β̃(μ))` is
/// affinely `(τ, γ, L)`-Diophantine up to the cutoff.
#[allow(clippy::too_many_arguments)]
pub fn measure_estimate<FF, BF>(
    ball: &Ball,
    f_tilde: FF,
    beta_tilde: BF,
    omega: &[f64],
    omega_params: &DiophParams,
    params: &DiophParams,
    sampler: &Sampler,
    k_max: u32,
) -> Result<MeasureReport>
where
    FF: Fn(&[f64]) -> Vec<f64> + Sync,
    BF: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if params.tau < omega_params.tau {
        return Err(Error::Precondition(format!(
            "tau = {} below the forcing exponent tau* = {}",
            params.tau, omega_params.tau
        )));
    }
    if !omega.is_empty() {
        let om = affine_dioph_check(omega, &[], omega_params, k_max)?;
        if !om.passed() {
            return Err(Error::OmegaNotDiophantine { worst_k: om.worst_k, ratio: om.worst_ratio });
        }
    }
    let pts = sampler.points(ball);
    if pts.is_empty() {
        return Err(Error::SamplerEmpty);
    }
    let reports: Vec<Result<DiophReport>> = pts
        .par_iter()
        .map(|mu| {
            let mut freq = f_tilde(mu);
            freq.extend_from_slice(omega);
            affine_dioph_check(&freq, &beta_tilde(mu), params, k_max)
        })
        .collect();
    let mut ratios = Vec::with_capacity(reports.len());
    let mut n_pass = 0;
    for r in reports {
        let r = r?;
        if r.passed() {
            n_pass += 1;
        }
        ratios.push(r.worst_ratio);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(MeasureReport {
        fraction: n_pass as f64 / pts.len() as f64,
        n_points: pts.len(),
        n_pass,
        cutoff: k_max,
        min_worst_ratio: ratios[0],
        median_worst_ratio: ratios[ratios.len() / 2],
    })
}

/// Generic scalar version of the inner product `⟨F, k⟩ + ⟨β, l⟩`.
pub fn affine_form<T: Scalar>(f: &[T], k: &[i64], beta: &[T], l: &[i64]) -> T {
    let a = f.iter().zip(k).fold(T::zero(), |acc, (v, kk)| acc + *v * T::cst(*kk as f64));
    beta.iter().zip(l).fold(a, |acc, (v, ll)| acc + *v * T::cst(*ll as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phi() -> f64 {
        (1.0 + 5f64.sqrt()) / 2.0
    }

    /// brute-force oracle: plain nested loops over a full box, no half-space trick
    fn brute_worst_ratio(f: &[f64; 2], tau: f64, kmax: i64) -> f64 {
        let mut best = f64::INFINITY;
        for a in -kmax..=kmax {
            for b in -kmax..=kmax {
                let n = a.abs() + b.abs();
                if n == 0 || n > kmax {
                    continue;
                }
                let v = (a as f64 * f[0] + b as f64 * f[1]).abs() * (n as f64).powf(tau);
                best = best.min(v);
            }
        }
        best
    }

    #[test]
    fn golden_pair_passes() {
        let p = DiophParams::new(1.1, 0.1, 2).unwrap();
        let r = affine_dioph_check(&[1.0, phi()], &[], &p, 200).unwrap();
        assert!(r.passed());
        assert!(r.worst_ratio > 0.2);
        let oracle = brute_worst_ratio(&[1.0, phi()], 1.1, 200);
        assert!((r.worst_ratio - oracle).abs() < 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn resonant_vector_fails() {
        let p = DiophParams::new(2.0, 0.1, 2).unwrap();
        let r = affine_dioph_check(&[1.0, 2.0], &[], &p, 50).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst_k, vec![2, -1]);
        assert_eq!(r.worst_ratio, 0.0);
    }

    #[test]
    fn affine_cancellation_at_l2() {
        let p = DiophParams::new(1.0, 0.1, 2).unwrap();
        let r = affine_dioph_check(&[1.0], &[0.5], &p, 10).unwrap();
        assert!(!r.passed());
        assert_eq!((r.worst_k.clone(), r.worst_l.clone()), (vec![1], vec![-2]));
        assert_eq!(r.worst_ratio, 0.0);
    }

    #[test]
    fn vacuous_and_cutoff() {
        let p = DiophParams::new(1.0, 0.1, 2).unwrap();
        let r = affine_dioph_check(&[], &[0.3], &p, 10).unwrap();
        assert!(r.passed() && r.worst_ratio.is_infinite());
        assert!(matches!(affine_dioph_check(&[1.0], &[], &p, 0), Err(Error::CutoffTooSmall)));
    }

    #[test]
    fn half_mode_enumeration_counts() {
        // 2D modes with 1 <= |k|_1 <= K: 2K(K+1), half of them canonical
        let mut c = 0;
        for_each_half_mode(2, 5, |_| c += 1);
        assert_eq!(c, 30);
        assert_eq!(l_vectors(2, 2).len(), 13);
    }

    fn poly_jet(coef: &[(u32, f64)], order: u32) -> JetData {
        // F(μ) = Σ c μ^e at μ = 0, s = n = 1
        JetData::from_taylor(vec![0.0], order, 1, 0, |q| {
            let v = coef.iter().filter(|(e, _)| *e == q[0]).map(|(_, c)| *c).sum();
            (vec![v], vec![])
        })
    }

    #[test]
    fn rho_unit_values() {
        let r = rho_q(&poly_jet(&[(1, 1.0)], 1), 1).unwrap();
        assert_eq!((r.value, r.gap()), (1.0, 0.0));
        let sq = poly_jet(&[(2, 1.0)], 2);
        assert_eq!(rho_q(&sq, 2).unwrap().value, 2.0);
        assert_eq!(rho_q(&sq, 1).unwrap().value, 0.0);
        let empty = JetData::from_taylor(vec![0.0], 1, 0, 1, |_| (vec![], vec![0.0]));
        assert!(matches!(rho_q(&empty, 1), Err(Error::EmptyTarget)));
    }

    #[test]
    fn xi_unit_values() {
        let jet = JetData::from_taylor(vec![0.3], 1, 0, 1, |_| (vec![], vec![3.0]));
        assert_eq!(xi_q(&jet, 1, &[2]).unwrap().value, 6.0);
        assert!(matches!(xi_q(&jet, 1, &[0]), Err(Error::ZeroL)));
        let flat = JetData::from_taylor(vec![0.0], 3, 0, 1, |_| (vec![], vec![0.0]));
        assert_eq!(xi_q(&flat, 3, &[1]).unwrap().value, 0.0);
        let two = JetData::from_taylor(vec![0.0, 0.0], 1, 0, 1, |_| (vec![], vec![1.0]));
        assert!((xi_q(&two, 1, &[1]).unwrap().value - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn second_order_xi_on_circle() {
        // β(μ) = μ1 μ2: second directional derivative 2 u1 u2, max 1 at 45°
        let jet = JetData::from_taylor(vec![0.0, 0.0], 2, 0, 1, |q| {
            (vec![], vec![if q == [1, 1] { 1.0 } else { 0.0 }])
        });
        let b = xi_q(&jet, 2, &[1]).unwrap();
        assert!((b.value - 1.0).abs() < 1e-9, "{b:?}");
        assert!(b.lower <= 1.0 + 1e-12 && b.upper >= 1.0 - 1e-12);
    }

    #[test]
    fn nondegeneracy_cases() {
        let j4 = JetData::from_taylor(vec![0.0], 1, 0, 0, |_| (vec![], vec![]));
        let r = nondegeneracy_check(&j4, 1, 2).unwrap();
        assert!(r.pass && r.case == 4);
        let r = nondegeneracy_check(&poly_jet(&[(1, 1.0)], 1), 1, 2).unwrap();
        assert!(r.pass && r.case == 2);
        let flat = JetData::from_taylor(vec![0.0], 3, 0, 1, |_| (vec![], vec![0.0]));
        let r = nondegeneracy_check(&flat, 3, 2).unwrap();
        assert!(!r.pass && r.case == 3);
    }

    #[test]
    fn case_one_detects_cancellation() {
        // F(μ) = μ, β(μ) = μ/2: k = 1, l = -2 kills every derivative
        let jet = JetData::from_taylor(vec![0.0], 1, 1, 1, |_| (vec![1.0], vec![0.5]));
        let r = nondegeneracy_check(&jet, 1, 2).unwrap();
        assert!(!r.pass && r.case == 1);
        assert_eq!(r.witness, Some((vec![1], vec![-2])));
        // β(μ) = μ/3 cannot be cancelled with |l| <= 2
        let jet = JetData::from_taylor(vec![0.0], 1, 1, 1, |_| (vec![1.0], vec![1.0 / 3.0]));
        assert!(nondegeneracy_check(&jet, 1, 2).unwrap().pass);
    }

    #[test]
    fn jet_from_fn_is_exact_for_polynomials() {
        let jet = JetData::from_fn(
            &[0.5, -0.2],
            2,
            0.1,
            |m| vec![m[0] * m[0] + 3.0 * m[0] * m[1]],
            |m| vec![m[1]],
        );
        let (d, b) = jet.derivative(&[1, 1]);
        assert!((d[0] - 3.0).abs() < 1e-9);
        assert!(b[0].abs() < 1e-9);
        let (d, _) = jet.derivative(&[1, 0]);
        assert!((d[0] - (2.0 * 0.5 + 3.0 * -0.2)).abs() < 1e-9);
    }

    #[test]
    fn measure_interval_of_frequencies() {
        let ball = Ball { center: vec![1.5], radius: 0.5 };
        let om = DiophParams::new(1.0, 0.3, 1).unwrap();
        let sampler = Sampler::Grid { points_per_axis: 10_000 };
        let small = DiophParams::new(2.5, 1e-4, 2).unwrap();
        let rep = measure_estimate(&ball, |m| vec![m[0]], |_| vec![], &[phi()], &om, &small, &sampler, 100)
            .unwrap();
        assert!(rep.fraction >= 0.99, "{rep:?}");
        let big = DiophParams::new(2.5, 1.0, 2).unwrap();
        let rep2 = measure_estimate(&ball, |m| vec![m[0]], |_| vec![], &[phi()], &om, &big, &sampler, 100)
            .unwrap();
        assert!(rep2.fraction < rep.fraction && rep2.fraction < 0.9, "{rep2:?}");
    }

    #[test]
    fn measure_is_vacuous_without_frequencies() {
        let ball = Ball { center: vec![0.0], radius: 1.0 };
        let p = DiophParams::new(1.0, 1.0, 2).unwrap();
        let rep = measure_estimate(&ball, |_| vec![], |_| vec![], &[], &p, &p, &Sampler::Grid { points_per_axis: 11 }, 10)
            .unwrap();
        assert_eq!(rep.fraction, 1.0);
    }

    #[test]
    fn rational_forcing_is_rejected() {
        let ball = Ball { center: vec![0.0], radius: 1.0 };
        let p = DiophParams::new(1.0, 0.1, 2).unwrap();
        let r = measure_estimate(&ball, |m| vec![m[0]], |_| vec![], &[1.0, 2.0], &p, &p, &Sampler::Grid { points_per_axis: 3 }, 10);
        assert!(matches!(r, Err(Error::OmegaNotDiophantine { .. })));
    }
}
