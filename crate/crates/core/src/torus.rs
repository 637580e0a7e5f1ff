//! Reducible invariant tori by a spectral Newton method.
//!
//! For a target `(ω₀, μ₀, χ₀)` the solver looks for counterterms
//! `(u, v, w, W)` and a change of variables
//!
//! ```text
//! x = x̄ + a(x̄, X)
//! (y, z) = P₀(x̄, X) + (I + B(x̄, X))·(ȳ, z̄)
//! ```
//!
//! turning the parameter-extended system at `ω = ω₀ + u`, `σ = v`,
//! `(μ, χ) = (μ₀, χ₀) + (w, W)` into the Floquet form
//! `x̄' = ω₀ + O(ȳ, z̄)`, `(ȳ, z̄)' = (0 ⊕ M')(ȳ, z̄) + O₂` with
//! `M' = M_new(μ₀, χ₀)`. All unknowns are truncated real Fourier series on
//! `T^{n+N}` parameterized inside their reversibility symmetry classes, so
//! every Newton iterate is exactly symmetric. The Jacobian is assembled
//! column by column with dual numbers.

use faer::linalg::solvers::Solve;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dioph::{self, DiophParams};
use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::revlin::{ReversibleSpectrum, Unfolding, CLASSIFY_TOL};
use crate::scalar::{Dual, Scalar};
use crate::series::{Basis, FourierTaylorField};
use crate::systems::SystemSpec;

type Field = FourierTaylorField<f64>;

const BASIS_TOL: f64 = 1e-10;

// ------------------------------------------------------------ Fourier series

/// Real truncated Fourier series `Σ_k C_k cos⟨k,θ⟩ + S_k sin⟨k,θ⟩` with
/// vector coefficients. `modes` are canonical (first non-zero entry
/// positive); the zero mode, if present, carries the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierSeries {
    pub dim: usize,
    pub n_angles: usize,
    pub modes: Vec<Vec<i64>>,
    pub cos: Vec<Vec<f64>>,
    pub sin: Vec<Vec<f64>>,
}

impl FourierSeries {
    pub fn zero(dim: usize, n_angles: usize) -> Self {
        Self { dim, n_angles, modes: Vec::new(), cos: Vec::new(), sin: Vec::new() }
    }

    /// Adds `c·cos⟨k,θ⟩` or `c·sin⟨k,θ⟩`, canonicalizing the mode.
    pub fn push(&mut self, k: Vec<i64>, basis: Basis, c: Vec<f64>) {
        assert_eq!(k.len(), self.n_angles);
        assert_eq!(c.len(), self.dim);
        let sign = match k.iter().find(|v| **v != 0) {
            Some(v) if *v < 0 => -1.0,
            _ => 1.0,
        };
        let k: Vec<i64> = k.iter().map(|v| (sign as i64) * v).collect();
        let idx = match self.modes.iter().position(|m| *m == k) {
            Some(i) => i,
            None => {
                self.modes.push(k);
                self.cos.push(vec![0.0; self.dim]);
                self.sin.push(vec![0.0; self.dim]);
                self.modes.len() - 1
            }
        };
        match basis {
            Basis::Cos => self.cos[idx].iter_mut().zip(&c).for_each(|(a, b)| *a += b),
            Basis::Sin => self.sin[idx].iter_mut().zip(&c).for_each(|(a, b)| *a += sign * b),
        }
    }

    /// Value and gradient (`n_angles × dim`, row per angle) at `θ`.
    pub fn eval_grad(&self, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut val = vec![0.0; self.dim];
        let mut grad = vec![vec![0.0; self.dim]; self.n_angles];
        for (h, k) in self.modes.iter().enumerate() {
            let ph: f64 = k.iter().zip(theta).map(|(a, b)| *a as f64 * b).sum();
            let (s, c) = ph.sin_cos();
            for i in 0..self.dim {
                let (cc, ss) = (self.cos[h][i], self.sin[h][i]);
                val[i] += cc * c + ss * s;
                let dv = -cc * s + ss * c;
                for (j, kj) in k.iter().enumerate() {
                    if *kj != 0 {
                        grad[j][i] += *kj as f64 * dv;
                    }
                }
            }
        }
        (val, grad)
    }

    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        self.eval_grad(theta).0
    }

    pub fn mean(&self) -> Vec<f64> {
        self.modes
            .iter()
            .position(|k| k.iter().all(|v| *v == 0))
            .map(|h| self.cos[h].clone())
            .unwrap_or_else(|| vec![0.0; self.dim])
    }

    pub fn max_abs(&self) -> f64 {
        self.cos.iter().chain(&self.sin).flatten().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Coefficient of `cos⟨k,θ⟩` / `sin⟨k,θ⟩` for a canonical mode.
    pub fn coeff(&self, k: &[i64], basis: Basis) -> Vec<f64> {
        match self.modes.iter().position(|m| m.as_slice() == k) {
            Some(h) => match basis {
                Basis::Cos => self.cos[h].clone(),
                Basis::Sin => self.sin[h].clone(),
            },
            None => vec![0.0; self.dim],
        }
    }

    /// Components `rows × cols` of a row-major matrix-valued series.
    pub fn block(&self, ncols_full: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let pick = |v: &Vec<f64>| -> Vec<f64> {
            rows.clone().flat_map(|i| cols.clone().map(move |j| v[i * ncols_full + j])).collect()
        };
        Self {
            dim: rows.len() * cols.len(),
            n_angles: self.n_angles,
            modes: self.modes.clone(),
            cos: self.cos.iter().map(pick).collect(),
            sin: self.sin.iter().map(pick).collect(),
        }
    }

    /// Sub-vector of components.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            dim: range.len(),
            n_angles: self.n_angles,
            modes: self.modes.clone(),
            cos: self.cos.iter().map(|v| v[range.clone()].to_vec()).collect(),
            sin: self.sin.iter().map(|v| v[range.clone()].to_vec()).collect(),
        }
    }

    fn entries(&self) -> Vec<SeriesEntry> {
        let mut out = Vec::new();
        for (h, k) in self.modes.iter().enumerate() {
            if self.cos[h].iter().any(|v| *v != 0.0) {
                out.push(SeriesEntry { k: k.clone(), basis: Basis::Cos, c: self.cos[h].clone() });
            }
            if self.sin[h].iter().any(|v| *v != 0.0) {
                out.push(SeriesEntry { k: k.clone(), basis: Basis::Sin, c: self.sin[h].clone() });
            }
        }
        out
    }

    fn from_entries(dim: usize, n_angles: usize, entries: &[SeriesEntry]) -> Result<Self> {
        let mut s = Self::zero(dim, n_angles);
        for e in entries {
            if e.k.len() != n_angles || e.c.len() != dim {
                return Err(Error::Schema(format!("series entry {:?} has wrong shape", e.k)));
            }
            s.push(e.k.clone(), e.basis, e.c.clone());
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SeriesEntry {
    k: Vec<i64>,
    basis: Basis,
    c: Vec<f64>,
}

/// `k·ν` for an integer mode.
fn kdot(k: &[i64], nu: &[f64]) -> f64 {
    k.iter().zip(nu).map(|(a, b)| *a as f64 * b).sum()
}

/// Solves `∂_ν φ = rhs` for zero-mean `φ`, mode by mode.
pub fn cohomological_solve(rhs: &FourierSeries, freq: &[f64], guard: &DiophParams) -> Result<FourierSeries> {
    let mut out = FourierSeries::zero(rhs.dim, rhs.n_angles);
    for (h, k) in rhs.modes.iter().enumerate() {
        let (c, s) = (&rhs.cos[h], &rhs.sin[h]);
        if k.iter().all(|v| *v == 0) {
            let m = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m > 0.0 {
                return Err(Error::NonzeroMean(m));
            }
            continue;
        }
        if c.iter().chain(s).all(|v| *v == 0.0) {
            continue;
        }
        let div = kdot(k, freq);
        let k1: i64 = k.iter().map(|v| v.abs()).sum();
        let g = guard.bound(k1 as f64);
        if div.abs() < g {
            return Err(Error::SmallDivisorBreach { mode: k.clone(), divisor: div.abs(), guard: g });
        }
        // ∂_ν (A cos + B sin) = (k·ν)(B cos - A sin)
        out.push(k.clone(), Basis::Sin, c.iter().map(|v| v / div).collect());
        out.push(k.clone(), Basis::Cos, s.iter().map(|v| -v / div).collect());
    }
    Ok(out)
}

// ------------------------------------------------------------ configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Fourier cutoff per angle (`|k|∞ ≤ k_max`)
    pub k_max: usize,
    /// collocation points per angle; default `2·k_max + 2`
    pub grid: Option<usize>,
    pub newton_tol: f64,
    pub max_iters: usize,
    /// small-divisor guard `γ|k|^{-τ}`; defaults to the run's parameters
    pub guard: Option<DiophParams>,
    /// largest accepted coefficient of `f`, `g`, `h`
    pub perturbation_gate: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { k_max: 8, grid: None, newton_tol: 1e-11, max_iters: 30, guard: None, perturbation_gate: 0.1 }
    }
}

impl SolverConfig {
    pub fn grid_points(&self) -> usize {
        self.grid.unwrap_or(2 * self.k_max + 2)
    }

    fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0) || !(self.perturbation_gate > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidConfig("solver tolerances must be positive".into()));
        }
        if self.grid_points() < 2 * self.k_max + 1 {
            return Err(Error::InvalidConfig(format!(
                "grid of {} points cannot resolve k_max = {}",
                self.grid_points(),
                self.k_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub omega0: Vec<f64>,
    pub mu0: Vec<f64>,
    pub chi0: Vec<f64>,
}

// ------------------------------------------------------------ extended field

/// The parameter-extended vector field: `ω` replaces `F(μ) + Δ(σ, μ)` and
/// `M_new(μ, χ)` replaces `M(μ)`.
#[derive(Clone, Debug)]
pub struct ExtendedField {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub omega: Vec<f64>,
    fx: Field,
    fy: Field,
    fz: Field,
    unf: Unfolding,
}

/// Parameter values of the extended system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedParams {
    pub omega: Vec<f64>,
    pub sigma: Vec<f64>,
    pub mu: Vec<f64>,
    pub chi: Vec<f64>,
}

impl ExtendedField {
    pub fn new(spec: &SystemSpec, unf: &Unfolding) -> Result<Self> {
        if spec.z_coupling.as_ref().is_some_and(|z| z.terms.iter().any(|(_, c)| c.iter().any(|v| *v != 0.0))) {
            return Err(Error::Precondition("the Z·z term must be eliminated before solving".into()));
        }
        let d = spec.dims;
        Ok(Self {
            n: d.n,
            m: d.m,
            p: d.p,
            omega: spec.omega.clone(),
            fx: spec.xi.add(&spec.f),
            fy: spec.eta.add(&spec.g),
            fz: spec.zeta.add(&spec.h),
            unf: unf.clone(),
        })
    }

    pub fn unfolding(&self) -> &Unfolding {
        &self.unf
    }

    /// `(ẋ, (ẏ, ż))` at angles `(x, X)` and normal variables `P = (y, z)`.
    pub fn eval<U: Scalar>(&self, angles: &[U], pnorm: &[U], par: &ParamsU<U>) -> (Vec<U>, Vec<U>) {
        let vars: Vec<U> = pnorm.iter().chain(&par.sigma).chain(&par.mu).copied().collect();
        let mut vx = self.fx.eval(angles, &vars);
        for (o, w) in vx.iter_mut().zip(&par.omega) {
            *o = *o + *w;
        }
        let mut vp = self.fy.eval(angles, &vars);
        for (o, s) in vp.iter_mut().zip(&par.sigma) {
            *o = *o + *s;
        }
        let mut vz = self.fz.eval(angles, &vars);
        let dz = 2 * self.p;
        if self.p > 0 {
            let mn = self.unf.eval_generic(&par.mu, &par.chi);
            let z = &pnorm[self.m..];
            for i in 0..dz {
                let mut acc = vz[i];
                for j in 0..dz {
                    acc = acc + mn[i * dz + j] * z[j];
                }
                vz[i] = acc;
            }
        }
        vp.extend(vz);
        (vx, vp)
    }
}

/// Extended-system parameters over a generic scalar.
#[derive(Clone, Debug)]
pub struct ParamsU<U> {
    pub omega: Vec<U>,
    pub sigma: Vec<U>,
    pub mu: Vec<U>,
    pub chi: Vec<U>,
}

impl ParamsU<f64> {
    pub fn from(p: &ExtendedParams) -> Self {
        Self { omega: p.omega.clone(), sigma: p.sigma.clone(), mu: p.mu.clone(), chi: p.chi.clone() }
    }

    fn lift<U: Scalar>(&self) -> ParamsU<U> {
        let l = |v: &Vec<f64>| v.iter().map(|x| U::cst(*x)).collect();
        ParamsU { omega: l(&self.omega), sigma: l(&self.sigma), mu: l(&self.mu), chi: l(&self.chi) }
    }
}

// ------------------------------------------------------------ symmetry classes

/// Orthonormal bases of the symmetric coefficient spaces of one unknown (or
/// one residual): the mean, cosine and sine parts.
#[derive(Clone, Debug)]
struct ClassBasis {
    mean: DMatrix<f64>,
    cos: DMatrix<f64>,
    sin: DMatrix<f64>,
}

impl ClassBasis {
    fn dim(&self) -> usize {
        self.cos.nrows()
    }

    fn count(&self, n_modes: usize) -> usize {
        self.mean.ncols() + (n_modes - 1) * (self.cos.ncols() + self.sin.ncols())
    }

    /// Class `f(-θ) = S f(θ)`: cosines in the `+1` eigenspace of `S`,
    /// sines in the `-1` eigenspace.
    fn from_map(s: &DMatrix<f64>) -> Self {
        let d = s.nrows();
        let id = DMatrix::<f64>::identity(d, d);
        let cos = linalg::range_basis(&((&id + s) * 0.5), BASIS_TOL);
        let sin = linalg::range_basis(&((&id - s) * 0.5), BASIS_TOL);
        Self { mean: cos.clone(), cos, sin }
    }
}

/// Matrix of the linear map `vec(B) ↦ vec(L(B))` on row-major `d × d` matrices.
fn matrix_map(d: usize, l: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            let mut e = DMatrix::zeros(d, d);
            e[(i, j)] = 1.0;
            let img = l(&e);
            for a in 0..d {
                for b in 0..d {
                    out[(a * d + b, i * d + j)] = img[(a, b)];
                }
            }
        }
    }
    out
}

// ------------------------------------------------------------ solver kernel

/// Canonical modes with `|k|∞ ≤ kmax`, zero mode first.
pub fn box_modes(d: usize, kmax: usize) -> Vec<Vec<i64>> {
    let side = 2 * kmax + 1;
    let mut out = vec![vec![0; d]];
    for lin in 0..side.pow(d as u32) {
        let mut rem = lin;
        let k: Vec<i64> = (0..d)
            .map(|_| {
                let v = (rem % side) as i64 - kmax as i64;
                rem /= side;
                v
            })
            .rev()
            .collect();
        if matches!(k.iter().find(|v| **v != 0), Some(v) if *v > 0) {
            out.push(k);
        }
    }
    out[1..].sort();
    out
}

/// Offsets of the pointwise state `(a, ∂_ν a, ∂_x̄ a, P₀, ∂_ν P₀, ∂_x̄ P₀, B, ∂_ν B)`.
struct Layout {
    a: usize,
    a_nu: usize,
    a_dx: usize,
    p0: usize,
    p0_nu: usize,
    p0_dx: usize,
    b: usize,
    b_nu: usize,
    len: usize,
}

impl Layout {
    fn new(n: usize, dd: usize) -> Self {
        let a = 0;
        let a_nu = a + n;
        let a_dx = a_nu + n;
        let p0 = a_dx + n * n;
        let p0_nu = p0 + dd;
        let p0_dx = p0_nu + dd;
        let b = p0_dx + dd * n;
        let b_nu = b + dd * dd;
        Self { a, a_nu, a_dx, p0, p0_nu, p0_dx, b, b_nu, len: b_nu + dd * dd }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Block {
    A,
    P0,
    B,
}

struct UnknownCol {
    block: Block,
    mode: usize,
    sin: bool,
    /// index into [`Kernel::basis_vectors`]
    vec_id: usize,
}

struct Kernel {
    layout: Layout,
    per_axis: usize,
    /// basis vectors of the unknown classes (mean, cosine, sine; per block)
    basis_vectors: Vec<(Block, Vec<f64>)>,
    n: usize,
    m: usize,
    p: usize,
    dd: usize,
    n_modes: usize,
    modes: Vec<Vec<i64>>,
    /// k·ν per mode
    knu: Vec<f64>,
    /// grid points (x̄, X)
    grid: Vec<Vec<f64>>,
    ctab: Vec<f64>,
    stab: Vec<f64>,
    ext: ExtendedField,
    dfx: Vec<Field>,
    dfy: Vec<Field>,
    dfz: Vec<Field>,
    omega0: Vec<f64>,
    mu0: Vec<f64>,
    chi0: Vec<f64>,
    m_prime: DMatrix<f64>,
    /// `(s + S) × p` directions of `(w, W)`
    vp: DMatrix<f64>,
    cls_a: ClassBasis,
    cls_p0: ClassBasis,
    cls_b: ClassBasis,
    eq_x: ClassBasis,
    eq_0: ClassBasis,
    eq_1: ClassBasis,
}

struct Decoded<U> {
    a_sin: Vec<U>,
    p0_cos: Vec<U>,
    p0_sin: Vec<U>,
    b_cos: Vec<U>,
    b_sin: Vec<U>,
    u: Vec<U>,
    v: Vec<U>,
    kappa: Vec<U>,
}

fn decode_class<U: Scalar>(cb: &ClassBasis, n_modes: usize, q: &[U], off: &mut usize) -> (Vec<U>, Vec<U>) {
    let d = cb.dim();
    let mut cos = vec![U::zero(); n_modes * d];
    let mut sin = vec![U::zero(); n_modes * d];
    let apply = |basis: &DMatrix<f64>, out: &mut [U], off: &mut usize| {
        for j in 0..basis.ncols() {
            let c = q[*off + j];
            for i in 0..d {
                let b = basis[(i, j)];
                if b != 0.0 {
                    out[i] = out[i] + U::cst(b) * c;
                }
            }
        }
        *off += basis.ncols();
    };
    apply(&cb.mean, &mut cos[0..d], off);
    for h in 1..n_modes {
        apply(&cb.cos, &mut cos[h * d..(h + 1) * d], off);
        apply(&cb.sin, &mut sin[h * d..(h + 1) * d], off);
    }
    (cos, sin)
}

fn project_class<U: Scalar>(cb: &ClassBasis, n_modes: usize, cos: &[U], sin: &[U], out: &mut Vec<U>) {
    let d = cb.dim();
    let mut apply = |basis: &DMatrix<f64>, v: &[U]| {
        for j in 0..basis.ncols() {
            let mut acc = U::zero();
            for i in 0..d {
                let b = basis[(i, j)];
                if b != 0.0 {
                    acc = acc + U::cst(b) * v[i];
                }
            }
            out.push(acc);
        }
    };
    apply(&cb.mean, &cos[0..d]);
    for h in 1..n_modes {
        apply(&cb.cos, &cos[h * d..(h + 1) * d]);
        apply(&cb.sin, &sin[h * d..(h + 1) * d]);
    }
}

impl Kernel {
    fn n_unknowns(&self) -> usize {
        self.cls_a.count(self.n_modes)
            + self.cls_p0.count(self.n_modes)
            + self.cls_b.count(self.n_modes)
            + self.n
            + self.m
            + self.vp.ncols()
    }

    fn decode<U: Scalar>(&self, q: &[U]) -> Decoded<U> {
        let mut off = 0;
        let (_, a_sin) = decode_class(&self.cls_a, self.n_modes, q, &mut off);
        let (p0_cos, p0_sin) = decode_class(&self.cls_p0, self.n_modes, q, &mut off);
        let (b_cos, b_sin) = decode_class(&self.cls_b, self.n_modes, q, &mut off);
        let u = q[off..off + self.n].to_vec();
        off += self.n;
        let v = q[off..off + self.m].to_vec();
        off += self.m;
        let kappa = q[off..off + self.vp.ncols()].to_vec();
        Decoded { a_sin, p0_cos, p0_sin, b_cos, b_sin, u, v, kappa }
    }

    /// `(w, W)` from the reduced parameter `κ`.
    fn shifts<U: Scalar>(&self, kappa: &[U]) -> Vec<U> {
        (0..self.vp.nrows())
            .map(|i| {
                kappa
                    .iter()
                    .enumerate()
                    .fold(U::zero(), |acc, (j, k)| acc + U::cst(self.vp[(i, j)]) * *k)
            })
            .collect()
    }

    fn params<U: Scalar>(&self, u: &[U], v: &[U], kappa: &[U]) -> ParamsU<U> {
        let sh = self.shifts(kappa);
        let s = self.mu0.len();
        ParamsU {
            omega: self.omega0.iter().zip(u).map(|(a, b)| U::cst(*a) + *b).collect(),
            sigma: v.to_vec(),
            mu: self.mu0.iter().zip(&sh[..s]).map(|(a, b)| U::cst(*a) + *b).collect(),
            chi: self.chi0.iter().zip(&sh[s..]).map(|(a, b)| U::cst(*a) + *b).collect(),
        }
    }

    /// Galerkin residual in the symmetric equation coordinates.
    fn residual<U: Scalar>(&self, q: &[U]) -> Vec<U> {
        let (n, dd, nm) = (self.n, self.dd, self.n_modes);
        let dec = self.decode(q);
        let par = self.params(&dec.u, &dec.v, &dec.kappa);
        let ng = self.grid.len();
        let mut ex_c = vec![U::zero(); nm * n];
        let mut e0_c = vec![U::zero(); nm * dd];
        let mut e0_s = vec![U::zero(); nm * dd];
        let mut e1_c = vec![U::zero(); nm * dd * dd];
        let mut e1_s = vec![U::zero(); nm * dd * dd];
        for g in 0..ng {
            let loc = self.local(&dec, g);
            let comps = self.pointwise(g, &loc, &par);
            let (ex, rest) = comps.split_at(n);
            let (e0, e1) = rest.split_at(dd);
            let crow = &self.ctab[g * nm..(g + 1) * nm];
            let srow = &self.stab[g * nm..(g + 1) * nm];
            for h in 0..nm {
                let wgt = if h == 0 { 1.0 } else { 2.0 } / ng as f64;
                let (c, s) = (U::cst(crow[h] * wgt), U::cst(srow[h] * wgt));
                for i in 0..n {
                    ex_c[h * n + i] = ex_c[h * n + i] + ex[i] * c;
                }
                for i in 0..dd {
                    e0_c[h * dd + i] = e0_c[h * dd + i] + e0[i] * c;
                    e0_s[h * dd + i] = e0_s[h * dd + i] + e0[i] * s;
                }
                for i in 0..dd * dd {
                    e1_c[h * dd * dd + i] = e1_c[h * dd * dd + i] + e1[i] * c;
                    e1_s[h * dd * dd + i] = e1_s[h * dd * dd + i] + e1[i] * s;
                }
            }
        }
        self.equations(&ex_c, &e0_c, &e0_s, &e1_c, &e1_s)
    }

    fn equations<U: Scalar>(&self, ex_c: &[U], e0_c: &[U], e0_s: &[U], e1_c: &[U], e1_s: &[U]) -> Vec<U> {
        let nm = self.n_modes;
        let mut out = Vec::with_capacity(self.n_unknowns());
        let zeros = vec![U::zero(); nm * self.n];
        project_class(&self.eq_x, nm, ex_c, &zeros, &mut out);
        project_class(&self.eq_0, nm, e0_c, e0_s, &mut out);
        project_class(&self.eq_1, nm, e1_c, e1_s, &mut out);
        out
    }

    /// Values and derivatives of `a`, `P₀`, `B` at grid point `g`.
    fn local<U: Scalar>(&self, dec: &Decoded<U>, g: usize) -> Vec<U> {
        let (n, dd, nm) = (self.n, self.dd, self.n_modes);
        let ly = &self.layout;
        let mut loc = vec![U::zero(); ly.len];
        let crow = &self.ctab[g * nm..(g + 1) * nm];
        let srow = &self.stab[g * nm..(g + 1) * nm];
        for h in 0..nm {
            let (c, s) = (U::cst(crow[h]), U::cst(srow[h]));
            let kn = U::cst(self.knu[h]);
            let k = &self.modes[h];
            for i in 0..n {
                let sc = dec.a_sin[h * n + i];
                loc[ly.a + i] = loc[ly.a + i] + sc * s;
                loc[ly.a_nu + i] = loc[ly.a_nu + i] + sc * kn * c;
                for j in 0..n {
                    if k[j] != 0 {
                        let idx = ly.a_dx + i * n + j;
                        loc[idx] = loc[idx] + sc * U::cst(k[j] as f64) * c;
                    }
                }
            }
            for i in 0..dd {
                let (cc, ss) = (dec.p0_cos[h * dd + i], dec.p0_sin[h * dd + i]);
                loc[ly.p0 + i] = loc[ly.p0 + i] + cc * c + ss * s;
                let dv = ss * c - cc * s;
                loc[ly.p0_nu + i] = loc[ly.p0_nu + i] + kn * dv;
                for j in 0..n {
                    if k[j] != 0 {
                        let idx = ly.p0_dx + i * n + j;
                        loc[idx] = loc[idx] + U::cst(k[j] as f64) * dv;
                    }
                }
            }
            for i in 0..dd * dd {
                let (cc, ss) = (dec.b_cos[h * dd * dd + i], dec.b_sin[h * dd * dd + i]);
                loc[ly.b + i] = loc[ly.b + i] + cc * c + ss * s;
                loc[ly.b_nu + i] = loc[ly.b_nu + i] + kn * (ss * c - cc * s);
            }
        }
        loc
    }

    /// Pointwise residual components `(E_x, E_0, E_1)` at grid point `g`.
    fn pointwise<U: Scalar>(&self, g: usize, loc: &[U], par: &ParamsU<U>) -> Vec<U> {
        let (n, dd, m) = (self.n, self.dd, self.m);
        let ly = &self.layout;
        let a = &loc[ly.a..ly.a + n];
        let a_nu = &loc[ly.a_nu..ly.a_nu + n];
        let a_dx = &loc[ly.a_dx..ly.a_dx + n * n];
        let p0 = &loc[ly.p0..ly.p0 + dd];
        let p0_nu = &loc[ly.p0_nu..ly.p0_nu + dd];
        let p0_dx = &loc[ly.p0_dx..ly.p0_dx + dd * n];
        let b = &loc[ly.b..ly.b + dd * dd];
        let b_nu = &loc[ly.b_nu..ly.b_nu + dd * dd];
        let mz = 2 * self.p;
        // field and its normal derivative at (x̄ + a, P0, X)
        let mut angles: Vec<U> = self.grid[g].iter().map(|t| U::cst(*t)).collect();
        for i in 0..n {
            angles[i] = angles[i] + a[i];
        }
        let (fx, fp) = self.ext.eval(&angles, p0, par);
        let vars: Vec<U> = p0.iter().chain(&par.sigma).chain(&par.mu).copied().collect();
        let mut dfx = vec![U::zero(); n * dd];
        let mut dg = vec![U::zero(); dd * dd];
        for j in 0..dd {
            let col_x = self.dfx[j].eval(&angles, &vars);
            for i in 0..n {
                dfx[i * dd + j] = col_x[i];
            }
            let col_y = self.dfy[j].eval(&angles, &vars);
            for i in 0..m {
                dg[i * dd + j] = col_y[i];
            }
            let col_z = self.dfz[j].eval(&angles, &vars);
            for i in 0..mz {
                dg[(m + i) * dd + j] = col_z[i];
            }
        }
        if self.p > 0 {
            let mn = self.ext.unf.eval_generic(&par.mu, &par.chi);
            for i in 0..mz {
                for j in 0..mz {
                    let idx = (m + i) * dd + m + j;
                    dg[idx] = dg[idx] + mn[i * mz + j];
                }
            }
        }
        let mut out = Vec::with_capacity(self.n_comps());
        // E_x = ω₀ + u + ξ + f - ω₀ - ∂_ν a
        out.extend((0..n).map(|i| fx[i] - U::cst(self.omega0[i]) - a_nu[i]));
        out.extend((0..dd).map(|i| fp[i] - p0_nu[i]));
        // A_eff = DG - ∂_x̄P₀ (I + ∂_x̄a)⁻¹ D_P F_x
        let mut aeff = dg;
        if n > 0 {
            let mut lhs = a_dx.to_vec();
            for i in 0..n {
                lhs[i * n + i] = lhs[i * n + i] + U::one();
            }
            let mut rhs = dfx;
            linalg::solve_small(&mut lhs, &mut rhs, n, dd);
            for i in 0..dd {
                for j in 0..dd {
                    let mut acc = U::zero();
                    for l in 0..n {
                        acc = acc + p0_dx[i * n + l] * rhs[l * dd + j];
                    }
                    aeff[i * dd + j] = aeff[i * dd + j] - acc;
                }
            }
        }
        // E_1 = A_eff (I + B) - ∂_ν B - (I + B) Λ
        let lam = &self.m_prime;
        for i in 0..dd {
            for j in 0..dd {
                let mut acc = aeff[i * dd + j];
                for l in 0..dd {
                    acc = acc + aeff[i * dd + l] * b[l * dd + j];
                }
                acc = acc - b_nu[i * dd + j];
                if j >= m {
                    for l in m..dd {
                        let lv = lam[(l - m, j - m)];
                        if lv != 0.0 {
                            let ib = if i == l { U::one() + b[i * dd + l] } else { b[i * dd + l] };
                            acc = acc - ib * U::cst(lv);
                        }
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    fn n_comps(&self) -> usize {
        self.n + self.dd + self.dd * self.dd
    }

    /// Exact Jacobian of [`Kernel::residual`]. The pointwise linearization
    /// `L(θ)` of the residual is computed with dual numbers on the grid and
    /// transformed once; every Galerkin entry is then a combination of the
    /// discrete coefficients `L̂(k' ± k)`.
    fn jacobian(&self, q: &[f64]) -> faer::Mat<f64> {
        let (n, dd, nm) = (self.n, self.dd, self.n_modes);
        let ng = self.grid.len();
        let ly = &self.layout;
        let nc = self.n_comps();
        let npar = n + self.m + self.vp.ncols();
        let width = ly.len + npar;
        let wlen = nc * width;
        let dec = self.decode(q);
        let lift = |v: &[f64]| -> Vec<Dual<f64>> { v.iter().map(|x| Dual::constant(*x)).collect() };
        let lin: Vec<Vec<f64>> = (0..ng)
            .into_par_iter()
            .map(|g| {
                let loc = self.local(&dec, g);
                let mut out = vec![0.0; wlen];
                let base_par = self.params(&lift(&dec.u), &lift(&dec.v), &lift(&dec.kappa));
                let mut locd = lift(&loc);
                for j in 0..ly.len {
                    locd[j].eps = 1.0;
                    let r = self.pointwise(g, &locd, &base_par);
                    locd[j].eps = 0.0;
                    for (i, v) in r.iter().enumerate() {
                        out[i * width + j] = v.eps;
                    }
                }
                let mut pv = lift(&dec.u);
                pv.extend(lift(&dec.v));
                pv.extend(lift(&dec.kappa));
                for j in 0..npar {
                    pv[j].eps = 1.0;
                    let par = self.params(&pv[..n], &pv[n..n + self.m], &pv[n + self.m..]);
                    pv[j].eps = 0.0;
                    let r = self.pointwise(g, &locd, &par);
                    for (i, v) in r.iter().enumerate() {
                        out[i * width + ly.len + j] = v.eps;
                    }
                }
                out
            })
            .collect();
        let hat = self.grid_dft(&lin, wlen);
        let gp = self.per_axis;
        let d_ang = self.modes[0].len();
        let qidx = |k: &[i64], sign: i64, k2: &[i64]| -> usize {
            let mut idx = 0;
            let mut stride = 1;
            for j in 0..d_ang {
                let v = (k[j] + sign * k2[j]).rem_euclid(gp as i64) as usize;
                idx += v * stride;
                stride *= gp;
            }
            idx
        };
        // L̂ contracted with every basis vector: parts value, ν-derivative, x̄-derivatives
        let cols = self.unknown_columns();
        let nparts = 2 + n;
        let contracted: Vec<Vec<C64>> = self
            .basis_vectors
            .par_iter()
            .map(|(block, e)| {
                let (o_val, o_nu, o_dx) = match block {
                    Block::A => (ly.a, ly.a_nu, Some(ly.a_dx)),
                    Block::P0 => (ly.p0, ly.p0_nu, Some(ly.p0_dx)),
                    Block::B => (ly.b, ly.b_nu, None),
                };
                let mut out = vec![C64::new(0.0, 0.0); ng * nparts * nc];
                for qq in 0..ng {
                    let hq = &hat[qq * wlen..(qq + 1) * wlen];
                    for c in 0..nc {
                        let row = &hq[c * width..(c + 1) * width];
                        let base = (qq * nparts) * nc;
                        let mut val = C64::new(0.0, 0.0);
                        let mut nu = C64::new(0.0, 0.0);
                        for (i, ei) in e.iter().enumerate() {
                            if *ei != 0.0 {
                                val += row[o_val + i] * *ei;
                                nu += row[o_nu + i] * *ei;
                            }
                        }
                        out[base + c] = val;
                        out[base + nc + c] = nu;
                        if let Some(o) = o_dx {
                            for l in 0..n {
                                let mut acc = C64::new(0.0, 0.0);
                                for (i, ei) in e.iter().enumerate() {
                                    if *ei != 0.0 {
                                        acc += row[o + i * n + l] * *ei;
                                    }
                                }
                                out[base + (2 + l) * nc + c] = acc;
                            }
                        }
                    }
                }
                out
            })
            .collect();
        let nunk = q.len();
        let columns: Vec<Vec<f64>> = (0..nunk)
            .into_par_iter()
            .map(|j| {
                let mut cosc = vec![0.0; nm * nc];
                let mut sinc = vec![0.0; nm * nc];
                if j >= cols.len() {
                    let pj = ly.len + j - cols.len();
                    for (h2, kp) in self.modes.iter().enumerate() {
                        let fac = if h2 == 0 { 1.0 } else { 2.0 };
                        let qq = qidx(kp, 0, kp);
                        for c in 0..nc {
                            let z = hat[qq * wlen + c * width + pj];
                            cosc[h2 * nc + c] = fac * z.re;
                            sinc[h2 * nc + c] = -fac * z.im;
                        }
                    }
                } else {
                    let col = &cols[j];
                    let k = &self.modes[col.mode];
                    let kn = self.knu[col.mode];
                    let tab = &contracted[col.vec_id];
                    let a_of = |qq: usize, c: usize| tab[qq * nparts * nc + c];
                    let b_of = |qq: usize, c: usize| {
                        let base = qq * nparts * nc;
                        let mut z = tab[base + nc + c] * kn;
                        if col.block != Block::B {
                            for l in 0..n {
                                if k[l] != 0 {
                                    z += tab[base + (2 + l) * nc + c] * k[l] as f64;
                                }
                            }
                        }
                        z
                    };
                    for (h2, kp) in self.modes.iter().enumerate() {
                        let fac = if h2 == 0 { 1.0 } else { 2.0 };
                        let (qp, qm) = (qidx(kp, 1, k), qidx(kp, -1, k));
                        for c in 0..nc {
                            let (ap, am, bp, bm) = (a_of(qp, c), a_of(qm, c), b_of(qp, c), b_of(qm, c));
                            let cc = |p: C64, m: C64| 0.5 * (p.re + m.re);
                            let cs = |p: C64, m: C64| 0.5 * (m.im - p.im);
                            let sc = |p: C64, m: C64| -0.5 * (p.im + m.im);
                            let ss = |p: C64, m: C64| 0.5 * (m.re - p.re);
                            let (cv, sv) = if col.sin {
                                (cs(ap, am) + cc(bp, bm), ss(ap, am) + sc(bp, bm))
                            } else {
                                (cc(ap, am) - cs(bp, bm), sc(ap, am) - ss(bp, bm))
                            };
                            cosc[h2 * nc + c] = fac * cv;
                            sinc[h2 * nc + c] = fac * sv;
                        }
                    }
                }
                let gather = |tab: &[f64], c0: usize, len: usize| -> Vec<f64> {
                    let mut v = vec![0.0; nm * len];
                    for h in 0..nm {
                        v[h * len..(h + 1) * len].copy_from_slice(&tab[h * nc + c0..h * nc + c0 + len]);
                    }
                    v
                };
                self.equations(
                    &gather(&cosc, 0, n),
                    &gather(&cosc, n, dd),
                    &gather(&sinc, n, dd),
                    &gather(&cosc, n + dd, dd * dd),
                    &gather(&sinc, n + dd, dd * dd),
                )
            })
            .collect();
        faer::Mat::from_fn(nunk, nunk, |i, j| columns[j][i])
    }

    /// `(1/G) Σ_g F(θ_g) e^{-i⟨q, θ_g⟩}` for every `q` on the discrete torus,
    /// one axis at a time.
    fn grid_dft(&self, data: &[Vec<f64>], w: usize) -> Vec<C64> {
        let ng = data.len();
        let gp = self.per_axis;
        let d = self.modes[0].len();
        let mut cur: Vec<C64> = data.iter().flat_map(|v| v.iter().map(|x| C64::new(*x, 0.0))).collect();
        let tw: Vec<C64> = (0..gp)
            .map(|t| C64::from_polar(1.0, -2.0 * std::f64::consts::PI * t as f64 / gp as f64))
            .collect();
        let mut stride = 1;
        for _ in 0..d {
            let mut next = vec![C64::new(0.0, 0.0); cur.len()];
            for lin in 0..ng {
                if (lin / stride) % gp != 0 {
                    continue;
                }
                for qq in 0..gp {
                    let dst = (lin + qq * stride) * w;
                    for i in 0..gp {
                        let t = tw[(qq * i) % gp];
                        let src = (lin + i * stride) * w;
                        for x in 0..w {
                            next[dst + x] += cur[src + x] * t;
                        }
                    }
                }
            }
            cur = next;
            stride *= gp;
        }
        let inv = 1.0 / ng as f64;
        cur.iter_mut().for_each(|z| *z *= inv);
        cur
    }

    /// Coefficient unknowns in decoding order.
    fn unknown_columns(&self) -> Vec<UnknownCol> {
        let mut out = Vec::new();
        let mut id = 0;
        let classes = [(Block::A, &self.cls_a), (Block::P0, &self.cls_p0), (Block::B, &self.cls_b)];
        for (block, cb) in classes {
            let (mean0, cos0, sin0) = (id, id + cb.mean.ncols(), id + cb.mean.ncols() + cb.cos.ncols());
            id = sin0 + cb.sin.ncols();
            for j in 0..cb.mean.ncols() {
                out.push(UnknownCol { block, mode: 0, sin: false, vec_id: mean0 + j });
            }
            for h in 1..self.n_modes {
                for j in 0..cb.cos.ncols() {
                    out.push(UnknownCol { block, mode: h, sin: false, vec_id: cos0 + j });
                }
                for j in 0..cb.sin.ncols() {
                    out.push(UnknownCol { block, mode: h, sin: true, vec_id: sin0 + j });
                }
            }
        }
        out
    }

    fn series(&self, coeff_cos: &[f64], coeff_sin: &[f64], dim: usize) -> FourierSeries {
        let mut s = FourierSeries::zero(dim, self.modes[0].len());
        for (h, k) in self.modes.iter().enumerate() {
            let c = coeff_cos[h * dim..(h + 1) * dim].to_vec();
            let sn = coeff_sin[h * dim..(h + 1) * dim].to_vec();
            if c.iter().chain(&sn).any(|v| *v != 0.0) {
                s.modes.push(k.clone());
                s.cos.push(c);
                s.sin.push(sn);
            }
        }
        s
    }
}

// ------------------------------------------------------------ the transform

#[derive(Clone, Debug, PartialEq)]
pub struct TorusTransform {
    pub target: Target,
    pub a: FourierSeries,
    pub b0: FourierSeries,
    pub b1: FourierSeries,
    pub b2: FourierSeries,
    pub c0: FourierSeries,
    pub c1: FourierSeries,
    pub c2: FourierSeries,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub big_w: Vec<f64>,
    pub omega_prime: Vec<f64>,
    pub m_prime: DMatrix<f64>,
    pub spectrum: Option<ReversibleSpectrum>,
    /// max-norm of the Galerkin residual per Newton iterate
    pub history: Vec<f64>,
    pub k_max: usize,
    pub grid: usize,
}

/// Symmetry-class residuals of the seven transform coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryResiduals {
    pub a: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SymmetryResiduals {
    pub fn max(&self) -> f64 {
        [self.a, self.b0, self.b1, self.b2, self.c0, self.c1, self.c2].into_iter().fold(0.0, f64::max)
    }
}

impl TorusTransform {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.dim, self.b0.dim, self.c0.dim / 2)
    }

    /// `P₀(θ)` and its gradient.
    pub fn p0_grad(&self, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (mut v, mut g) = self.b0.eval_grad(theta);
        let (vc, gc) = self.c0.eval_grad(theta);
        v.extend(vc);
        for (a, b) in g.iter_mut().zip(gc) {
            a.extend(b);
        }
        (v, g)
    }

    /// `B(θ)` (row-major) and its gradient.
    pub fn b_grad(&self, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (_, m, p) = self.dims();
        let dd = m + 2 * p;
        let blocks = [(&self.b1, 0, 0, m, m), (&self.b2, 0, m, m, 2 * p), (&self.c1, m, 0, 2 * p, m), (&self.c2, m, m, 2 * p, 2 * p)];
        let mut val = vec![0.0; dd * dd];
        let mut grad = vec![vec![0.0; dd * dd]; theta.len()];
        for (s, r0, c0, nr, nc) in blocks {
            if nr * nc == 0 {
                continue;
            }
            let (v, g) = s.eval_grad(theta);
            for i in 0..nr {
                for j in 0..nc {
                    val[(r0 + i) * dd + c0 + j] = v[i * nc + j];
                    for (gg, gs) in grad.iter_mut().zip(&g) {
                        gg[(r0 + i) * dd + c0 + j] = gs[i * nc + j];
                    }
                }
            }
        }
        (val, grad)
    }

    /// All Fourier coefficients and counterterms in a fixed order, so that
    /// transforms computed with the same cutoff can be compared entrywise.
    pub fn coefficient_vector(&self) -> Vec<f64> {
        let modes = box_modes(self.a.n_angles, self.k_max);
        let mut out = Vec::new();
        for s in [&self.a, &self.b0, &self.b1, &self.b2, &self.c0, &self.c1, &self.c2] {
            for k in &modes {
                out.extend(s.coeff(k, Basis::Cos));
                out.extend(s.coeff(k, Basis::Sin));
            }
        }
        for v in [&self.u, &self.v, &self.w, &self.big_w] {
            out.extend(v.iter().copied());
        }
        out
    }

    pub fn params(&self) -> ExtendedParams {
        ExtendedParams {
            omega: self.target.omega0.iter().zip(&self.u).map(|(a, b)| a + b).collect(),
            sigma: self.v.clone(),
            mu: self.target.mu0.iter().zip(&self.w).map(|(a, b)| a + b).collect(),
            chi: self.target.chi0.iter().zip(&self.big_w).map(|(a, b)| a + b).collect(),
        }
    }

    /// Reversibility-class residuals, max over a deterministic point set.
    pub fn symmetry_residuals(&self, r: &DMatrix<f64>) -> SymmetryResiduals {
        let d = self.a.n_angles;
        let (_, m, p) = self.dims();
        let mz = 2 * p;
        let mut res = SymmetryResiduals { a: 0.0, b0: 0.0, b1: 0.0, b2: 0.0, c0: 0.0, c1: 0.0, c2: 0.0 };
        let mat = |v: Vec<f64>, nr: usize, nc: usize| DMatrix::from_row_slice(nr, nc, &v);
        for t in 0..16 {
            let theta: Vec<f64> = (0..d).map(|j| 0.37 + 1.618 * (t * (j + 1)) as f64 + 0.71 * j as f64).collect();
            let neg: Vec<f64> = theta.iter().map(|v| -v).collect();
            let diff = |x: &[f64], y: &[f64], sgn: f64| x.iter().zip(y).fold(0.0f64, |acc, (a, b)| acc.max((a + sgn * b).abs()));
            res.a = res.a.max(diff(&self.a.eval(&neg), &self.a.eval(&theta), 1.0));
            res.b0 = res.b0.max(diff(&self.b0.eval(&neg), &self.b0.eval(&theta), 1.0));
            res.b1 = res.b1.max(diff(&self.b1.eval(&neg), &self.b1.eval(&theta), -1.0));
            if p > 0 {
                let b2n = mat(self.b2.eval(&neg), m, mz) * r;
                let b2p = mat(self.b2.eval(&theta), m, mz);
                res.b2 = res.b2.max(linalg::max_abs(&(b2n + b2p)));
                let c0n = DMatrix::from_vec(mz, 1, self.c0.eval(&neg));
                let c0p = r * DMatrix::from_vec(mz, 1, self.c0.eval(&theta));
                res.c0 = res.c0.max(linalg::max_abs(&(c0n - c0p)));
                let c1n = mat(self.c1.eval(&neg), mz, m);
                let c1p = r * mat(self.c1.eval(&theta), mz, m);
                res.c1 = res.c1.max(linalg::max_abs(&(c1n + c1p)));
                let c2n = mat(self.c2.eval(&neg), mz, mz) * r;
                let c2p = r * mat(self.c2.eval(&theta), mz, mz);
                res.c2 = res.c2.max(linalg::max_abs(&(c2n - c2p)));
            }
        }
        res
    }

    /// `max |Ẋ - Ω|` of the transformed system on a grid; the transform
    /// leaves `X` untouched so this is identically zero.
    pub fn x_component_residual(&self, spec: &SystemSpec) -> f64 {
        let d = spec.dims;
        let par = self.params();
        let mut worst = 0.0f64;
        for t in 0..8 {
            let theta: Vec<f64> = (0..d.n + d.big_n).map(|j| 0.3 + (t * (j + 2)) as f64).collect();
            let x = self.a.eval(&theta);
            let (p0, _) = self.p0_grad(&theta);
            let xs: Vec<f64> = theta[..d.n].iter().zip(&x).map(|(a, b)| a + b).collect();
            let vel = spec.evaluate_field(&xs, &p0[..d.m], &p0[d.m..], &theta[d.n..], &par.sigma, &par.mu);
            for (v, w) in vel[vel.len() - d.big_n..].iter().zip(&spec.omega) {
                worst = worst.max((v - w).abs());
            }
        }
        worst
    }

    pub fn to_json(&self, report: Option<&serde_json::Value>) -> serde_json::Value {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
        };
        serde_json::json!({
            "target": self.target,
            "k_max": self.k_max,
            "grid": self.grid,
            "a": self.a.entries(),
            "b0": self.b0.entries(),
            "b1": self.b1.entries(),
            "b2": self.b2.entries(),
            "c0": self.c0.entries(),
            "c1": self.c1.entries(),
            "c2": self.c2.entries(),
            "u": self.u,
            "v": self.v,
            "w": self.w,
            "W": self.big_w,
            "omega_prime": self.omega_prime,
            "M_prime": rows(&self.m_prime),
            "spectrum": self.spectrum,
            "residual_history": self.history,
            "report": report,
        })
    }

    /// Reads back a transform written by [`TorusTransform::to_json`].
    pub fn from_json(v: &serde_json::Value, dims: (usize, usize, usize, usize)) -> Result<Self> {
        let (n, m, p, big_n) = dims;
        let d = n + big_n;
        let get = |k: &str| v.get(k).cloned().ok_or_else(|| Error::Schema(format!("transform lacks {k}")));
        let series = |k: &str, dim: usize| -> Result<FourierSeries> {
            let e: Vec<SeriesEntry> = serde_json::from_value(get(k)?)?;
            FourierSeries::from_entries(dim, d, &e)
        };
        let vecf = |k: &str| -> Result<Vec<f64>> { Ok(serde_json::from_value(get(k)?)?) };
        let mp: Vec<Vec<f64>> = serde_json::from_value(get("M_prime")?)?;
        let mz = 2 * p;
        Ok(Self {
            target: serde_json::from_value(get("target")?)?,
            a: series("a", n)?,
            b0: series("b0", m)?,
            b1: series("b1", m * m)?,
            b2: series("b2", m * mz)?,
            c0: series("c0", mz)?,
            c1: series("c1", mz * m)?,
            c2: series("c2", mz * mz)?,
            u: vecf("u")?,
            v: vecf("v")?,
            w: vecf("w")?,
            big_w: vecf("W")?,
            omega_prime: vecf("omega_prime")?,
            m_prime: DMatrix::from_fn(mz, mz, |i, j| mp[i][j]),
            spectrum: serde_json::from_value(get("spectrum")?)?,
            history: vecf("residual_history")?,
            k_max: serde_json::from_value(get("k_max")?)?,
            grid: serde_json::from_value(get("grid")?)?,
        })
    }
}

/// Checks `|⟨ν, k⟩ + ⟨β, l⟩| ≥ γ|k|^{-τ}` for every solver mode and `|l| ≤ 2`.
pub fn small_divisor_guard(modes: &[Vec<i64>], nu: &[f64], beta: &[f64], guard: &DiophParams) -> Result<()> {
    let ls = dioph::l_vectors(beta.len(), 2);
    for k in modes.iter().filter(|k| k.iter().any(|v| *v != 0)) {
        let kn = kdot(k, nu);
        let k1: i64 = k.iter().map(|v| v.abs()).sum();
        let g = guard.bound(k1 as f64);
        for l in &ls {
            let div = (kn + l.iter().zip(beta).map(|(a, b)| *a as f64 * b).sum::<f64>()).abs();
            if div < g {
                return Err(Error::SmallDivisorBreach { mode: k.clone(), divisor: div, guard: g });
            }
        }
    }
    Ok(())
}

/// Checks the inputs and sets up bases, grid and tables.
fn build_kernel(
    spec: &SystemSpec,
    target: &Target,
    unf: &Unfolding,
    dioph_params: &DiophParams,
    cfg: &SolverConfig,
) -> Result<Kernel> {
    cfg.validate()?;
    let dims = spec.dims;
    let (n, m, p, big_n, s) = (dims.n, dims.m, dims.p, dims.big_n, dims.s);
    let dd = m + 2 * p;
    if target.omega0.len() != n || target.mu0.len() != s || target.chi0.len() != unf.s_unf() {
        return Err(Error::DimensionMismatch(format!(
            "target has |ω₀| = {}, |μ₀| = {}, |χ₀| = {}; expected {n}, {s}, {}",
            target.omega0.len(),
            target.mu0.len(),
            target.chi0.len(),
            unf.s_unf()
        )));
    }
    if unf.p() != p || unf.s() != s {
        return Err(Error::DimensionMismatch("unfolding does not match the model".into()));
    }
    let size = spec.max_perturbation();
    if size > cfg.perturbation_gate {
        return Err(Error::GateExceeded { size, gate: cfg.perturbation_gate });
    }
    for (name, f) in [("f", &spec.f), ("g", &spec.g), ("h", &spec.h)] {
        let kinf = f.terms.iter().flat_map(|t| t.k.iter()).map(|v| v.unsigned_abs() as usize).max().unwrap_or(0);
        if kinf > cfg.k_max {
            return Err(Error::InvalidConfig(format!("{name} has modes beyond the solver cutoff {}", cfg.k_max)));
        }
    }
    let ext = ExtendedField::new(spec, unf)?;
    let m_prime = unf.eval(&target.mu0, &target.chi0);
    let spectrum = if p > 0 { Some(unf.spectrum(&target.mu0, &target.chi0)?) } else { None };
    let beta = spectrum.as_ref().map(|sp| sp.beta.clone()).unwrap_or_default();
    let d = n + big_n;
    let modes = box_modes(d, cfg.k_max);
    let nu: Vec<f64> = target.omega0.iter().chain(&spec.omega).copied().collect();
    let guard = cfg.guard.unwrap_or(*dioph_params);
    small_divisor_guard(&modes, &nu, &beta, &guard)?;

    // reduced directions of (w, W)
    let vp = if p > 0 {
        let jac = unf.spectral_jacobian(&target.mu0, &target.chi0)?;
        let rank = linalg::numerical_rank(&jac, crate::revlin::RANK_TOL);
        if rank < p {
            return Err(Error::SubmersivityFailed { rank, required: p });
        }
        let svd = jac.svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
        DMatrix::from_fn(s + unf.s_unf(), p, |i, j| vt[(idx[j], i)])
    } else {
        DMatrix::zeros(s + unf.s_unf(), 0)
    };

    // symmetry classes
    let r = spec.r.matrix();
    let mut rf = DMatrix::<f64>::zeros(dd, dd);
    for i in 0..m {
        rf[(i, i)] = -1.0;
    }
    rf.view_mut((m, m), (2 * p, 2 * p)).copy_from(r);
    let sb = matrix_map(dd, |b| &rf * b * &rf);
    let cls_a = ClassBasis::from_map(&(-DMatrix::<f64>::identity(n, n)));
    let cls_p0 = ClassBasis::from_map(&rf);
    let mut cls_b = ClassBasis::from_map(&sb);
    // gauge: zero mean of b1 and of the R-commuting centralizer part of c2
    let mut gauge_cols: Vec<nalgebra::DVector<f64>> = Vec::new();
    for i in 0..m {
        for j in 0..m {
            let mut e = nalgebra::DVector::zeros(dd * dd);
            e[i * dd + j] = 1.0;
            gauge_cols.push(e);
        }
    }
    let m2 = &m_prime * &m_prime;
    let mut pw = DMatrix::<f64>::identity(2 * p, 2 * p);
    for _ in 0..p {
        let mut e = nalgebra::DVector::zeros(dd * dd);
        for i in 0..2 * p {
            for j in 0..2 * p {
                e[(m + i) * dd + m + j] = pw[(i, j)];
            }
        }
        gauge_cols.push(e);
        pw = &pw * &m2;
    }
    if !gauge_cols.is_empty() {
        let g = linalg::range_basis(&DMatrix::from_columns(&gauge_cols), BASIS_TOL);
        let keep = linalg::null_basis(&(g.transpose() * &cls_b.mean), BASIS_TOL);
        cls_b.mean = &cls_b.mean * keep;
    }
    let eq_x = ClassBasis::from_map(&DMatrix::<f64>::identity(n, n));
    let eq_0 = ClassBasis::from_map(&(-&rf));
    let eq_1 = ClassBasis::from_map(&(-&sb));

    // collocation grid
    let ngp = cfg.grid_points();
    let total = ngp.pow(d as u32);
    let mut grid = Vec::with_capacity(total);
    for lin in 0..total {
        let mut rem = lin;
        let pt: Vec<f64> = (0..d)
            .map(|_| {
                let i = rem % ngp;
                rem /= ngp;
                2.0 * std::f64::consts::PI * i as f64 / ngp as f64
            })
            .collect();
        grid.push(pt);
    }
    let nm = modes.len();
    let mut ctab = vec![0.0; total * nm];
    let mut stab = vec![0.0; total * nm];
    for (g, th) in grid.iter().enumerate() {
        for (h, k) in modes.iter().enumerate() {
            let (sv, cv) = kdot(k, th).sin_cos();
            ctab[g * nm + h] = cv;
            stab[g * nm + h] = sv;
        }
    }
    let mut basis_vectors = Vec::new();
    for (block, cb) in [(Block::A, &cls_a), (Block::P0, &cls_p0), (Block::B, &cls_b)] {
        for m in [&cb.mean, &cb.cos, &cb.sin] {
            for c in m.column_iter() {
                basis_vectors.push((block, c.iter().copied().collect()));
            }
        }
    }
    Ok(Kernel {
        layout: Layout::new(n, dd),
        per_axis: ngp,
        basis_vectors,
        n,
        m,
        p,
        dd,
        n_modes: nm,
        knu: modes.iter().map(|k| kdot(k, &nu)).collect(),
        modes,
        grid,
        ctab,
        stab,
        dfx: (0..dd).map(|j| ext.fx.partial(j)).collect(),
        dfy: (0..dd).map(|j| ext.fy.partial(j)).collect(),
        dfz: (0..dd).map(|j| ext.fz.partial(j)).collect(),
        ext,
        omega0: target.omega0.clone(),
        mu0: target.mu0.clone(),
        chi0: target.chi0.clone(),
        m_prime: m_prime.clone(),
        vp,
        cls_a,
        cls_p0,
        cls_b,
        eq_x,
        eq_0,
        eq_1,
    })
}

/// Newton solve for the Floquet conjugacy of the extended system.
pub fn solve_torus(
    spec: &SystemSpec,
    target: &Target,
    unf: &Unfolding,
    dioph_params: &DiophParams,
    cfg: &SolverConfig,
) -> Result<TorusTransform> {
    let kern = build_kernel(spec, target, unf, dioph_params, cfg)?;
    let (n, m, p, s) = (kern.n, kern.m, kern.p, kern.mu0.len());
    let (dd, nm) = (kern.dd, kern.n_modes);
    let spectrum = if p > 0 { Some(unf.spectrum(&target.mu0, &target.chi0)?) } else { None };
    let nunk = kern.n_unknowns();
    let mut q = vec![0.0; nunk];
    let mut history = Vec::new();
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    loop {
        let r = kern.residual(&q);
        debug_assert_eq!(r.len(), nunk, "square Newton system");
        let rn = norm(&r);
        history.push(rn);
        if rn < cfg.newton_tol {
            break;
        }
        let it = history.len() - 1;
        if it >= cfg.max_iters || !rn.is_finite() || rn > 1e4 * history[0] {
            return Err(Error::NewtonDiverged { history });
        }
        let jac = kern.jacobian(&q);
        let rhs = faer::Mat::from_fn(nunk, 1, |i, _| -r[i]);
        let step = jac.partial_piv_lu().solve(&rhs);
        if !(0..nunk).all(|i| step[(i, 0)].is_finite()) {
            return Err(Error::NewtonDiverged { history });
        }
        for (i, a) in q.iter_mut().enumerate() {
            *a += step[(i, 0)];
        }
    }
    log::debug!("torus solve converged, residual history {history:?}");

    let dec = kern.decode(&q);
    let sh = kern.shifts(&dec.kappa);
    let a = kern.series(&vec![0.0; nm * n], &dec.a_sin, n);
    let p0 = kern.series(&dec.p0_cos, &dec.p0_sin, dd);
    let bm = kern.series(&dec.b_cos, &dec.b_sin, dd * dd);
    let mz = 2 * p;
    Ok(TorusTransform {
        target: target.clone(),
        a,
        b0: p0.slice(0..m),
        c0: p0.slice(m..dd),
        b1: bm.block(dd, 0..m, 0..m),
        b2: bm.block(dd, 0..m, m..dd),
        c1: bm.block(dd, m..dd, 0..m),
        c2: bm.block(dd, m..m + mz, m..dd),
        u: dec.u,
        v: dec.v,
        w: sh[..s].to_vec(),
        big_w: sh[s..].to_vec(),
        omega_prime: target.omega0.clone(),
        m_prime: kern.m_prime.clone(),
        spectrum,
        history,
        k_max: cfg.k_max,
        grid: cfg.grid_points(),
    })
}

// ------------------------------------------------------------ a posteriori checks

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloquetResidual {
    /// `|(ȳ, z̄)'|` on the torus
    pub invariance: f64,
    /// `|x̄' - ω₀|` on the torus
    pub frequency: f64,
    /// constant and linear parts of the ȳ-equation
    pub drift: f64,
    /// `|∂z̄'/∂(ȳ, z̄) - (0 | M')|`
    pub reducibility: f64,
}

impl FloquetResidual {
    pub fn max(&self) -> f64 {
        self.invariance.max(self.frequency).max(self.drift).max(self.reducibility)
    }
}

/// Transformed velocity `(x̄', P̄')` at `(θ, P̄)` with `P̄` over a generic scalar.
fn transformed_velocity<U: Scalar>(
    ext: &ExtendedField,
    t: &TorusTransform,
    par: &ParamsU<f64>,
    theta: &[f64],
    pbar: &[U],
) -> (Vec<U>, Vec<U>) {
    let n = ext.n;
    let dd = pbar.len();
    let omega = &ext.omega;
    let (a, a_grad) = t.a.eval_grad(theta);
    let (p0, p0_grad) = t.p0_grad(theta);
    let (b, b_grad) = t.b_grad(theta);
    let angles: Vec<U> = theta
        .iter()
        .enumerate()
        .map(|(i, v)| U::cst(if i < n { v + a[i] } else { *v }))
        .collect();
    let pn: Vec<U> = (0..dd)
        .map(|i| {
            let mut acc = U::cst(p0[i]) + pbar[i];
            for j in 0..dd {
                acc = acc + U::cst(b[i * dd + j]) * pbar[j];
            }
            acc
        })
        .collect();
    let (vx, vp) = ext.eval(&angles, &pn, &par.lift());
    // x̄' = (I + ∂_x̄ a)⁻¹ (V_x - ∂_X a Ω)
    let mut lhs: Vec<U> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            U::cst(a_grad[j][i] + if i == j { 1.0 } else { 0.0 })
        })
        .collect();
    let mut xdot: Vec<U> = (0..n)
        .map(|i| {
            let mut acc = vx[i];
            for (jj, w) in omega.iter().enumerate() {
                acc = acc - U::cst(a_grad[n + jj][i] * w);
            }
            acc
        })
        .collect();
    if n > 0 {
        linalg::solve_small(&mut lhs, &mut xdot, n, 1);
    }
    // (I + B) P̄' = V_P - ∂_x̄P₀ x̄' - ∂_X P₀ Ω - (∂_x̄B x̄' + ∂_X B Ω) P̄
    let mut rhs: Vec<U> = (0..dd)
        .map(|i| {
            let mut acc = vp[i];
            for l in 0..n {
                acc = acc - U::cst(p0_grad[l][i]) * xdot[l];
            }
            for (jj, w) in omega.iter().enumerate() {
                acc = acc - U::cst(p0_grad[n + jj][i] * w);
            }
            for j in 0..dd {
                let mut db = U::zero();
                for l in 0..n {
                    db = db + U::cst(b_grad[l][i * dd + j]) * xdot[l];
                }
                for (jj, w) in omega.iter().enumerate() {
                    db = db + U::cst(b_grad[n + jj][i * dd + j] * w);
                }
                acc = acc - db * pbar[j];
            }
            acc
        })
        .collect();
    let mut ib: Vec<U> = (0..dd * dd)
        .map(|ij| U::cst(b[ij] + if ij / dd == ij % dd { 1.0 } else { 0.0 }))
        .collect();
    if dd > 0 {
        linalg::solve_small(&mut ib, &mut rhs, dd, 1);
    }
    (xdot, rhs)
}

/// Independent re-evaluation of the transformed field on a grid finer than
/// (and offset from) the solver's collocation grid.
pub fn floquet_residual(spec: &SystemSpec, unf: &Unfolding, t: &TorusTransform) -> Result<FloquetResidual> {
    let ext = ExtendedField::new(spec, unf)?;
    let d = spec.dims;
    let dd = d.m + 2 * d.p;
    let nang = d.n + d.big_n;
    let par = ParamsU::from(&t.params());
    let mut per_axis = 2 * t.grid + 1;
    while per_axis.pow(nang as u32) > 40_000 && per_axis > 3 {
        per_axis -= 2;
    }
    let total = per_axis.pow(nang as u32);
    let mut res = FloquetResidual { invariance: 0.0, frequency: 0.0, drift: 0.0, reducibility: 0.0 };
    let h = 2.0 * std::f64::consts::PI / per_axis as f64;
    for lin in 0..total {
        let mut rem = lin;
        let theta: Vec<f64> = (0..nang)
            .map(|_| {
                let i = rem % per_axis;
                rem /= per_axis;
                h * (i as f64 + 0.5)
            })
            .collect();
        let (xd0, pd0) = transformed_velocity::<f64>(&ext, t, &par, &theta, &vec![0.0; dd]);
        for (a, b) in xd0.iter().zip(&t.omega_prime) {
            res.frequency = res.frequency.max((a - b).abs());
        }
        for v in &pd0 {
            res.invariance = res.invariance.max(v.abs());
        }
        for v in &pd0[..d.m] {
            res.drift = res.drift.max(v.abs());
        }
        for j in 0..dd {
            let pb: Vec<Dual<f64>> = (0..dd).map(|i| Dual::new(0.0, if i == j { 1.0 } else { 0.0 })).collect();
            let (_, pd) = transformed_velocity::<Dual<f64>>(&ext, t, &par, &theta, &pb);
            for v in &pd[..d.m] {
                res.drift = res.drift.max(v.eps.abs());
            }
            for i in 0..2 * d.p {
                let expect = if j >= d.m { t.m_prime[(i, j - d.m)] } else { 0.0 };
                res.reducibility = res.reducibility.max((pd[d.m + i].eps - expect).abs());
            }
        }
    }
    Ok(res)
}

// ------------------------------------------------------------ integration

/// Dormand–Prince 5(4) with step-size control.
mod ode {
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];

    /// Integrates `y' = f(t, y)` and calls `observe` at every accepted step.
    pub fn dopri5(
        f: &dyn Fn(f64, &[f64]) -> Vec<f64>,
        y0: &[f64],
        t_end: f64,
        tol: f64,
        mut observe: impl FnMut(f64, &[f64]),
    ) -> Result<(), String> {
        let n = y0.len();
        let mut y = y0.to_vec();
        let mut t = 0.0;
        let mut h = 1e-3f64.min(t_end);
        let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
        let mut steps = 0usize;
        while t < t_end {
            if steps > 10_000_000 {
                return Err("step budget exhausted".into());
            }
            steps += 1;
            h = h.min(t_end - t);
            k[0] = f(t, &y);
            for s in 1..7 {
                let ys: Vec<f64> = (0..n).map(|i| y[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>()).collect();
                k[s] = f(t + C[s] * h, &ys);
            }
            let y5: Vec<f64> = (0..n).map(|i| y[i] + h * (0..7).map(|j| B5[j] * k[j][i]).sum::<f64>()).collect();
            let err = (0..n)
                .map(|i| {
                    let e = h * (0..7).map(|j| (B5[j] - B4[j]) * k[j][i]).sum::<f64>();
                    e.abs() / (tol + tol * y[i].abs().max(y5[i].abs()))
                })
                .fold(0.0f64, f64::max);
            if !err.is_finite() {
                return Err(format!("non-finite error estimate at t = {t}"));
            }
            if err <= 1.0 {
                t += h;
                y = y5;
                observe(t, &y);
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= fac;
            if h < 1e-14 * t_end.max(1.0) {
                return Err(format!("step size underflow at t = {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationReport {
    pub horizon: f64,
    /// max distance between the integrated orbit and the torus orbit
    pub max_distance: f64,
    /// largest real part of the normal spectrum
    pub normal_growth_rate: f64,
    /// `e^{rate·T}·1e-10`, the expected size of amplified round-off
    pub growth_bound: f64,
}

/// Integrates the system at the transform's parameter values from points on
/// the computed torus and measures the distance to the predicted torus orbit.
pub fn verify_by_integration(spec: &SystemSpec, unf: &Unfolding, t: &TorusTransform, horizon: f64) -> Result<IntegrationReport> {
    let ext = ExtendedField::new(spec, unf)?;
    let d = spec.dims;
    let (n, dd, big_n) = (d.n, d.m + 2 * d.p, d.big_n);
    let par = ParamsU::from(&t.params());
    let nu: Vec<f64> = t.omega_prime.iter().chain(&spec.omega).copied().collect();
    let rhs = |_: f64, st: &[f64]| -> Vec<f64> {
        let angles: Vec<f64> = st[..n].iter().chain(&st[n + dd..]).copied().collect();
        let (vx, vp) = ext.eval(&angles, &st[n..n + dd], &par);
        let mut out = vx;
        out.extend(vp);
        out.extend(&spec.omega);
        out
    };
    let mut worst = 0.0f64;
    for start in 0..3 {
        let theta0: Vec<f64> = (0..n + big_n).map(|j| 0.4 + 1.3 * start as f64 + 0.9 * j as f64).collect();
        let point = |theta: &[f64]| -> Vec<f64> {
            let a = t.a.eval(theta);
            let (p0, _) = t.p0_grad(theta);
            let mut st: Vec<f64> = theta[..n].iter().zip(&a).map(|(x, y)| x + y).collect();
            st.extend(p0);
            st.extend(&theta[n..]);
            st
        };
        let y0 = point(&theta0);
        let mut local = 0.0f64;
        ode::dopri5(&rhs, &y0, horizon, 1e-12, |tt, y| {
            let th: Vec<f64> = theta0.iter().zip(&nu).map(|(a, w)| a + w * tt).collect();
            let expect = point(&th);
            for (a, b) in y.iter().zip(&expect) {
                local = local.max((a - b).abs());
            }
        })
        .map_err(Error::IntegratorFailure)?;
        worst = worst.max(local);
    }
    let rate = t
        .spectrum
        .as_ref()
        .map(|s| s.eigenvalues().iter().map(|z| z.re).fold(0.0, f64::max))
        .unwrap_or(0.0);
    Ok(IntegrationReport {
        horizon,
        max_distance: worst,
        normal_growth_rate: rate,
        growth_bound: (rate * horizon).exp() * 1e-10,
    })
}

// ------------------------------------------------------------ convergence order

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceOrder {
    /// fitted order, `None` when no usable pair exists
    pub order: Option<f64>,
    pub pairs: usize,
}

/// Residuals below this are treated as round-off.
pub const ROUNDOFF_FLOOR: f64 = 1e-13;

/// Order of convergence from a residual history, using the pairs
/// `(r_j, r_{j+1})` with `r_j < 1e-3` and `r_{j+1}` above round-off.
/// Two or more pairs give a log-log regression slope; a single pair gives
/// `ln r_{j+1} / ln r_j`.
pub fn convergence_order(history: &[f64]) -> ConvergenceOrder {
    let pairs: Vec<(f64, f64)> = history
        .windows(2)
        .filter(|w| w[0] < 1e-3 && w[1] > ROUNDOFF_FLOOR && w[0] > 0.0)
        .map(|w| (w[0].ln(), w[1].ln()))
        .collect();
    let order = match pairs.len() {
        0 => None,
        1 => Some(pairs[0].1 / pairs[0].0),
        k => {
            let mx = pairs.iter().map(|p| p.0).sum::<f64>() / k as f64;
            let my = pairs.iter().map(|p| p.1).sum::<f64>() / k as f64;
            let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
            Some(if sxx > 0.0 { sxy / sxx } else { pairs[0].1 / pairs[0].0 })
        }
    };
    ConvergenceOrder { order, pairs: pairs.len() }
}

/// Default classification tolerance re-exported for reports.
pub const SPECTRUM_TOL: f64 = CLASSIFY_TOL;
