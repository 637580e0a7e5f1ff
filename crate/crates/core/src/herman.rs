//! Parameter adjustment: from counterterms of the extended system to a
//! Whitney family of tori of the original system.
//!
//! For a parameter `μ` of the original system the pipeline solves
//!
//! ```text
//! ω + u(ω, μ₀, χ) = F(μ₀ + w) + Δ(v, μ₀ + w),    χ + W(ω, μ₀, χ) = 0
//! ```
//!
//! for `(ω, χ) = (Φ, Ψ)(μ₀)`, inverts `μ = μ₀ + w(Φ(μ₀), μ₀, Ψ(μ₀))` for
//! `μ₀ = Υ(μ)` and records `Θ(μ) = v`. At those values the extended system
//! coincides with the original one at `(σ, μ) = (Θ(μ), μ)`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dioph::{self, DiophParams, JetData};
use crate::error::{Error, Result};
use crate::revlin::{ReversibleSpectrum, Unfolding};
use crate::systems::SystemSpec;
use crate::torus::{self, ExtendedField, SolverConfig, Target, TorusTransform};

/// The parameter-extended system with `θ = 0`.
pub fn extend_system(spec: &SystemSpec, unf: &Unfolding) -> Result<ExtendedField> {
    ExtendedField::new(spec, unf)
}

/// `F(μ) + Δ(σ, μ)`.
pub fn base_frequency(spec: &SystemSpec, sigma: &[f64], mu: &[f64]) -> Vec<f64> {
    let angles = vec![0.0; spec.dims.n + spec.dims.big_n];
    let vars = spec.param_vars(sigma, mu);
    let f = spec.freq.eval(&angles, &vars);
    let d = spec.delta.eval(&angles, &vars);
    f.iter().zip(&d).map(|(a, b)| a + b).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterterms {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    #[serde(rename = "W")]
    pub big_w: Vec<f64>,
}

impl Counterterms {
    pub fn of(t: &TorusTransform) -> Self {
        Self { u: t.u.clone(), v: t.v.clone(), w: t.w.clone(), big_w: t.big_w.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyConfig {
    pub tol: f64,
    pub max_iters: usize,
    /// step of the five-point difference stencil
    pub fd_step: f64,
}

impl Default for KeyConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 20, fd_step: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeySolution {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub counterterms: Counterterms,
    pub residual: f64,
    pub iterations: usize,
}

/// Newton solve of the key system at `μ₀` for `(ω, χ)`; `maps` returns the
/// counterterms of the extended system at a target. Jacobians are five-point
/// finite differences of `maps`.
pub fn solve_key_system(
    spec: &SystemSpec,
    s_unf: usize,
    mu0: &[f64],
    maps: &dyn Fn(&Target) -> Result<Counterterms>,
    cfg: &KeyConfig,
) -> Result<KeySolution> {
    let n = spec.dims.n;
    let dim = n + s_unf;
    let residual = |z: &[f64]| -> Result<(Vec<f64>, Counterterms)> {
        let target = Target { omega0: z[..n].to_vec(), mu0: mu0.to_vec(), chi0: z[n..].to_vec() };
        let c = maps(&target)?;
        let mu: Vec<f64> = mu0.iter().zip(&c.w).map(|(a, b)| a + b).collect();
        let base = base_frequency(spec, &c.v, &mu);
        let mut r: Vec<f64> = (0..n).map(|i| z[i] + c.u[i] - base[i]).collect();
        r.extend((0..s_unf).map(|j| z[n + j] + c.big_w[j]));
        Ok((r, c))
    };
    let mut z = base_frequency(spec, &[], mu0);
    z.extend(std::iter::repeat_n(0.0, s_unf));
    let mut history = Vec::new();
    for it in 0..=cfg.max_iters {
        let (r, c) = residual(&z)?;
        let rn = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        history.push(rn);
        if rn < cfg.tol {
            return Ok(KeySolution {
                phi: z[..n].to_vec(),
                psi: z[n..].to_vec(),
                counterterms: c,
                residual: rn,
                iterations: it,
            });
        }
        if it == cfg.max_iters || !rn.is_finite() {
            break;
        }
        let h = cfg.fd_step;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for j in 0..dim {
            let mut cols = Vec::with_capacity(4);
            for off in [2.0, 1.0, -1.0, -2.0] {
                let mut zz = z.clone();
                zz[j] += off * h;
                cols.push(residual(&zz)?.0);
            }
            for i in 0..dim {
                jac[(i, j)] = (-cols[0][i] + 8.0 * cols[1][i] - 8.0 * cols[2][i] + cols[3][i]) / (12.0 * h);
            }
        }
        let rhs = nalgebra::DVector::from_iterator(dim, r.iter().map(|v| -v));
        let step = jac.lu().solve(&rhs).ok_or_else(|| Error::NewtonDiverged { history: history.clone() })?;
        for (a, b) in z.iter_mut().zip(step.iter()) {
            *a += b;
        }
    }
    Err(Error::NewtonDiverged { history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftInverse {
    pub mu0: Vec<f64>,
    pub iterations: usize,
    /// largest observed ratio of successive step sizes
    pub contraction: f64,
}

/// Fixed-point solve of `μ = μ₀ + w(μ₀)` for `μ₀`, to `1e-12`. The result
/// must stay in the ball of radius `radius`.
pub fn invert_shift(mu: &[f64], w: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>, radius: f64) -> Result<ShiftInverse> {
    const TOL: f64 = 1e-12;
    const MAX_ITERS: usize = 100;
    let mut mu0 = mu.to_vec();
    let mut last_step = f64::INFINITY;
    let mut contraction = 0.0f64;
    for it in 1..=MAX_ITERS {
        let shift = w(&mu0)?;
        let next: Vec<f64> = mu.iter().zip(&shift).map(|(a, b)| a - b).collect();
        let step = next.iter().zip(&mu0).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        if last_step.is_finite() && last_step > 0.0 && step > 0.0 {
            contraction = contraction.max(step / last_step);
        }
        mu0 = next;
        if step <= TOL {
            let norm = mu0.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius * (1.0 + 1e-12) {
                return Err(Error::ContractionFailed(format!("preimage {mu0:?} leaves the ball of radius {radius}")));
            }
            return Ok(ShiftInverse { mu0, iterations: it, contraction });
        }
        if contraction >= 1.0 || !step.is_finite() {
            return Err(Error::ContractionFailed(format!("step ratio {contraction} after {it} iterations")));
        }
        last_step = step;
    }
    Err(Error::ContractionFailed(format!("no convergence in {MAX_ITERS} iterations")))
}

// ------------------------------------------------------------ sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// radius `r` of the ball Γ centred at the origin
    pub radius: f64,
    /// grid points per axis of the bounding cube of Γ
    pub grid: usize,
    pub eps2: f64,
    pub dioph: DiophParams,
    /// nondegeneracy order `Q`
    pub q_order: u32,
    /// order of the smoothness report
    pub cl: u32,
    pub solver: SolverConfig,
    pub key: KeyConfig,
    /// cutoff `|k|₁` of the Diophantine checks
    pub dioph_kmax: u32,
    /// extra γ values for the measure table
    pub gamma_table: Vec<f64>,
    /// stencil step of the nondegeneracy jets
    pub jet_step: f64,
}

impl SweepConfig {
    pub fn new(radius: f64, grid: usize, eps2: f64, dioph: DiophParams) -> Self {
        Self {
            radius,
            grid,
            eps2,
            dioph,
            q_order: 1,
            cl: 1,
            solver: SolverConfig::default(),
            key: KeyConfig::default(),
            dioph_kmax: dioph::DEFAULT_KMAX,
            gamma_table: Vec::new(),
            jet_step: 1e-3,
        }
    }

    pub fn validate(&self, spec: &SystemSpec) -> Result<()> {
        let d = spec.dims;
        if !(self.eps2 > 0.0 && self.eps2 < 1.0) {
            return Err(Error::InvalidConfig(format!("eps2 = {} outside (0, 1)", self.eps2)));
        }
        if !(self.radius > 0.0) || self.grid < 2 {
            return Err(Error::InvalidConfig("need a positive radius and at least 2 grid points".into()));
        }
        let need = ((d.n + d.big_n) as u32 * self.q_order) as f64;
        if self.dioph.tau <= need {
            return Err(Error::InvalidConfig(format!("tau = {} must exceed (n+N)Q = {need}", self.dioph.tau)));
        }
        if self.dioph.tau < spec.dioph_star.tau {
            return Err(Error::InvalidConfig(format!(
                "tau = {} below the forcing exponent {}",
                self.dioph.tau, spec.dioph_star.tau
            )));
        }
        if self.gamma_table.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::InvalidConfig("gamma table entries must be positive".into()));
        }
        Ok(())
    }

    /// γ values of the measure table, decreasing, always containing `dioph.gamma`.
    pub fn gammas(&self) -> Vec<f64> {
        let mut g = self.gamma_table.clone();
        if !g.contains(&self.dioph.gamma) {
            g.push(self.dioph.gamma);
        }
        g.sort_by(|a, b| b.total_cmp(a));
        g
    }
}

/// Radii of `Γ′` and `Γ″`.
pub fn shrunk_radii(r: f64, eps2: f64, s: usize) -> (f64, f64) {
    let e = 1.0 / s as f64;
    (r * (1.0 - eps2 / 3.0).powf(e), r * (1.0 - 2.0 * eps2 / 3.0).powf(e))
}

/// Volume of the `s`-ball of radius `r`.
pub fn ball_volume(s: usize, r: f64) -> f64 {
    let mut v = [1.0, 2.0];
    for d in 2..=s {
        let next = v[0] * 2.0 * std::f64::consts::PI / d as f64;
        v = [v[1], next];
    }
    let unit = if s == 0 { 1.0 } else { v[1] };
    unit * r.powi(s as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub mu: Vec<f64>,
    pub in_gamma_prime: bool,
    pub in_gamma_dblprime: bool,
    pub in_g: bool,
    #[serde(rename = "Theta")]
    pub theta: Option<Vec<f64>>,
    #[serde(rename = "Upsilon")]
    pub upsilon: Option<Vec<f64>>,
    #[serde(rename = "Phi")]
    pub phi: Option<Vec<f64>>,
    #[serde(rename = "Psi")]
    pub psi: Option<Vec<f64>>,
    pub omega_prime: Option<Vec<f64>>,
    pub beta_prime: Option<Vec<f64>>,
    pub spectrum: Option<ReversibleSpectrum>,
    pub dioph_ratio: Option<f64>,
    /// `|ω₀ + u − F(μ) − Δ(Θ, μ)| + |μ₀ + w − μ| + |χ₀ + W|` of the final solve
    pub consistency: Option<f64>,
    pub newton_history: Option<Vec<f64>>,
    /// coefficients of the transform in [`TorusTransform::coefficient_vector`] order
    pub coefficients: Option<Vec<f64>>,
    pub error: Option<String>,
    #[serde(skip)]
    pub transform: Option<TorusTransform>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMeasure {
    pub radius: f64,
    pub radius_prime: f64,
    pub radius_dblprime: f64,
    pub cell: f64,
    pub meas_gamma: f64,
    pub meas_gamma_prime: f64,
    pub meas_gamma_dblprime: f64,
    pub meas_g: f64,
    pub exact_gamma: f64,
    pub exact_gamma_prime: f64,
    pub exact_gamma_dblprime: f64,
    pub fraction_of_gamma: f64,
    pub fraction_of_gamma_dblprime: f64,
    /// `meas(G) > (1 - ε₂)·meas(Γ)`
    pub target_met: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub n_g: usize,
    pub meas_g: f64,
    pub fraction_of_gamma: f64,
    pub fraction_of_gamma_dblprime: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitneyFamily {
    pub config: SweepConfig,
    pub s: usize,
    /// grid spacing
    pub h: f64,
    /// trapezoid weight of every record
    pub weights: Vec<f64>,
    /// integer grid coordinates of every record
    pub index: Vec<Vec<usize>>,
    pub records: Vec<SweepRecord>,
    pub measure: FamilyMeasure,
    pub gamma_table: Vec<GammaRow>,
}

impl WhitneyFamily {
    pub fn g_records(&self) -> impl Iterator<Item = &SweepRecord> {
        self.records.iter().filter(|r| r.in_g)
    }
}

struct PointResult {
    upsilon: Vec<f64>,
    key: KeySolution,
}

fn key_at_point(spec: &SystemSpec, unf: &Unfolding, cfg: &SweepConfig, solver: &SolverConfig, mu: &[f64]) -> Result<PointResult> {
    let maps = |t: &Target| -> Result<Counterterms> {
        torus::solve_torus(spec, t, unf, &cfg.dioph, solver).map(|tr| Counterterms::of(&tr))
    };
    let mut last: Option<KeySolution> = None;
    let mut w_map = |mu0: &[f64]| -> Result<Vec<f64>> {
        let k = solve_key_system(spec, unf.s_unf(), mu0, &maps, &cfg.key)?;
        let w = k.counterterms.w.clone();
        last = Some(k);
        Ok(w)
    };
    let inv = invert_shift(mu, &mut w_map, cfg.radius)?;
    let key = match last {
        Some(k) => k,
        None => solve_key_system(spec, unf.s_unf(), &inv.mu0, &maps, &cfg.key)?,
    };
    Ok(PointResult { upsilon: inv.mu0, key })
}

/// Sweeps the grid over Γ and assembles the Whitney family.
pub fn sweep(spec: &SystemSpec, unf: &Unfolding, cfg: &SweepConfig) -> Result<WhitneyFamily> {
    cfg.validate(spec)?;
    let d = spec.dims;
    let s = d.s;
    if s == 0 {
        return Err(Error::InvalidConfig("sweeps need s > 0 parameters".into()));
    }
    if !spec.omega.is_empty() {
        let star = DiophParams::new(spec.dioph_star.tau, spec.dioph_star.gamma, 1)?;
        let om = dioph::affine_dioph_check(&spec.omega, &[], &star, cfg.dioph_kmax)?;
        if !om.passed() {
            return Err(Error::OmegaNotDiophantine { worst_k: om.worst_k, ratio: om.worst_ratio });
        }
    }
    let size = spec.max_perturbation();
    if size > cfg.solver.perturbation_gate {
        return Err(Error::GateExceeded { size, gate: cfg.solver.perturbation_gate });
    }
    let (r1, r2) = shrunk_radii(cfg.radius, cfg.eps2, s);
    let per = cfg.grid;
    let h = 2.0 * cfg.radius / (per - 1) as f64;
    let mut pts = Vec::new();
    let mut index = Vec::new();
    let mut weights = Vec::new();
    for lin in 0..per.pow(s as u32) {
        let mut rem = lin;
        let idx: Vec<usize> = (0..s)
            .map(|_| {
                let i = rem % per;
                rem /= per;
                i
            })
            .collect();
        let mu: Vec<f64> = idx.iter().map(|i| -cfg.radius + h * *i as f64).collect();
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= cfg.radius * (1.0 + 1e-12) {
            let w: f64 = idx.iter().map(|i| if *i == 0 || *i == per - 1 { 0.5 * h } else { h }).product();
            pts.push(mu);
            index.push(idx);
            weights.push(w);
        }
    }
    let inside = |mu: &[f64], r: f64| mu.iter().map(|v| v * v).sum::<f64>().sqrt() <= r * (1.0 + 1e-12);

    // nondegeneracy of the unperturbed pair on Γ″
    let beta_of = |mu: &[f64]| -> Vec<f64> {
        if d.p == 0 {
            return Vec::new();
        }
        unf.spectrum(mu, &vec![0.0; unf.s_unf()]).map(|sp| sp.beta).unwrap_or_default()
    };
    let nondeg: Vec<Result<dioph::NondegReport>> = pts
        .par_iter()
        .filter(|mu| inside(mu, r2))
        .map(|mu| {
            let jet = JetData::from_fn(mu, cfg.q_order, cfg.jet_step, |m| spec.frequency(m), beta_of);
            dioph::nondegeneracy_check(&jet, cfg.q_order, 2)
        })
        .collect();
    for (i, rep) in nondeg.into_iter().enumerate() {
        let rep = rep?;
        if !rep.pass {
            return Err(Error::Precondition(format!(
                "(F, beta) is not affinely ({}, 2)-nondegenerate at grid point {i} of the inner ball",
                cfg.q_order
            )));
        }
    }

    let gammas = cfg.gammas();
    let gmin = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    let mut solver = cfg.solver.clone();
    if solver.guard.is_none() {
        solver.guard = Some(DiophParams::new(cfg.dioph.tau, gmin, 2)?);
    }
    let records: Vec<SweepRecord> = pts
        .par_iter()
        .map(|mu| sweep_point(spec, unf, cfg, &solver, mu, inside(mu, r1), inside(mu, r2)))
        .collect();

    let meas_of = |pred: &dyn Fn(usize) -> bool| -> f64 { (0..pts.len()).filter(|i| pred(*i)).map(|i| weights[i]).sum() };
    let meas_gamma = meas_of(&|_| true);
    let meas_gamma_prime = meas_of(&|i| records[i].in_gamma_prime);
    let meas_gamma_dblprime = meas_of(&|i| records[i].in_gamma_dblprime);
    let meas_g = meas_of(&|i| records[i].in_g);
    let measure = FamilyMeasure {
        radius: cfg.radius,
        radius_prime: r1,
        radius_dblprime: r2,
        cell: h.powi(s as i32),
        meas_gamma,
        meas_gamma_prime,
        meas_gamma_dblprime,
        meas_g,
        exact_gamma: ball_volume(s, cfg.radius),
        exact_gamma_prime: ball_volume(s, r1),
        exact_gamma_dblprime: ball_volume(s, r2),
        fraction_of_gamma: meas_g / meas_gamma,
        fraction_of_gamma_dblprime: meas_g / meas_gamma_dblprime,
        target_met: meas_g > (1.0 - cfg.eps2) * meas_gamma,
    };

    let gamma_table = gammas
        .iter()
        .map(|g| -> Result<GammaRow> {
            let params = DiophParams::new(cfg.dioph.tau, *g, 2)?;
            let pass: Vec<bool> = records
                .par_iter()
                .map(|r| -> Result<bool> {
                    if !r.in_gamma_dblprime {
                        return Ok(false);
                    }
                    match (&r.omega_prime, &r.beta_prime) {
                        (Some(om), Some(b)) => {
                            let mut f = om.clone();
                            f.extend_from_slice(&spec.omega);
                            Ok(dioph::affine_dioph_check(&f, b, &params, cfg.dioph_kmax)?.passed())
                        }
                        _ => Ok(false),
                    }
                })
                .collect::<Result<_>>()?;
            let mg: f64 = pass.iter().zip(&weights).filter(|(p, _)| **p).map(|(_, w)| w).sum();
            Ok(GammaRow {
                gamma: *g,
                n_g: pass.iter().filter(|p| **p).count(),
                meas_g: mg,
                fraction_of_gamma: mg / meas_gamma,
                fraction_of_gamma_dblprime: mg / meas_gamma_dblprime,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("sweep: {} points, {} in G", records.len(), records.iter().filter(|r| r.in_g).count());
    Ok(WhitneyFamily { config: cfg.clone(), s, h, weights, index, records, measure, gamma_table })
}

fn sweep_point(
    spec: &SystemSpec,
    unf: &Unfolding,
    cfg: &SweepConfig,
    solver: &SolverConfig,
    mu: &[f64],
    in1: bool,
    in2: bool,
) -> SweepRecord {
    let mut rec = SweepRecord {
        mu: mu.to_vec(),
        in_gamma_prime: in1,
        in_gamma_dblprime: in2,
        in_g: false,
        theta: None,
        upsilon: None,
        phi: None,
        psi: None,
        omega_prime: None,
        beta_prime: None,
        spectrum: None,
        dioph_ratio: None,
        consistency: None,
        newton_history: None,
        coefficients: None,
        error: None,
        transform: None,
    };
    if !in1 {
        return rec;
    }
    if let Err(e) = fill_point(spec, unf, cfg, solver, &mut rec) {
        log::debug!("sweep point {mu:?}: {e}");
        rec.in_g = false;
        rec.error = Some(e.to_string());
    }
    rec
}

fn fill_point(spec: &SystemSpec, unf: &Unfolding, cfg: &SweepConfig, solver: &SolverConfig, rec: &mut SweepRecord) -> Result<()> {
    let pr = key_at_point(spec, unf, cfg, solver, &rec.mu)?;
    let (mu0, phi, psi) = (pr.upsilon, pr.key.phi, pr.key.psi);
    let spectrum = if spec.dims.p > 0 { Some(unf.spectrum(&mu0, &psi)?) } else { None };
    let beta = spectrum.as_ref().map(|s| s.beta.clone()).unwrap_or_default();
    rec.upsilon = Some(mu0.clone());
    rec.phi = Some(phi.clone());
    rec.psi = Some(psi.clone());
    rec.omega_prime = Some(phi.clone());
    rec.beta_prime = Some(beta.clone());
    rec.spectrum = spectrum;
    if !rec.in_gamma_dblprime {
        return Ok(());
    }
    let mut f = phi.clone();
    f.extend_from_slice(&spec.omega);
    let rep = dioph::affine_dioph_check(&f, &beta, &cfg.dioph, cfg.dioph_kmax)?;
    rec.dioph_ratio = Some(rep.worst_ratio);
    if !rep.passed() {
        return Ok(());
    }
    let target = Target { omega0: phi, mu0, chi0: psi };
    let t = torus::solve_torus(spec, &target, unf, &cfg.dioph, solver)?;
    let cons = consistency(spec, &t, &rec.mu);
    rec.in_g = true;
    rec.theta = Some(t.v.clone());
    rec.consistency = Some(cons);
    rec.newton_history = Some(t.history.clone());
    rec.coefficients = Some(t.coefficient_vector());
    rec.transform = Some(t);
    Ok(())
}

/// Distance between the extended system at the transform's parameters and
/// the original system at `(σ, μ) = (v, μ)`.
pub fn consistency(spec: &SystemSpec, t: &TorusTransform, mu: &[f64]) -> f64 {
    let par = t.params();
    let base = base_frequency(spec, &t.v, mu);
    par.omega.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        + par.mu.iter().zip(mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        + par.chi.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSolution {
    pub upsilon: Vec<f64>,
    pub key: KeySolution,
    pub transform: TorusTransform,
    pub consistency: f64,
}

/// The full pipeline at one parameter `μ` of the original system, without
/// the Diophantine gate of the sweep.
pub fn solve_point(spec: &SystemSpec, unf: &Unfolding, cfg: &SweepConfig, mu: &[f64]) -> Result<PointSolution> {
    let pr = key_at_point(spec, unf, cfg, &cfg.solver, mu)?;
    let target = Target { omega0: pr.key.phi.clone(), mu0: pr.upsilon.clone(), chi0: pr.key.psi.clone() };
    let t = torus::solve_torus(spec, &target, unf, &cfg.dioph, &cfg.solver)?;
    let consistency = consistency(spec, &t, mu);
    Ok(PointSolution { upsilon: pr.upsilon, key: pr.key, transform: t, consistency })
}

// ------------------------------------------------------------ smoothness

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeStats {
    pub order: u32,
    pub samples: usize,
    pub min: f64,
    pub max: f64,
    pub max_abs: f64,
    /// largest change of the estimate between neighbouring stencils
    pub consistency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitneyReport {
    pub cl: u32,
    pub runs: usize,
    pub theta: Vec<DerivativeStats>,
    pub coefficients: Vec<DerivativeStats>,
}

/// Divided differences of Θ and of the transform coefficients up to order
/// `cl` along axis runs of consecutive grid points inside G.
pub fn whitney_report(family: &WhitneyFamily, cl: u32) -> Result<WhitneyReport> {
    if cl == 0 {
        return Err(Error::InvalidConfig("smoothness order must be at least 1".into()));
    }
    let need = cl as usize + 2;
    let pos: std::collections::HashMap<&Vec<usize>, usize> =
        family.index.iter().enumerate().map(|(i, idx)| (idx, i)).collect();
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for axis in 0..family.s {
        for (i, idx) in family.index.iter().enumerate() {
            if !family.records[i].in_g {
                continue;
            }
            // start of a run: predecessor absent or outside G
            if idx[axis] > 0 {
                let mut prev = idx.clone();
                prev[axis] -= 1;
                if pos.get(&prev).is_some_and(|j| family.records[*j].in_g) {
                    continue;
                }
            }
            let mut run = vec![i];
            let mut cur = idx.clone();
            loop {
                cur[axis] += 1;
                match pos.get(&cur) {
                    Some(j) if family.records[*j].in_g => run.push(*j),
                    _ => break,
                }
            }
            if run.len() >= need {
                runs.push(run);
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::InsufficientGrid(format!("no axis run of {need} consecutive points inside G")));
    }
    let h = family.h;
    let stats = |get: &dyn Fn(&SweepRecord) -> Option<&Vec<f64>>| -> Vec<DerivativeStats> {
        (1..=cl)
            .map(|order| {
                let mut st = DerivativeStats {
                    order,
                    samples: 0,
                    min: f64::INFINITY,
                    max: f64::NEG_INFINITY,
                    max_abs: 0.0,
                    consistency: 0.0,
                };
                for run in &runs {
                    let vals: Vec<&Vec<f64>> = match run.iter().map(|i| get(&family.records[*i])).collect::<Option<Vec<_>>>() {
                        Some(v) => v,
                        None => continue,
                    };
                    let dim = vals[0].len();
                    for c in 0..dim {
                        let mut diff: Vec<f64> = vals.iter().map(|v| v[c]).collect();
                        for _ in 0..order {
                            diff = diff.windows(2).map(|w| (w[1] - w[0]) / h).collect();
                        }
                        for d in &diff {
                            st.samples += 1;
                            st.min = st.min.min(*d);
                            st.max = st.max.max(*d);
                            st.max_abs = st.max_abs.max(d.abs());
                        }
                        for w in diff.windows(2) {
                            st.consistency = st.consistency.max((w[1] - w[0]).abs());
                        }
                    }
                }
                if st.samples == 0 {
                    st.min = 0.0;
                    st.max = 0.0;
                }
                st
            })
            .collect()
    };
    Ok(WhitneyReport {
        cl,
        runs: runs.len(),
        theta: stats(&|r| r.theta.as_ref()),
        coefficients: stats(&|r| r.coefficients.as_ref()),
    })
}

// ------------------------------------------------------------ output

fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

/// Writes `family.json`, `measures.csv`, `theta.csv` and `long.csv`.
pub fn write_outputs(family: &WhitneyFamily, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("family.json"))?;
    serde_json::to_writer_pretty(&mut f, family)?;
    f.write_all(b"\n")?;

    let mut w = csv::Writer::from_path(dir.join("measures.csv"))?;
    w.write_record(["gamma", "n_g", "meas_g", "fraction_of_gamma", "fraction_of_gamma_dblprime"])?;
    for r in &family.gamma_table {
        w.write_record([
            fmt_num(r.gamma),
            r.n_g.to_string(),
            fmt_num(r.meas_g),
            fmt_num(r.fraction_of_gamma),
            fmt_num(r.fraction_of_gamma_dblprime),
        ])?;
    }
    w.flush()?;

    let s = family.s;
    let m = family.g_records().find_map(|r| r.theta.as_ref().map(|t| t.len())).unwrap_or(0);
    let mut w = csv::Writer::from_path(dir.join("theta.csv"))?;
    let mut head: Vec<String> = (0..s).map(|i| format!("mu_{}", i + 1)).collect();
    head.extend((0..m).map(|i| format!("theta_{}", i + 1)));
    w.write_record(&head)?;
    for r in family.g_records() {
        let mut row: Vec<String> = r.mu.iter().map(|v| fmt_num(*v)).collect();
        row.extend(r.theta.iter().flatten().map(|v| fmt_num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("long.csv"))?;
    let mut head: Vec<String> = vec!["point".into()];
    head.extend((0..s).map(|i| format!("mu_{}", i + 1)));
    head.extend(["quantity".into(), "component".into(), "value".into()]);
    w.write_record(&head)?;
    for (i, r) in family.records.iter().enumerate() {
        let mut base = vec![i.to_string()];
        base.extend(r.mu.iter().map(|v| fmt_num(*v)));
        let mut emit = |q: &str, vals: &[f64]| -> Result<()> {
            for (c, v) in vals.iter().enumerate() {
                let mut row = base.clone();
                row.extend([q.to_string(), c.to_string(), fmt_num(*v)]);
                w.write_record(&row)?;
            }
            Ok(())
        };
        emit("in_g", &[if r.in_g { 1.0 } else { 0.0 }])?;
        for (name, v) in [("theta", &r.theta), ("upsilon", &r.upsilon), ("omega_prime", &r.omega_prime), ("psi", &r.psi), ("beta_prime", &r.beta_prime)] {
            if let Some(v) = v {
                emit(name, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radii_and_volumes() {
        let (a, b) = shrunk_radii(1.0, 0.3, 1);
        assert_eq!((a, b), (0.9, 0.8));
        let (a, b) = shrunk_radii(2.0, 0.3, 2);
        assert!((ball_volume(2, a) - 0.9 * ball_volume(2, 2.0)).abs() < 1e-12);
        assert!((ball_volume(2, b) - 0.8 * ball_volume(2, 2.0)).abs() < 1e-12);
        assert!((ball_volume(3, 1.0) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-14);
        assert_eq!(ball_volume(1, 0.5), 1.0);
    }

    #[test]
    fn invert_shift_examples() {
        let inv = invert_shift(&[0.3], &mut |_| Ok(vec![0.0]), 1.0).unwrap();
        assert_eq!(inv.mu0, vec![0.3]);
        let inv = invert_shift(&[0.3], &mut |_| Ok(vec![0.01]), 1.0).unwrap();
        assert!((inv.mu0[0] - 0.29).abs() < 1e-15);
        let c = 0.2;
        let inv = invert_shift(&[0.6], &mut |m| Ok(vec![c * m[0]]), 1.0).unwrap();
        assert!((inv.mu0[0] - 0.6 / (1.0 + c)).abs() < 1e-12);
        assert!(inv.contraction > 0.0 && inv.contraction < 1.0);
        let bad = invert_shift(&[0.6], &mut |m| Ok(vec![-1.5 * m[0]]), 1.0);
        assert!(matches!(bad, Err(Error::ContractionFailed(_))));
    }
}
