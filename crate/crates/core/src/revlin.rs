//! Involutions, infinitesimally reversible matrices and their unfoldings.
//!
//! A matrix `M` is infinitesimally reversible with respect to an involution
//! `R` when `MR = -RM`; its eigenvalues then come in pairs `(λ, -λ)`. For a
//! simple spectrum with `R` of signature `(p, p)` the spectrum is recorded as
//! `𝔖(ν₁, ν₂, ν₃; α, β)`: `ν₁` real pairs `±α`, `ν₂` imaginary pairs `±iβ` and
//! `ν₃` quadruples `±α ± iβ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::scalar::Scalar;
use crate::series::MatrixPoly;

/// Tolerance for `R·R = I`.
pub const INVOLUTION_TOL: f64 = 1e-12;
/// Default eigenvalue classification tolerance.
pub const CLASSIFY_TOL: f64 = 1e-9;
/// Singular-value threshold for submersivity ranks.
pub const RANK_TOL: f64 = 1e-9;

/// A validated involution of signature `(p, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InvolutionMatrix {
    r: DMatrix<f64>,
    p: usize,
    /// columns: basis of the +1 eigenspace followed by the -1 eigenspace
    eigenbasis: DMatrix<f64>,
    eigenbasis_inv: DMatrix<f64>,
}

impl InvolutionMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        2 * self.p
    }

    /// `P` with `P⁻¹ R P = diag(I_p, -I_p)`.
    pub fn eigenbasis(&self) -> &DMatrix<f64> {
        &self.eigenbasis
    }

    pub fn eigenbasis_inv(&self) -> &DMatrix<f64> {
        &self.eigenbasis_inv
    }

    /// The trivial involution on `R^0`.
    pub fn empty() -> Self {
        Self {
            r: DMatrix::zeros(0, 0),
            p: 0,
            eigenbasis: DMatrix::zeros(0, 0),
            eigenbasis_inv: DMatrix::zeros(0, 0),
        }
    }
}

pub fn check_involution(r: &DMatrix<f64>) -> Result<InvolutionMatrix> {
    let n = r.nrows();
    if r.ncols() != n {
        return Err(Error::DimensionMismatch(format!("R is {}x{}", n, r.ncols())));
    }
    if n % 2 != 0 {
        return Err(Error::DimensionMismatch(format!("R has odd dimension {n}")));
    }
    if n == 0 {
        return Ok(InvolutionMatrix::empty());
    }
    let id = DMatrix::<f64>::identity(n, n);
    let defect = linalg::max_abs(&(r * r - &id));
    if defect > INVOLUTION_TOL {
        return Err(Error::NotInvolutive(defect));
    }
    let plus = linalg::range_basis(&((&id + r) * 0.5), 1e-8);
    let minus = linalg::range_basis(&((&id - r) * 0.5), 1e-8);
    if plus.ncols() != minus.ncols() || plus.ncols() + minus.ncols() != n {
        return Err(Error::WrongSignature { plus: plus.ncols(), minus: minus.ncols() });
    }
    let mut eb = DMatrix::zeros(n, n);
    eb.view_mut((0, 0), (n, plus.ncols())).copy_from(&plus);
    eb.view_mut((0, plus.ncols()), (n, minus.ncols())).copy_from(&minus);
    let inv = eb.clone().try_inverse().ok_or_else(|| {
        Error::NotInvolutive(f64::NAN)
    })?;
    Ok(InvolutionMatrix { r: r.clone(), p: n / 2, eigenbasis: eb, eigenbasis_inv: inv })
}

/// Max-norm of `MR + RM`.
pub fn reversibility_defect(m: &DMatrix<f64>, r: &InvolutionMatrix) -> Result<f64> {
    if m.shape() != r.matrix().shape() {
        return Err(Error::DimensionMismatch(format!(
            "M is {:?}, R is {:?}",
            m.shape(),
            r.matrix().shape()
        )));
    }
    Ok(linalg::max_abs(&(m * r.matrix() + r.matrix() * m)))
}

/// Spectrum form `𝔖(ν₁, ν₂, ν₃; α, β)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversibleSpectrum {
    pub nu1: usize,
    pub nu2: usize,
    pub nu3: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ReversibleSpectrum {
    pub fn p(&self) -> usize {
        self.nu1 + self.nu2 + 2 * self.nu3
    }

    /// `ν = ν₂ + ν₃`, the length of β.
    pub fn nu(&self) -> usize {
        self.nu2 + self.nu3
    }

    /// Rebuilds the full eigenvalue multiset.
    pub fn eigenvalues(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(2 * self.p());
        for a in &self.alpha[..self.nu1] {
            out.push(C64::new(*a, 0.0));
            out.push(C64::new(-*a, 0.0));
        }
        for b in &self.beta[..self.nu2] {
            out.push(C64::new(0.0, *b));
            out.push(C64::new(0.0, -*b));
        }
        for j in 0..self.nu3 {
            let (a, b) = (self.alpha[self.nu1 + j], self.beta[self.nu2 + j]);
            for sa in [1.0, -1.0] {
                for sb in [1.0, -1.0] {
                    out.push(C64::new(sa * a, sb * b));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PairKind {
    Real,
    Imaginary,
    Quadruple,
}

/// Representative eigenvalues (one per pair or quadruple) in the order of
/// the α and β vectors.
struct Classified {
    spectrum: ReversibleSpectrum,
    reps: Vec<(C64, PairKind)>,
}

fn classify_inner(m: &DMatrix<f64>, r: &InvolutionMatrix, tol: f64) -> Result<Classified> {
    let defect = reversibility_defect(m, r)?;
    let scale = linalg::max_abs(m).max(1.0);
    if defect > tol * scale {
        return Err(Error::NotReversible(format!("|MR + RM| = {defect:e}")));
    }
    let eig = linalg::eigenvalues(m);
    if let Some(z) = eig.iter().map(|l| l.norm()).reduce(f64::min) {
        if z < tol {
            return Err(Error::SingularMatrix(z));
        }
    }
    let mut gap = f64::INFINITY;
    for i in 0..eig.len() {
        for j in i + 1..eig.len() {
            gap = gap.min((eig[i] - eig[j]).norm());
        }
    }
    if gap < tol {
        return Err(Error::MultipleEigenvalues { gap, tol });
    }
    let mut reals = Vec::new();
    let mut imags = Vec::new();
    let mut quads = Vec::new();
    for l in &eig {
        let (re, im) = (l.re, l.im);
        if re.abs() <= tol && im > tol {
            imags.push(im);
        } else if im.abs() <= tol && re > tol {
            reals.push(re);
        } else if re > tol && im > tol {
            quads.push((re, im));
        }
    }
    // every eigenvalue must have its negative in the spectrum
    for l in &eig {
        let partner = eig.iter().map(|o| (o + l).norm()).fold(f64::INFINITY, f64::min);
        if partner > 1e-6 * scale {
            return Err(Error::ClassificationFailed(format!("eigenvalue {l} has no partner -λ")));
        }
    }
    let p = r.p();
    if reals.len() + imags.len() + 2 * quads.len() != p {
        return Err(Error::ClassificationFailed(format!(
            "{} real, {} imaginary, {} quadruple pairs do not add up to p = {p}",
            reals.len(),
            imags.len(),
            quads.len()
        )));
    }
    reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    imags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quads.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut reps = Vec::with_capacity(p);
    reps.extend(reals.iter().map(|a| (C64::new(*a, 0.0), PairKind::Real)));
    reps.extend(imags.iter().map(|b| (C64::new(0.0, *b), PairKind::Imaginary)));
    reps.extend(quads.iter().map(|(a, b)| (C64::new(*a, *b), PairKind::Quadruple)));
    let alpha = reals.iter().copied().chain(quads.iter().map(|q| q.0)).collect();
    let beta = imags.iter().copied().chain(quads.iter().map(|q| q.1)).collect();
    Ok(Classified {
        spectrum: ReversibleSpectrum {
            nu1: reals.len(),
            nu2: imags.len(),
            nu3: quads.len(),
            alpha,
            beta,
        },
        reps,
    })
}

pub fn classify_spectrum(m: &DMatrix<f64>, r: &InvolutionMatrix, tol: f64) -> Result<ReversibleSpectrum> {
    classify_inner(m, r, tol).map(|c| c.spectrum)
}

/// Derivatives of `(α, β)` (stacked, length p) along a matrix direction.
fn spectral_derivative(m: &DMatrix<f64>, cls: &Classified, dm: &DMatrix<f64>) -> Vec<f64> {
    let sp = &cls.spectrum;
    let mut d_alpha = Vec::with_capacity(sp.nu1 + sp.nu3);
    let mut d_beta = Vec::with_capacity(sp.nu2 + sp.nu3);
    let mut quad_beta = Vec::new();
    for (lambda, kind) in &cls.reps {
        let dl = linalg::eigenvalue_derivative(m, *lambda, dm);
        match kind {
            PairKind::Real => d_alpha.push(dl.re),
            PairKind::Imaginary => d_beta.push(dl.im),
            PairKind::Quadruple => {
                d_alpha.push(dl.re);
                quad_beta.push(dl.im);
            }
        }
    }
    // reps order is reals, imaginaries, quadruples, so the α list is already
    // reals then quadruples
    d_beta.extend(quad_beta);
    d_alpha.into_iter().chain(d_beta).collect()
}

/// `M_new(μ, χ) = M(μ) + Σ χ_j V_j` with every `V_j` anti-commuting with `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct Unfolding {
    pub base: MatrixPoly,
    pub directions: Vec<DMatrix<f64>>,
    pub involution: InvolutionMatrix,
}

impl Unfolding {
    /// Number of unfolding parameters `S`.
    pub fn s_unf(&self) -> usize {
        self.directions.len()
    }

    pub fn s(&self) -> usize {
        self.base.s
    }

    pub fn p(&self) -> usize {
        self.involution.p()
    }

    pub fn eval(&self, mu: &[f64], chi: &[f64]) -> DMatrix<f64> {
        let mut m = self.base.eval(mu);
        for (c, v) in chi.iter().zip(&self.directions) {
            m += v * *c;
        }
        m
    }

    /// Row-major entries of `M_new`, generic over the scalar.
    pub fn eval_generic<U: Scalar>(&self, mu: &[U], chi: &[U]) -> Vec<U> {
        let mut out = self.base.eval_generic(mu);
        let n = self.base.ncols;
        for (c, v) in chi.iter().zip(&self.directions) {
            for i in 0..v.nrows() {
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] + U::cst(v[(i, j)]) * *c;
                }
            }
        }
        out
    }

    pub fn spectrum(&self, mu: &[f64], chi: &[f64]) -> Result<ReversibleSpectrum> {
        classify_spectrum(&self.eval(mu, chi), &self.involution, CLASSIFY_TOL)
    }

    /// `p × (s + S)` Jacobian of `(μ, χ) ↦ (α_new, β_new)`.
    pub fn spectral_jacobian(&self, mu: &[f64], chi: &[f64]) -> Result<DMatrix<f64>> {
        let p = self.p();
        let (s, ss) = (self.s(), self.s_unf());
        let mut jac = DMatrix::zeros(p, s + ss);
        if p == 0 {
            return Ok(jac);
        }
        let m = self.eval(mu, chi);
        let cls = classify_inner(&m, &self.involution, CLASSIFY_TOL)?;
        for j in 0..s {
            let dm = self.base.partial(j).eval(mu);
            let col = spectral_derivative(&m, &cls, &dm);
            for (i, v) in col.into_iter().enumerate() {
                jac[(i, j)] = v;
            }
        }
        for (j, v) in self.directions.iter().enumerate() {
            let col = spectral_derivative(&m, &cls, v);
            for (i, d) in col.into_iter().enumerate() {
                jac[(i, s + j)] = d;
            }
        }
        Ok(jac)
    }
}

/// Block-wise unfolding with `S = p` directions.
///
/// Directions are picked greedily from the standard basis of the
/// anti-commuting matrices written in the eigenbasis of `R`
/// (`[[0, X], [Y, 0]]`, upper-right entries first), keeping each candidate
/// that raises the rank of the χ-part of the spectral Jacobian at `μ = 0`.
/// This is one valid versal choice, not a normal form.
pub fn build_unfolding(m: &MatrixPoly, r: &InvolutionMatrix) -> Result<Unfolding> {
    let p = r.p();
    if m.nrows != 2 * p || m.ncols != 2 * p {
        return Err(Error::DimensionMismatch(format!(
            "M(μ) is {}x{}, R is {}x{}",
            m.nrows,
            m.ncols,
            2 * p,
            2 * p
        )));
    }
    let mut unf = Unfolding { base: m.clone(), directions: Vec::new(), involution: r.clone() };
    if p == 0 {
        return Ok(unf);
    }
    let zero = vec![0.0; m.s];
    let m0 = m.eval(&zero);
    let cls = classify_inner(&m0, r, CLASSIFY_TOL)
        .map_err(|e| Error::ClassificationFailed(format!("M(0): {e}")))?;
    let (pm, pinv) = (r.eigenbasis(), r.eigenbasis_inv());
    let mut candidates = Vec::with_capacity(2 * p * p);
    for (row_off, col_off) in [(0, p), (p, 0)] {
        for i in 0..p {
            for j in 0..p {
                let mut e = DMatrix::zeros(2 * p, 2 * p);
                e[(row_off + i, col_off + j)] = 1.0;
                candidates.push(pm * e * pinv);
            }
        }
    }
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for v in candidates {
        if unf.directions.len() == p {
            break;
        }
        let d = spectral_derivative(&m0, &cls, &v);
        let mut trial = cols.clone();
        trial.push(d.clone());
        let jm = DMatrix::from_fn(p, trial.len(), |i, j| trial[j][i]);
        if linalg::numerical_rank(&jm, RANK_TOL) == trial.len() {
            cols = trial;
            unf.directions.push(v);
        }
    }
    let rank = submersivity_rank(&unf, &zero, &vec![0.0; unf.s_unf()])?;
    if unf.directions.len() < p || rank < p {
        return Err(Error::SubmersivityFailed { rank, required: p });
    }
    Ok(unf)
}

/// Numerical rank of the spectral Jacobian at `(μ, χ)`.
pub fn submersivity_rank(unf: &Unfolding, mu: &[f64], chi: &[f64]) -> Result<usize> {
    if unf.p() == 0 {
        return Ok(0);
    }
    Ok(linalg::numerical_rank(&unf.spectral_jacobian(mu, chi)?, RANK_TOL))
}
