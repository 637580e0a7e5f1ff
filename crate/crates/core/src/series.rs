//! Truncated Fourier–Taylor series.
//!
//! A [`FourierTaylorField`] is a finite sum of terms
//! `c · trig(⟨k, (x, X)⟩) · y^dy z^dz σ^dσ μ^dμ` with `trig ∈ {cos, sin}` and
//! vector coefficients `c`. Terms are kept in a canonical form: the first
//! non-zero entry of `k` is positive, `sin` terms with `k = 0` are dropped and
//! duplicates are merged.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Counts of the polynomial variables of a field, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarLayout {
    pub y: usize,
    pub z: usize,
    pub sigma: usize,
    pub mu: usize,
}

impl VarLayout {
    pub fn new(m: usize, p: usize, s: usize) -> Self {
        Self { y: m, z: 2 * p, sigma: m, mu: s }
    }

    pub fn total(&self) -> usize {
        self.y + self.z + self.sigma + self.mu
    }

    pub fn y_range(&self) -> std::ops::Range<usize> {
        0..self.y
    }

    pub fn z_range(&self) -> std::ops::Range<usize> {
        self.y..self.y + self.z
    }

    pub fn sigma_range(&self) -> std::ops::Range<usize> {
        self.y + self.z..self.y + self.z + self.sigma
    }

    pub fn mu_range(&self) -> std::ops::Range<usize> {
        self.y + self.z + self.sigma..self.total()
    }
}

/// Sparse multivariate polynomial with scalar coefficients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Poly {
    pub nvars: usize,
    pub terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    pub fn var(nvars: usize, j: usize) -> Self {
        let mut d = vec![0; nvars];
        d[j] = 1;
        let mut p = Self::zero(nvars);
        p.add_term(d, 1.0);
        p
    }

    pub fn add_term(&mut self, d: Vec<u32>, c: f64) {
        if c == 0.0 {
            return;
        }
        match self.terms.entry(d) {
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
            Entry::Vacant(v) => {
                v.insert(c);
            }
        }
    }

    pub fn add(&self, o: &Poly) -> Poly {
        let mut r = self.clone();
        for (d, c) in &o.terms {
            r.add_term(d.clone(), *c);
        }
        r
    }

    pub fn scale(&self, a: f64) -> Poly {
        let mut r = Poly::zero(self.nvars);
        for (d, c) in &self.terms {
            r.add_term(d.clone(), a * c);
        }
        r
    }

    pub fn mul(&self, o: &Poly) -> Poly {
        let mut r = Poly::zero(self.nvars);
        for (d1, c1) in &self.terms {
            for (d2, c2) in &o.terms {
                let d: Vec<u32> = d1.iter().zip(d2).map(|(a, b)| a + b).collect();
                r.add_term(d, c1 * c2);
            }
        }
        r
    }

    pub fn pow(&self, e: u32) -> Poly {
        let mut r = Poly::constant(self.nvars, 1.0);
        for _ in 0..e {
            r = r.mul(self);
        }
        r
    }

    /// Composition `p(images[0], images[1], …)`.
    pub fn substitute(&self, images: &[Poly]) -> Poly {
        let nv = images.first().map_or(self.nvars, |p| p.nvars);
        let mut r = Poly::zero(nv);
        for (d, c) in &self.terms {
            let mut t = Poly::constant(nv, *c);
            for (j, &e) in d.iter().enumerate() {
                if e > 0 {
                    t = t.mul(&images[j].pow(e));
                }
            }
            r = r.add(&t);
        }
        r
    }
}

/// Trigonometric basis function of a Fourier term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Cos,
    Sin,
}

/// One Fourier–Taylor term with a vector coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct Term<T> {
    pub k: Vec<i64>,
    pub basis: Basis,
    pub d: Vec<u32>,
    pub c: Vec<T>,
}

/// Truncated Fourier–Taylor series with values in `R^target_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierTaylorField<T> {
    pub target_dim: usize,
    /// (n, N): number of internal angles x and external angles X
    pub angle_dims: (usize, usize),
    pub vars: VarLayout,
    pub terms: Vec<Term<T>>,
}

fn canonical_mode(k: &[i64]) -> (Vec<i64>, f64) {
    match k.iter().find(|&&v| v != 0) {
        Some(&v) if v < 0 => (k.iter().map(|x| -x).collect(), -1.0),
        _ => (k.to_vec(), 1.0),
    }
}

impl<T: Scalar> FourierTaylorField<T> {
    pub fn zero(target_dim: usize, angle_dims: (usize, usize), vars: VarLayout) -> Self {
        Self { target_dim, angle_dims, vars, terms: Vec::new() }
    }

    pub fn n_angles(&self) -> usize {
        self.angle_dims.0 + self.angle_dims.1
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Adds a term, canonicalizing its mode and merging with an existing one.
    pub fn push(&mut self, k: Vec<i64>, basis: Basis, d: Vec<u32>, c: Vec<T>) {
        assert_eq!(k.len(), self.n_angles(), "mode length");
        assert_eq!(d.len(), self.vars.total(), "monomial length");
        assert_eq!(c.len(), self.target_dim, "coefficient length");
        let (k, sign) = canonical_mode(&k);
        let zero_mode = k.iter().all(|&v| v == 0);
        if basis == Basis::Sin && zero_mode {
            return;
        }
        let s = if basis == Basis::Sin { T::cst(sign) } else { T::one() };
        let c: Vec<T> = c.into_iter().map(|v| v * s).collect();
        if let Some(t) = self
            .terms
            .iter_mut()
            .find(|t| t.k == k && t.basis == basis && t.d == d)
        {
            for (a, b) in t.c.iter_mut().zip(c) {
                *a = *a + b;
            }
            return;
        }
        self.terms.push(Term { k, basis, d, c });
    }

    /// Drops terms whose coefficients are all zero.
    pub fn prune(&mut self) {
        self.terms.retain(|t| t.c.iter().any(|v| !v.is_zero()));
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = self.clone();
        for t in &o.terms {
            r.push(t.k.clone(), t.basis, t.d.clone(), t.c.clone());
        }
        r.prune();
        r
    }

    pub fn scale(&self, a: T) -> Self {
        let mut r = self.clone();
        for t in &mut r.terms {
            for v in &mut t.c {
                *v = *v * a;
            }
        }
        r.prune();
        r
    }

    /// Largest absolute coefficient.
    pub fn max_abs_coeff(&self) -> f64 {
        self.terms
            .iter()
            .flat_map(|t| t.c.iter())
            .map(|v| v.value().abs())
            .fold(0.0, f64::max)
    }

    /// Largest ℓ1 norm of a stored mode and largest total degree.
    pub fn truncation(&self) -> (i64, u32) {
        let kmax = self
            .terms
            .iter()
            .map(|t| t.k.iter().map(|v| v.abs()).sum::<i64>())
            .max()
            .unwrap_or(0);
        let dmax = self.terms.iter().map(|t| t.d.iter().sum::<u32>()).max().unwrap_or(0);
        (kmax, dmax)
    }

    /// Evaluates the series at `angles = (x, X)` and `vars = (y, z, σ, μ)`.
    pub fn eval<U: Scalar>(&self, angles: &[U], vars: &[U]) -> Vec<U> {
        let mut out = vec![U::zero(); self.target_dim];
        self.eval_into(angles, vars, &mut out);
        out
    }

    /// Accumulates the series value into `out`.
    pub fn eval_into<U: Scalar>(&self, angles: &[U], vars: &[U], out: &mut [U]) {
        debug_assert_eq!(angles.len(), self.n_angles());
        debug_assert_eq!(vars.len(), self.vars.total());
        for t in &self.terms {
            let mut phase = U::zero();
            let mut has_phase = false;
            for (ki, th) in t.k.iter().zip(angles) {
                if *ki != 0 {
                    phase = phase + U::cst(*ki as f64) * *th;
                    has_phase = true;
                }
            }
            let trig = match t.basis {
                Basis::Cos if has_phase => phase.cos(),
                Basis::Cos => U::one(),
                Basis::Sin => phase.sin(),
            };
            let mut mono = trig;
            for (e, v) in t.d.iter().zip(vars) {
                if *e > 0 {
                    mono = mono * v.powi(*e as i32);
                }
            }
            for (o, c) in out.iter_mut().zip(&t.c) {
                *o = *o + U::cst(c.value()) * mono;
            }
        }
    }

    /// Total degree of a term's monomial restricted to a variable range.
    pub fn degree_in(t: &Term<T>, range: std::ops::Range<usize>) -> u32 {
        t.d[range].iter().sum()
    }

    /// Returns the field after applying a polynomial change of the
    /// polynomial variables and the angle reflection `θ ↦ sign·θ`.
    pub fn substitute(&self, images: &[Poly], reflect_angles: bool) -> Self {
        let nv = self.vars.total();
        let mut r = Self::zero(self.target_dim, self.angle_dims, self.vars);
        for t in &self.terms {
            let mut mono = Poly::zero(nv);
            mono.add_term(t.d.clone(), 1.0);
            let image = mono.substitute(images);
            let sgn = if reflect_angles && t.basis == Basis::Sin { -1.0 } else { 1.0 };
            for (d, c) in image.terms {
                let coeff: Vec<T> = t.c.iter().map(|v| *v * T::cst(sgn * c)).collect();
                r.push(t.k.clone(), t.basis, d, coeff);
            }
        }
        r.prune();
        r
    }

    /// Exact partial derivative with respect to polynomial variable `j`.
    pub fn partial(&self, j: usize) -> Self {
        let mut r = Self::zero(self.target_dim, self.angle_dims, self.vars);
        for t in &self.terms {
            if t.d[j] > 0 {
                let mut d = t.d.clone();
                let e = T::cst(d[j] as f64);
                d[j] -= 1;
                r.push(t.k.clone(), t.basis, d, t.c.iter().map(|v| *v * e).collect());
            }
        }
        r.prune();
        r
    }

    /// Applies a linear map to the coefficient vectors: `c ↦ A c`.
    pub fn map_values(&self, a: &DMatrix<f64>) -> Self {
        assert_eq!(a.ncols(), self.target_dim);
        let mut r = Self::zero(a.nrows(), self.angle_dims, self.vars);
        for t in &self.terms {
            let c: Vec<T> = (0..a.nrows())
                .map(|i| {
                    t.c.iter()
                        .enumerate()
                        .fold(T::zero(), |acc, (j, v)| acc + T::cst(a[(i, j)]) * *v)
                })
                .collect();
            r.push(t.k.clone(), t.basis, t.d.clone(), c);
        }
        r.prune();
        r
    }

    pub fn to_f64(&self) -> FourierTaylorField<f64> {
        FourierTaylorField {
            target_dim: self.target_dim,
            angle_dims: self.angle_dims,
            vars: self.vars,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    k: t.k.clone(),
                    basis: t.basis,
                    d: t.d.clone(),
                    c: t.c.iter().map(|v| v.value()).collect(),
                })
                .collect(),
        }
    }
}

/// Matrix-valued polynomial `μ ↦ Σ_q C_q μ^q`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixPoly {
    pub nrows: usize,
    pub ncols: usize,
    pub s: usize,
    pub terms: Vec<(Vec<u32>, DMatrix<f64>)>,
}

impl MatrixPoly {
    pub fn zero(nrows: usize, ncols: usize, s: usize) -> Self {
        Self { nrows, ncols, s, terms: Vec::new() }
    }

    pub fn constant(m: DMatrix<f64>, s: usize) -> Self {
        let (r, c) = m.shape();
        let mut p = Self::zero(r, c, s);
        p.push(vec![0; s], m);
        p
    }

    pub fn push(&mut self, d: Vec<u32>, c: DMatrix<f64>) {
        assert_eq!(d.len(), self.s);
        assert_eq!(c.shape(), (self.nrows, self.ncols));
        if let Some((_, m)) = self.terms.iter_mut().find(|(e, _)| *e == d) {
            *m += c;
        } else {
            self.terms.push((d, c));
        }
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|(d, _)| d.iter().sum()).max().unwrap_or(0)
    }

    pub fn eval(&self, mu: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for (d, c) in &self.terms {
            let w: f64 = d.iter().zip(mu).map(|(e, v)| v.powi(*e as i32)).product();
            out += c * w;
        }
        out
    }

    /// Generic evaluation (used with dual numbers).
    pub fn eval_generic<U: Scalar>(&self, mu: &[U]) -> Vec<U> {
        let mut out = vec![U::zero(); self.nrows * self.ncols];
        for (d, c) in &self.terms {
            let mut w = U::one();
            for (e, v) in d.iter().zip(mu) {
                if *e > 0 {
                    w = w * v.powi(*e as i32);
                }
            }
            for i in 0..self.nrows {
                for j in 0..self.ncols {
                    out[i * self.ncols + j] = out[i * self.ncols + j] + U::cst(c[(i, j)]) * w;
                }
            }
        }
        out
    }

    /// Exact partial derivative with respect to `μ_j`.
    pub fn partial(&self, j: usize) -> MatrixPoly {
        let mut r = Self::zero(self.nrows, self.ncols, self.s);
        for (d, c) in &self.terms {
            if d[j] > 0 {
                let mut e = d.clone();
                e[j] -= 1;
                r.push(e, c * d[j] as f64);
            }
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> VarLayout {
        VarLayout::new(1, 0, 1)
    }

    #[test]
    fn canonical_form_merges_negative_modes() {
        let mut f = FourierTaylorField::<f64>::zero(1, (0, 1), layout());
        f.push(vec![1], Basis::Sin, vec![0, 0, 0], vec![1.0]);
        f.push(vec![-1], Basis::Sin, vec![0, 0, 0], vec![1.0]);
        f.prune();
        assert!(f.is_zero());
        f.push(vec![-2], Basis::Cos, vec![0, 0, 0], vec![0.5]);
        assert_eq!(f.terms[0].k, vec![2]);
        f.push(vec![0], Basis::Sin, vec![0, 0, 0], vec![3.0]);
        assert_eq!(f.terms.len(), 1);
    }

    #[test]
    fn eval_matches_direct_formula() {
        let mut f = FourierTaylorField::<f64>::zero(1, (0, 1), layout());
        f.push(vec![1], Basis::Cos, vec![2, 1, 0], vec![3.0]);
        let v = f.eval(&[0.4f64], &[0.5, 2.0, 0.0]);
        assert!((v[0] - 3.0 * 0.4f64.cos() * 0.25 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn substitution_expands_linear_images() {
        // (a + b)^2 with a -> a + b, b -> b
        let mut p = Poly::zero(2);
        p.add_term(vec![2, 0], 1.0);
        let img = vec![Poly::var(2, 0).add(&Poly::var(2, 1)), Poly::var(2, 1)];
        let q = p.substitute(&img);
        assert_eq!(q.terms.get(&vec![2, 0]), Some(&1.0));
        assert_eq!(q.terms.get(&vec![1, 1]), Some(&2.0));
        assert_eq!(q.terms.get(&vec![0, 2]), Some(&1.0));
    }

    #[test]
    fn matrix_poly_partial() {
        let mut m = MatrixPoly::zero(1, 1, 2);
        m.push(vec![2, 1], DMatrix::from_element(1, 1, 3.0));
        let d = m.partial(0).eval(&[2.0, 5.0]);
        assert_eq!(d[(0, 0)], 3.0 * 2.0 * 2.0 * 5.0);
    }
}
