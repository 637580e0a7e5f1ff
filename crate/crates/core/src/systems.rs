//! Model systems: ingestion, validation and normalization.
//!
//! A model is the family
//!
//! ```text
//! ẋ = F(μ) + Δ(σ,μ) + ξ(y,z,σ,μ) + f(x,y,z,σ,μ,X)
//! ẏ = σ + η(y,z,σ,μ) + g(x,y,z,σ,μ,X)            (+ Z(μ)z before normalization)
//! ż = M(μ)z + ζ(y,z,σ,μ) + h(x,y,z,σ,μ,X)
//! Ẋ = Ω
//! ```
//!
//! reversible under `(x, y, z, X) ↦ (-x, -y, Rz, -X)`. All functions are
//! truncated Fourier–Taylor series.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dioph::{self, DiophParams};
use crate::error::{Error, Result};
use crate::linalg;
use crate::revlin::{self, InvolutionMatrix};
use crate::scalar::Scalar;
use crate::series::{Basis, FourierTaylorField, MatrixPoly, Poly, Term, VarLayout};

type Field = FourierTaylorField<f64>;

/// Degree cap in μ for series produced by normalization.
pub const MU_DEGREE_CAP: u32 = 4;
/// Threshold on the exact parity residual for accepting a model.
pub const REVERSIBILITY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub s: usize,
}

impl Dims {
    pub fn vars(&self) -> VarLayout {
        VarLayout::new(self.m, self.p, self.s)
    }

    pub fn angle_dims(&self) -> (usize, usize) {
        (self.n, self.big_n)
    }

    /// Phase-space dimension `n + m + 2p + N`.
    pub fn phase_dim(&self) -> usize {
        self.n + self.m + 2 * self.p + self.big_n
    }
}

/// `(τ*, γ*)` for the forcing frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingDioph {
    pub tau: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    pub dims: Dims,
    pub omega: Vec<f64>,
    pub r: InvolutionMatrix,
    pub dioph_star: ForcingDioph,
    /// F(μ), stored as a field with only μ-monomials and `k = 0`
    pub freq: Field,
    pub delta: Field,
    pub m: MatrixPoly,
    /// explicit `Z(μ)z` term of the y-equation, removed by [`eliminate_zz`]
    pub z_coupling: Option<MatrixPoly>,
    pub xi: Field,
    pub eta: Field,
    pub zeta: Field,
    pub f: Field,
    pub g: Field,
    pub h: Field,
}

/// The three polynomial components of the full vector field.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledField {
    pub vx: Field,
    pub vy: Field,
    pub vz: Field,
}

impl AssembledField {
    pub fn eval<U: Scalar>(&self, angles: &[U], vars: &[U]) -> (Vec<U>, Vec<U>, Vec<U>) {
        (self.vx.eval(angles, vars), self.vy.eval(angles, vars), self.vz.eval(angles, vars))
    }
}

// ---------------------------------------------------------------- JSON model

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MonoDoc {
    #[serde(default)]
    y: Vec<u32>,
    #[serde(default)]
    z: Vec<u32>,
    #[serde(default)]
    sigma: Vec<u32>,
    #[serde(default)]
    mu: Vec<u32>,
}

fn default_basis() -> Basis {
    Basis::Cos
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    #[serde(default)]
    k: Vec<i64>,
    #[serde(default = "default_basis")]
    basis: Basis,
    #[serde(default)]
    d: MonoDoc,
    c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatMonoDoc {
    #[serde(default)]
    mu: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatEntryDoc {
    #[serde(default)]
    d: Option<MatMonoDoc>,
    /// row-major rows
    c: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldsDoc {
    #[serde(rename = "F", default)]
    freq: Vec<EntryDoc>,
    #[serde(rename = "Delta", default)]
    delta: Vec<EntryDoc>,
    #[serde(rename = "M", default)]
    m: Vec<MatEntryDoc>,
    #[serde(rename = "Z", default, skip_serializing_if = "Option::is_none")]
    z: Option<Vec<MatEntryDoc>>,
    #[serde(default)]
    xi: Vec<EntryDoc>,
    #[serde(default)]
    eta: Vec<EntryDoc>,
    #[serde(default)]
    zeta: Vec<EntryDoc>,
    #[serde(default)]
    f: Vec<EntryDoc>,
    #[serde(default)]
    g: Vec<EntryDoc>,
    #[serde(default)]
    h: Vec<EntryDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    dims: Dims,
    omega: Vec<f64>,
    #[serde(rename = "R", default)]
    r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dioph_star: Option<ForcingDioph>,
    fields: FieldsDoc,
}

fn pad(v: &[u32], len: usize, what: &str) -> Result<Vec<u32>> {
    if v.is_empty() {
        return Ok(vec![0; len]);
    }
    if v.len() != len {
        return Err(Error::Schema(format!("{what} has length {}, expected {len}", v.len())));
    }
    Ok(v.to_vec())
}

fn field_from_doc(name: &str, entries: &[EntryDoc], target: usize, dims: &Dims) -> Result<Field> {
    let vars = dims.vars();
    let mut out = Field::zero(target, dims.angle_dims(), vars);
    for (i, e) in entries.iter().enumerate() {
        let at = |what: &str| format!("{name}[{i}].{what}");
        let k = if e.k.is_empty() {
            vec![0; dims.n + dims.big_n]
        } else if e.k.len() != dims.n + dims.big_n {
            return Err(Error::Schema(format!("{} has length {}, expected {}", at("k"), e.k.len(), dims.n + dims.big_n)));
        } else {
            e.k.clone()
        };
        if e.c.len() != target {
            return Err(Error::Schema(format!("{} has length {}, expected {target}", at("c"), e.c.len())));
        }
        if e.c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("{} is not finite", at("c"))));
        }
        let mut d = pad(&e.d.y, vars.y, &at("d.y"))?;
        d.extend(pad(&e.d.z, vars.z, &at("d.z"))?);
        d.extend(pad(&e.d.sigma, vars.sigma, &at("d.sigma"))?);
        d.extend(pad(&e.d.mu, vars.mu, &at("d.mu"))?);
        out.push(k, e.basis, d, e.c.clone());
    }
    out.prune();
    Ok(out)
}

fn field_to_doc(f: &Field) -> Vec<EntryDoc> {
    let v = f.vars;
    f.terms
        .iter()
        .map(|t| EntryDoc {
            k: t.k.clone(),
            basis: t.basis,
            d: MonoDoc {
                y: t.d[v.y_range()].to_vec(),
                z: t.d[v.z_range()].to_vec(),
                sigma: t.d[v.sigma_range()].to_vec(),
                mu: t.d[v.mu_range()].to_vec(),
            },
            c: t.c.clone(),
        })
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nr: usize, nc: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Schema(format!("{what} must be {nr}x{nc}")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Schema(format!("{what} is not finite")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn matpoly_from_doc(name: &str, entries: &[MatEntryDoc], nr: usize, nc: usize, s: usize) -> Result<MatrixPoly> {
    let mut out = MatrixPoly::zero(nr, nc, s);
    for (i, e) in entries.iter().enumerate() {
        let d = match &e.d {
            Some(md) => pad(&md.mu, s, &format!("{name}[{i}].d.mu"))?,
            None => vec![0; s],
        };
        out.push(d, matrix_from_rows(&e.c, nr, nc, &format!("{name}[{i}].c"))?);
    }
    Ok(out)
}

fn matpoly_to_doc(m: &MatrixPoly) -> Vec<MatEntryDoc> {
    m.terms
        .iter()
        .map(|(d, c)| MatEntryDoc { d: Some(MatMonoDoc { mu: d.clone() }), c: matrix_to_rows(c) })
        .collect()
}

impl SystemSpec {
    /// Builds a spec from its JSON document without semantic validation.
    pub fn from_json_unchecked(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let dims = doc.dims;
        if dims.m < 1 || dims.big_n < 1 || dims.s < 1 {
            return Err(Error::Schema(format!("dims need m >= 1, N >= 1, s >= 1 (got {dims:?})")));
        }
        if doc.omega.len() != dims.big_n || doc.omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("omega must hold {} finite reals", dims.big_n)));
        }
        let r = if dims.p == 0 {
            if !doc.r.is_empty() {
                return Err(Error::Schema("R must be empty when p = 0".into()));
            }
            InvolutionMatrix::empty()
        } else {
            let rm = matrix_from_rows(&doc.r, 2 * dims.p, 2 * dims.p, "R")?;
            revlin::check_involution(&rm)?
        };
        let fd = &doc.fields;
        let mut m = matpoly_from_doc("M", &fd.m, 2 * dims.p, 2 * dims.p, dims.s)?;
        if m.terms.is_empty() && dims.p > 0 {
            return Err(Error::Schema("M is required when p > 0".into()));
        }
        m.terms.retain(|(_, c)| c.iter().any(|v| *v != 0.0) || dims.p == 0);
        let z_coupling = match &fd.z {
            Some(z) => Some(matpoly_from_doc("Z", z, dims.m, 2 * dims.p, dims.s)?),
            None => None,
        };
        let dioph_star = doc.dioph_star.unwrap_or(ForcingDioph {
            tau: (dims.big_n as f64 - 1.0).max(1.0),
            gamma: 1e-3,
        });
        Ok(Self {
            dims,
            omega: doc.omega,
            r,
            dioph_star,
            freq: field_from_doc("F", &fd.freq, dims.n, &dims)?,
            delta: field_from_doc("Delta", &fd.delta, dims.n, &dims)?,
            m,
            z_coupling,
            xi: field_from_doc("xi", &fd.xi, dims.n, &dims)?,
            eta: field_from_doc("eta", &fd.eta, dims.m, &dims)?,
            zeta: field_from_doc("zeta", &fd.zeta, 2 * dims.p, &dims)?,
            f: field_from_doc("f", &fd.f, dims.n, &dims)?,
            g: field_from_doc("g", &fd.g, dims.m, &dims)?,
            h: field_from_doc("h", &fd.h, 2 * dims.p, &dims)?,
        })
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            dims: self.dims,
            omega: self.omega.clone(),
            r: matrix_to_rows(self.r.matrix()),
            dioph_star: Some(self.dioph_star),
            fields: FieldsDoc {
                freq: field_to_doc(&self.freq),
                delta: field_to_doc(&self.delta),
                m: matpoly_to_doc(&self.m),
                z: self.z_coupling.as_ref().map(matpoly_to_doc),
                xi: field_to_doc(&self.xi),
                eta: field_to_doc(&self.eta),
                zeta: field_to_doc(&self.zeta),
                f: field_to_doc(&self.f),
                g: field_to_doc(&self.g),
                h: field_to_doc(&self.h),
            },
        };
        serde_json::to_string_pretty(&doc).expect("model serialization")
    }

    /// Empty field with this spec's layout.
    pub fn empty_field(&self, target: usize) -> Field {
        Field::zero(target, self.dims.angle_dims(), self.dims.vars())
    }

    /// Full vector field `(V_x, V_y, V_z)`; the X-component is `Ω`.
    pub fn assemble(&self) -> AssembledField {
        let v = self.dims.vars();
        let nv = v.total();
        let n_ang = self.dims.n + self.dims.big_n;
        let mut vx = self.freq.add(&self.delta).add(&self.xi).add(&self.f);
        let mut vy = self.eta.add(&self.g);
        for i in 0..self.dims.m {
            let mut d = vec![0; nv];
            d[v.sigma_range().start + i] = 1;
            let mut c = vec![0.0; self.dims.m];
            c[i] = 1.0;
            vy.push(vec![0; n_ang], Basis::Cos, d, c);
        }
        if let Some(z) = &self.z_coupling {
            vy = vy.add(&linear_z_field(z, &v, self.dims.angle_dims()));
        }
        let mut vz = self.zeta.add(&self.h);
        if self.dims.p > 0 {
            vz = vz.add(&linear_z_field(&self.m, &v, self.dims.angle_dims()));
        }
        vx.prune();
        vy.prune();
        vz.prune();
        AssembledField { vx, vy, vz }
    }

    /// Velocity at a phase point, `(ẋ, ẏ, ż, Ẋ)` concatenated.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate_field<U: Scalar>(&self, x: &[U], y: &[U], z: &[U], big_x: &[U], sigma: &[U], mu: &[U]) -> Vec<U> {
        evaluate_assembled(&self.assemble(), &self.omega, x, y, z, big_x, sigma, mu)
    }

    /// Coefficient norms of the perturbation terms.
    pub fn perturbation_norms(&self) -> PerturbationNorms {
        let l1 = |f: &Field| f.terms.iter().flat_map(|t| t.c.iter()).map(|v| v.abs()).sum::<f64>();
        PerturbationNorms {
            f_max: self.f.max_abs_coeff(),
            g_max: self.g.max_abs_coeff(),
            h_max: self.h.max_abs_coeff(),
            l1: l1(&self.f) + l1(&self.g) + l1(&self.h),
        }
    }

    pub fn max_perturbation(&self) -> f64 {
        let p = self.perturbation_norms();
        p.f_max.max(p.g_max).max(p.h_max)
    }

    /// Copy with the perturbation terms scaled by `a`.
    pub fn scaled_perturbation(&self, a: f64) -> Self {
        let mut s = self.clone();
        s.f = self.f.scale(a);
        s.g = self.g.scale(a);
        s.h = self.h.scale(a);
        s
    }

    /// Copy with `f = g = h = 0`.
    pub fn unperturbed(&self) -> Self {
        self.scaled_perturbation(0.0)
    }

    /// `F(μ)`.
    pub fn frequency(&self, mu: &[f64]) -> Vec<f64> {
        self.freq.eval(&vec![0.0; self.dims.n + self.dims.big_n], &self.param_vars(&[], mu))
    }

    /// Polynomial-variable vector `(0, 0, σ, μ)`; empty σ means zero.
    pub fn param_vars(&self, sigma: &[f64], mu: &[f64]) -> Vec<f64> {
        let v = self.dims.vars();
        let mut out = vec![0.0; v.total()];
        for (i, s) in sigma.iter().enumerate() {
            out[v.sigma_range().start + i] = *s;
        }
        out[v.mu_range()].copy_from_slice(mu);
        out
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_assembled<U: Scalar>(
    a: &AssembledField,
    omega: &[f64],
    x: &[U],
    y: &[U],
    z: &[U],
    big_x: &[U],
    sigma: &[U],
    mu: &[U],
) -> Vec<U> {
    let angles: Vec<U> = x.iter().chain(big_x).copied().collect();
    let vars: Vec<U> = y.iter().chain(z).chain(sigma).chain(mu).copied().collect();
    let (vx, vy, vz) = a.eval(&angles, &vars);
    let mut out = vx;
    out.extend(vy);
    out.extend(vz);
    out.extend(omega.iter().map(|w| U::cst(*w)));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationNorms {
    pub f_max: f64,
    pub g_max: f64,
    pub h_max: f64,
    /// sum of all |coefficients|, a bound for the sup norm at y = z = σ = μ = 0
    pub l1: f64,
}

/// Field `(y,z,σ,μ) ↦ A(μ)z` for a matrix polynomial `A`.
fn linear_z_field(a: &MatrixPoly, v: &VarLayout, angle_dims: (usize, usize)) -> Field {
    let mut out = Field::zero(a.nrows, angle_dims, *v);
    let n_ang = angle_dims.0 + angle_dims.1;
    for (q, c) in &a.terms {
        for j in 0..a.ncols {
            let mut d = vec![0; v.total()];
            d[v.z_range().start + j] = 1;
            d[v.mu_range()].copy_from_slice(q);
            out.push(vec![0; n_ang], Basis::Cos, d, c.column(j).iter().copied().collect());
        }
    }
    out.prune();
    out
}

fn order_violation(field: &str, t: &Term<f64>, detail: &str) -> Error {
    Error::OrderViolation {
        field: field.into(),
        detail: format!("term k={:?} basis={:?} d={:?}: {detail}", t.k, t.basis, t.d),
    }
}

/// Checks the structural order conditions of the unperturbed part.
pub fn check_order_conditions(spec: &SystemSpec) -> Result<()> {
    let v = spec.dims.vars();
    let yz = |t: &Term<f64>| Field::degree_in(t, v.y_range()) + Field::degree_in(t, v.z_range());
    let sig = |t: &Term<f64>| Field::degree_in(t, v.sigma_range());
    let angle_free = |name: &str, f: &Field| -> Result<()> {
        match f.terms.iter().find(|t| t.k.iter().any(|k| *k != 0)) {
            Some(t) => Err(order_violation(name, t, "depends on the angles")),
            None => Ok(()),
        }
    };
    for (name, f) in [("F", &spec.freq), ("Delta", &spec.delta), ("xi", &spec.xi), ("eta", &spec.eta), ("zeta", &spec.zeta)] {
        angle_free(name, f)?;
    }
    if let Some(t) = spec.freq.terms.iter().find(|t| yz(t) + sig(t) > 0) {
        return Err(order_violation("F", t, "F depends on μ only"));
    }
    for t in &spec.delta.terms {
        if yz(t) > 0 {
            return Err(order_violation("Delta", t, "Delta depends on (σ, μ) only"));
        }
        if sig(t) == 0 {
            return Err(order_violation("Delta", t, "Delta = O(σ) requires σ-degree >= 1"));
        }
    }
    if let Some(t) = spec.xi.terms.iter().find(|t| yz(t) < 1) {
        return Err(order_violation("xi", t, "xi = O(y,z) requires (y,z)-degree >= 1"));
    }
    if let Some(t) = spec.eta.terms.iter().find(|t| yz(t) < 2) {
        return Err(order_violation("eta", t, "eta = O2(y,z) requires (y,z)-degree >= 2"));
    }
    if let Some(t) = spec.zeta.terms.iter().find(|t| yz(t) + sig(t) < 2) {
        return Err(order_violation("zeta", t, "zeta = O2(y,z,σ) requires (y,z,σ)-degree >= 2"));
    }
    Ok(())
}

fn check_matrix_parities(spec: &SystemSpec) -> Result<()> {
    if spec.dims.p == 0 {
        return Ok(());
    }
    let r = spec.r.matrix();
    for (d, c) in &spec.m.terms {
        let defect = linalg::max_abs(&(c * r + r * c));
        if defect > REVERSIBILITY_TOL {
            return Err(Error::NotReversible(format!("M coefficient at μ^{d:?}: |MR + RM| = {defect:e}")));
        }
    }
    if let Some(z) = &spec.z_coupling {
        for (d, c) in &z.terms {
            let defect = linalg::max_abs(&(c * r - c));
            if defect > REVERSIBILITY_TOL {
                return Err(Error::NotReversible(format!("Z coefficient at μ^{d:?}: |ZR - Z| = {defect:e}")));
            }
        }
    }
    Ok(())
}

/// Images of the polynomial variables under the involution:
/// `y ↦ -y`, `z ↦ Rz`, parameters fixed.
fn involution_images(spec: &SystemSpec) -> Vec<Poly> {
    let v = spec.dims.vars();
    let nv = v.total();
    let r = spec.r.matrix();
    (0..nv)
        .map(|i| {
            if v.y_range().contains(&i) {
                Poly::var(nv, i).scale(-1.0)
            } else if v.z_range().contains(&i) {
                let row = i - v.z_range().start;
                let mut p = Poly::zero(nv);
                for j in 0..v.z {
                    let mut d = vec![0; nv];
                    d[v.z_range().start + j] = 1;
                    p.add_term(d, r[(row, j)]);
                }
                p
            } else {
                Poly::var(nv, i)
            }
        })
        .collect()
}

/// Exact parity residual: the largest coefficient of
/// `D𝔊·V(q) + V(𝔊q)` as a truncated series. Zero iff the truncation is
/// reversible.
pub fn reversibility_residual(spec: &SystemSpec) -> f64 {
    let a = spec.assemble();
    let images = involution_images(spec);
    let even_defect = |f: &Field| f.substitute(&images, true).add(&f.scale(-1.0)).max_abs_coeff();
    let rx = even_defect(&a.vx);
    let ry = even_defect(&a.vy);
    let rz = if spec.dims.p > 0 {
        a.vz.substitute(&images, true).add(&a.vz.map_values(spec.r.matrix())).max_abs_coeff()
    } else {
        0.0
    };
    rx.max(ry).max(rz)
}

/// Grid version of the residual: max over a deterministic lattice (5 points
/// per angle, 3 per polynomial variable in `[-radius, radius]`, at most
/// `max_points` points) of `|D𝔊·V(q) + V(𝔊q)|`.
pub fn reversibility_residual_grid(spec: &SystemSpec, radius: f64, max_points: usize) -> f64 {
    let a = spec.assemble();
    let d = spec.dims;
    let n_ang = d.n + d.big_n;
    let v = d.vars();
    let nv = v.total();
    let dim = n_ang + nv;
    let sizes: Vec<usize> = (0..dim).map(|i| if i < n_ang { 5 } else { 3 }).collect();
    let total: usize = sizes.iter().product();
    let stride = (total / max_points.max(1)).max(1);
    let r = spec.r.matrix();
    let mut worst = 0.0f64;
    let mut lin = 0;
    while lin < total {
        let mut rem = lin;
        let mut pt = Vec::with_capacity(dim);
        for (i, sz) in sizes.iter().enumerate() {
            let j = rem % sz;
            rem /= sz;
            pt.push(if i < n_ang {
                2.0 * std::f64::consts::PI * j as f64 / *sz as f64 + 0.1
            } else {
                radius * (j as f64 - 1.0)
            });
        }
        let (ang, vars) = pt.split_at(n_ang);
        let gang: Vec<f64> = ang.iter().map(|t| -t).collect();
        let mut gvars = vars.to_vec();
        for i in v.y_range() {
            gvars[i] = -vars[i];
        }
        for i in 0..v.z {
            gvars[v.y + i] = (0..v.z).map(|j| r[(i, j)] * vars[v.y + j]).sum();
        }
        let (x0, y0, z0) = a.eval(ang, vars);
        let (x1, y1, z1) = a.eval(&gang, &gvars);
        for (p, q) in x0.iter().zip(&x1).chain(y0.iter().zip(&y1)) {
            worst = worst.max((q - p).abs());
        }
        for i in 0..v.z {
            let rz: f64 = (0..v.z).map(|j| r[(i, j)] * z0[j]).sum();
            worst = worst.max((rz + z1[i]).abs());
        }
        lin += stride;
    }
    worst
}

/// Full validation: order conditions, matrix parities, reversibility and
/// the Diophantine property of `Ω` up to `k_max`.
pub fn validate(spec: &SystemSpec, k_max: u32) -> Result<()> {
    check_order_conditions(spec)?;
    check_matrix_parities(spec)?;
    let res = reversibility_residual(spec);
    if res >= REVERSIBILITY_TOL {
        return Err(Error::NotReversible(format!("parity residual {res:e}")));
    }
    let params = DiophParams::new(spec.dioph_star.tau, spec.dioph_star.gamma, 1)?;
    let rep = dioph::affine_dioph_check(&spec.omega, &[], &params, k_max)?;
    if !rep.passed() {
        return Err(Error::OmegaNotDiophantine { worst_k: rep.worst_k, ratio: rep.worst_ratio });
    }
    Ok(())
}

/// Parses and validates a JSON model (`Ω` checked up to `k_max`).
pub fn parse_system(text: &str, k_max: u32) -> Result<SystemSpec> {
    let spec = SystemSpec::from_json_unchecked(text)?;
    validate(&spec, k_max)?;
    Ok(spec)
}

pub fn load_system(path: &std::path::Path, k_max: u32) -> Result<SystemSpec> {
    parse_system(&std::fs::read_to_string(path)?, k_max)
}

// ------------------------------------------------------------ Zz elimination

/// Product of two matrix polynomials, dropping μ-degrees above `cap`.
fn matpoly_mul(a: &MatrixPoly, b: &MatrixPoly, cap: u32) -> MatrixPoly {
    let mut out = MatrixPoly::zero(a.nrows, b.ncols, a.s);
    for (da, ca) in &a.terms {
        for (db, cb) in &b.terms {
            let d: Vec<u32> = da.iter().zip(db).map(|(x, y)| x + y).collect();
            if d.iter().sum::<u32>() <= cap {
                out.push(d, ca * cb);
            }
        }
    }
    out
}

/// Taylor polynomial of `M(μ)⁻¹` at `μ = 0` up to degree `cap`
/// (exact when `M` is constant).
pub fn inverse_taylor(m: &MatrixPoly, cap: u32) -> Result<MatrixPoly> {
    let s = m.s;
    let zero = vec![0; s];
    let m0 = m.eval(&vec![0.0; s]);
    let m0_inv = m0
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularM(vec![0.0; s]))?;
    let mut rest = MatrixPoly::zero(m.nrows, m.ncols, s);
    for (d, c) in &m.terms {
        if d != &zero {
            rest.push(d.clone(), c.clone());
        }
    }
    // M⁻¹ = Σ_j (-M0⁻¹ M1)^j M0⁻¹
    let step = matpoly_mul(&MatrixPoly::constant(-&m0_inv, s), &rest, cap);
    let mut power = MatrixPoly::constant(DMatrix::identity(m.nrows, m.nrows), s);
    let mut sum = MatrixPoly::constant(m0_inv.clone(), s);
    for _ in 0..cap {
        power = matpoly_mul(&power, &step, cap);
        if power.terms.is_empty() {
            break;
        }
        sum = matpoly_mul_add(&sum, &matpoly_mul(&power, &MatrixPoly::constant(m0_inv.clone(), s), cap));
    }
    Ok(sum)
}

fn matpoly_mul_add(a: &MatrixPoly, b: &MatrixPoly) -> MatrixPoly {
    let mut out = a.clone();
    for (d, c) in &b.terms {
        out.push(d.clone(), c.clone());
    }
    out
}

/// Multiplies every term of a field by `μ^q`.
fn shift_mu(f: &Field, q: &[u32]) -> Field {
    let v = f.vars;
    let mut out = f.clone();
    for t in &mut out.terms {
        for (e, add) in t.d[v.mu_range()].iter_mut().zip(q) {
            *e += add;
        }
    }
    out
}

/// `A(μ)·f` for a matrix polynomial `A` and a field `f`.
fn matpoly_apply(a: &MatrixPoly, f: &Field) -> Field {
    let mut out = Field::zero(a.nrows, f.angle_dims, f.vars);
    for (q, c) in &a.terms {
        out = out.add(&shift_mu(&f.map_values(c), q));
    }
    out
}

/// Removes the `Z(μ)z` term of the y-equation via `y' = y - Z M⁻¹ z`.
///
/// `M` is checked for invertibility at `mu_points`; `M⁻¹` is expanded in μ
/// to degree [`MU_DEGREE_CAP`]. Requires `ζ = O₂(y, z)`.
pub fn eliminate_zz(spec: &SystemSpec, mu_points: &[Vec<f64>]) -> Result<SystemSpec> {
    let z = match &spec.z_coupling {
        None => return Ok(spec.clone()),
        Some(z) => z,
    };
    let mut out = spec.clone();
    out.z_coupling = None;
    if z.terms.iter().all(|(_, c)| c.iter().all(|v| *v == 0.0)) {
        return Ok(out);
    }
    for mu in mu_points.iter().chain(std::iter::once(&vec![0.0; spec.dims.s])) {
        let sv = linalg::singular_values(&spec.m.eval(mu));
        let smin = sv.last().copied().unwrap_or(0.0);
        if smin <= 1e-12 * sv.first().copied().unwrap_or(1.0).max(1.0) {
            return Err(Error::SingularM(mu.clone()));
        }
    }
    let v = spec.dims.vars();
    if let Some(t) = spec
        .zeta
        .terms
        .iter()
        .find(|t| Field::degree_in(t, v.y_range()) + Field::degree_in(t, v.z_range()) < 2)
    {
        return Err(order_violation("zeta", t, "Zz elimination needs zeta = O2(y,z)"));
    }
    let k = matpoly_mul(z, &inverse_taylor(&spec.m, MU_DEGREE_CAP)?, MU_DEGREE_CAP);
    // y = y' + K(μ) z
    let nv = v.total();
    let mut images: Vec<Poly> = (0..nv).map(|i| Poly::var(nv, i)).collect();
    for (i, img) in images.iter_mut().enumerate().take(v.y) {
        for (q, c) in &k.terms {
            for j in 0..v.z {
                if c[(i, j)] != 0.0 {
                    let mut d = vec![0; nv];
                    d[v.z_range().start + j] = 1;
                    d[v.mu_range()].copy_from_slice(q);
                    img.add_term(d, c[(i, j)]);
                }
            }
        }
    }
    let sub = |f: &Field| f.substitute(&images, false);
    out.xi = sub(&spec.xi);
    out.zeta = sub(&spec.zeta);
    out.f = sub(&spec.f);
    out.h = sub(&spec.h);
    let neg_k = MatrixPoly { terms: k.terms.iter().map(|(q, c)| (q.clone(), -c)).collect(), ..k.clone() };
    out.eta = sub(&spec.eta).add(&matpoly_apply(&neg_k, &out.zeta));
    out.g = sub(&spec.g).add(&matpoly_apply(&neg_k, &out.h));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const OSC: &str = r#"{
        "dims": {"n": 0, "m": 1, "p": 0, "N": 1, "s": 1},
        "omega": [1.0],
        "fields": {"g": [{"k": [1], "basis": "cos", "c": [0.01]}]}
    }"#;

    #[test]
    fn forced_oscillator_is_valid() {
        let spec = parse_system(OSC, 50).unwrap();
        assert_eq!(spec.g.terms.len(), 1);
        let v = spec.evaluate_field::<f64>(&[], &[0.0], &[], &[0.0], &[0.0], &[0.0]);
        assert_eq!(v, vec![0.01, 1.0]);
    }

    #[test]
    fn odd_forcing_is_rejected() {
        let doc = OSC.replace("\"cos\"", "\"sin\"");
        assert!(matches!(parse_system(&doc, 50), Err(Error::NotReversible(_))));
    }

    #[test]
    fn linear_eta_is_rejected() {
        let doc = OSC.replace("\"fields\": {", r#""fields": {"eta": [{"d": {"y": [1]}, "c": [1.0]}], "#);
        match parse_system(&doc, 50) {
            Err(Error::OrderViolation { field, .. }) => assert_eq!(field, "eta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(parse_system("{", 10), Err(Error::Schema(_))));
        let doc = OSC.replace("\"c\": [0.01]", "\"c\": [0.01, 2.0]");
        assert!(matches!(parse_system(&doc, 10), Err(Error::Schema(_))));
    }

    #[test]
    fn rational_forcing_is_rejected() {
        let doc = OSC
            .replace("\"N\": 1", "\"N\": 2")
            .replace("[1.0]", "[1.0, 2.0]")
            .replace("\"k\": [1]", "\"k\": [1, 0]");
        assert!(matches!(parse_system(&doc, 20), Err(Error::OmegaNotDiophantine { .. })));
    }

    #[test]
    fn odd_x_term_residual_is_twice_the_coefficient() {
        let doc = r#"{
            "dims": {"n": 1, "m": 1, "p": 0, "N": 1, "s": 1},
            "omega": [1.0],
            "fields": {"F": [{"c": [1.0]}], "f": [{"k": [0, 1], "basis": "sin", "c": [0.25]}]}
        }"#;
        let spec = SystemSpec::from_json_unchecked(doc).unwrap();
        assert!((reversibility_residual(&spec) - 0.5).abs() < 1e-15);
        let g = reversibility_residual_grid(&spec, 0.1, 1000);
        assert!(g > 0.0 && g <= 0.5 + 1e-15);
        assert_eq!(reversibility_residual(&spec.unperturbed()), 0.0);
    }

    fn zz_doc(z: &str) -> String {
        format!(
            r#"{{
            "dims": {{"n": 0, "m": 1, "p": 1, "N": 1, "s": 1}},
            "omega": [1.0],
            "R": [[1.0, 0.0], [0.0, -1.0]],
            "fields": {{
                "M": [{{"c": [[0.0, 1.0], [1.0, 0.0]]}}],
                "Z": [{{"c": [{z}]}}],
                "eta": [{{"d": {{"z": [2, 0]}}, "c": [0.5]}}],
                "zeta": [{{"d": {{"y": [1], "z": [0, 1]}}, "c": [0.0, 1.0]}}]
            }}
        }}"#
        )
    }

    #[test]
    fn zz_elimination_closed_form() {
        let spec = parse_system(&zz_doc("[0.7, 0.0]"), 10).unwrap();
        assert!(spec.z_coupling.is_some());
        let out = eliminate_zz(&spec, &[vec![0.5]]).unwrap();
        assert!(out.z_coupling.is_none());
        let v = out.dims.vars();
        // no term of the y-equation is linear in z alone
        let asm = out.assemble();
        for t in &asm.vy.terms {
            let only_z = Field::degree_in(t, v.z_range()) == 1
                && Field::degree_in(t, v.y_range()) + Field::degree_in(t, v.sigma_range()) == 0;
            assert!(!only_z, "{t:?}");
        }
        // y' = y - 0.7 z2: check the velocity against the chain rule at a point
        let (y, z) = (0.03, [0.02, -0.05]);
        let old = spec.evaluate_field::<f64>(&[], &[y], &z, &[0.4], &[0.01], &[0.0]);
        let new = out.evaluate_field::<f64>(&[], &[y - 0.7 * z[1]], &z, &[0.4], &[0.01], &[0.0]);
        assert!((new[0] - (old[0] - 0.7 * old[2])).abs() < 1e-15);
        assert!((new[1] - old[1]).abs() < 1e-15 && (new[2] - old[2]).abs() < 1e-15);
        assert!(reversibility_residual(&out) < 1e-12);
    }

    #[test]
    fn zz_elimination_identity_and_singular() {
        let spec = parse_system(&zz_doc("[0.0, 0.0]"), 10).unwrap();
        let out = eliminate_zz(&spec, &[]).unwrap();
        assert_eq!(out.eta, spec.eta);
        let sing = zz_doc("[1.0, 0.0]").replace("[[0.0, 1.0], [1.0, 0.0]]", "[[0.0, 0.0], [1.0, 0.0]]");
        let spec = parse_system(&sing, 10).unwrap();
        assert!(matches!(eliminate_zz(&spec, &[]), Err(Error::SingularM(_))));
    }

    #[test]
    fn inverse_taylor_of_affine_family() {
        let mut m = MatrixPoly::constant(DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]), 1);
        m.push(vec![1], DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let inv = inverse_taylor(&m, 4).unwrap();
        let mu = [0.1];
        let err = linalg::max_abs(&(inv.eval(&mu) * m.eval(&mu) - DMatrix::identity(2, 2)));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn json_round_trip() {
        let spec = parse_system(&zz_doc("[0.3, 0.0]"), 10).unwrap();
        let back = parse_system(&spec.to_json(), 10).unwrap();
        assert_eq!(spec, back);
    }
}
