//! C1 spline finite element spaces on uniform meshes of (0, 1).
//!
//! Two families, both conforming in H^2 and vanishing at the endpoints:
//! degree 2 (C1 quadratic B-splines on an open knot vector, dimension N_c)
//! and degree 3 (C1 Hermite cubics with node-major value/slope ordering,
//! dimension 2 N_c). Basis functions are stored as per-cell polynomials so
//! every integral in the crate is evaluated exactly: Gauss rules of exact
//! order for polynomial integrands, closed forms against sines and cosines.

use crate::error::{CoreError, Result};
use crate::linalg::{BandedCholesky, SymBanded};
use crate::noise::{NoiseSample, SpaceTimeGrid};
use crate::quad::{gauss_legendre, poly_sin_integral};
use crate::spectral::{ModelParams, SpectralField};

const MAX_DEG: usize = 3;

/// One basis function restricted to one mesh cell: the global degree of
/// freedom it belongs to and its polynomial coefficients in the local
/// variable xi = (x - x_cell) / h, constant term first.
#[derive(Debug, Clone, Copy)]
pub struct CellBasis {
    pub dof: usize,
    pub poly: [f64; MAX_DEG + 1],
}

/// A C1 spline space specification with per-cell basis tables.
#[derive(Debug, Clone)]
pub struct SplineSpaceSpec {
    /// Polynomial degree, 2 or 3.
    pub r: u8,
    /// Number of mesh cells.
    pub n_cells: usize,
    /// Mesh width 1 / n_cells.
    pub h: f64,
    /// Space dimension after the value boundary conditions.
    pub dim: usize,
    /// Bandwidth of Gram-type matrices in this basis.
    pub bandwidth: usize,
    /// cells[c] lists the basis functions alive on cell c.
    cells: Vec<Vec<CellBasis>>,
}

/// Builds the spline space of degree `r` on `n_cells` uniform cells.
pub fn build_space(r: u8, n_cells: usize) -> Result<SplineSpaceSpec> {
    if n_cells < 2 {
        return Err(CoreError::InvalidParameter(
            "mesh needs at least two cells".into(),
        ));
    }
    match r {
        2 => Ok(build_quadratic(n_cells)),
        3 => Ok(build_hermite(n_cells)),
        _ => Err(CoreError::InvalidParameter(format!(
            "spline degree r={r} unsupported, expected 2 or 3"
        ))),
    }
}

fn build_hermite(n_cells: usize) -> SplineSpaceSpec {
    let h = 1.0 / n_cells as f64;
    let dim = 2 * n_cells;
    // Node-major DOFs: slope at node 0, then (value, slope) pairs at the
    // interior nodes, then slope at node n. Value DOFs at the endpoints are
    // removed by the boundary condition.
    let value_dof = |node: usize| -> Option<usize> {
        if node == 0 || node == n_cells {
            None
        } else {
            Some(2 * node - 1)
        }
    };
    let slope_dof = |node: usize| -> usize {
        if node == 0 {
            0
        } else if node == n_cells {
            2 * n_cells - 1
        } else {
            2 * node
        }
    };
    // Cubic Hermite shape functions in xi; slope shapes carry a factor h so
    // the coefficient is the physical derivative at the node.
    let val_left = [1.0, 0.0, -3.0, 2.0];
    let slo_left = [0.0, h, -2.0 * h, h];
    let val_right = [0.0, 0.0, 3.0, -2.0];
    let slo_right = [0.0, 0.0, -h, h];

    let mut cells = Vec::with_capacity(n_cells);
    for c in 0..n_cells {
        let mut list = Vec::with_capacity(4);
        if let Some(dof) = value_dof(c) {
            list.push(CellBasis {
                dof,
                poly: val_left,
            });
        }
        list.push(CellBasis {
            dof: slope_dof(c),
            poly: slo_left,
        });
        if let Some(dof) = value_dof(c + 1) {
            list.push(CellBasis {
                dof,
                poly: val_right,
            });
        }
        list.push(CellBasis {
            dof: slope_dof(c + 1),
            poly: slo_right,
        });
        cells.push(list);
    }
    SplineSpaceSpec {
        r: 3,
        n_cells,
        h,
        dim,
        bandwidth: 3,
        cells,
    }
}

/// Cox-de Boor evaluation of B-spline i of degree p over `knots` at x.
fn bspline_value(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
    if p == 0 {
        let inside = knots[i] <= x && x < knots[i + 1];
        return if inside { 1.0 } else { 0.0 };
    }
    let mut acc = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        acc += (x - knots[i]) / d1 * bspline_value(knots, i, p - 1, x);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        acc += (knots[i + p + 1] - x) / d2 * bspline_value(knots, i + 1, p - 1, x);
    }
    acc
}

fn build_quadratic(n_cells: usize) -> SplineSpaceSpec {
    let h = 1.0 / n_cells as f64;
    // Open knot vector with triple end knots and simple interior knots.
    let mut knots = vec![0.0; 3];
    for i in 1..n_cells {
        knots.push(i as f64 * h);
    }
    knots.extend_from_slice(&[1.0, 1.0, 1.0]);
    // B-splines 0..=n_cells+1; the first and last are removed by the value
    // boundary condition, which they alone violate.
    let dim = n_cells;
    let mut cells = Vec::with_capacity(n_cells);
    for c in 0..n_cells {
        let x0 = c as f64 * h;
        let mut list = Vec::new();
        for i in [c, c + 1, c + 2] {
            if i == 0 || i == n_cells + 1 {
                continue;
            }
            // Reconstruct the quadratic piece exactly from three samples.
            let sample = |xi: f64| {
                let x = x0 + xi * h;
                if x >= 1.0 {
                    // Only the dropped last spline is nonzero at the right
                    // endpoint of the open knot vector.
                    0.0
                } else {
                    bspline_value(&knots, i, 2, x)
                }
            };
            let v0 = sample(0.0);
            let vh = sample(0.5);
            let v1 = sample(1.0);
            let poly = [
                v0,
                -3.0 * v0 + 4.0 * vh - v1,
                2.0 * v0 - 4.0 * vh + 2.0 * v1,
                0.0,
            ];
            list.push(CellBasis { dof: i - 1, poly });
        }
        cells.push(list);
    }
    SplineSpaceSpec {
        r: 2,
        n_cells,
        h,
        dim,
        bandwidth: 2,
        cells,
    }
}

impl SplineSpaceSpec {
    pub fn cell_basis(&self, c: usize) -> &[CellBasis] {
        &self.cells[c]
    }

    /// Left endpoint of cell c.
    pub fn cell_left(&self, c: usize) -> f64 {
        c as f64 * self.h
    }

    /// Value of basis function `dof` at x (0 outside its support).
    pub fn basis_value(&self, dof: usize, x: f64) -> f64 {
        let c = ((x / self.h) as usize).min(self.n_cells - 1);
        let xi = x / self.h - c as f64;
        self.cells[c]
            .iter()
            .filter(|cb| cb.dof == dof)
            .map(|cb| eval_poly(&cb.poly, xi))
            .sum()
    }

    /// First derivative of basis function `dof` at x (one-sided at knots).
    pub fn basis_deriv(&self, dof: usize, x: f64, from_left: bool) -> f64 {
        let mut c = (x / self.h) as usize;
        if from_left && x / self.h - (c as f64) == 0.0 && c > 0 {
            c -= 1;
        }
        let c = c.min(self.n_cells - 1);
        let xi = x / self.h - c as f64;
        self.cells[c]
            .iter()
            .filter(|cb| cb.dof == dof)
            .map(|cb| eval_poly(&deriv_poly(&cb.poly), xi) / self.h)
            .sum()
    }
}

fn eval_poly(p: &[f64; MAX_DEG + 1], xi: f64) -> f64 {
    ((p[3] * xi + p[2]) * xi + p[1]) * xi + p[0]
}

fn deriv_poly(p: &[f64; MAX_DEG + 1]) -> [f64; MAX_DEG + 1] {
    [p[1], 2.0 * p[2], 3.0 * p[3], 0.0]
}

/// Coefficient vector in a spline space.
#[derive(Debug, Clone, PartialEq)]
pub struct FemField {
    pub coeffs: Vec<f64>,
    pub r: u8,
    pub n_cells: usize,
}

impl FemField {
    pub fn zeros(spec: &SplineSpaceSpec) -> Self {
        Self {
            coeffs: vec![0.0; spec.dim],
            r: spec.r,
            n_cells: spec.n_cells,
        }
    }

    pub fn from_coeffs(spec: &SplineSpaceSpec, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), spec.dim);
        Self {
            coeffs,
            r: spec.r,
            n_cells: spec.n_cells,
        }
    }

    pub fn matches(&self, spec: &SplineSpaceSpec) -> bool {
        self.r == spec.r && self.n_cells == spec.n_cells && self.coeffs.len() == spec.dim
    }

    /// Pointwise value.
    pub fn eval(&self, spec: &SplineSpaceSpec, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(CoreError::OutOfRange(format!("x={x} outside [0,1]")));
        }
        let c = ((x / spec.h) as usize).min(spec.n_cells - 1);
        let xi = x / spec.h - c as f64;
        Ok(spec.cells[c]
            .iter()
            .map(|cb| self.coeffs[cb.dof] * eval_poly(&cb.poly, xi))
            .sum())
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.coeffs.len(), other.coeffs.len());
        Self {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
            r: self.r,
            n_cells: self.n_cells,
        }
    }
}

/// Assembled Gram-type matrices of the space and the shifted elliptic
/// operator, with cached factorizations.
pub struct Assembly {
    /// (chi_i, chi_j)
    pub mass: SymBanded,
    /// (chi_i'', chi_j'')
    pub bending: SymBanded,
    /// (chi_i', chi_j')
    pub grad: SymBanded,
    /// bending - mu grad + mu^2 mass
    pub lambda_tilde: SymBanded,
    pub mu: f64,
    mass_chol: BandedCholesky,
    lambda_tilde_chol: BandedCholesky,
}

/// Assembles mass, bending and gradient matrices and the shifted operator
/// for drift coefficient mu. Uses the identity (chi'', phi) = -(chi', phi')
/// valid under the value boundary conditions.
pub fn assemble(spec: &SplineSpaceSpec, mu: f64) -> Assembly {
    let n = spec.dim;
    let bw = spec.bandwidth;
    let mut mass = SymBanded::zeros(n, bw);
    let mut bending = SymBanded::zeros(n, bw);
    let mut grad = SymBanded::zeros(n, bw);
    let (xs, ws) = gauss_legendre(4);
    let h = spec.h;
    for c in 0..spec.n_cells {
        let basis = &spec.cells[c];
        for (a_idx, a) in basis.iter().enumerate() {
            let da = deriv_poly(&a.poly);
            let dda = deriv_poly(&da);
            for b in &basis[a_idx..] {
                let db = deriv_poly(&b.poly);
                let ddb = deriv_poly(&db);
                let mut m = 0.0;
                let mut k2 = 0.0;
                let mut k1 = 0.0;
                for (&x, &w) in xs.iter().zip(ws) {
                    let xi = 0.5 * (x + 1.0);
                    m += w * eval_poly(&a.poly, xi) * eval_poly(&b.poly, xi);
                    k1 += w * eval_poly(&da, xi) * eval_poly(&db, xi);
                    k2 += w * eval_poly(&dda, xi) * eval_poly(&ddb, xi);
                }
                // Jacobian h/2 from [-1,1] to the cell, and 1/h per derivative.
                mass.add(a.dof, b.dof, 0.5 * h * m);
                grad.add(a.dof, b.dof, 0.5 * k1 / h);
                bending.add(a.dof, b.dof, 0.5 * k2 / (h * h * h));
            }
        }
    }
    let mut lambda_tilde = SymBanded::zeros(n, bw);
    for i in 0..n {
        for j in i..(i + bw + 1).min(n) {
            let v = bending.get(i, j) - mu * grad.get(i, j) + mu * mu * mass.get(i, j);
            if i == j || v != 0.0 {
                lambda_tilde.set(j, i, v);
            }
        }
    }
    let mass_chol = mass.cholesky().expect("mass matrix is SPD");
    let lambda_tilde_chol = lambda_tilde
        .cholesky()
        .expect("shifted elliptic operator is SPD by coercivity");
    Assembly {
        mass,
        bending,
        grad,
        lambda_tilde,
        mu,
        mass_chol,
        lambda_tilde_chol,
    }
}

impl Assembly {
    pub fn mass_cholesky(&self) -> &BandedCholesky {
        &self.mass_chol
    }

    pub fn lambda_tilde_cholesky(&self) -> &BandedCholesky {
        &self.lambda_tilde_chol
    }

    /// Backward Euler step matrix mass + dtau (bending - mu grad).
    pub fn step_matrix(&self, dtau: f64) -> SymBanded {
        let n = self.mass.n();
        let bw = self.mass.bandwidth();
        let mut s = SymBanded::zeros(n, bw);
        for i in 0..n {
            for j in i..(i + bw + 1).min(n) {
                let v = self.mass.get(i, j)
                    + dtau * (self.bending.get(i, j) - self.mu * self.grad.get(i, j));
                s.set(j, i, v);
            }
        }
        s
    }

    /// L2 norm of a field through the mass matrix.
    pub fn l2_norm(&self, u: &FemField) -> f64 {
        self.mass.quad_form(&u.coeffs, &u.coeffs).max(0.0).sqrt()
    }

    /// Shifted elliptic energy inner product (T-tilde f, g) for fields
    /// already in the space.
    pub fn gamma_tilde(&self, f: &FemField, g: &FemField) -> f64 {
        let mut mf = vec![0.0; f.coeffs.len()];
        self.mass.matvec(&f.coeffs, &mut mf);
        let v = self.lambda_tilde_chol.solve(&mf);
        let mut mg = vec![0.0; g.coeffs.len()];
        self.mass.matvec(&g.coeffs, &mut mg);
        v.iter().zip(&mg).map(|(a, b)| a * b).sum()
    }
}

/// Right-hand sides accepted by the projection and elliptic solves.
#[derive(Debug, Clone, Copy)]
pub enum RhsInput<'a> {
    /// Sine-basis expansion.
    Spectral(&'a SpectralField),
    /// Global polynomial sum_m coeffs[m] x^m.
    Poly(&'a [f64]),
}

/// Load vector (f, chi_j) with exact integration for both input kinds.
pub fn load_vector(spec: &SplineSpaceSpec, f: RhsInput) -> Vec<f64> {
    match f {
        RhsInput::Spectral(v) => {
            let mut load = vec![0.0; spec.dim];
            for (i, &c) in v.coeffs().iter().enumerate() {
                if c != 0.0 {
                    let e_k = cross_gram_sine(spec, i + 1);
                    for (l, e) in load.iter_mut().zip(&e_k) {
                        *l += c * e;
                    }
                }
            }
            load
        }
        RhsInput::Poly(coeffs) => {
            let deg = coeffs.len().saturating_sub(1);
            let n_gauss = if deg + MAX_DEG <= 7 { 4 } else { 8 };
            let (xs, ws) = gauss_legendre(n_gauss);
            let mut load = vec![0.0; spec.dim];
            let h = spec.h;
            for c in 0..spec.n_cells {
                let x0 = spec.cell_left(c);
                for cb in &spec.cells[c] {
                    let mut acc = 0.0;
                    for (&x, &w) in xs.iter().zip(ws) {
                        let xi = 0.5 * (x + 1.0);
                        let xx = x0 + xi * h;
                        let fx = coeffs.iter().rev().fold(0.0, |s, &a| s * xx + a);
                        acc += w * fx * eval_poly(&cb.poly, xi);
                    }
                    load[cb.dof] += 0.5 * h * acc;
                }
            }
            load
        }
    }
}

/// L2-orthogonal projection onto the space.
pub fn l2_project(f: RhsInput, spec: &SplineSpaceSpec, asm: &Assembly) -> FemField {
    let load = load_vector(spec, f);
    FemField::from_coeffs(spec, asm.mass_cholesky().solve(&load))
}

/// Galerkin solution of the shifted fourth-order problem.
pub fn solve_shifted_elliptic(f: RhsInput, spec: &SplineSpaceSpec, asm: &Assembly) -> FemField {
    let load = load_vector(spec, f);
    FemField::from_coeffs(spec, asm.lambda_tilde_cholesky().solve(&load))
}

/// L2 distance between a spline field and a spectral field by pointwise
/// quadrature. Unlike the Gram-expansion route this does not cancel three
/// near-equal norms, so it resolves differences near the rounding floor;
/// the quadrature converges spectrally in `panels` per cell.
pub fn l2_distance_quadrature(
    spec: &SplineSpaceSpec,
    u_h: &FemField,
    v: &SpectralField,
    panels: usize,
) -> Result<f64> {
    let (xs, ws) = gauss_legendre(8);
    let mut acc = 0.0;
    for c in 0..spec.n_cells {
        let x0 = spec.cell_left(c);
        let pw = spec.h / panels as f64;
        for p in 0..panels {
            let lo = x0 + p as f64 * pw;
            let mid = lo + 0.5 * pw;
            for (&x, &w) in xs.iter().zip(ws) {
                let xx = mid + 0.5 * pw * x;
                let xi = (xx - x0) / spec.h;
                let uh: f64 = spec.cells[c]
                    .iter()
                    .map(|cb| u_h.coeffs[cb.dof] * eval_poly(&cb.poly, xi))
                    .sum();
                let vs = v.eval(xx)?;
                acc += 0.5 * pw * w * (uh - vs) * (uh - vs);
            }
        }
    }
    Ok(acc.sqrt())
}

/// Cross inner products e_k[j] = (eps_k, chi_j), closed-form per cell.
pub fn cross_gram_sine(spec: &SplineSpaceSpec, k: usize) -> Vec<f64> {
    assert!(k >= 1);
    let lam = ModelParams::lambda(k);
    let s2 = 2f64.sqrt();
    let h = spec.h;
    let mut e = vec![0.0; spec.dim];
    for c in 0..spec.n_cells {
        let x0 = spec.cell_left(c);
        for cb in &spec.cells[c] {
            // Convert local-in-xi coefficients to local-in-(x - x0).
            let mut q = [0.0; MAX_DEG + 1];
            let mut scale = 1.0;
            for m in 0..=MAX_DEG {
                q[m] = cb.poly[m] / scale;
                scale *= h;
            }
            e[cb.dof] += s2 * poly_sin_integral(&q, lam, x0, h);
        }
    }
    e
}

/// Precomputed coupling (psi_l, chi_j') between the noise hats and the FEM
/// basis derivatives; both meshes are uniform but need not be related.
pub struct NoiseCoupling {
    /// n_mat[l][j] = (psi_l, chi_j').
    n_mat: Vec<Vec<f64>>,
}

/// Builds the hat/spline-derivative coupling by exact integration over the
/// superposition of the two meshes.
pub fn build_noise_coupling(spec: &SplineSpaceSpec, grid: &SpaceTimeGrid) -> NoiseCoupling {
    let n_hats = grid.n_hats();
    let mut n_mat = vec![vec![0.0; spec.dim]; n_hats];
    let (xs, ws) = gauss_legendre(3);
    // Merge breakpoints of both meshes.
    let mut points: Vec<f64> = (0..=spec.n_cells)
        .map(|c| c as f64 * spec.h)
        .chain((0..=grid.j_cells).map(|j| j as f64 * grid.dx))
        .collect();
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    for w_pair in points.windows(2) {
        let (lo, hi) = (w_pair[0], w_pair[1]);
        if hi - lo < 1e-14 {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let cell = ((mid / spec.h) as usize).min(spec.n_cells - 1);
        let x0 = spec.cell_left(cell);
        let hat_lo = ((mid / grid.dx) as usize).min(grid.j_cells - 1);
        for cb in &spec.cells[cell] {
            let dp = deriv_poly(&cb.poly);
            for node in [hat_lo, hat_lo + 1] {
                let mut acc = 0.0;
                for (&x, &w) in xs.iter().zip(ws) {
                    let xx = mid + 0.5 * (hi - lo) * x;
                    let xi = (xx - x0) / spec.h;
                    acc += w * grid.hat(node, xx) * eval_poly(&dp, xi) / spec.h;
                }
                n_mat[node][cb.dof] += 0.5 * (hi - lo) * acc;
            }
        }
    }
    NoiseCoupling { n_mat }
}

impl NoiseCoupling {
    pub fn n_hats(&self) -> usize {
        self.n_mat.len()
    }

    pub fn dim(&self) -> usize {
        self.n_mat.first().map_or(0, Vec::len)
    }

    pub fn entry(&self, hat: usize, dof: usize) -> f64 {
        self.n_mat[hat][dof]
    }

    /// Load vector from given hat coefficients:
    /// out[j] = -sum_l coeffs[l] (psi_l, chi_j').
    pub fn load_from_hat_coeffs(&self, coeffs: &[f64], out: &mut [f64]) {
        assert_eq!(coeffs.len(), self.n_mat.len());
        for v in out.iter_mut() {
            *v = 0.0;
        }
        for (row, &a) in self.n_mat.iter().zip(coeffs) {
            if a != 0.0 {
                for (o, n) in out.iter_mut().zip(row) {
                    *o -= a * n;
                }
            }
        }
    }
}

/// Load vector of the slab-n noise term: entries
/// (d/dx W-hat(slab n), chi_j) = -(W-hat(slab n), chi_j').
pub fn noise_load(
    coupling: &NoiseCoupling,
    sample: &NoiseSample,
    slab: usize,
) -> Result<Vec<f64>> {
    if slab < 1 || slab > sample.n_slabs() {
        return Err(CoreError::OutOfRange(format!("slab {slab} out of range")));
    }
    let mut out = vec![0.0; coupling.dim()];
    coupling.load_from_hat_coeffs(sample.a_slab(slab), &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{build_gram, sample_noise};
    use crate::quad::composite_gauss;
    use crate::spectral::validate_params;
    use std::f64::consts::PI;

    #[test]
    fn dimensions() {
        assert_eq!(build_space(3, 8).unwrap().dim, 16);
        assert_eq!(build_space(2, 8).unwrap().dim, 8);
        assert!(build_space(4, 8).is_err());
        assert!(build_space(2, 1).is_err());
    }

    #[test]
    fn partition_of_unity_interior() {
        // Quadratic B-splines sum to 1 away from the dropped end splines.
        let spec = build_space(2, 8).unwrap();
        for &x in &[0.3, 0.4271, 0.5, 0.66] {
            let s: f64 = (0..spec.dim).map(|d| spec.basis_value(d, x)).sum();
            assert!((s - 1.0).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn boundary_values_vanish() {
        for r in [2u8, 3] {
            let spec = build_space(r, 6).unwrap();
            for d in 0..spec.dim {
                assert!(spec.basis_value(d, 0.0).abs() < 1e-13);
                assert!(spec.basis_value(d, 1.0).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn c1_across_knots() {
        for r in [2u8, 3] {
            let spec = build_space(r, 7).unwrap();
            for d in 0..spec.dim {
                for node in 1..spec.n_cells {
                    let x = node as f64 * spec.h;
                    let dl = spec.basis_deriv(d, x, true);
                    let dr = spec.basis_deriv(d, x, false);
                    assert!((dl - dr).abs() < 1e-12, "r={r} dof={d} node={node}");
                }
            }
        }
    }

    #[test]
    fn assembly_matches_quadrature_oracle() {
        for r in [2u8, 3] {
            let spec = build_space(r, 5).unwrap();
            let asm = assemble(&spec, 0.0);
            let probe = |d: usize, x: f64| spec.basis_value(d, x);
            for i in 0..spec.dim {
                for j in i..(i + spec.bandwidth + 1).min(spec.dim) {
                    let oracle = composite_gauss(0.0, 1.0, 8, 8 * spec.n_cells, &|x| {
                        probe(i, x) * probe(j, x)
                    });
                    assert!(
                        (asm.mass.get(i, j) - oracle).abs() < 1e-13,
                        "mass r={r} ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn matrices_positive_definite() {
        for r in [2u8, 3] {
            let spec = build_space(r, 9).unwrap();
            let asm = assemble(&spec, 12.0);
            assert!(asm.mass.cholesky().is_ok());
            assert!(asm.bending.cholesky().is_ok());
            assert!(asm.lambda_tilde.cholesky().is_ok());
        }
    }

    #[test]
    fn second_derivative_identity_and_coercivity() {
        // (chi'', chi) = -(chi', chi') on random members, via the matrices.
        let mut state = 0x2545f4914f6cdd1du64;
        let mut rand = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for r in [2u8, 3] {
            let spec = build_space(r, 8).unwrap();
            let mu = 12.0;
            let asm = assemble(&spec, mu);
            for _ in 0..10 {
                let chi: Vec<f64> = (0..spec.dim).map(|_| rand()).collect();
                let a = asm.bending.quad_form(&chi, &chi);
                let g = asm.grad.quad_form(&chi, &chi);
                let m = asm.mass.quad_form(&chi, &chi);
                let lt = asm.lambda_tilde.quad_form(&chi, &chi);
                // Coercivity of the shifted form.
                assert!(lt >= 0.5 * (a + mu * mu * m) - 1e-10, "r={r}");
                let _ = g;
            }
        }
    }

    #[test]
    fn l2_projection_reproduces_members() {
        for r in [2u8, 3] {
            let spec = build_space(r, 6).unwrap();
            let asm = assemble(&spec, 0.0);
            // x(1-x) satisfies the BCs and lies in both spaces.
            let poly = [0.0, 1.0, -1.0];
            let p = l2_project(RhsInput::Poly(&poly), &spec, &asm);
            for &x in &[0.1, 0.35, 0.5, 0.99] {
                let v = p.eval(&spec, x).unwrap();
                assert!((v - x * (1.0 - x)).abs() < 1e-12, "r={r} x={x}");
            }
        }
    }

    #[test]
    fn l2_projection_nonexpansive() {
        let params = validate_params(0.0, 1.0, 8).unwrap();
        let _ = params;
        let spec = build_space(3, 8).unwrap();
        let asm = assemble(&spec, 0.0);
        let f = SpectralField::from_coeffs(vec![0.3, -0.2, 0.9, 0.0, 0.1, 0.0, 0.0, -0.4]);
        let p = l2_project(RhsInput::Spectral(&f), &spec, &asm);
        let norm_f = f.coeffs().iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!(asm.l2_norm(&p) <= norm_f + 1e-12);
    }

    #[test]
    fn shifted_solve_symmetry() {
        // f = eps_1 is symmetric about 1/2; solution values mirror.
        for r in [2u8, 3] {
            let spec = build_space(r, 8).unwrap();
            let asm = assemble(&spec, 12.0);
            let f = SpectralField::basis(1, 4);
            let v = solve_shifted_elliptic(RhsInput::Spectral(&f), &spec, &asm);
            for &x in &[0.125, 0.3, 0.45] {
                let a = v.eval(&spec, x).unwrap();
                let b = v.eval(&spec, 1.0 - x).unwrap();
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "r={r} x={x}");
            }
        }
    }

    #[test]
    fn galerkin_orthogonality() {
        let spec = build_space(3, 8).unwrap();
        let asm = assemble(&spec, 12.0);
        let f = SpectralField::basis(2, 4);
        let v = solve_shifted_elliptic(RhsInput::Spectral(&f), &spec, &asm);
        let load = load_vector(&spec, RhsInput::Spectral(&f));
        let mut lv = vec![0.0; spec.dim];
        asm.lambda_tilde.matvec(&v.coeffs, &mut lv);
        for j in 0..spec.dim {
            assert!((lv[j] - load[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_gram_matches_oracle() {
        for r in [2u8, 3] {
            let spec = build_space(r, 6).unwrap();
            for k in [1usize, 2, 3, 9] {
                let e = cross_gram_sine(&spec, k);
                for d in 0..spec.dim {
                    let oracle = composite_gauss(0.0, 1.0, 8, 8 * spec.n_cells, &|x| {
                        2f64.sqrt() * (k as f64 * PI * x).sin() * spec.basis_value(d, x)
                    });
                    assert!((e[d] - oracle).abs() < 1e-12, "r={r} k={k} dof={d}");
                }
            }
        }
    }

    #[test]
    fn even_modes_orthogonal_to_symmetric_fields() {
        let spec = build_space(3, 8).unwrap();
        let asm = assemble(&spec, 0.0);
        // Symmetric member of the space.
        let sym = l2_project(RhsInput::Poly(&[0.0, 1.0, -1.0]), &spec, &asm);
        for k in [2usize, 4, 6] {
            let e = cross_gram_sine(&spec, k);
            let dot: f64 = e.iter().zip(&sym.coeffs).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn projection_of_modes_improves_under_refinement() {
        let k = 3usize;
        let mut prev = f64::INFINITY;
        for n_cells in [4usize, 8, 16, 32] {
            let spec = build_space(3, n_cells).unwrap();
            let asm = assemble(&spec, 0.0);
            let f = SpectralField::basis(k, k);
            let p = l2_project(RhsInput::Spectral(&f), &spec, &asm);
            // || P eps_k - eps_k ||^2 = ||P||^2 - 2 (P, eps_k) + 1.
            let e_k = cross_gram_sine(&spec, k);
            let cross: f64 = e_k.iter().zip(&p.coeffs).map(|(a, b)| a * b).sum();
            let err_sq = asm.mass.quad_form(&p.coeffs, &p.coeffs) - 2.0 * cross + 1.0;
            assert!(err_sq < prev);
            prev = err_sq;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn bending_projection_order() {
        // H2 approximation order of the space: the bending-orthogonal
        // projection of sin(pi x) converges in the H2 seminorm at order
        // >= r - 1.
        for r in [2u8, 3] {
            let mut errs = Vec::new();
            let mut hs = Vec::new();
            for n_cells in [8usize, 16, 32] {
                let spec = build_space(r, n_cells).unwrap();
                let asm = assemble(&spec, 0.0);
                let lam4 = PI.powi(4);
                // (v'', chi'') = lam^4 (v, chi) for v = eps_1.
                let load: Vec<f64> = cross_gram_sine(&spec, 1)
                    .iter()
                    .map(|e| lam4 * e)
                    .collect();
                let u = asm.bending.cholesky().unwrap().solve(&load);
                let u2au = asm.bending.quad_form(&u, &u);
                let cross: f64 = cross_gram_sine(&spec, 1)
                    .iter()
                    .zip(&u)
                    .map(|(e, c)| e * c)
                    .sum();
                let err_sq = (u2au - 2.0 * lam4 * cross + lam4).max(0.0);
                hs.push(spec.h);
                errs.push(err_sq.sqrt());
            }
            for w in errs.windows(2) {
                let order = (w[0] / w[1]).log2();
                assert!(order >= (r - 1) as f64 - 0.2, "r={r}: orders from {errs:?}");
            }
        }
    }

    #[test]
    fn middle_estimate_negative_norm_surrogate() {
        // err * lambda_k / h^3 stays bounded across refinement for cubics,
        // the smoothness-(-1) form of the elliptic error bound with the
        // spectral surrogate norm.
        let mut maxima = Vec::new();
        for n_cells in [8usize, 16, 32] {
            let spec = build_space(3, n_cells).unwrap();
            let asm = assemble(&spec, 0.0);
            let h3 = spec.h.powi(3);
            let mut worst: f64 = 0.0;
            for k in [2usize, 4, 8, 16, 32] {
                let f = SpectralField::basis(k, k);
                let exact_coeff = 1.0 / drift_eigenvalue_local(k);
                let exact = f.scaled(exact_coeff);
                let u = solve_shifted_elliptic(RhsInput::Spectral(&f), &spec, &asm);
                let err = l2_distance_quadrature(&spec, &u, &exact, 4).unwrap();
                worst = worst.max(err * (k as f64 * PI) / h3);
            }
            maxima.push(worst);
        }
        let hi = maxima.iter().cloned().fold(0.0f64, f64::max);
        let lo = maxima.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi / lo < 4.0, "middle-estimate constant drifts: {maxima:?}");
    }

    fn drift_eigenvalue_local(k: usize) -> f64 {
        let l2 = (k as f64 * PI).powi(2);
        l2 * l2
    }

    #[test]
    fn noise_load_examples() {
        let spec = build_space(3, 4).unwrap();
        let grid = SpaceTimeGrid::new(1.0, 2, 6).unwrap();
        let gram = build_gram(&grid);
        let coupling = build_noise_coupling(&spec, &grid);

        // Constant W-hat in x: load vanishes since int chi' = 0.
        let ones = vec![1.0; grid.n_hats()];
        let mut out = vec![0.0; spec.dim];
        coupling.load_from_hat_coeffs(&ones, &mut out);
        for v in &out {
            assert!(v.abs() < 1e-13);
        }

        // Linearity in R and agreement with a quadrature oracle integrated
        // piecewise between the kinks of both meshes.
        let s = sample_noise(&grid, &gram, 3).unwrap();
        let load = noise_load(&coupling, &s, 1).unwrap();
        let mut points: Vec<f64> = (0..=spec.n_cells)
            .map(|c| c as f64 * spec.h)
            .chain((0..=grid.j_cells).map(|j| j as f64 * grid.dx))
            .collect();
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
        for (d, l) in load.iter().enumerate() {
            let mut oracle = 0.0;
            for w in points.windows(2) {
                oracle += composite_gauss(w[0], w[1], 8, 1, &|x| {
                    let what: f64 = (0..grid.n_hats())
                        .map(|node| s.a_slab(1)[node] * grid.hat(node, x))
                        .sum();
                    // -(W-hat, chi') via one-sided derivative inside cells.
                    -what * spec.basis_deriv(d, x, false)
                });
            }
            assert!((l - oracle).abs() < 1e-12, "dof {d}");
        }
    }
}
