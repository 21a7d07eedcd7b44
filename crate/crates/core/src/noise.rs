//! Regularized noise: space-time grids, the hat-function Gram matrix, the
//! correlated Gaussian slab vectors R, the piecewise spline field W-hat,
//! the slab/hat projection, and a truncated-mode coupling oracle that
//! realizes the driving white noise and the regularized noise from one
//! Gaussian source.
//!
//! Conventions: time slabs T_n = (t_{n-1}, t_n] are left-open/right-closed
//! (t = 0 maps to slab 1); hats are indexed by grid node, so slab vectors
//! have J + 1 entries.

use crate::error::{CoreError, Result};
use crate::linalg::{BandedCholesky, SymBanded};
use crate::quad::{poly_cos_integral, poly_sin_integral};
use crate::rng::stream_rng;
use crate::spectral::{ModelParams, SpectralField};
use rand::Rng;
use rand_distr::StandardNormal;

/// Largest slab count for which noise matrices are materialized.
const MAX_MATERIALIZED_SLABS: u64 = 100_000_000;

/// Uniform partition of [0, T] into slabs and of [0, 1] into cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimeGrid {
    /// Number of time slabs N*.
    pub n_slabs: u64,
    /// Number of space cells J*.
    pub j_cells: usize,
    /// Slab length T / N*.
    pub dt: f64,
    /// Cell length 1 / J*.
    pub dx: f64,
    /// Final time.
    pub t_final: f64,
}

impl SpaceTimeGrid {
    pub fn new(t_final: f64, n_slabs: u64, j_cells: usize) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(CoreError::InvalidParameter(format!(
                "final time must be positive, got {t_final}"
            )));
        }
        if n_slabs < 1 || j_cells < 1 {
            return Err(CoreError::InvalidParameter(
                "grid needs at least one slab and one cell".into(),
            ));
        }
        Ok(Self {
            n_slabs,
            j_cells,
            dt: t_final / n_slabs as f64,
            dx: 1.0 / j_cells as f64,
            t_final,
        })
    }

    /// Node count of the hat basis (J* + 1).
    pub fn n_hats(&self) -> usize {
        self.j_cells + 1
    }

    /// Slab index (1-based) containing t under the left-open convention.
    pub fn slab_of(&self, t: f64) -> Result<u64> {
        if !(0.0..=self.t_final).contains(&t) {
            return Err(CoreError::OutOfRange(format!(
                "t={t} outside [0, {}]",
                self.t_final
            )));
        }
        let n = (t / self.dt).ceil() as u64;
        Ok(n.clamp(1, self.n_slabs))
    }

    fn materialized_slabs(&self) -> Result<usize> {
        if self.n_slabs > MAX_MATERIALIZED_SLABS {
            return Err(CoreError::MemoryGuard(format!(
                "{} slabs exceed the materialization limit",
                self.n_slabs
            )));
        }
        Ok(self.n_slabs as usize)
    }

    /// Evaluates hat function psi at grid node `node` (0-based) at x.
    pub fn hat(&self, node: usize, x: f64) -> f64 {
        let xc = node as f64 * self.dx;
        (1.0 - (x - xc).abs() / self.dx).max(0.0)
    }
}

/// Gram matrix of the hat basis with its banded Cholesky factor.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    matrix: SymBanded,
    chol: BandedCholesky,
    dx: f64,
}

/// Assembles the tridiagonal hat Gram matrix and factors it.
pub fn build_gram(grid: &SpaceTimeGrid) -> GramMatrix {
    let n = grid.n_hats();
    let dx = grid.dx;
    let mut g = SymBanded::zeros(n, 1);
    for i in 0..n {
        let diag = if i == 0 || i == n - 1 {
            dx / 3.0
        } else {
            2.0 * dx / 3.0
        };
        g.set(i, i, diag);
        if i + 1 < n {
            g.set(i + 1, i, dx / 6.0);
        }
    }
    let chol = g
        .cholesky()
        .expect("hat Gram matrix is symmetric positive definite");
    GramMatrix {
        matrix: g,
        chol,
        dx,
    }
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn matrix(&self) -> &SymBanded {
        &self.matrix
    }

    pub fn cholesky(&self) -> &BandedCholesky {
        &self.chol
    }

    /// Solves G x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.chol.solve(b)
    }

    /// x^T G^{-1} y through one banded solve.
    pub fn inv_quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        let solved = self.chol.solve(y);
        x.iter().zip(&solved).map(|(a, b)| a * b).sum()
    }
}

/// One realization of the slab vectors R and the induced spline field.
#[derive(Debug, Clone)]
pub struct NoiseSample {
    /// r[n][i]: stochastic integral of hat i over slab n+1.
    r: Vec<Vec<f64>>,
    /// Per-slab spline coefficients a_n = G^{-1} R_n / dt.
    a: Vec<Vec<f64>>,
    pub seed: u64,
    pub grid: SpaceTimeGrid,
}

impl NoiseSample {
    /// Builds the sample from given slab vectors (used by tests, CSV import
    /// and the coupling oracle).
    pub fn from_r(grid: &SpaceTimeGrid, gram: &GramMatrix, r: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let n_slabs = grid.materialized_slabs()?;
        if r.len() != n_slabs || r.iter().any(|row| row.len() != grid.n_hats()) {
            return Err(CoreError::ShapeMismatch(format!(
                "R must be {} x {}",
                n_slabs,
                grid.n_hats()
            )));
        }
        let a = r
            .iter()
            .map(|row| {
                let mut v = gram.solve(row);
                for x in &mut v {
                    *x /= grid.dt;
                }
                v
            })
            .collect();
        Ok(Self {
            r,
            a,
            seed,
            grid: *grid,
        })
    }

    pub fn n_slabs(&self) -> usize {
        self.r.len()
    }

    /// Slab vector R_n, n is 1-based.
    pub fn r_slab(&self, n: usize) -> &[f64] {
        &self.r[n - 1]
    }

    /// Spline coefficients of W-hat on slab n (1-based).
    pub fn a_slab(&self, n: usize) -> &[f64] {
        &self.a[n - 1]
    }

    /// CSV export with header `n,i,r` (both indices 1-based).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,i,r\n");
        for (n, row) in self.r.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{:.16e}\n", n + 1, i + 1, v));
            }
        }
        out
    }

    /// Parses the `n,i,r` CSV format produced by `to_csv`.
    pub fn from_csv(grid: &SpaceTimeGrid, gram: &GramMatrix, text: &str, seed: u64) -> Result<Self> {
        let n_slabs = grid.materialized_slabs()?;
        let mut r = vec![vec![f64::NAN; grid.n_hats()]; n_slabs];
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                if line.trim() != "n,i,r" {
                    return Err(CoreError::Parse(format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let mut field = |name: &str| {
                parts
                    .next()
                    .ok_or_else(|| CoreError::Parse(format!("line {}: missing {name}", lineno + 1)))
            };
            let n: usize = field("n")?
                .trim()
                .parse()
                .map_err(|e| CoreError::Parse(format!("line {}: {e}", lineno + 1)))?;
            let i: usize = field("i")?
                .trim()
                .parse()
                .map_err(|e| CoreError::Parse(format!("line {}: {e}", lineno + 1)))?;
            let v: f64 = field("r")?
                .trim()
                .parse()
                .map_err(|e| CoreError::Parse(format!("line {}: {e}", lineno + 1)))?;
            if n < 1 || n > n_slabs || i < 1 || i > grid.n_hats() {
                return Err(CoreError::Parse(format!(
                    "line {}: indices ({n},{i}) out of range",
                    lineno + 1
                )));
            }
            r[n - 1][i - 1] = v;
        }
        if r.iter().flatten().any(|v| v.is_nan()) {
            return Err(CoreError::Parse("incomplete R matrix".into()));
        }
        Self::from_r(grid, gram, r, seed)
    }
}

/// Draws R with law N(0, dt G) per slab, independent across slabs, through
/// the banded Cholesky factor of G.
pub fn sample_noise(grid: &SpaceTimeGrid, gram: &GramMatrix, seed: u64) -> Result<NoiseSample> {
    let n_slabs = grid.materialized_slabs()?;
    let n = grid.n_hats();
    let mut rng = stream_rng(seed, 0);
    let sqrt_dt = grid.dt.sqrt();
    let mut r = Vec::with_capacity(n_slabs);
    let mut xi = vec![0.0; n];
    let mut row = vec![0.0; n];
    for _ in 0..n_slabs {
        for x in &mut xi {
            *x = rng.sample::<f64, _>(StandardNormal);
        }
        gram.cholesky().factor_matvec(&xi, &mut row);
        r.push(row.iter().map(|v| v * sqrt_dt).collect());
    }
    NoiseSample::from_r(grid, gram, r, seed)
}

/// Pointwise value of the regularized noise field W-hat.
pub fn eval_what(sample: &NoiseSample, t: f64, x: f64) -> Result<f64> {
    let grid = &sample.grid;
    if !(0.0..=1.0).contains(&x) {
        return Err(CoreError::OutOfRange(format!("x={x} outside [0,1]")));
    }
    let n = grid.slab_of(t)? as usize;
    let a = sample.a_slab(n);
    // W-hat is linear between nodes; two hats are active at x.
    let cell = ((x / grid.dx) as usize).min(grid.j_cells - 1);
    let theta = x / grid.dx - cell as f64;
    Ok(a[cell] * (1.0 - theta) + a[cell + 1] * theta)
}

/// Inner products of the hat basis against one spectral mode.
///
/// Returns (c_k, d_k) with c_k[i] = (eps_k', psi_i) and d_k[i] = (phi_k, psi_i),
/// assembled from per-cell closed-form antiderivatives of linear-times-trig
/// products; c_k = lambda_k d_k holds exactly. k = 0 is admitted for d only
/// (c is returned empty).
pub fn basis_spline_inners(grid: &SpaceTimeGrid, k: usize) -> (Vec<f64>, Vec<f64>) {
    let d = cos_spline_inners(grid, k);
    if k == 0 {
        return (Vec::new(), d);
    }
    let lam = ModelParams::lambda(k);
    let c = d.iter().map(|v| lam * v).collect();
    (c, d)
}

/// d_k[i] = (phi_k, psi_i) for the cosine family (k = 0 gives plain hat
/// integrals).
pub fn cos_spline_inners(grid: &SpaceTimeGrid, k: usize) -> Vec<f64> {
    let dx = grid.dx;
    let j = grid.j_cells;
    let mut d = vec![0.0; j + 1];
    if k == 0 {
        for (node, v) in d.iter_mut().enumerate() {
            *v = if node == 0 || node == j { dx / 2.0 } else { dx };
        }
        return d;
    }
    let lam = ModelParams::lambda(k);
    let s2 = 2f64.sqrt();
    for (node, v) in d.iter_mut().enumerate() {
        let mut acc = 0.0;
        if node > 0 {
            // rising piece on [x_{node-1}, x_node]
            let y0 = (node - 1) as f64 * dx;
            acc += poly_cos_integral(&[0.0, 1.0 / dx], lam, y0, dx);
        }
        if node < j {
            // falling piece on [x_node, x_{node+1}]
            let y0 = node as f64 * dx;
            acc += poly_cos_integral(&[1.0, -1.0 / dx], lam, y0, dx);
        }
        *v = s2 * acc;
    }
    d
}

/// s_k[i] = (eps_k, psi_i) for the sine family, k >= 1.
pub fn sine_spline_inners(grid: &SpaceTimeGrid, k: usize) -> Vec<f64> {
    assert!(k >= 1);
    let dx = grid.dx;
    let j = grid.j_cells;
    let lam = ModelParams::lambda(k);
    let s2 = 2f64.sqrt();
    let mut s = vec![0.0; j + 1];
    for (node, v) in s.iter_mut().enumerate() {
        let mut acc = 0.0;
        if node > 0 {
            let y0 = (node - 1) as f64 * dx;
            acc += poly_sin_integral(&[0.0, 1.0 / dx], lam, y0, dx);
        }
        if node < j {
            let y0 = node as f64 * dx;
            acc += poly_sin_integral(&[1.0, -1.0 / dx], lam, y0, dx);
        }
        *v = s2 * acc;
    }
    s
}

/// A function on (0,T) x D that is constant in time on each slab, in one of
/// three exact representations.
#[derive(Debug, Clone)]
pub enum SlabFn {
    /// Per-slab sine-basis coefficients (slab average of the field).
    Spectral(Vec<SpectralField>),
    /// Per-slab hat coefficients.
    Hat(Vec<Vec<f64>>),
    /// Per-slab exact inner products q_n[i] = (1/dt) int_{T_n} (g, psi_i) ds,
    /// for callers that integrate g themselves.
    Inners(Vec<Vec<f64>>),
}

impl SlabFn {
    pub fn n_slabs(&self) -> usize {
        match self {
            SlabFn::Spectral(v) => v.len(),
            SlabFn::Hat(v) => v.len(),
            SlabFn::Inners(v) => v.len(),
        }
    }
}

fn slab_inners(g: &SlabFn, grid: &SpaceTimeGrid, gram: &GramMatrix) -> Result<Vec<Vec<f64>>> {
    let n_slabs = grid.materialized_slabs()?;
    if g.n_slabs() != n_slabs {
        return Err(CoreError::ShapeMismatch(format!(
            "slab function has {} slabs, grid has {}",
            g.n_slabs(),
            n_slabs
        )));
    }
    match g {
        SlabFn::Spectral(fields) => {
            let k_max = fields.iter().map(|f| f.k_max()).max().unwrap_or(0);
            let sines: Vec<Vec<f64>> = (1..=k_max)
                .map(|k| sine_spline_inners(grid, k))
                .collect();
            Ok(fields
                .iter()
                .map(|f| {
                    let mut q = vec![0.0; grid.n_hats()];
                    for (i, &c) in f.coeffs().iter().enumerate() {
                        if c != 0.0 {
                            for (qv, sv) in q.iter_mut().zip(&sines[i]) {
                                *qv += c * sv;
                            }
                        }
                    }
                    q
                })
                .collect())
        }
        SlabFn::Hat(coeffs) => Ok(coeffs
            .iter()
            .map(|c| {
                let mut q = vec![0.0; grid.n_hats()];
                gram.matrix().matvec(c, &mut q);
                q
            })
            .collect()),
        SlabFn::Inners(q) => Ok(q.clone()),
    }
}

/// Orthogonal projection onto the span of slab-indicator times hat
/// functions; returns per-slab hat coefficients.
pub fn project_pi_hat(g: &SlabFn, grid: &SpaceTimeGrid, gram: &GramMatrix) -> Result<Vec<Vec<f64>>> {
    Ok(slab_inners(g, grid, gram)?
        .into_iter()
        .map(|q| gram.solve(&q))
        .collect())
}

/// Squared space-time L2 norm of a slab-constant function.
pub fn slab_fn_norm_sq(g: &SlabFn, grid: &SpaceTimeGrid, gram: &GramMatrix) -> Result<f64> {
    let n_slabs = grid.materialized_slabs()?;
    if g.n_slabs() != n_slabs {
        return Err(CoreError::ShapeMismatch("slab count mismatch".into()));
    }
    Ok(match g {
        SlabFn::Spectral(fields) => {
            grid.dt
                * fields
                    .iter()
                    .map(|f| f.coeffs().iter().map(|c| c * c).sum::<f64>())
                    .sum::<f64>()
        }
        SlabFn::Hat(coeffs) => {
            grid.dt
                * coeffs
                    .iter()
                    .map(|c| gram.matrix().quad_form(c, c))
                    .sum::<f64>()
        }
        SlabFn::Inners(_) => {
            return Err(CoreError::InvalidParameter(
                "norm of an inner-product representation is not defined".into(),
            ))
        }
    })
}

/// Pathwise identity between the stochastic integral of the projection of g
/// and the space-time inner product of W-hat with g.
///
/// Both sides are finite linear combinations of the entries of R once the
/// sample is fixed; they are evaluated through different solve paths and
/// returned as (lhs, rhs).
pub fn ito_identity_check(
    g: &SlabFn,
    sample: &NoiseSample,
    gram: &GramMatrix,
) -> Result<(f64, f64)> {
    let grid = &sample.grid;
    let q = slab_inners(g, grid, gram)?;
    // lhs: stochastic integral of the projection, sum_n (G^{-1} q_n) . R_n.
    let mut lhs = 0.0;
    for (n, qn) in q.iter().enumerate() {
        let b = gram.solve(qn);
        lhs += b
            .iter()
            .zip(sample.r_slab(n + 1))
            .map(|(x, y)| x * y)
            .sum::<f64>();
    }
    // rhs: int int W-hat g = sum_n dt * a_n . q_n.
    let mut rhs = 0.0;
    for (n, qn) in q.iter().enumerate() {
        rhs += grid.dt
            * sample
                .a_slab(n + 1)
                .iter()
                .zip(qn)
                .map(|(x, y)| x * y)
                .sum::<f64>();
    }
    Ok((lhs, rhs))
}

/// Coupled realization of the driving noise: Brownian increments per cosine
/// mode on a sub-grid of each slab, together with the slab vectors R they
/// induce through the mode expansion of the hats.
#[derive(Debug, Clone)]
pub struct CoupledNoise {
    /// dbeta[k][n * rho + s]: increment of the mode-k Brownian motion over
    /// sub-step s of slab n+1 (k = 0..=k_couple).
    pub(crate) dbeta: Vec<Vec<f64>>,
    pub k_couple: usize,
    pub rho: usize,
    pub grid: SpaceTimeGrid,
    /// Induced slab vectors R[n][i] = sum_k d_k[i] dbeta_{k,n}.
    pub r: Vec<Vec<f64>>,
    pub seed: u64,
}

impl CoupledNoise {
    pub fn sub_dt(&self) -> f64 {
        self.grid.dt / self.rho as f64
    }

    pub fn dbeta_mode(&self, k: usize) -> &[f64] {
        &self.dbeta[k]
    }

    /// Slab increment of the mode-k Brownian motion (n 1-based).
    pub fn dbeta_slab(&self, k: usize, n: usize) -> f64 {
        self.dbeta[k][(n - 1) * self.rho..n * self.rho].iter().sum()
    }

    /// Wraps the induced R into a NoiseSample (shares the law of the
    /// regularized noise up to the mode truncation of the hats).
    pub fn induced_sample(&self, gram: &GramMatrix) -> Result<NoiseSample> {
        NoiseSample::from_r(&self.grid, gram, self.r.clone(), self.seed)
    }
}

/// Samples the coupled noise: independent N(0, dt/rho) increments for each
/// cosine mode and sub-step, and the induced R.
pub fn sample_coupled_noise(
    grid: &SpaceTimeGrid,
    k_couple: usize,
    rho: usize,
    seed: u64,
) -> Result<CoupledNoise> {
    if k_couple < 1 || rho < 1 {
        return Err(CoreError::InvalidParameter(
            "coupling needs k_couple >= 1 and rho >= 1".into(),
        ));
    }
    let n_slabs = grid.materialized_slabs()?;
    let total = n_slabs
        .checked_mul(rho)
        .and_then(|v| v.checked_mul(k_couple + 1))
        .ok_or_else(|| CoreError::MemoryGuard("coupled noise size overflow".into()))?;
    if total > 2_000_000_000 {
        return Err(CoreError::MemoryGuard(format!(
            "coupled noise would hold {total} increments"
        )));
    }

    let sub_sd = (grid.dt / rho as f64).sqrt();
    let mut rng = stream_rng(seed, 0);
    let mut dbeta = vec![vec![0.0; n_slabs * rho]; k_couple + 1];
    for row in &mut dbeta {
        for v in row.iter_mut() {
            *v = sub_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let d: Vec<Vec<f64>> = (0..=k_couple)
        .map(|k| cos_spline_inners(grid, k))
        .collect();
    let mut r = vec![vec![0.0; grid.n_hats()]; n_slabs];
    for (k, dk) in d.iter().enumerate() {
        for n in 0..n_slabs {
            let slab_inc: f64 = dbeta[k][n * rho..(n + 1) * rho].iter().sum();
            for (ri, di) in r[n].iter_mut().zip(dk) {
                *ri += di * slab_inc;
            }
        }
    }
    Ok(CoupledNoise {
        dbeta,
        k_couple,
        rho,
        grid: *grid,
        r,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::composite_gauss;

    fn grid(t: f64, n: u64, j: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::new(t, n, j).unwrap()
    }

    #[test]
    fn grid_invariants() {
        let g = grid(1.0, 7, 5);
        assert!((g.dt * g.n_slabs as f64 - g.t_final).abs() < 1e-15);
        assert!((g.dx * g.j_cells as f64 - 1.0).abs() < 1e-15);
        assert!(SpaceTimeGrid::new(0.0, 1, 1).is_err());
        assert!(SpaceTimeGrid::new(1.0, 0, 1).is_err());
    }

    #[test]
    fn slab_convention() {
        let g = grid(1.0, 4, 2);
        assert_eq!(g.slab_of(0.0).unwrap(), 1);
        assert_eq!(g.slab_of(0.25).unwrap(), 1);
        assert_eq!(g.slab_of(0.2500001).unwrap(), 2);
        assert_eq!(g.slab_of(1.0).unwrap(), 4);
        assert!(g.slab_of(1.5).is_err());
    }

    #[test]
    fn gram_entries_closed_form() {
        let g = grid(1.0, 1, 2);
        let gram = build_gram(&g);
        assert!((gram.entry(0, 0) - 1.0 / 6.0).abs() < 1e-16);
        assert!((gram.entry(1, 1) - 1.0 / 3.0).abs() < 1e-16);
        assert!((gram.entry(2, 2) - 1.0 / 6.0).abs() < 1e-16);
        assert!((gram.entry(1, 0) - 1.0 / 12.0).abs() < 1e-16);

        let g4 = grid(1.0, 1, 4);
        let gram4 = build_gram(&g4);
        assert!((gram4.entry(1, 1) - 1.0 / 6.0).abs() < 1e-16);
    }

    #[test]
    fn gram_partition_of_unity_and_factor() {
        for j in [1usize, 2, 5, 16, 33] {
            let g = grid(1.0, 1, j);
            let gram = build_gram(&g);
            assert!((gram.matrix().entry_sum() - 1.0).abs() < 1e-14, "J={j}");
            // L L^T reconstructs G.
            let n = gram.n();
            for i in 0..n {
                for jj in i.saturating_sub(1)..=(i + 1).min(n - 1) {
                    let mut v = 0.0;
                    for k in 0..n {
                        v += gram.cholesky().factor_get(i, k) * gram.cholesky().factor_get(jj, k);
                    }
                    assert!((v - gram.entry(i, jj)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn sample_round_trip_and_reproducibility() {
        let g = grid(0.5, 6, 8);
        let gram = build_gram(&g);
        let s1 = sample_noise(&g, &gram, 42).unwrap();
        let s2 = sample_noise(&g, &gram, 42).unwrap();
        let s3 = sample_noise(&g, &gram, 43).unwrap();
        assert_eq!(s1.r, s2.r);
        assert_ne!(s1.r, s3.r);
        // G (dt a_n) = R_n round trip.
        for n in 1..=6 {
            let mut back = vec![0.0; g.n_hats()];
            let scaled: Vec<f64> = s1.a_slab(n).iter().map(|v| v * g.dt).collect();
            gram.matrix().matvec(&scaled, &mut back);
            for (b, r) in back.iter().zip(s1.r_slab(n)) {
                assert!((b - r).abs() <= 1e-12 * r.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn csv_round_trip_bit_exact() {
        let g = grid(0.5, 3, 4);
        let gram = build_gram(&g);
        let s = sample_noise(&g, &gram, 7).unwrap();
        let text = s.to_csv();
        let back = NoiseSample::from_csv(&g, &gram, &text, 7).unwrap();
        assert_eq!(s.r, back.r);
        assert!(NoiseSample::from_csv(&g, &gram, "bogus\n1,1,0.0", 7).is_err());
    }

    #[test]
    fn eval_what_examples() {
        let g = grid(1.0, 4, 8);
        let gram = build_gram(&g);
        let zero = NoiseSample::from_r(&g, &gram, vec![vec![0.0; 9]; 4], 0).unwrap();
        assert_eq!(eval_what(&zero, 0.3, 0.5).unwrap(), 0.0);

        let s = sample_noise(&g, &gram, 1).unwrap();
        let doubled_r: Vec<Vec<f64>> = s.r.iter().map(|row| row.iter().map(|v| 2.0 * v).collect()).collect();
        let d = NoiseSample::from_r(&g, &gram, doubled_r, 1).unwrap();
        for &(t, x) in &[(0.0, 0.1), (0.3, 0.77), (1.0, 0.5)] {
            let a = eval_what(&s, t, x).unwrap();
            let b = eval_what(&d, t, x).unwrap();
            assert!((b - 2.0 * a).abs() < 1e-13 * a.abs().max(1.0));
        }
        assert!(eval_what(&s, 1.1, 0.5).is_err());
        assert!(eval_what(&s, 0.5, -0.1).is_err());
    }

    #[test]
    fn manufactured_slab_reproduces_hat() {
        // R_n = dt * (G e_i) makes a_n = e_i, so W-hat equals psi_i on the slab.
        let g = grid(1.0, 2, 5);
        let gram = build_gram(&g);
        let i = 3usize;
        let mut e = vec![0.0; g.n_hats()];
        e[i] = 1.0;
        let mut ge = vec![0.0; g.n_hats()];
        gram.matrix().matvec(&e, &mut ge);
        let r1: Vec<f64> = ge.iter().map(|v| v * g.dt).collect();
        let r = vec![r1, vec![0.0; g.n_hats()]];
        let s = NoiseSample::from_r(&g, &gram, r, 0).unwrap();
        for &x in &[0.0, 0.15, 0.5, 0.62, 1.0] {
            let v = eval_what(&s, 0.2, x).unwrap();
            assert!((v - g.hat(i, x)).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_inners_match_quadrature_oracle() {
        let g = grid(1.0, 1, 7);
        for k in [1usize, 2, 5, 11] {
            let (c, d) = basis_spline_inners(&g, k);
            let s = sine_spline_inners(&g, k);
            let lam = ModelParams::lambda(k);
            for node in 0..g.n_hats() {
                let lo = (node as f64 - 1.0).max(0.0) * g.dx;
                let hi = ((node + 1) as f64).min(g.j_cells as f64) * g.dx;
                // 64-point composite Gauss oracle per hat support.
                let od = composite_gauss(lo, hi, 8, 8, &|y| {
                    2f64.sqrt() * (lam * y).cos() * g.hat(node, y)
                });
                let os = composite_gauss(lo, hi, 8, 8, &|y| {
                    2f64.sqrt() * (lam * y).sin() * g.hat(node, y)
                });
                assert!((d[node] - od).abs() < 1e-12, "d k={k} node={node}");
                assert!((s[node] - os).abs() < 1e-12, "s k={k} node={node}");
                assert!((c[node] - lam * d[node]).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn hat_integrals_for_mode_zero() {
        let g = grid(1.0, 1, 6);
        let (_, d0) = basis_spline_inners(&g, 0);
        for node in 0..=6 {
            let expect = if node == 0 || node == 6 { g.dx / 2.0 } else { g.dx };
            assert!((d0[node] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_idempotent_and_nonexpansive() {
        let g = grid(1.0, 3, 6);
        let gram = build_gram(&g);
        let coeffs: Vec<Vec<f64>> = (0..3)
            .map(|n| (0..7).map(|i| ((n * 7 + i) as f64 * 0.3).sin()).collect())
            .collect();
        let gfun = SlabFn::Hat(coeffs.clone());
        let proj = project_pi_hat(&gfun, &g, &gram).unwrap();
        for (p, c) in proj.iter().zip(&coeffs) {
            for (a, b) in p.iter().zip(c) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Non-expansive on a spectral slab function.
        let fields: Vec<SpectralField> = (0..3)
            .map(|n| SpectralField::from_coeffs((0..9).map(|k| ((n + k) as f64).cos()).collect()))
            .collect();
        let gfun = SlabFn::Spectral(fields);
        let proj = project_pi_hat(&gfun, &g, &gram).unwrap();
        let proj_norm_sq = slab_fn_norm_sq(&SlabFn::Hat(proj), &g, &gram).unwrap();
        let g_norm_sq = slab_fn_norm_sq(&gfun, &g, &gram).unwrap();
        assert!(proj_norm_sq.sqrt() <= g_norm_sq.sqrt() + 1e-12);
    }

    #[test]
    fn constants_reproduced_by_projection() {
        // g == 1 supplied through its exact hat inner products.
        let g = grid(1.0, 2, 5);
        let gram = build_gram(&g);
        let (_, d0) = basis_spline_inners(&g, 0);
        let q = SlabFn::Inners(vec![d0.clone(), d0]);
        let proj = project_pi_hat(&q, &g, &gram).unwrap();
        for row in proj {
            for v in row {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ito_identity_examples() {
        let g = grid(1.0, 4, 6);
        let gram = build_gram(&g);
        let s = sample_noise(&g, &gram, 5).unwrap();

        let zero = SlabFn::Hat(vec![vec![0.0; 7]; 4]);
        let (l, r) = ito_identity_check(&zero, &s, &gram).unwrap();
        assert_eq!((l, r), (0.0, 0.0));

        // g = indicator of slab 1 times psi_3.
        let mut hat = vec![vec![0.0; 7]; 4];
        hat[0][3] = 1.0;
        let (l, r) = ito_identity_check(&SlabFn::Hat(hat), &s, &gram).unwrap();
        assert!((l - r).abs() <= 1e-12 * (l.abs() + 1.0));
    }

    #[test]
    fn coupled_noise_parseval_and_reduction() {
        let g = grid(0.5, 2, 4);
        let gram = build_gram(&g);
        let k_couple = 64 * g.j_cells;
        let c = sample_coupled_noise(&g, k_couple, 1, 9).unwrap();
        // Partial sums of d_k d_k^T approach G entrywise within 2%.
        let d: Vec<Vec<f64>> = (0..=k_couple).map(|k| cos_spline_inners(&g, k)).collect();
        for i in 0..g.n_hats() {
            for j in i..(i + 2).min(g.n_hats()) {
                let sum: f64 = d.iter().map(|dk| dk[i] * dk[j]).sum();
                let exact = gram.entry(i, j);
                assert!(
                    (sum - exact).abs() <= 0.02 * exact.abs().max(1e-3),
                    "({i},{j}): {sum} vs {exact}"
                );
            }
        }
        // rho = 1: slab increment equals the single sub-increment.
        assert_eq!(c.dbeta_slab(1, 1), c.dbeta_mode(1)[0]);
        // Induced R linearity: R[n][i] = sum_k d_k[i] dbeta_{k,n} by construction.
        let mut manual = 0.0;
        for (k, dk) in d.iter().enumerate() {
            manual += dk[2] * c.dbeta_slab(k, 1);
        }
        assert!((c.r[0][2] - manual).abs() < 1e-12 * manual.abs().max(1e-12));
    }
}
