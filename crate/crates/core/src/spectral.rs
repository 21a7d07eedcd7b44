//! Eigensystem of the fourth-order operator d^4/dx^4 + mu d^2/dx^2 on (0,1)
//! with clamped-moment boundary conditions, in the sine basis.
//!
//! Everything downstream (noise projection, time stepping, error analysis)
//! works with fields expanded against eps_k(x) = sqrt(2) sin(k pi x). The
//! drift eigenvalue of mode k is mu_k = lambda_k^2 (lambda_k^2 - mu) with
//! lambda_k = k pi; it may be negative or zero for k below the spinodal
//! index kappa.

use crate::error::{CoreError, Result};
use crate::quad::{adaptive_simpson, em1_over};
use std::f64::consts::PI;

/// Model parameters: drift coefficient, horizon and mode truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Drift coefficient of the second-order term.
    pub mu: f64,
    /// Spinodal index: the unique positive integer with
    /// (kappa-1)^2 pi^2 <= mu < kappa^2 pi^2.
    pub kappa: u32,
    /// Final time.
    pub t_final: f64,
    /// Mode truncation count used by spectral fields.
    pub k_max: usize,
}

/// Validates (mu, T, K) and determines the spinodal index kappa.
pub fn validate_params(mu: f64, t_final: f64, k_max: usize) -> Result<ModelParams> {
    if !(t_final > 0.0) {
        return Err(CoreError::InvalidParameter(format!(
            "final time must be positive, got {t_final}"
        )));
    }
    if k_max < 1 {
        return Err(CoreError::InvalidParameter(
            "mode truncation must be at least 1".into(),
        ));
    }
    if !mu.is_finite() || mu < 0.0 {
        return Err(CoreError::InvalidParameter(format!(
            "drift coefficient mu={mu} violates (kappa-1)^2 pi^2 <= mu: no positive integer kappa exists"
        )));
    }
    // Smallest kappa with mu < kappa^2 pi^2.
    let mut kappa = (mu.sqrt() / PI).floor() as u32 + 1;
    // Guard against floating-point edge when mu is an exact square of k*pi.
    while (f64::from(kappa) * PI).powi(2) <= mu {
        kappa += 1;
    }
    while kappa > 1 && (f64::from(kappa - 1) * PI).powi(2) > mu {
        kappa -= 1;
    }
    let lower = (f64::from(kappa - 1) * PI).powi(2);
    let upper = (f64::from(kappa) * PI).powi(2);
    debug_assert!(lower <= mu && mu < upper);
    let _ = (lower, upper);
    Ok(ModelParams {
        mu,
        kappa,
        t_final,
        k_max,
    })
}

impl ModelParams {
    /// Spatial frequency lambda_k = k pi.
    pub fn lambda(k: usize) -> f64 {
        k as f64 * PI
    }

    /// Drift eigenvalue mu_k = lambda_k^2 (lambda_k^2 - mu).
    pub fn mu_k(&self, k: usize) -> f64 {
        drift_eigenvalue(k, self.mu)
    }

    pub fn mode(&self, k: usize) -> Mode {
        Mode::new(k, self.mu)
    }
}

/// One sine mode with its frequency and drift eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub k: usize,
    pub lambda_k: f64,
    pub mu_k: f64,
}

impl Mode {
    pub fn new(k: usize, mu: f64) -> Self {
        assert!(k >= 1, "mode index must be positive");
        Self {
            k,
            lambda_k: ModelParams::lambda(k),
            mu_k: drift_eigenvalue(k, mu),
        }
    }
}

/// lambda_k^2 (lambda_k^2 - mu); negative for k below kappa, zero when
/// mu = lambda_k^2 exactly.
pub fn drift_eigenvalue(k: usize, mu: f64) -> f64 {
    assert!(k >= 1, "mode index must be positive");
    let l2 = ModelParams::lambda(k).powi(2);
    l2 * (l2 - mu)
}

/// Basis family selector for pointwise evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// eps_k(x) = sqrt(2) sin(k pi x), k >= 1.
    Sine,
    /// phi_0 = 1, phi_k(x) = sqrt(2) cos(k pi x), k >= 0.
    Cosine,
}

/// Evaluates eps_k or phi_k at x in [0, 1].
pub fn eval_basis(k: usize, x: f64, kind: BasisKind) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(CoreError::OutOfRange(format!("x={x} outside [0,1]")));
    }
    match kind {
        BasisKind::Sine => {
            if k == 0 {
                return Err(CoreError::InvalidParameter(
                    "sine basis starts at k=1".into(),
                ));
            }
            Ok(2f64.sqrt() * (ModelParams::lambda(k) * x).sin())
        }
        BasisKind::Cosine => {
            if k == 0 {
                Ok(1.0)
            } else {
                Ok(2f64.sqrt() * (ModelParams::lambda(k) * x).cos())
            }
        }
    }
}

/// Exact integral of e^{-mu_k (t - s)} over s in [a, b], b <= t.
///
/// Evaluated through expm1 so the mu_k -> 0 limit (b - a) is attained
/// continuously; valid for negative mu_k as well.
pub fn exp_kernel_integral(mu_k: f64, a: f64, b: f64, t: f64) -> Result<f64> {
    if a > b {
        return Err(CoreError::OutOfRange(format!("a={a} > b={b}")));
    }
    if b > t {
        return Err(CoreError::OutOfRange(format!("b={b} > t={t}")));
    }
    Ok((-mu_k * (t - b)).exp() * (b - a) * em1_over(mu_k * (b - a)))
}

/// Field expanded against the sine basis: coeffs[k-1] = (v, eps_k).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(k_max: usize) -> Self {
        Self {
            coeffs: vec![0.0; k_max],
        }
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    /// Unit basis field eps_k.
    pub fn basis(k: usize, k_max: usize) -> Self {
        assert!((1..=k_max).contains(&k));
        let mut coeffs = vec![0.0; k_max];
        coeffs[k - 1] = 1.0;
        Self { coeffs }
    }

    pub fn k_max(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficient (v, eps_k); k is 1-based.
    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs[k - 1]
    }

    pub fn coeff_mut(&mut self, k: usize) -> &mut f64 {
        &mut self.coeffs[k - 1]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Pointwise value sum_k v_k eps_k(x).
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(CoreError::OutOfRange(format!("x={x} outside [0,1]")));
        }
        let mut acc = 0.0;
        for (i, &c) in self.coeffs.iter().enumerate() {
            if c != 0.0 {
                acc += c * 2f64.sqrt() * (ModelParams::lambda(i + 1) * x).sin();
            }
        }
        Ok(acc)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.coeffs.len(), other.coeffs.len());
        Self {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
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
        }
    }
}

/// Smoothness-weighted norm (sum_k lambda_k^{2s} v_k^2)^{1/2} on the
/// truncated expansion.
pub fn dot_norm(v: &SpectralField, s: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &c) in v.coeffs().iter().enumerate() {
        if c != 0.0 {
            acc += ModelParams::lambda(i + 1).powf(2.0 * s) * c * c;
        }
    }
    acc.sqrt()
}

/// Applies the solution semigroup: coefficient k is damped by e^{-mu_k t}.
pub fn semigroup_apply(v: &SpectralField, t: f64, params: &ModelParams) -> Result<SpectralField> {
    if t < 0.0 {
        return Err(CoreError::OutOfRange(format!("negative time t={t}")));
    }
    let coeffs = v
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, &c)| c * (-params.mu_k(i + 1) * t).exp())
        .collect();
    Ok(SpectralField::from_coeffs(coeffs))
}

/// Which elliptic solve to perform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EllipticVariant {
    /// Divide by mu_k; fails if some mu_k vanishes.
    Plain,
    /// Divide by mu_k + mu^2, always positive under the admissibility
    /// condition on mu.
    Shifted,
}

/// Solves the fourth-order elliptic problem mode by mode.
pub fn solve_elliptic_spectral(
    f: &SpectralField,
    params: &ModelParams,
    variant: EllipticVariant,
) -> Result<SpectralField> {
    let mut coeffs = Vec::with_capacity(f.k_max());
    for (i, &c) in f.coeffs().iter().enumerate() {
        let k = i + 1;
        let mu_k = params.mu_k(k);
        let denom = match variant {
            EllipticVariant::Plain => {
                if mu_k == 0.0 {
                    return Err(CoreError::SingularOperator { mode: k });
                }
                mu_k
            }
            EllipticVariant::Shifted => mu_k + params.mu * params.mu,
        };
        coeffs.push(c / denom);
    }
    Ok(SpectralField::from_coeffs(coeffs))
}

/// Semigroup regularity bound: integrated, weighted time-derivative norms
/// against a constant times a smoothness norm of the initial value.
///
/// Returns (lhs, rhs). The left side is computed termwise in the truncated
/// basis with adaptive quadrature in time; the right side assembles the
/// constant (1 + mu/pi^2 + mu^2/pi^4)^{2 ell} * Gamma(beta+1) * e^{2 mu^2 T}
/// * max(ell, 1) against the norm of index p + 4 ell - 2 beta - 2.
pub fn check_regularity_bound(
    w0: &SpectralField,
    ell: u32,
    beta: f64,
    p: f64,
    t_a: f64,
    t_b: f64,
    params: &ModelParams,
) -> Result<(f64, f64)> {
    if !(0.0 <= t_a && t_a <= t_b && t_b <= params.t_final) {
        return Err(CoreError::OutOfRange(format!(
            "invalid interval [{t_a}, {t_b}] within [0, {}]",
            params.t_final
        )));
    }
    if beta < 0.0 || p < 0.0 {
        return Err(CoreError::InvalidParameter(
            "beta and p must be nonnegative".into(),
        ));
    }

    let mut lhs = 0.0;
    for (i, &c) in w0.coeffs().iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let k = i + 1;
        let lam = ModelParams::lambda(k);
        let mu_k = params.mu_k(k);
        let weight = lam.powf(2.0 * p) * mu_k.powi(2 * ell as i32) * c * c;
        if weight == 0.0 && ell > 0 {
            continue;
        }
        let integral = adaptive_simpson(
            &|tau: f64| (tau - t_a).powf(beta) * (-2.0 * mu_k * tau).exp(),
            t_a,
            t_b,
            1e-13,
        );
        lhs += weight * integral;
    }

    let mu = params.mu;
    let c_tilde = (1.0 + mu / PI.powi(2) + mu * mu / PI.powi(4)).powi(2 * ell as i32);
    let gamma_factor = adaptive_simpson(&|x: f64| x.powf(beta) * (-x).exp(), 0.0, 60.0 + 20.0 * beta, 1e-13);
    let constant =
        c_tilde * gamma_factor * (2.0 * mu * mu * params.t_final).exp() * f64::from(ell.max(1));
    let norm_index = 0.5 * (p + 4.0 * f64::from(ell) - 2.0 * beta - 2.0);
    let rhs = constant * dot_norm(w0, norm_index).powi(2);
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    const PI4: f64 = 97.40909103400243;

    #[test]
    fn kappa_determination() {
        assert_eq!(validate_params(0.0, 1.0, 100).unwrap().kappa, 1);
        assert_eq!(validate_params(12.0, 1.0, 100).unwrap().kappa, 2);
        // Boundary: mu exactly at (kappa-1)^2 pi^2 belongs to kappa.
        assert_eq!(validate_params(PI * PI, 1.0, 4).unwrap().kappa, 2);
        assert!(validate_params(-1.0, 1.0, 4).is_err());
        assert!(validate_params(1.0, 0.0, 4).is_err());
        assert!(validate_params(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn kappa_condition_holds_exactly() {
        for &mu in &[0.0, 5.0, 9.8, 12.0, 4.0 * PI * PI, 150.0] {
            let p = validate_params(mu, 1.0, 8).unwrap();
            let km1 = f64::from(p.kappa - 1) * PI;
            let k = f64::from(p.kappa) * PI;
            assert!(km1 * km1 <= mu && mu < k * k, "mu={mu} kappa={}", p.kappa);
        }
    }

    #[test]
    fn drift_eigenvalue_examples() {
        assert!((drift_eigenvalue(1, 0.0) - PI4).abs() < 1e-10);
        assert!((drift_eigenvalue(1, 12.0) + 21.0262).abs() < 2e-3);
        // Exact zero when mu equals lambda_k^2 built from the same expression.
        let mu = (2.0 * PI).powi(2);
        assert_eq!(drift_eigenvalue(2, mu), 0.0);

        let m = Mode::new(2, 12.0);
        assert_eq!(m.lambda_k, 2.0 * PI);
        assert_eq!(m.mu_k, drift_eigenvalue(2, 12.0));
        let p = validate_params(12.0, 1.0, 4).unwrap();
        assert_eq!(p.mode(2).mu_k, m.mu_k);
    }

    #[test]
    fn eigenvalues_positive_from_kappa_on() {
        for &mu in &[0.0, 12.0, 95.0] {
            let p = validate_params(mu, 1.0, 64).unwrap();
            for k in p.kappa as usize..=64 {
                assert!(p.mu_k(k) > 0.0, "mu={mu} k={k}");
            }
        }
    }

    #[test]
    fn basis_values() {
        assert!((eval_basis(1, 0.5, BasisKind::Sine).unwrap() - 2f64.sqrt()).abs() < 1e-14);
        for k in 1..6 {
            assert_eq!(eval_basis(k, 0.0, BasisKind::Sine).unwrap(), 0.0);
        }
        assert_eq!(eval_basis(0, 0.7, BasisKind::Cosine).unwrap(), 1.0);
        assert!(eval_basis(1, 1.2, BasisKind::Sine).is_err());
        assert!(eval_basis(0, 0.5, BasisKind::Sine).is_err());
    }

    #[test]
    fn exp_kernel_examples() {
        assert!((exp_kernel_integral(0.0, 0.1, 0.3, 1.0).unwrap() - 0.2).abs() < 1e-16);
        let v = exp_kernel_integral(1.0, 0.0, 1.0, 1.0).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        let v = exp_kernel_integral(1e-14, 0.0, 0.5, 0.5).unwrap();
        assert!((v - 0.5).abs() <= 1e-12 * 0.5);
        assert!(exp_kernel_integral(1.0, 0.5, 0.2, 1.0).is_err());
        assert!(exp_kernel_integral(1.0, 0.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn exp_kernel_continuous_at_zero_rate() {
        let v = exp_kernel_integral(1e-10, 0.0, 0.5, 0.5).unwrap();
        assert!((v - 0.5).abs() <= 1e-10 * 0.5);
    }

    #[test]
    fn semigroup_examples() {
        let p = validate_params(0.0, 1.0, 4).unwrap();
        let v = SpectralField::basis(1, 4);
        let w = semigroup_apply(&v, 0.0, &p).unwrap();
        assert_eq!(w.coeff(1), 1.0);
        let w = semigroup_apply(&v, 0.01, &p).unwrap();
        assert!((w.coeff(1) - (-0.01 * PI4).exp()).abs() < 1e-15);
        assert!((w.coeff(1) - 0.37754).abs() < 1e-5);

        let p12 = validate_params(12.0, 1.0, 4).unwrap();
        let w = semigroup_apply(&v, 0.1, &p12).unwrap();
        assert!((w.coeff(1) - 8.188).abs() < 2e-3);
        assert!(semigroup_apply(&v, -0.1, &p).is_err());
    }

    #[test]
    fn semigroup_composition() {
        let p = validate_params(12.0, 1.0, 8).unwrap();
        let v = SpectralField::from_coeffs((0..8).map(|i| 1.0 / (i as f64 + 1.0)).collect());
        let a = semigroup_apply(&semigroup_apply(&v, 0.003, &p).unwrap(), 0.007, &p).unwrap();
        let b = semigroup_apply(&v, 0.01, &p).unwrap();
        for k in 1..=8 {
            let rel = (a.coeff(k) - b.coeff(k)).abs() / b.coeff(k).abs().max(1e-300);
            assert!(rel < 1e-12, "mode {k}");
        }
    }

    #[test]
    fn elliptic_solve_examples() {
        let p = validate_params(0.0, 1.0, 4).unwrap();
        let f = SpectralField::basis(1, 4);
        let v = solve_elliptic_spectral(&f, &p, EllipticVariant::Plain).unwrap();
        assert!((v.coeff(1) - 1.0 / PI4).abs() < 1e-15);

        let p12 = validate_params(12.0, 1.0, 4).unwrap();
        let v = solve_elliptic_spectral(&f, &p12, EllipticVariant::Shifted).unwrap();
        assert!((v.coeff(1) - 0.0081318).abs() < 1e-6);

        let p_sing = validate_params(PI * PI, 1.0, 4).unwrap();
        match solve_elliptic_spectral(&f, &p_sing, EllipticVariant::Plain) {
            Err(CoreError::SingularOperator { mode }) => assert_eq!(mode, 1),
            other => panic!("expected singular-operator error, got {other:?}"),
        }
    }

    #[test]
    fn shifted_solve_round_trip() {
        let p = validate_params(12.0, 1.0, 16).unwrap();
        let f = SpectralField::from_coeffs((0..16).map(|i| (i as f64 * 0.37).cos()).collect());
        let v = solve_elliptic_spectral(&f, &p, EllipticVariant::Shifted).unwrap();
        for k in 1..=16 {
            let back = v.coeff(k) * (p.mu_k(k) + p.mu * p.mu);
            assert!((back - f.coeff(k)).abs() <= 1e-12 * f.coeff(k).abs().max(1.0));
        }
    }

    #[test]
    fn dot_norm_examples() {
        let v1 = SpectralField::basis(1, 4);
        assert!((dot_norm(&v1, 0.0) - 1.0).abs() < 1e-15);
        assert!((dot_norm(&v1, 2.0) - PI * PI).abs() < 1e-12);
        let v2 = SpectralField::basis(2, 4);
        assert!((dot_norm(&v2, -1.0) - 1.0 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn dot_norm_parseval_and_monotone_truncation() {
        let coeffs: Vec<f64> = (0..12).map(|i| ((i * 7 + 3) as f64 * 0.11).sin()).collect();
        let v = SpectralField::from_coeffs(coeffs.clone());
        let euclid = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((dot_norm(&v, 0.0) - euclid).abs() < 1e-13);

        let mut prev = 0.0;
        for k in 1..=12 {
            let truncated = SpectralField::from_coeffs(coeffs[..k].to_vec());
            let n = dot_norm(&truncated, 1.5);
            assert!(n + 1e-15 >= prev);
            prev = n;
        }
    }

    #[test]
    fn regularity_bound_examples() {
        let p = validate_params(0.0, 1.0, 8).unwrap();
        let w0 = SpectralField::basis(1, 8);
        // Empty interval.
        let (lhs, rhs) = check_regularity_bound(&w0, 0, 0.0, 0.0, 0.3, 0.3, &p).unwrap();
        assert_eq!(lhs, 0.0);
        assert!(lhs <= rhs);
        // Closed-form single-mode integral.
        let (lhs, rhs) = check_regularity_bound(&w0, 0, 0.0, 0.0, 0.0, 1.0, &p).unwrap();
        let exact = (1.0 - (-2.0 * PI4).exp()) / (2.0 * PI4);
        assert!((lhs - exact).abs() < 1e-12 * exact);
        assert!(lhs <= rhs);
        // Two modes, first time derivative, beta = 2.
        let w0 = SpectralField::basis(1, 8).add(&SpectralField::basis(2, 8));
        let (lhs, rhs) = check_regularity_bound(&w0, 1, 2.0, 0.0, 0.0, 1.0, &p).unwrap();
        let term = |k: usize| {
            let mu_k = drift_eigenvalue(k, 0.0);
            mu_k * mu_k
                * adaptive_simpson(&|t: f64| t * t * (-2.0 * mu_k * t).exp(), 0.0, 1.0, 1e-14)
        };
        let exact = term(1) + term(2);
        assert!((lhs - exact).abs() < 1e-10 * exact);
        assert!(lhs <= rhs);
    }
}
