//! Quadrature rules and exact integrals of polynomial-times-trigonometric
//! products.
//!
//! Polynomial integrands are handled by fixed Gauss-Legendre rules of exact
//! order; sine/cosine factors against piecewise polynomials use closed-form
//! antiderivatives so that no quadrature error enters the rate studies.

/// Gauss-Legendre nodes and weights on [-1, 1], exact for degree 2n-1.
pub fn gauss_legendre(n: usize) -> (&'static [f64], &'static [f64]) {
    match n {
        1 => (&GL1_X, &GL1_W),
        2 => (&GL2_X, &GL2_W),
        3 => (&GL3_X, &GL3_W),
        4 => (&GL4_X, &GL4_W),
        5 => (&GL5_X, &GL5_W),
        8 => (&GL8_X, &GL8_W),
        16 => (&GL16_X, &GL16_W),
        _ => panic!("unsupported Gauss rule size {n}"),
    }
}

static GL1_X: [f64; 1] = [0.0];
static GL1_W: [f64; 1] = [2.0];
static GL2_X: [f64; 2] = [-0.5773502691896257, 0.5773502691896257];
static GL2_W: [f64; 2] = [1.0, 1.0];
static GL3_X: [f64; 3] = [-0.7745966692414834, 0.0, 0.7745966692414834];
static GL3_W: [f64; 3] = [
    0.5555555555555556,
    0.8888888888888888,
    0.5555555555555556,
];
static GL4_X: [f64; 4] = [
    -0.8611363115940526,
    -0.3399810435848563,
    0.3399810435848563,
    0.8611363115940526,
];
static GL4_W: [f64; 4] = [
    0.3478548451374538,
    0.6521451548625461,
    0.6521451548625461,
    0.3478548451374538,
];
static GL5_X: [f64; 5] = [
    -0.9061798459386640,
    -0.5384693101056831,
    0.0,
    0.5384693101056831,
    0.9061798459386640,
];
static GL5_W: [f64; 5] = [
    0.2369268850561891,
    0.4786286704993665,
    0.5688888888888889,
    0.4786286704993665,
    0.2369268850561891,
];
static GL8_X: [f64; 8] = [
    -0.9602898564975363,
    -0.7966664774136267,
    -0.5255324099163290,
    -0.1834346424956498,
    0.1834346424956498,
    0.5255324099163290,
    0.7966664774136267,
    0.9602898564975363,
];
static GL8_W: [f64; 8] = [
    0.1012285362903763,
    0.2223810344533745,
    0.3137066458778873,
    0.3626837833783620,
    0.3626837833783620,
    0.3137066458778873,
    0.2223810344533745,
    0.1012285362903763,
];
static GL16_X: [f64; 16] = [
    -0.9894009349916499,
    -0.9445750230732326,
    -0.8656312023878318,
    -0.7554044083550030,
    -0.6178762444026438,
    -0.4580167776572274,
    -0.2816035507792589,
    -0.0950125098376374,
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
static GL16_W: [f64; 16] = [
    0.0271524594117541,
    0.0622535239386479,
    0.0951585116824928,
    0.1246289712555339,
    0.1495959888165767,
    0.1691565193950025,
    0.1826034150449236,
    0.1894506104550685,
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

/// Integrates `f` over [a, b] with an n-point Gauss rule.
pub fn gauss_integrate<F: Fn(f64) -> f64>(a: f64, b: f64, n: usize, f: F) -> f64 {
    let (xs, ws) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (&x, &w) in xs.iter().zip(ws) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Composite Gauss rule: `parts` panels of an n-point rule.
pub fn composite_gauss<F: Fn(f64) -> f64>(a: f64, b: f64, n: usize, parts: usize, f: &F) -> f64 {
    let h = (b - a) / parts as f64;
    let mut acc = 0.0;
    for p in 0..parts {
        acc += gauss_integrate(a + p as f64 * h, a + (p + 1) as f64 * h, n, f);
    }
    acc
}

/// (1 - e^{-x}) / x, continuous through x = 0.
pub fn em1_over(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        -f64::exp_m1(-x) / x
    }
}

/// Sum of the geometric series e^{-a*0} + e^{-a*1} + ... + e^{-a*(count-1)},
/// stable for small |a|.
pub fn geometric_exp_sum(a: f64, count: u64) -> f64 {
    if count == 0 {
        return 0.0;
    }
    if a == 0.0 {
        return count as f64;
    }
    let num = f64::exp_m1(-a * count as f64);
    let den = f64::exp_m1(-a);
    if den == 0.0 {
        // |a| below subnormal resolution.
        count as f64
    } else {
        num / den
    }
}

/// Closed-form integrals of x^m against sin/cos over one interval.
///
/// Returns (S, C) with S[m] = int_0^w xi^m sin(lambda xi) dxi and
/// C[m] = int_0^w xi^m cos(lambda xi) dxi for m = 0..=deg.
fn trig_moments(lambda: f64, w: f64, deg: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(lambda != 0.0);
    let lw = lambda * w;
    let sin_lw = lw.sin();
    let cos_lw = lw.cos();
    let half = (0.5 * lw).sin();
    let one_minus_cos = 2.0 * half * half;

    let mut s = vec![0.0; deg + 1];
    let mut c = vec![0.0; deg + 1];
    s[0] = one_minus_cos / lambda;
    c[0] = sin_lw / lambda;
    let mut wpow = 1.0;
    for m in 1..=deg {
        wpow *= w;
        c[m] = (wpow * sin_lw - m as f64 * s[m - 1]) / lambda;
        s[m] = (-wpow * cos_lw + m as f64 * c[m - 1]) / lambda;
    }
    (s, c)
}

/// int_{y0}^{y0+w} p(y - y0) sin(lambda y) dy for p given by local
/// coefficients p[m] of (y - y0)^m.
pub fn poly_sin_integral(p: &[f64], lambda: f64, y0: f64, w: f64) -> f64 {
    let (s, c) = trig_moments(lambda, w, p.len().saturating_sub(1));
    let (sin0, cos0) = (lambda * y0).sin_cos();
    let mut ic = 0.0;
    let mut is = 0.0;
    for (m, &pm) in p.iter().enumerate() {
        ic += pm * c[m];
        is += pm * s[m];
    }
    sin0 * ic + cos0 * is
}

/// int_{y0}^{y0+w} p(y - y0) cos(lambda y) dy.
pub fn poly_cos_integral(p: &[f64], lambda: f64, y0: f64, w: f64) -> f64 {
    let (s, c) = trig_moments(lambda, w, p.len().saturating_sub(1));
    let (sin0, cos0) = (lambda * y0).sin_cos();
    let mut ic = 0.0;
    let mut is = 0.0;
    for (m, &pm) in p.iter().enumerate() {
        ic += pm * c[m];
        is += pm * s[m];
    }
    cos0 * ic - sin0 * is
}

/// Adaptive Simpson quadrature with absolute/relative tolerance.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        // Relative floor: an absolute tolerance finer than the rounding
        // noise of a large integral would recurse to full depth.
        let tol_eff = tol.max(1e-14 * (left.abs() + right.abs()));
        if depth == 0 || delta.abs() <= 15.0 * tol_eff {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol.max(f64::MIN_POSITIVE), 30)
}
