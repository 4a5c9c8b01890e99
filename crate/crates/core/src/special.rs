//! Special functions and small numerical kernels shared by the model,
//! exact and limits modules.


pub use statrs::function::gamma::{gamma, ln_gamma};

/// `ln Γ(x + a) − ln Γ(x)` without the cancellation of subtracting two
/// large log-gammas. Accurate to a few ulps of the result for `x ≥ 1`.
pub fn ln_gamma_ratio(x: f64, a: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    if x < 12.0 || x + a < 12.0 {
        return ln_gamma(x + a) - ln_gamma(x);
    }
    let y = x + a;
    // (y − ½) ln y − (x − ½) ln x − a, rearranged around ln1p(a/x)
    let mut s = (x - 0.5) * (a / x).ln_1p() + a * y.ln() - a;
    // Stirling correction terms B_{2n} / (2n(2n−1) z^{2n−1})
    const C: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360360.0,
        1.0 / 156.0,
    ];
    let (ix, iy) = (1.0 / x, 1.0 / y);
    let (ix2, iy2) = (ix * ix, iy * iy);
    let (mut px, mut py) = (ix, iy);
    for c in C {
        s += c * (py - px);
        px *= ix2;
        py *= iy2;
    }
    s
}

/// `ln(m! Γ(b) / Γ(m + b))`, the log of the exact power-law tail mass.
pub fn ln_tail_power_law(m: f64, b: f64) -> f64 {
    ln_gamma(b) - ln_gamma_ratio(m + 1.0, b - 1.0)
}

/// Standard normal cdf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp of a slice; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Upper bound on the upper incomplete gamma function `Γ(s, y)` for
/// `s ≥ 1` and `y > s − 1`, returned in log space:
/// `Γ(s, y) ≤ y^{s−1} e^{−y} / (1 − (s−1)/y)`.
pub fn ln_upper_gamma_bound(s: f64, y: f64) -> Option<f64> {
    if s < 1.0 || y <= s - 1.0 {
        return None;
    }
    Some((s - 1.0) * y.ln() - y - (-(s - 1.0) / y).ln_1p())
}

// Gauss–Kronrod 7/15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Result of an adaptive quadrature: value and error estimate.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
}

/// Globally adaptive Gauss–Kronrod (7/15) integration of `f` over `[a, b]`.
///
/// Bisects the interval with the largest error estimate until the summed
/// estimate drops below `max(abs_tol, rel_tol·|value|)` or `max_intervals`
/// is reached; the caller decides what to do with the final error.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Quadrature {
    integrate_pieces(&f, &[a, b], abs_tol, rel_tol, max_intervals)
}

/// Like [`integrate`], starting from the partition given by `breaks`.
pub fn integrate_pieces<F: Fn(f64) -> f64>(
    f: &F,
    breaks: &[f64],
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Quadrature {
    let mut pieces: Vec<(f64, f64, f64, f64)> = breaks
        .windows(2)
        .map(|w| {
            let (v, e) = gk15(f, w[0], w[1]);
            (w[0], w[1], v, e)
        })
        .collect();
    loop {
        let value: f64 = pieces.iter().map(|p| p.2).sum();
        let error: f64 = pieces.iter().map(|p| p.3).sum();
        if error <= abs_tol.max(rel_tol * value.abs()) || pieces.len() >= max_intervals {
            return Quadrature { value, error };
        }
        let (idx, _) = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("nonempty partition");
        let (a, b, _, _) = pieces.swap_remove(idx);
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            // interval can no longer be split in floating point
            return Quadrature { value, error };
        }
        let (v1, e1) = gk15(f, a, m);
        let (v2, e2) = gk15(f, m, b);
        pieces.push((a, m, v1, e1));
        pieces.push((m, b, v2, e2));
    }
}

/// `∫_Y^∞ cos(y) y^{−s} dy` and `∫_Y^∞ sin(y) y^{−s} dy` for `Y` a
/// multiple of `2π`, by repeated integration by parts.
pub fn oscillatory_tail(y: f64, s: f64) -> (f64, f64) {
    fn go(y: f64, s: f64, depth: u32) -> (f64, f64) {
        if depth == 0 {
            return (0.0, 0.0);
        }
        let (ic_next, is_next) = go(y, s + 1.0, depth - 1);
        // I_c(s) = s I_s(s+1); I_s(s) = Y^{-s} − s I_c(s+1)
        (s * is_next, y.powf(-s) - s * ic_next)
    }
    go(y, s, 8)
}

/// `ln C(n, k)` via log-gamma.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Exact binomial coefficient, `None` on overflow of `u128`.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}
