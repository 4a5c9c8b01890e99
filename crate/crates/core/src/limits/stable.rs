//! Completely asymmetric stable law with index `α ∈ (1, 2)` and all of its
//! jumps negative:
//!
//! `log ψ(t) = ∫_{−∞}^0 (e^{itx} − 1 − itx) α|x|^{−α−1} dx
//!           = −C_α|t|^α (1 + i sgn(t) tan(πα/2))`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::special::{gamma, integrate, integrate_pieces, ln_gamma, oscillatory_tail, Quadrature};

/// Relative accuracy demanded of the Lévy integral.
const LEVY_TOL: f64 = 1e-8;
/// Upper end of the explicit oscillatory quadrature, a multiple of `2π`.
const LEVY_CUTOFF: f64 = 2.0 * PI * 200.0;

const GRID_LO: f64 = -60.0;
const GRID_HI: f64 = 20.0;
const GRID_STEP: f64 = 0.01;

#[derive(Debug)]
pub struct StableLaw {
    alpha: f64,
    c_alpha: f64,
    cdf_grid: OnceLock<Vec<f64>>,
}

impl Clone for StableLaw {
    fn clone(&self) -> Self {
        StableLaw {
            alpha: self.alpha,
            c_alpha: self.c_alpha,
            cdf_grid: self.cdf_grid.clone(),
        }
    }
}

/// The two quadrature evaluations of `log ψ(1)` and the closed-form real part.
#[derive(Debug, Clone, Copy)]
pub struct LevyCheck {
    pub real_line: Complex64,
    pub real_line_error: f64,
    pub contour: Complex64,
    pub contour_error: f64,
    pub closed_form_real: f64,
}

impl StableLaw {
    /// Computes `C_α` by quadrature of the Lévy integral and cross-checks it.
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 1.0 && alpha < 2.0) {
            return Err(domain!("stable index must lie in (1, 2), got {alpha}"));
        }
        let check = levy_check(alpha)?;
        let scale = check.real_line.norm();
        if check.real_line_error > LEVY_TOL * scale || check.contour_error > LEVY_TOL * scale {
            return Err(Error::Quadrature(format!(
                "Levy integral error estimates {:.2e}/{:.2e} exceed tolerance",
                check.real_line_error, check.contour_error
            )));
        }
        if (check.real_line - check.contour).norm() > 1e-6 * scale {
            return Err(Error::Quadrature(format!(
                "quadrature schemes disagree: {} vs {}",
                check.real_line, check.contour
            )));
        }
        Ok(StableLaw {
            alpha,
            c_alpha: -check.real_line.re,
            cdf_grid: OnceLock::new(),
        })
    }

    /// The limit law of the centred maximum for power-law exponent `b`.
    pub fn for_exponent(b: f64) -> Result<Self> {
        Self::new(b - 1.0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c_alpha(&self) -> f64 {
        self.c_alpha
    }

    fn tan_theta(&self) -> f64 {
        (PI * self.alpha / 2.0).tan()
    }

    /// `ψ(t)`.
    pub fn char_fn(&self, t: f64) -> Complex64 {
        if t == 0.0 {
            return Complex64::new(1.0, 0.0);
        }
        let m = self.c_alpha * t.abs().powf(self.alpha);
        Complex64::new(-m, -m * t.signum() * self.tan_theta()).exp()
    }

    /// Cut-off beyond which `|ψ(t)| < e^{−42}`.
    fn t_max(&self) -> f64 {
        (42.0 / self.c_alpha).powf(1.0 / self.alpha)
    }

    fn pieces(&self, u: f64) -> Vec<f64> {
        let tm = self.t_max();
        let freq = u.abs() + self.c_alpha * self.tan_theta().abs() * self.alpha * tm.powf(self.alpha - 1.0);
        let count = ((tm * freq / PI).ceil() as usize).clamp(8, 4000);
        (0..=count).map(|i| tm * i as f64 / count as f64).collect()
    }

    /// Density `𝓛_α(u) = (1/π)∫_0^∞ e^{−Ct^α} cos(C tan(πα/2) t^α + tu) dt`.
    pub fn density(&self, u: f64) -> Result<f64> {
        let (c, a, k) = (self.c_alpha, self.alpha, self.c_alpha * self.tan_theta());
        let f = |t: f64| {
            let ta = t.powf(a);
            (-c * ta).exp() * (k * ta + t * u).cos()
        };
        let q = integrate_pieces(&f, &self.pieces(u), 1e-13, 1e-11, 200_000);
        if q.error > 1e-9 {
            return Err(Error::Quadrature(format!("density inversion at u={u}: error {:.2e}", q.error)));
        }
        Ok(q.value / PI)
    }

    /// Distribution function by Gil-Pelaez inversion,
    /// `F(u) = 1/2 + (1/π)∫_0^∞ e^{−Ct^α} sin(C tan(πα/2) t^α + tu)/t dt`.
    pub fn cdf_direct(&self, u: f64) -> Result<f64> {
        if u < GRID_LO {
            return Ok(self.left_tail(-u).0);
        }
        let (c, a, k) = (self.c_alpha, self.alpha, self.c_alpha * self.tan_theta());
        let f = |t: f64| {
            let ta = t.powf(a);
            (-c * ta).exp() * (k * ta + t * u).sin() / t
        };
        let q = integrate_pieces(&f, &self.pieces(u), 1e-13, 1e-11, 200_000);
        if q.error > 1e-9 {
            return Err(Error::Quadrature(format!("cdf inversion at u={u}: error {:.2e}", q.error)));
        }
        Ok((0.5 + q.value / PI).clamp(0.0, 1.0))
    }

    /// Distribution function from a cached grid on `[−60, 20]` with linear
    /// interpolation; the asymptotic series below the grid, `1` above it.
    pub fn cdf(&self, u: f64) -> f64 {
        if u < GRID_LO {
            return self.left_tail(-u).0;
        }
        if u >= GRID_HI {
            return 1.0;
        }
        let grid = self.cdf_grid.get_or_init(|| self.build_grid());
        let x = (u - GRID_LO) / GRID_STEP;
        let i = (x.floor() as usize).min(grid.len() - 2);
        let w = x - i as f64;
        grid[i] * (1.0 - w) + grid[i + 1] * w
    }

    fn build_grid(&self) -> Vec<f64> {
        let n = ((GRID_HI - GRID_LO) / GRID_STEP).round() as usize;
        let mut g: Vec<f64> = (0..=n)
            .into_par_iter()
            .map(|i| {
                let u = GRID_LO + i as f64 * GRID_STEP;
                self.cdf_direct(u).expect("inversion converges on the grid")
            })
            .collect();
        // enforce monotonicity against quadrature noise
        for i in 1..g.len() {
            if g[i] < g[i - 1] {
                g[i] = g[i - 1];
            }
        }
        g
    }

    /// `(F(−x), ∫_{−∞}^{−x} u 𝓛_α(u) du)` from the convergent-in-practice
    /// series in powers of `x^{−α}`; intended for `x ≥ 20`.
    pub fn left_tail(&self, x: f64) -> (f64, f64) {
        let a = self.alpha;
        // q = −C_α / cos(πα/2) = −Γ(1−α) > 0
        let q = -self.c_alpha / (PI * a / 2.0).cos();
        let (mut cdf, mut mean) = (0.0, 0.0);
        let mut prev = f64::INFINITY;
        for n in 1..80 {
            let nf = n as f64;
            let ln_mag = nf * q.ln() + ln_gamma(nf * a) - ln_gamma(nf + 1.0) - nf * a * x.ln();
            if ln_mag > prev + 1e-12 {
                break;
            }
            prev = ln_mag;
            let s = (nf * PI * a).sin();
            let term = ln_mag.exp() * s;
            cdf += term;
            mean += term * nf * a * x / (nf * a - 1.0);
            if ln_mag < -40.0 {
                break;
            }
        }
        (-cdf / PI, mean / PI)
    }

    /// `∫ 𝓛_α` and `∫ u 𝓛_α(u) du` by quadrature on `[−U, 20]` plus the
    /// left-tail series beyond `−U`.
    pub fn mass_and_mean(&self) -> Result<(f64, f64)> {
        let u0 = 60.0;
        let breaks: Vec<f64> = (0..=160).map(|i| -u0 + i as f64 * 0.5).collect();
        let dens = |u: f64| self.density(u).unwrap_or(f64::NAN);
        let values: Vec<(f64, f64, f64, f64)> = breaks
            .par_windows(2)
            .map(|w| {
                let m = integrate(dens, w[0], w[1], 1e-13, 1e-10, 200);
                let f = integrate(|u| u * dens(u), w[0], w[1], 1e-12, 1e-10, 200);
                (m.value, m.error, f.value, f.error)
            })
            .collect();
        let mass: f64 = values.iter().map(|v| v.0).sum();
        let mean: f64 = values.iter().map(|v| v.2).sum();
        if !(mass.is_finite() && mean.is_finite()) {
            return Err(Error::Quadrature("density evaluation failed".into()));
        }
        let (tail_mass, tail_mean) = self.left_tail(u0);
        Ok((mass + tail_mass, mean + tail_mean))
    }
}

fn y_minus_sin(y: f64) -> f64 {
    if y < 0.5 {
        let y2 = y * y;
        y * y2 * (1.0 / 6.0 - y2 * (1.0 / 120.0 - y2 * (1.0 / 5040.0 - y2 * (1.0 / 362_880.0 - y2 / 39_916_800.0))))
    } else {
        y - y.sin()
    }
}

fn exp_neg_minus_one_plus(s: f64) -> f64 {
    if s < 0.1 {
        let mut term = s * s / 2.0;
        let mut sum = 0.0;
        for k in 3..14 {
            sum += term;
            term *= -s / k as f64;
        }
        sum
    } else {
        (-s).exp_m1() + s
    }
}

fn add(a: Quadrature, b: Quadrature) -> Quadrature {
    Quadrature {
        value: a.value + b.value,
        error: a.error + b.error,
    }
}

/// `log ψ(1)` by quadrature along the real axis: substitution `x = −y`,
/// a power substitution near zero, explicit oscillatory quadrature up to
/// `2π·200` and an integration-by-parts remainder.
fn levy_real_line(alpha: f64) -> (Complex64, f64) {
    let k = 1.0 / (2.0 - alpha);
    let near = |g: &dyn Fn(f64) -> f64| {
        integrate(|s: f64| g(s.powf(k)) * k * s.powf(k - 1.0), 0.0, 1.0, 1e-15, 1e-13, 2000)
    };
    let cos_part = |y: f64| -2.0 * (y / 2.0).sin().powi(2) * y.powf(-alpha - 1.0);
    let sin_part = |y: f64| y_minus_sin(y) * y.powf(-alpha - 1.0);
    let mut breaks = vec![1.0];
    let mut b = PI;
    while b < LEVY_CUTOFF - 1e-9 {
        breaks.push(b);
        b += PI;
    }
    breaks.push(LEVY_CUTOFF);
    let re = add(
        near(&cos_part),
        integrate_pieces(&cos_part, &breaks, 1e-15, 1e-13, 20_000),
    );
    let im = add(
        near(&sin_part),
        integrate_pieces(&sin_part, &breaks, 1e-15, 1e-13, 20_000),
    );
    let (ic, is) = oscillatory_tail(LEVY_CUTOFF, alpha + 1.0);
    let re_tail = ic - LEVY_CUTOFF.powf(-alpha) / alpha;
    let im_tail = LEVY_CUTOFF.powf(1.0 - alpha) / (alpha - 1.0) - is;
    (
        Complex64::new(alpha * (re.value + re_tail), alpha * (im.value + im_tail)),
        alpha * (re.error + im.error),
    )
}

/// `log ψ(1)` after rotating the integration path onto the negative
/// imaginary axis, which turns the oscillatory integral into
/// `α e^{iπα/2} ∫_0^∞ (e^{−s} − 1 + s) s^{−α−1} ds`.
fn levy_contour(alpha: f64) -> (Complex64, f64) {
    let k = 1.0 / (2.0 - alpha);
    let g = |s: f64| exp_neg_minus_one_plus(s) * s.powf(-alpha - 1.0);
    let near = integrate(|r: f64| g(r.powf(k)) * k * r.powf(k - 1.0), 0.0, 1.0, 1e-15, 1e-13, 2000);
    // on [1, ∞) split off the algebraic part (s − 1) s^{−α−1}, integrated exactly
    let far = integrate_pieces(
        &|s: f64| (-s).exp() * s.powf(-alpha - 1.0),
        &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 80.0],
        1e-16,
        1e-13,
        2000,
    );
    let algebraic = 1.0 / (alpha - 1.0) - 1.0 / alpha;
    let j = near.value + far.value + algebraic;
    let phase = Complex64::from_polar(1.0, PI * alpha / 2.0);
    (alpha * j * phase, alpha * (near.error + far.error))
}

/// Evaluates `log ψ(1)` both ways together with `−Γ(1−α)cos(πα/2)`.
pub fn levy_check(alpha: f64) -> Result<LevyCheck> {
    if !(alpha > 1.0 && alpha < 2.0) {
        return Err(domain!("stable index must lie in (1, 2), got {alpha}"));
    }
    let (a, ea) = levy_real_line(alpha);
    let (b, eb) = levy_contour(alpha);
    Ok(LevyCheck {
        real_line: a,
        real_line_error: ea,
        contour: b,
        contour_error: eb,
        closed_form_real: -gamma(1.0 - alpha) * (PI * alpha / 2.0).cos(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn levy_integral_two_schemes() {
        for alpha in [1.2, 1.5, 1.8] {
            let c = levy_check(alpha).unwrap();
            let law = StableLaw::new(alpha).unwrap();
            let expected = Complex64::new(-law.c_alpha(), -law.c_alpha() * (PI * alpha / 2.0).tan());
            assert!((c.real_line - expected).norm() < 1e-6 * expected.norm());
            assert!((c.contour - c.real_line).norm() < 1e-6 * expected.norm(), "{c:?}");
            assert!((c.real_line.re - c.closed_form_real).abs() < 1e-8 * expected.norm(), "{c:?}");
        }
        // α = 1.5: C = Γ(−1/2)cos(3π/4) = 2√π/√2 = √(2π)
        let law = StableLaw::new(1.5).unwrap();
        assert!((law.c_alpha() - (2.0 * PI).sqrt()).abs() < 1e-8);
    }

    #[test]
    fn char_fn_basics() {
        let law = StableLaw::new(1.5).unwrap();
        assert_eq!(law.char_fn(0.0), Complex64::new(1.0, 0.0));
    }

    proptest! {
        #[test]
        fn char_fn_hermitian(t in -20.0f64..20.0) {
            let law = StableLaw::new(1.3).unwrap();
            let a = law.char_fn(t);
            let b = law.char_fn(-t);
            prop_assert!((a - b.conj()).norm() < 1e-15);
            prop_assert!(a.norm() <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn density_nonnegative_and_normalised() {
        for alpha in [1.2, 1.5, 1.8] {
            let law = StableLaw::new(alpha).unwrap();
            for i in 0..=80 {
                let u = -20.0 + 0.5 * i as f64;
                assert!(law.density(u).unwrap() >= -1e-10, "alpha={alpha} u={u}");
            }
            let (mass, mean) = law.mass_and_mean().unwrap();
            assert!((mass - 1.0).abs() < 1e-6, "alpha={alpha} mass={mass}");
            assert!(mean.abs() < 1e-4, "alpha={alpha} mean={mean}");
        }
    }

    #[test]
    fn cdf_consistent_with_density() {
        let law = StableLaw::new(1.5).unwrap();
        let a = law.cdf_direct(-1.0).unwrap();
        let b = law.cdf_direct(1.0).unwrap();
        let q = integrate(|u| law.density(u).unwrap(), -1.0, 1.0, 1e-12, 1e-10, 100);
        assert!((b - a - q.value).abs() < 1e-8);
        // grid and tail series agree with direct inversion
        for u in [-59.0, -30.0, -3.3, 0.0, 2.0] {
            assert!((law.cdf(u) - law.cdf_direct(u).unwrap()).abs() < 1e-5, "u={u}");
        }
        let (series, _) = law.left_tail(40.0);
        assert!((series - law.cdf_direct(-40.0).unwrap()).abs() < 1e-8);
        assert!((law.cdf(-1e6) - 1e6f64.powf(-1.5)).abs() < 1e-12);
    }
}
