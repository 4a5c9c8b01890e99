//! Grand-canonical quantities for the two rate families.
//!
//! Both families have unit critical fugacity. The critical single-site
//! law is `W(k) = 1 / (Z(1) g(k)!)` with `g(k)! = g(1)⋯g(k)`.
//!
//! * power law, `g(k) = 1 + b/k`: `W(k) = (b−1)Γ(b)k!/Γ(k+b+1)` with the
//!   exact tail `F̄(m) = Γ(b)m!/Γ(m+b)`;
//! * stretched exponential, `g(k) = 1 + β/k^λ`: no closed forms, the
//!   normalisation is a truncated sum with a rigorous remainder bound.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::special::{
    gamma, ln_gamma, ln_gamma_ratio, ln_tail_power_law, ln_upper_gamma_bound, NeumaierSum,
};

/// Default relative accuracy targeted by the stretched truncation.
const STRETCHED_MASS_TOL: f64 = 1e-14;
/// Largest truncation horizon attempted before giving up.
const MAX_HORIZON: usize = 200_000_000;
/// Default table size for the power law; tails beyond use the exact formula.
pub const DEFAULT_POWER_LAW_KMAX: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelParams {
    /// `g(k) = 1 + b/k`, `b > 2`.
    PowerLaw { b: f64 },
    /// `g(k) = 1 + β/k^λ`, `β > 0`, `λ ∈ (1/2, 1)`.
    Stretched { beta: f64, lambda: f64 },
}

impl ModelParams {
    pub fn power_law(b: f64) -> Result<Self> {
        let p = ModelParams::PowerLaw { b };
        p.validate()?;
        Ok(p)
    }

    pub fn stretched(beta: f64, lambda: f64) -> Result<Self> {
        let p = ModelParams::Stretched { beta, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelParams::PowerLaw { b } => {
                if !(b.is_finite() && b > 2.0) {
                    return Err(domain!("power-law exponent must satisfy b > 2, got {b}"));
                }
            }
            ModelParams::Stretched { beta, lambda } => {
                if !(beta.is_finite() && beta > 0.0) {
                    return Err(domain!("stretched amplitude must satisfy beta > 0, got {beta}"));
                }
                if !(lambda > 0.5 && lambda < 1.0) {
                    return Err(domain!("stretched exponent must lie in (1/2, 1), got {lambda}"));
                }
            }
        }
        Ok(())
    }

    /// Critical fugacity, 1 for both families.
    pub fn phi_c(&self) -> f64 {
        1.0
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ModelParams::PowerLaw { .. } => "power_law",
            ModelParams::Stretched { .. } => "stretched",
        }
    }

    /// The power-law exponent, if this is the power-law family.
    pub fn b(&self) -> Option<f64> {
        match *self {
            ModelParams::PowerLaw { b } => Some(b),
            ModelParams::Stretched { .. } => None,
        }
    }

    /// Largest value of `g` over `k ≥ 1`, attained at `k = 1`.
    pub fn max_rate(&self) -> f64 {
        jump_rate(self, 1)
    }

    /// `ln g(k)!`.
    pub fn ln_rate_factorial(&self, k: u64) -> f64 {
        match *self {
            ModelParams::PowerLaw { b } => ln_gamma_ratio(k as f64 + 1.0, b) - ln_gamma(b + 1.0),
            ModelParams::Stretched { beta, lambda } => {
                let mut s = NeumaierSum::new();
                for m in 1..=k {
                    s.add((beta * (m as f64).powf(-lambda)).ln_1p());
                }
                s.value()
            }
        }
    }
}

impl std::fmt::Display for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelParams::PowerLaw { b } => write!(f, "power_law(b={b})"),
            ModelParams::Stretched { beta, lambda } => {
                write!(f, "stretched(beta={beta}, lambda={lambda})")
            }
        }
    }
}

/// Jump rate `g(k)`; zero exactly at `k = 0`.
#[inline]
pub fn jump_rate(params: &ModelParams, k: u64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    match *params {
        ModelParams::PowerLaw { b } => 1.0 + b / k as f64,
        ModelParams::Stretched { beta, lambda } => 1.0 + beta / (k as f64).powf(lambda),
    }
}

/// Rigorous bound on `Σ_{k>K} k^m u(k)` for the stretched family, where
/// `u(k) = 1/g(k)!` and `ln_u_k = ln u(K)`. Returned in log space; `None`
/// when `K` is still too small for the incomplete-gamma bound to apply.
///
/// Uses `1/(1+x) ≤ exp(−x/(1+x))`, which gives
/// `u(k) ≤ u(K) exp(−c((k+1)^p − (K+1)^p)/p)` with `p = 1−λ` and
/// `c = β/(1+βK^{−λ})`, then compares the sum with an integral.
pub fn stretched_ln_tail_bound(beta: f64, lambda: f64, k: usize, ln_u_k: f64, m: u32) -> Option<f64> {
    let p = 1.0 - lambda;
    let kf = k.max(1) as f64;
    let c = beta / (1.0 + beta * kf.powf(-lambda));
    let t0 = c * (kf + 1.0).powf(p) / p;
    let s = (m as f64 + 1.0) / p;
    let ln_gamma_tail = ln_upper_gamma_bound(s, t0)?;
    // e^{t0} (1/p) (p/c)^s Γ(s, t0)
    Some(ln_u_k + t0 - p.ln() + s * (p / c).ln() + ln_gamma_tail)
}

/// Precomputed critical single-site law `W` with its cdf and tail.
#[derive(Debug, Clone)]
pub struct WeightTable {
    params: ModelParams,
    kmax: usize,
    logw: Vec<f64>,
    cdf: Vec<f64>,
    /// `tail[m] = F̄(m) = Σ_{k≥m} W(k)` for `m ∈ 0..=kmax+1`.
    tail: Vec<f64>,
    ln_z: f64,
    amplitude: Option<Estimate>,
}

/// A numerically estimated quantity with an error bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl WeightTable {
    /// Builds the table on `0..=kmax`. For the power law the tail beyond
    /// `kmax` is exact; for the stretched family the sums run to a horizon
    /// chosen so the neglected mass is below `1e−14` of the total.
    pub fn build(params: ModelParams, kmax: usize) -> Result<Self> {
        params.validate()?;
        if kmax < 1 {
            return Err(domain!("kmax must be at least 1"));
        }
        match params {
            ModelParams::PowerLaw { b } => Ok(Self::build_power_law(params, b, kmax)),
            ModelParams::Stretched { beta, lambda } => {
                Self::build_stretched(params, beta, lambda, Some(kmax))
            }
        }
    }

    /// Builds with the default size: [`DEFAULT_POWER_LAW_KMAX`] for the power
    /// law, the smallest `k` whose remainder bound is below `1e−14` of the
    /// total mass for the stretched family.
    pub fn build_default(params: ModelParams) -> Result<Self> {
        params.validate()?;
        match params {
            ModelParams::PowerLaw { b } => Ok(Self::build_power_law(params, b, DEFAULT_POWER_LAW_KMAX)),
            ModelParams::Stretched { beta, lambda } => Self::build_stretched(params, beta, lambda, None),
        }
    }

    /// Builds a table covering at least `0..=n`.
    pub fn build_covering(params: ModelParams, n: usize) -> Result<Self> {
        params.validate()?;
        match params {
            ModelParams::PowerLaw { b } => {
                Ok(Self::build_power_law(params, b, n.max(DEFAULT_POWER_LAW_KMAX)))
            }
            ModelParams::Stretched { beta, lambda } => {
                let t = Self::build_stretched(params, beta, lambda, None)?;
                if t.kmax >= n {
                    Ok(t)
                } else {
                    Self::build_stretched(params, beta, lambda, Some(n))
                }
            }
        }
    }

    fn build_power_law(params: ModelParams, b: f64, kmax: usize) -> Self {
        let ln_norm = (b - 1.0).ln() + ln_gamma(b);
        let logw: Vec<f64> = (0..=kmax)
            .map(|k| ln_norm - ln_gamma_ratio(k as f64 + 1.0, b))
            .collect();
        let tail: Vec<f64> = (0..=kmax + 1)
            .map(|m| ln_tail_power_law(m as f64, b).exp())
            .collect();
        let cdf = (0..=kmax).map(|k| 1.0 - tail[k + 1]).collect();
        WeightTable {
            params,
            kmax,
            logw,
            cdf,
            tail,
            ln_z: (b / (b - 1.0)).ln(),
            amplitude: None,
        }
    }

    fn build_stretched(
        params: ModelParams,
        beta: f64,
        lambda: f64,
        kmax: Option<usize>,
    ) -> Result<Self> {
        // ln u(k) = −Σ_{m≤k} ln(1 + β m^{−λ})
        let mut lu: Vec<f64> = vec![0.0];
        let mut acc = NeumaierSum::new();
        let mut z = NeumaierSum::new();
        z.add(1.0);
        let mut default_kmax: Option<usize> = kmax;
        let mut k = 0usize;
        loop {
            k += 1;
            if k > MAX_HORIZON {
                return Err(Error::Truncation(format!(
                    "stretched normalisation for beta={beta}, lambda={lambda} needs more than {MAX_HORIZON} terms"
                )));
            }
            acc.add((beta * (k as f64).powf(-lambda)).ln_1p());
            let l = -acc.value();
            lu.push(l);
            z.add(l.exp());
            if k % 16 != 0 {
                continue;
            }
            let Some(bound) = stretched_ln_tail_bound(beta, lambda, k, l, 0) else {
                continue;
            };
            let ln_z = z.value().ln();
            if default_kmax.is_none() && bound < STRETCHED_MASS_TOL.ln() + ln_z {
                default_kmax = Some(k);
            }
            if let Some(km) = default_kmax {
                // stop once the remainder is negligible against both the total
                // mass and the smallest tail kept in the table
                if k > km && bound < STRETCHED_MASS_TOL.ln() + ln_z && bound < (1e-13f64).ln() + lu[km + 1] {
                    break;
                }
            }
        }
        let kmax = default_kmax.expect("set before the loop exits");
        let horizon = lu.len() - 1;
        let ln_z = z.value().ln();
        let remainder = stretched_ln_tail_bound(beta, lambda, horizon, lu[horizon], 0)
            .map(|b| (b - ln_z).exp())
            .unwrap_or(0.0);

        let logw: Vec<f64> = lu[..=kmax].iter().map(|l| l - ln_z).collect();
        // suffix sums from the horizon down to kmax + 1
        let mut suffix = NeumaierSum::new();
        suffix.add(remainder);
        for j in (kmax + 1..=horizon).rev() {
            suffix.add((lu[j] - ln_z).exp());
        }
        let mut tail = vec![0.0; kmax + 2];
        tail[kmax + 1] = suffix.value();
        for j in (0..=kmax).rev() {
            suffix.add(logw[j].exp());
            tail[j] = suffix.value();
        }
        let mut cdf = Vec::with_capacity(kmax + 1);
        let mut c = NeumaierSum::new();
        for lw in &logw {
            c.add(lw.exp());
            cdf.push(c.value());
        }
        let amplitude = Some(estimate_stretched_amplitude(beta, lambda, &lu[..=horizon], ln_z));
        Ok(WeightTable {
            params,
            kmax,
            logw,
            cdf,
            tail,
            ln_z,
            amplitude,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    /// `ln Z(φ_c)`.
    pub fn ln_partition(&self) -> f64 {
        self.ln_z
    }

    /// `ln W(k)`; beyond `kmax` continues the product `W(k) = W(k−1)/g(k)`.
    pub fn log_weight(&self, k: u64) -> f64 {
        if (k as usize) <= self.kmax {
            return self.logw[k as usize];
        }
        match self.params {
            ModelParams::PowerLaw { b } => {
                (b - 1.0).ln() + ln_gamma(b) - ln_gamma_ratio(k as f64 + 1.0, b)
            }
            ModelParams::Stretched { .. } => {
                let mut l = self.logw[self.kmax];
                for m in self.kmax as u64 + 1..=k {
                    l -= jump_rate(&self.params, m).ln();
                }
                l
            }
        }
    }

    pub fn weight(&self, k: u64) -> f64 {
        self.log_weight(k).exp()
    }

    /// Log-weights on `0..=kmax`.
    pub fn log_weights(&self) -> &[f64] {
        &self.logw
    }

    /// Distribution function `F(k) = Σ_{j≤k} W(j)` for `k ≤ kmax`.
    pub fn cdf(&self, k: usize) -> f64 {
        if k <= self.kmax {
            self.cdf[k]
        } else {
            1.0 - self.tail(k as u64 + 1)
        }
    }

    /// Tail `F̄(m) = Σ_{k≥m} W(k)`.
    pub fn tail(&self, m: u64) -> f64 {
        if (m as usize) <= self.kmax + 1 {
            return self.tail[m as usize];
        }
        match self.params {
            ModelParams::PowerLaw { b } => ln_tail_power_law(m as f64, b).exp(),
            ModelParams::Stretched { .. } => {
                let mut t = self.tail[self.kmax + 1];
                for k in self.kmax as u64 + 1..m {
                    t -= self.weight(k);
                }
                t.max(0.0)
            }
        }
    }

    /// Tail values on `0..=kmax+1`.
    pub fn tails(&self) -> &[f64] {
        &self.tail
    }

    /// Amplitude `A` of `W(k) ~ A exp(−βk^{1−λ}/(1−λ))` (stretched only).
    pub fn stretched_amplitude(&self) -> Option<Estimate> {
        self.amplitude
    }

    /// Large-`x` asymptotic form of the tail `F̄(x)`.
    pub fn tail_asymptotic(&self, x: f64) -> Result<f64> {
        if x <= 0.0 {
            return Err(domain!("tail asymptotic needs x > 0"));
        }
        match self.params {
            ModelParams::PowerLaw { b } => Ok(gamma(b) * x.powf(1.0 - b)),
            ModelParams::Stretched { beta, lambda } => {
                let a = self.amplitude.expect("stretched tables carry an amplitude").value;
                let p = 1.0 - lambda;
                Ok(a * x.powf(lambda) / beta * (-beta * x.powf(p) / p).exp())
            }
        }
    }
}

/// Extrapolates `A(k) = W(k) exp(βk^p/p)` to `k → ∞`.
///
/// `ln A(k) − ln A` has the expansion
/// `−β²k^{1−2λ}/(2(2λ−1)) − βk^{−λ}/2 + β³k^{1−3λ}/(3(3λ−1)) + …`;
/// the two leading terms are removed analytically and the rest by
/// Richardson extrapolation over a geometric grid of `k`.
fn estimate_stretched_amplitude(beta: f64, lambda: f64, lu: &[f64], ln_z: f64) -> Estimate {
    let p = 1.0 - lambda;
    let top = lu.len() - 1;
    let corrected = |k: usize| -> f64 {
        let kf = k as f64;
        lu[k] - ln_z + beta * kf.powf(p) / p
            + beta * beta * kf.powf(1.0 - 2.0 * lambda) / (2.0 * (2.0 * lambda - 1.0))
            + 0.5 * beta * kf.powf(-lambda)
    };
    let ks: Vec<usize> = (0..4).map(|j| (top >> j).max(1)).rev().collect();
    let vals: Vec<f64> = ks.iter().map(|&k| corrected(k)).collect();
    // remaining leading correction ~ k^{1−3λ}; grid ratio 2
    let e = 3.0 * lambda - 1.0;
    let r = 2f64.powf(e);
    let rich: Vec<f64> = vals.windows(2).map(|w| (r * w[1] - w[0]) / (r - 1.0)).collect();
    let best = *rich.last().unwrap();
    let raw = *vals.last().unwrap();
    Estimate {
        value: best.exp(),
        error: best.exp() * ((best - raw).abs() + (rich[rich.len() - 1] - rich[rich.len() - 2]).abs()),
    }
}

/// `Σ_k φ^k k^j / g(k)!` for `j = 0, 1, 2`, truncated so the remainder is
/// below `rel_tol` of each sum. Requires `0 ≤ φ < 1` or the stretched
/// family at `φ = 1`.
fn series_moments(params: &ModelParams, phi: f64, rel_tol: f64) -> Result<[f64; 3]> {
    let mut sums = [NeumaierSum::new(), NeumaierSum::new(), NeumaierSum::new()];
    sums[0].add(1.0);
    if phi == 0.0 {
        return Ok([1.0, 0.0, 0.0]);
    }
    let ln_phi = phi.ln();
    let mut ln_fact = NeumaierSum::new();
    let mut k: u64 = 0;
    loop {
        k += 1;
        if k as usize > MAX_HORIZON {
            return Err(Error::Truncation(format!(
                "series at phi={phi} did not reach relative accuracy {rel_tol}"
            )));
        }
        let lt = match *params {
            // resynchronise the power-law factorial from log-gamma periodically
            ModelParams::PowerLaw { b } if k % 256 == 0 => {
                let exact = ln_gamma_ratio(k as f64 + 1.0, b) - ln_gamma(b + 1.0);
                ln_fact = NeumaierSum::new();
                ln_fact.add(exact);
                k as f64 * ln_phi - exact
            }
            _ => {
                ln_fact.add(jump_rate(params, k).ln());
                k as f64 * ln_phi - ln_fact.value()
            }
        };
        let t = lt.exp();
        let kf = k as f64;
        sums[0].add(t);
        sums[1].add(kf * t);
        sums[2].add(kf * kf * t);
        if k % 8 != 0 {
            continue;
        }
        let done = if phi < 1.0 {
            // t_{k+i} ≤ t_k φ^i, so Σ_{i≥1} (k+i)^j t_{k+i} ≤ t_k (k+1)^j φ/(1−r)
            (0..3).all(|j| {
                let r = phi * ((kf + 2.0) / (kf + 1.0)).powi(j as i32);
                r < 1.0 && t * (kf + 1.0).powi(j as i32) * phi / (1.0 - r) <= rel_tol * sums[j].value()
            })
        } else {
            let ModelParams::Stretched { beta, lambda } = *params else {
                unreachable!("power law at phi = 1 uses closed forms");
            };
            (0..3).all(|j| {
                stretched_ln_tail_bound(beta, lambda, k as usize, lt, j as u32)
                    .is_some_and(|b| b <= rel_tol.ln() + sums[j].value().ln())
            })
        };
        if done {
            return Ok([sums[0].value(), sums[1].value(), sums[2].value()]);
        }
    }
}

fn check_fugacity(params: &ModelParams, phi: f64) -> Result<()> {
    if !(phi >= 0.0 && phi <= params.phi_c()) {
        return Err(domain!(
            "fugacity must lie in [0, {}], got {phi}",
            params.phi_c()
        ));
    }
    Ok(())
}

/// `Z(φ) = Σ_k φ^k / g(k)!`.
pub fn partition_function(params: &ModelParams, phi: f64) -> Result<f64> {
    params.validate()?;
    check_fugacity(params, phi)?;
    if let (ModelParams::PowerLaw { b }, true) = (params, phi == 1.0) {
        return Ok(b / (b - 1.0));
    }
    Ok(series_moments(params, phi, 1e-15)?[0])
}

/// Expected occupation `ρ(φ)` under the grand-canonical measure.
pub fn density_of_fugacity(params: &ModelParams, phi: f64) -> Result<f64> {
    params.validate()?;
    check_fugacity(params, phi)?;
    if let (ModelParams::PowerLaw { b }, true) = (params, phi == 1.0) {
        return Ok(1.0 / (b - 2.0));
    }
    let s = series_moments(params, phi, 1e-15)?;
    Ok(s[1] / s[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalConstants {
    pub z_c: f64,
    pub rho_c: f64,
    /// Variance of the critical law, `+∞` when it does not exist.
    pub sigma2: f64,
}

/// Partition function, density and variance at the critical fugacity.
pub fn critical_constants(params: &ModelParams) -> Result<CriticalConstants> {
    params.validate()?;
    match *params {
        ModelParams::PowerLaw { b } => Ok(CriticalConstants {
            z_c: b / (b - 1.0),
            rho_c: 1.0 / (b - 2.0),
            sigma2: if b > 3.0 {
                (b - 1.0).powi(2) / ((b - 2.0).powi(2) * (b - 3.0))
            } else {
                f64::INFINITY
            },
        }),
        ModelParams::Stretched { .. } => {
            let s = series_moments(params, 1.0, 1e-13)?;
            let rho = s[1] / s[0];
            Ok(CriticalConstants {
                z_c: s[0],
                rho_c: rho,
                sigma2: s[2] / s[0] - rho * rho,
            })
        }
    }
}

/// Power-law critical constants from the defining series: a direct sum of
/// the first `cutoff` terms plus the remainder in closed form, obtained by
/// telescoping `Σ_{k≥m} Γ(k+1+r)/Γ(k+b+1) = Γ(m+1+r)/((b−r−1)Γ(m+b))`.
/// Independent of [`critical_constants`]; used to cross-check it.
pub fn critical_constants_by_series(b: f64, cutoff: u64) -> Result<CriticalConstants> {
    ModelParams::power_law(b)?;
    let m = cutoff.max(1);
    // t_k = 1/g(k)! = Γ(b+1)k!/Γ(k+b+1), built by t_k = t_{k−1}·k/(k+b)
    let mut s = [NeumaierSum::new(), NeumaierSum::new(), NeumaierSum::new()];
    let mut t = 1.0f64;
    for k in 0..m {
        if k > 0 {
            t *= k as f64 / (k as f64 + b);
        }
        let kf = k as f64;
        s[0].add(t);
        s[1].add(kf * t);
        s[2].add(kf * kf * t);
    }
    let mf = m as f64;
    let remainder = |r: f64| -> f64 {
        if b <= r + 1.0 {
            return f64::INFINITY;
        }
        (ln_gamma(b + 1.0) + ln_gamma(mf + 1.0 + r) - ln_gamma(mf + b)).exp() / (b - r - 1.0)
    };
    let (r0, r1, r2) = (remainder(0.0), remainder(1.0), remainder(2.0));
    // kΓ(k+1) = Γ(k+2) − Γ(k+1); k²Γ(k+1) = Γ(k+3) − 3Γ(k+2) + Γ(k+1)
    let z = s[0].value() + r0;
    let first = s[1].value() + (r1 - r0);
    let rho = first / z;
    let sigma2 = if b > 3.0 {
        let second = s[2].value() + (r2 - 3.0 * r1 + r0);
        second / z - rho * rho
    } else {
        f64::INFINITY
    };
    Ok(CriticalConstants {
        z_c: z,
        rho_c: rho,
        sigma2,
    })
}

/// Closed form of `Σ_k Γ(u+k)Γ(v+k)/(Γ(w+k)k!)`.
pub fn hypergeometric_sum(u: f64, v: f64, w: f64) -> Result<f64> {
    check_hypergeometric(u, v, w)?;
    Ok((ln_gamma(u) + ln_gamma(v) + ln_gamma(w - u - v) - ln_gamma(w - u) - ln_gamma(w - v)).exp())
}

fn check_hypergeometric(u: f64, v: f64, w: f64) -> Result<()> {
    if !(u > 0.0 && v > 0.0 && w > 0.0) {
        return Err(domain!("hypergeometric sum needs u, v, w > 0"));
    }
    if !(w > u + v) {
        return Err(domain!("hypergeometric sum needs w > u + v, got u={u} v={v} w={w}"));
    }
    Ok(())
}

/// The series `Σ_k Γ(u+k)Γ(v+k)/(Γ(w+k)k!)` summed term by term.
///
/// Partial sums at `K, 2K, 4K, 8K` are extrapolated with Richardson steps
/// for the known remainder exponents `s, s+1, s+2`, `s = w−u−v`.
pub fn hypergeometric_series(u: f64, v: f64, w: f64) -> Result<f64> {
    check_hypergeometric(u, v, w)?;
    const K: usize = 4096;
    let s = w - u - v;
    let ln_t0 = ln_gamma(u) + ln_gamma(v) - ln_gamma(w);
    // factor out t0 so the recursion works on O(1) numbers
    let mut t = 1.0f64;
    let mut acc = NeumaierSum::new();
    let mut partial = Vec::with_capacity(4);
    let mut next = K;
    for k in 0..8 * K {
        acc.add(t);
        if k + 1 == next {
            partial.push(acc.value());
            next *= 2;
        }
        let kf = k as f64;
        t *= (u + kf) * (v + kf) / ((w + kf) * (kf + 1.0));
        if t == 0.0 {
            break;
        }
    }
    while partial.len() < 4 {
        partial.push(acc.value());
    }
    let mut level = partial;
    for j in 0..3 {
        let r = 2f64.powf(s + j as f64);
        level = level.windows(2).map(|x| (r * x[1] - x[0]) / (r - 1.0)).collect();
    }
    Ok(level[0] * ln_t0.exp())
}

/// Sandwich bounds `(lower, upper)` for `W(k2)` from `W(k1)`, `k1 ≤ k2`.
pub fn smoothness_bounds(table: &WeightTable, k1: u64, k2: u64) -> Result<(f64, f64)> {
    if k1 > k2 {
        return Err(domain!("smoothness bounds need k1 <= k2"));
    }
    let upper = table.weight(k1);
    let lower = match *table.params() {
        ModelParams::PowerLaw { b } => {
            if k1 == k2 {
                upper
            } else {
                upper * (k1 as f64 / k2 as f64).powf(b)
            }
        }
        ModelParams::Stretched { beta, lambda } => {
            let p = 1.0 - lambda;
            upper * (-beta * ((k2 as f64).powf(p) - (k1 as f64).powf(p)) / p).exp()
        }
    };
    Ok((lower, upper))
}

/// Upper bound `exp(−Σ_{m≤k} β/(β+m^λ))` on the stretched `W(k)`.
pub fn stretched_weight_upper_bound(beta: f64, lambda: f64, k: u64) -> f64 {
    let mut s = NeumaierSum::new();
    for m in 1..=k {
        s.add(beta / (beta + (m as f64).powf(lambda)));
    }
    (-s.value()).exp()
}

/// `1 + x ≥ exp(x/(1+x))` for `x > −1`.
pub fn elementary_inequality_holds(x: f64) -> bool {
    x > -1.0 && 1.0 + x >= (x / (1.0 + x)).exp()
}

/// `Σ_{k≤cutoff} k^order W(k)` for the power law, evaluated term by term.
pub fn truncated_moment(b: f64, order: i32, cutoff: u64) -> Result<f64> {
    ModelParams::power_law(b)?;
    let ln_norm = (b - 1.0).ln() + ln_gamma(b);
    let mut s = NeumaierSum::new();
    for k in 1..=cutoff {
        let kf = k as f64;
        s.add(kf.powi(order) * (ln_norm - ln_gamma_ratio(kf + 1.0, b)).exp());
    }
    Ok(s.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pl(b: f64) -> ModelParams {
        ModelParams::power_law(b).unwrap()
    }

    fn st() -> ModelParams {
        ModelParams::stretched(1.0, 0.75).unwrap()
    }

    #[test]
    fn rates() {
        assert_eq!(jump_rate(&pl(4.0), 1), 5.0);
        assert_eq!(jump_rate(&pl(4.0), 0), 0.0);
        assert_eq!(jump_rate(&st(), 0), 0.0);
        assert!((jump_rate(&st(), 16) - 1.125).abs() < 1e-15);
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::power_law(2.0).is_err());
        assert!(ModelParams::power_law(f64::NAN).is_err());
        assert!(ModelParams::stretched(1.0, 0.5).is_err());
        assert!(ModelParams::stretched(1.0, 1.0).is_err());
        assert!(ModelParams::stretched(0.0, 0.7).is_err());
        assert_eq!(pl(3.0).phi_c(), 1.0);
        assert_eq!(st().phi_c(), 1.0);
    }

    #[test]
    fn power_law_small_weights() {
        // oracle: (b−1)Γ(b)k!/Γ(k+b+1) at b = 4 is 18·k!/(k+4)!
        let t = WeightTable::build(pl(4.0), 50).unwrap();
        let oracle = |k: u64| -> f64 {
            let mut v = 18.0;
            for j in 1..=k + 4 {
                if j <= k {
                    v *= j as f64;
                }
                v /= j as f64;
            }
            v
        };
        for k in 0..=20 {
            assert!((t.weight(k) / oracle(k) - 1.0).abs() < 1e-13, "k={k}");
        }
        assert!((t.weight(0) - 0.75).abs() < 1e-14);
        assert!((t.weight(1) - 0.15).abs() < 1e-14);
        assert!((t.weight(2) - 0.05).abs() < 1e-14);
        assert!((t.tail(2) - 0.10).abs() < 1e-14);
        assert!((t.tail(0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn recursion_and_normalisation() {
        for params in [pl(2.5), pl(3.0), pl(4.0), pl(6.0), st()] {
            let t = WeightTable::build(params, 2000).unwrap();
            let mut s = NeumaierSum::new();
            for k in 0..=t.kmax() as u64 {
                s.add(t.weight(k));
                if k >= 1 {
                    let lhs = t.weight(k) * jump_rate(&params, k);
                    let rhs = t.weight(k - 1);
                    assert!((lhs / rhs - 1.0).abs() < 1e-12, "{params} k={k}");
                    assert!(t.weight(k) < t.weight(k - 1));
                }
            }
            let total = s.value() + t.tail(t.kmax() as u64 + 1);
            assert!((total - 1.0).abs() < 1e-12, "{params}: {total}");
            assert!((t.cdf(t.kmax()) + t.tail(t.kmax() as u64 + 1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_times_power_nondecreasing() {
        let b = 4.0;
        let t = WeightTable::build(pl(b), 3000).unwrap();
        for k in 2..3000u64 {
            let a = t.weight(k - 1) * ((k - 1) as f64).powf(b);
            let c = t.weight(k) * (k as f64).powf(b);
            assert!(c >= a * (1.0 - 1e-13), "k={k}");
        }
    }

    #[test]
    fn stretched_default_kmax_meets_mass_target() {
        let t = WeightTable::build_default(st()).unwrap();
        let tail = t.tail(t.kmax() as u64 + 1);
        assert!(tail < 1e-13, "tail beyond default kmax = {tail}");
        assert!(t.kmax() > 100);
    }

    #[test]
    fn partition_function_values() {
        assert!((partition_function(&pl(4.0), 1.0).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(partition_function(&pl(4.0), 0.0).unwrap(), 1.0);
        assert_eq!(partition_function(&st(), 0.0).unwrap(), 1.0);
        // 50-term partial sum at φ = 1/2 with terms built from the rates
        let p = pl(4.0);
        let mut term = 1.0f64;
        let mut sum = 1.0f64;
        for k in 1..=50u64 {
            term *= 0.5 / jump_rate(&p, k);
            sum += term;
        }
        // remainder ≤ term·Σ 2^{-i} = term
        assert!(term < 1e-15);
        assert!((partition_function(&p, 0.5).unwrap() - sum).abs() < 1e-12);
        assert!(partition_function(&p, 1.0001).is_err());
        assert!(partition_function(&p, -0.1).is_err());
    }

    #[test]
    fn density_values_and_monotone() {
        assert!((density_of_fugacity(&pl(4.0), 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(density_of_fugacity(&pl(4.0), 0.0).unwrap(), 0.0);
        let r9 = density_of_fugacity(&pl(4.0), 0.9).unwrap();
        let r8 = density_of_fugacity(&pl(4.0), 0.8).unwrap();
        assert!(r9 > 0.0 && r9 < 0.5 && r8 < r9);
        for params in [pl(2.5), pl(4.0), st()] {
            let mut prev = -1.0;
            for i in 0..=40 {
                let phi = i as f64 / 40.0;
                let r = density_of_fugacity(&params, phi).unwrap();
                assert!(r > prev, "{params} phi={phi}");
                prev = r;
            }
        }
    }

    #[test]
    fn stretched_series_reaches_critical_density() {
        let c = critical_constants(&st()).unwrap();
        let below = density_of_fugacity(&st(), 0.999).unwrap();
        assert!(below < c.rho_c);
        assert!(c.rho_c - below < 0.05 * c.rho_c);
        // table-based moments agree with the series
        let t = WeightTable::build_default(st()).unwrap();
        let mean: f64 = (0..=t.kmax() as u64).map(|k| k as f64 * t.weight(k)).sum();
        assert!((mean / c.rho_c - 1.0).abs() < 1e-10);
        assert!((t.ln_partition() - c.z_c.ln()).abs() < 1e-12);
    }

    #[test]
    fn critical_constants_closed_forms() {
        let c = critical_constants(&pl(4.0)).unwrap();
        assert!((c.z_c - 4.0 / 3.0).abs() < 1e-15);
        assert!((c.rho_c - 0.5).abs() < 1e-15);
        assert!((c.sigma2 - 2.25).abs() < 1e-14);
        assert_eq!(critical_constants(&pl(3.0)).unwrap().sigma2, f64::INFINITY);
        assert!((critical_constants(&pl(2.5)).unwrap().rho_c - 2.0).abs() < 1e-15);
    }

    #[test]
    fn series_route_matches_closed_forms() {
        for b in [2.5, 3.0, 4.0, 6.0] {
            let s = critical_constants_by_series(b, 1000).unwrap();
            let c = critical_constants(&pl(b)).unwrap();
            assert!((s.z_c - c.z_c).abs() < 1e-10, "b={b}");
            assert!((s.rho_c - c.rho_c).abs() < 1e-10, "b={b}");
            if b > 3.0 {
                assert!((s.sigma2 - c.sigma2).abs() < 1e-10, "b={b}");
            } else {
                assert!(s.sigma2.is_infinite());
            }
        }
    }

    #[test]
    fn hypergeometric_examples() {
        assert!((hypergeometric_sum(1.0, 1.0, 4.0).unwrap() - 0.25).abs() < 1e-14);
        assert!((hypergeometric_sum(1.0, 2.0, 5.0).unwrap() - 1.0 / 12.0).abs() < 1e-14);
        assert!((hypergeometric_series(1.0, 1.0, 4.0).unwrap() - 0.25).abs() < 1e-10);
        assert!((hypergeometric_series(1.0, 2.0, 5.0).unwrap() - 1.0 / 12.0).abs() < 1e-10);
        assert!(hypergeometric_sum(1.0, 1.0, 2.0).is_err());
        assert!(hypergeometric_series(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn hypergeometric_large_gap() {
        for w in [10.0, 40.0, 120.0] {
            let a = hypergeometric_sum(1.5, 2.0, w).unwrap();
            let b = hypergeometric_series(1.5, 2.0, w).unwrap();
            assert!(a.is_finite() && b.is_finite());
            assert!((a / b - 1.0).abs() < 1e-10, "w={w}: {a} vs {b}");
        }
    }

    #[test]
    fn smoothness_examples() {
        let t = WeightTable::build(pl(4.0), 100).unwrap();
        let (lo, hi) = smoothness_bounds(&t, 5, 5).unwrap();
        assert_eq!(lo, t.weight(5));
        assert_eq!(hi, t.weight(5));
        let (lo, hi) = smoothness_bounds(&t, 2, 4).unwrap();
        assert!((lo - t.weight(2) / 16.0).abs() < 1e-16);
        assert!(lo <= t.weight(4) && t.weight(4) <= hi);
        let s = WeightTable::build(st(), 100).unwrap();
        let (lo, hi) = smoothness_bounds(&s, 1, 16).unwrap();
        assert!(lo <= s.weight(16) && s.weight(16) <= hi);
        assert!(smoothness_bounds(&t, 3, 2).is_err());
    }

    #[test]
    fn stretched_upper_bound_holds() {
        let s = WeightTable::build(st(), 5000).unwrap();
        for k in [1u64, 2, 10, 100, 1000, 5000] {
            assert!(s.weight(k) <= stretched_weight_upper_bound(1.0, 0.75, k));
        }
    }

    #[test]
    fn power_law_tail_asymptotics() {
        let t = WeightTable::build(pl(4.0), 10).unwrap();
        let r100 = t.tail(100) / t.tail_asymptotic(100.0).unwrap();
        assert!((r100 - 1.0).abs() < 0.1, "{r100}");
        let mut prev = f64::INFINITY;
        for x in [50u64, 100, 200, 400] {
            let d = (t.tail(x) / t.tail_asymptotic(x as f64).unwrap() - 1.0).abs();
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn b3_truncated_second_moment_trend() {
        let mut prev = 0.0;
        for l in [1_000u64, 10_000, 100_000] {
            let r = truncated_moment(3.0, 2, l).unwrap() / (4.0 * (l as f64).ln());
            assert!(r > prev && r < 1.0, "L={l} ratio={r}");
            prev = r;
        }
    }

    #[test]
    fn stretched_amplitude_has_error_bar() {
        let t = WeightTable::build_default(st()).unwrap();
        let a = t.stretched_amplitude().unwrap();
        assert!(a.value > 0.0 && a.error >= 0.0);
        assert!(a.error < 0.05 * a.value, "{a:?}");
        assert!(WeightTable::build(pl(4.0), 10).unwrap().stretched_amplitude().is_none());
    }

    proptest! {
        #[test]
        fn sandwich_contains_weight(b in 2.05f64..8.0, k1 in 0u64..400, gap in 0u64..400) {
            let t = WeightTable::build(pl(b), 800).unwrap();
            let k2 = k1 + gap;
            let (lo, hi) = smoothness_bounds(&t, k1, k2).unwrap();
            let w = t.weight(k2);
            prop_assert!(lo <= w * (1.0 + 1e-12) && w <= hi * (1.0 + 1e-12));
        }

        #[test]
        fn stretched_sandwich(beta in 0.5f64..3.0, lambda in 0.55f64..0.8, k1 in 0u64..300, gap in 0u64..300) {
            let t = WeightTable::build(ModelParams::stretched(beta, lambda).unwrap(), 600).unwrap();
            let k2 = k1 + gap;
            let (lo, hi) = smoothness_bounds(&t, k1, k2).unwrap();
            let w = t.weight(k2);
            prop_assert!(lo <= w * (1.0 + 1e-12) && w <= hi * (1.0 + 1e-12));
        }

        #[test]
        fn elementary_inequality(x in -0.999_999f64..1e6) {
            prop_assert!(elementary_inequality_holds(x));
        }
    }
}
