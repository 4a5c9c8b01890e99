//! Order statistics, normalisations, distances and reference limit laws.

mod stable;

pub use stable::{levy_check, LevyCheck, StableLaw};

use serde::{Deserialize, Serialize};

use crate::configuration::Configuration;
use crate::error::{domain, Result};
use crate::model::{critical_constants, ModelParams, WeightTable};
use crate::sampling::{draw_batch, ExactMethod, ExactSampler};
use crate::special::gamma;

/// `S_L`, `M_L`, `m_L` (smallest index on ties) and `M_L^{(2)}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigStats {
    pub total: u64,
    pub max: u64,
    pub argmax: usize,
    pub second: u64,
}

pub fn config_stats(eta: &Configuration) -> ConfigStats {
    let v = eta.as_slice();
    let mut argmax = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[argmax] {
            argmax = i;
        }
    }
    let second = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &x)| x)
        .max()
        .unwrap_or(0);
    ConfigStats {
        total: eta.total(),
        max: v[argmax],
        argmax,
        second,
    }
}

/// Exchanges the last coordinate with the (first) maximal one.
pub fn swap_max(eta: &Configuration) -> Configuration {
    let mut out = eta.clone();
    let m = config_stats(eta).argmax;
    let last = out.len() - 1;
    out.as_mut_slice().swap(m, last);
    out
}

/// `a_L`: `σ√L` (finite variance), `2√(L ln L)` (`b = 3`),
/// `(Γ(b)L)^{1/(b−1)}` (`2 < b < 3`). The stretched family has finite
/// variance and uses `σ√L`.
pub fn normalization_al(params: &ModelParams, l: usize) -> Result<f64> {
    params.validate()?;
    let lf = l as f64;
    match *params {
        ModelParams::PowerLaw { b } if b < 3.0 => Ok((gamma(b) * lf).powf(1.0 / (b - 1.0))),
        ModelParams::PowerLaw { b } if b == 3.0 => Ok(2.0 * (lf * lf.ln()).sqrt()),
        _ => Ok(critical_constants(params)?.sigma2.sqrt() * lf.sqrt()),
    }
}

/// `(M_L − (N − ρ_c L)) / a_L`.
pub fn centered_max(stats: &ConfigStats, params: &ModelParams, l: usize, n: usize) -> Result<f64> {
    let rho_c = critical_constants(params)?.rho_c;
    let a = normalization_al(params, l)?;
    Ok((stats.max as f64 - (n as f64 - rho_c * l as f64)) / a)
}

/// `M_L^{(2)} / (Γ(b)L)^{1/(b−1)}`.
pub fn second_largest_normalized(stats: &ConfigStats, params: &ModelParams, l: usize) -> Result<f64> {
    let b = params
        .b()
        .ok_or_else(|| domain!("second-largest normalisation is defined for the power law"))?;
    if l < 2 {
        return Err(domain!("second largest needs L >= 2"));
    }
    Ok(stats.second as f64 / (gamma(b) * l as f64).powf(1.0 / (b - 1.0)))
}

/// `exp(−x^{1−b})` for `x > 0`, zero otherwise.
pub fn frechet_cdf(b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-x.powf(1.0 - b)).exp()
    }
}

/// `Y_L` on the grid `t = j/L`, `j = 0..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BulkPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub zeta: f64,
    pub a_l: f64,
}

impl BulkPath {
    /// `Y_L(t) = Y_L(⌊Lt⌋/L)`.
    pub fn at(&self, t: f64) -> f64 {
        let l = self.values.len() - 1;
        let j = ((t.clamp(0.0, 1.0) * l as f64).floor() as usize).min(l);
        self.values[j]
    }
}

/// The rescaled bulk fluctuation path with the cut-off `ζL` and density
/// `ρ = S_L/L`; requires `0 < ζ < ρ − ρ_c`.
pub fn bulk_path(eta: &Configuration, params: &ModelParams, zeta: f64) -> Result<BulkPath> {
    let rho_c = critical_constants(params)?.rho_c;
    let rho = eta.total() as f64 / eta.len() as f64;
    if !(zeta > 0.0 && zeta < rho - rho_c) {
        return Err(domain!(
            "cut-off zeta={zeta} outside (0, rho - rho_c) = (0, {})",
            rho - rho_c
        ));
    }
    bulk_path_with_cutoff(eta, params, zeta)
}

/// As [`bulk_path`] without the range check on `ζ`; `ζ = ∞` disables the cut.
pub fn bulk_path_with_cutoff(eta: &Configuration, params: &ModelParams, zeta: f64) -> Result<BulkPath> {
    let rho_c = critical_constants(params)?.rho_c;
    let l = eta.len();
    let a_l = normalization_al(params, l)?;
    let cut = zeta * l as f64;
    let mut values = Vec::with_capacity(l + 1);
    values.push(0.0);
    let mut s = 0.0;
    for &x in eta.as_slice() {
        let star = if (x as f64) < cut { x as f64 } else { 0.0 };
        s += star - rho_c;
        values.push(s / a_l);
    }
    let times = (0..=l).map(|j| j as f64 / l as f64).collect();
    Ok(BulkPath {
        times,
        values,
        zeta,
        a_l,
    })
}

/// `sup_x |F_n(x) − F(x)|`.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<f64> {
    if samples.is_empty() {
        return Err(domain!("KS distance needs samples"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < s.len() {
        // step over ties so the empirical cdf jumps once per distinct value
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        let f = cdf(s[i]);
        d = d.max((f - i as f64 / n).abs()).max(((j + 1) as f64 / n - f).abs());
        i = j + 1;
    }
    Ok(d)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(domain!("KS distance needs samples"));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// `sup_A |p(A) − q(A)| = ½ Σ|p − q|`; the shorter pmf is padded with zeros.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    let get = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    0.5 * (0..n).map(|i| (get(p, i) - get(q, i)).abs()).sum::<f64>()
}

/// Normalised histogram of nonnegative integers.
pub fn empirical_pmf(values: impl IntoIterator<Item = u64>) -> Vec<f64> {
    let mut counts: Vec<u64> = Vec::new();
    let mut total = 0u64;
    for v in values {
        let v = v as usize;
        if v >= counts.len() {
            counts.resize(v + 1, 0);
        }
        counts[v] += 1;
        total += 1;
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// TV distance between an empirical pmf and `W`, counting the mass of `W`
/// beyond the observed support.
pub fn tv_to_critical(pmf: &[f64], wt: &WeightTable) -> f64 {
    let mut s = 0.0;
    for (k, &p) in pmf.iter().enumerate() {
        s += (p - wt.weight(k as u64)).abs();
    }
    0.5 * (s + wt.tail(pmf.len() as u64))
}

/// Expected TV between `W` and an `n`-sample histogram drawn from `W`
/// itself, `≈ ½ Σ_k √(2W(k)(1−W(k))/(πn))`: the Monte Carlo floor.
pub fn tv_noise_floor(wt: &WeightTable, n: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..=wt.kmax() as u64 {
        let w = wt.weight(k);
        s += (2.0 * w * (1.0 - w) / (std::f64::consts::PI * n)).sqrt();
        if w * n < 1e-3 {
            break;
        }
    }
    0.5 * s
}

/// Mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub sites: usize,
    pub particles: usize,
    pub samples: usize,
    /// TV of `(Tη)_{x_1}` against `W`.
    pub tv_first_site: f64,
    /// TV of all bulk coordinates `(Tη)_{x_1..x_{L−1}}` pooled against `W`;
    /// same quantity as `tv_first_site` by exchangeability, less noise.
    pub tv_bulk_pooled: f64,
    /// TV of `((Tη)_{x_1}, (Tη)_{x_2})` against `W ⊗ W`.
    pub tv_pair: f64,
    /// Expected TV of a pure-noise histogram of the same size.
    pub noise_floor_single: f64,
    pub noise_floor_pooled: f64,
    pub bulk_mean: Measured,
    pub bulk_variance: Measured,
    pub rho_c: f64,
    pub sigma2: f64,
    pub regime_warning: Option<String>,
}

/// Draws exact canonical samples, applies `T`, and compares the bulk with
/// the critical product measure.
pub fn theorem1_experiment(
    params: &ModelParams,
    l: usize,
    n: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Theorem1Report> {
    if l < 3 {
        return Err(domain!("the max-swap experiment needs L >= 3"));
    }
    let cc = critical_constants(params)?;
    let regime_warning = ((n as f64) <= cc.rho_c * l as f64)
        .then(|| format!("N = {n} is not supercritical (rho_c L = {:.1})", cc.rho_c * l as f64));
    let sampler = ExactSampler::build(*params, l, n, ExactMethod::Auto)?;
    let batch = draw_batch(&sampler, n_samples, seed)?;
    let wt = WeightTable::build_covering(*params, n)?;

    let swapped: Vec<Configuration> = batch.configs.iter().map(swap_max).collect();
    let first = empirical_pmf(swapped.iter().map(|c| c[0]));
    let pooled = empirical_pmf(swapped.iter().flat_map(|c| c.as_slice()[..l - 1].iter().copied()));

    // pair pmf on a square grid, with W ⊗ W mass outside it added back
    let side = swapped.iter().map(|c| c[0].max(c[1])).max().unwrap_or(0) as usize + 1;
    let mut pair = vec![0.0; side * side];
    for c in &swapped {
        pair[c[0] as usize * side + c[1] as usize] += 1.0 / n_samples as f64;
    }
    let mut tv_pair = 0.0;
    for i in 0..side {
        for j in 0..side {
            tv_pair += (pair[i * side + j] - wt.weight(i as u64) * wt.weight(j as u64)).abs();
        }
    }
    let inside = 1.0 - wt.tail(side as u64);
    tv_pair = 0.5 * (tv_pair + (1.0 - inside * inside));

    // per-configuration bulk averages give honest error bars
    let per_cfg: Vec<(f64, f64)> = swapped
        .iter()
        .map(|c| {
            let bulk = &c.as_slice()[..l - 1];
            let m = bulk.iter().sum::<u64>() as f64 / (l - 1) as f64;
            let v = bulk.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (l - 2) as f64;
            (m, v)
        })
        .collect();
    let summary = |xs: Vec<f64>| {
        let k = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / k;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
        Measured {
            value: mean,
            error: (var / k).sqrt(),
        }
    };
    Ok(Theorem1Report {
        sites: l,
        particles: n,
        samples: n_samples,
        tv_first_site: tv_to_critical(&first, &wt),
        tv_bulk_pooled: tv_to_critical(&pooled, &wt),
        tv_pair,
        noise_floor_single: tv_noise_floor(&wt, n_samples as f64),
        noise_floor_pooled: tv_noise_floor(&wt, (n_samples * (l - 1)) as f64),
        bulk_mean: summary(per_cfg.iter().map(|p| p.0).collect()),
        bulk_variance: summary(per_cfg.iter().map(|p| p.1).collect()),
        rho_c: cc.rho_c,
        sigma2: cc.sigma2,
        regime_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::normal_cdf;
    use proptest::prelude::*;

    fn cfg(v: &[u64]) -> Configuration {
        Configuration::new(v.to_vec()).unwrap()
    }

    fn pl(b: f64) -> ModelParams {
        ModelParams::power_law(b).unwrap()
    }

    #[test]
    fn swap_examples() {
        assert_eq!(swap_max(&cfg(&[1, 5, 2])).as_slice(), &[1, 2, 5]);
        assert_eq!(swap_max(&cfg(&[3, 3, 1])).as_slice(), &[1, 3, 3]);
        assert_eq!(swap_max(&cfg(&[1, 2, 5])).as_slice(), &[1, 2, 5]);
        let s = config_stats(&cfg(&[3, 3, 1]));
        assert_eq!((s.max, s.argmax, s.second, s.total), (3, 0, 3, 7));
    }

    #[test]
    fn normalisations() {
        assert!((normalization_al(&pl(4.0), 100).unwrap() - 15.0).abs() < 1e-12);
        let b3 = 2.0 * (100.0 * 100f64.ln()).sqrt();
        assert!((normalization_al(&pl(3.0), 100).unwrap() - b3).abs() < 1e-12);
        assert!((b3 - 42.92).abs() < 0.01);
        let v = normalization_al(&pl(2.5), 100).unwrap();
        assert!((v - (gamma(2.5) * 100.0).powf(2.0 / 3.0)).abs() < 1e-12);
        assert!((v - 26.04).abs() < 0.01);
    }

    #[test]
    fn centering_and_frechet() {
        let p = pl(4.0);
        let s = ConfigStats {
            total: 2000,
            max: 1500,
            argmax: 0,
            second: 3,
        };
        assert_eq!(centered_max(&s, &p, 1000, 2000).unwrap(), 0.0);
        assert!((frechet_cdf(4.0, 1.0) - (-1f64).exp()).abs() < 1e-15);
        assert!((frechet_cdf(4.0, 2.0) - (-0.125f64).exp()).abs() < 1e-15);
        assert_eq!(frechet_cdf(4.0, 0.0), 0.0);
    }

    #[test]
    fn bulk_path_examples() {
        let p = pl(4.0);
        let a4 = normalization_al(&p, 4).unwrap();
        let path = bulk_path_with_cutoff(&cfg(&[1, 0, 1, 0]), &p, f64::INFINITY).unwrap();
        let expected = [0.0, 0.5, 0.0, 0.5, 0.0];
        for (v, e) in path.values.iter().zip(expected) {
            assert!((v - e / a4).abs() < 1e-15);
        }
        let z = bulk_path_with_cutoff(&cfg(&[0; 6]), &p, f64::INFINITY).unwrap();
        for j in 0..=6 {
            assert!((z.at(j as f64 / 6.0) + 0.5 * j as f64 / z.a_l).abs() < 1e-15);
        }
        assert!(bulk_path(&cfg(&[1, 0, 1, 0]), &p, 0.1).is_err());
        let eta = cfg(&[0, 1, 40, 2]);
        let path = bulk_path(&eta, &p, 5.0).unwrap();
        // the 40 is cut at ζL = 20
        assert!((path.values[3] - path.values[2] + 0.5 / path.a_l).abs() < 1e-15);
    }

    #[test]
    fn ks_examples() {
        assert!((ks_distance(&[0.0], normal_cdf).unwrap() - 0.5).abs() < 1e-15);
        let far: Vec<f64> = (0..100).map(|i| 1e3 + i as f64).collect();
        assert!(ks_distance(&far, normal_cdf).unwrap() > 0.999);
        // quantiles of the uniform law are a near-perfect sample
        let u: Vec<f64> = (0..10_000).map(|i| (i as f64 + 0.5) / 10_000.0).collect();
        assert!(ks_distance(&u, |x| x.clamp(0.0, 1.0)).unwrap() < 1.63 / 100.0);
        assert!(ks_distance(&[], normal_cdf).is_err());
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert!((tv_distance(&[0.75, 0.25], &[0.5, 0.5]) - 0.25).abs() < 1e-15);
        assert_eq!(empirical_pmf([0u64, 2, 2, 0]), vec![0.5, 0.0, 0.5]);
    }

    fn pmf(raw: Vec<f64>) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn tv_metric(a in proptest::collection::vec(0.01f64..1.0, 6),
                     b in proptest::collection::vec(0.01f64..1.0, 6),
                     c in proptest::collection::vec(0.01f64..1.0, 6)) {
            let (p, q, r) = (pmf(a), pmf(b), pmf(c));
            prop_assert!((tv_distance(&p, &q) - tv_distance(&q, &p)).abs() < 1e-15);
            prop_assert!(tv_distance(&p, &r) <= tv_distance(&p, &q) + tv_distance(&q, &r) + 1e-15);
        }

        #[test]
        fn swap_properties(v in proptest::collection::vec(0u64..6, 1..12)) {
            let eta = cfg(&v);
            let s = config_stats(&eta);
            let t = swap_max(&eta);
            prop_assert_eq!(t[t.len() - 1], s.max);
            let mut a = v.clone();
            let mut b = t.clone().into_vec();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert!(v[..s.argmax].iter().all(|&x| x < s.max));
            // M_L = N − Σ_{x<L} (Tη)_x
            prop_assert_eq!(s.max, s.total - t.as_slice()[..t.len() - 1].iter().sum::<u64>());
        }

        #[test]
        fn bulk_increments(v in proptest::collection::vec(0u64..30, 2..20), zeta in 0.1f64..3.0) {
            let eta = cfg(&v);
            let p = pl(4.0);
            let path = bulk_path_with_cutoff(&eta, &p, zeta).unwrap();
            let cut = zeta * v.len() as f64;
            for j in 1..=v.len() {
                let star = if (v[j - 1] as f64) < cut { v[j - 1] as f64 } else { 0.0 };
                let inc = path.values[j] - path.values[j - 1];
                prop_assert!((inc - (star - 0.5) / path.a_l).abs() < 1e-12);
            }
            prop_assert_eq!(path.values[0], 0.0);
        }
    }

    #[test]
    fn theorem1_small_run() {
        let r = theorem1_experiment(&pl(4.0), 100, 200, 2000, 9).unwrap();
        assert!(r.regime_warning.is_none());
        assert!(r.tv_first_site < 0.1);
        assert!(r.tv_bulk_pooled <= r.tv_first_site + 0.02);
        // at L = 100 the condensate is still undersized, so the bulk carries
        // a visible excess over rho_c
        assert!(r.bulk_mean.value > 0.5 && r.bulk_mean.value < 0.7, "{r:?}");
        let crit = theorem1_experiment(&pl(4.0), 100, 50, 200, 9).unwrap();
        assert!(crit.regime_warning.is_some());
    }
}
