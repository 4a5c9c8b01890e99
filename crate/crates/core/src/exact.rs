//! Canonical ensembles through convolution of the critical law.
//!
//! `Q_l(n) = ν^l[S_l = n]` is the `l`-fold convolution of `W` restricted to
//! `n ≤ N`. All rows are kept in log space; the convolutions themselves run
//! on rescaled linear values (every term is positive, so nothing cancels) and
//! fall back to log-sum-exp for entries too small for that rescaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::configuration::Configuration;
use crate::error::{domain, Error, Result};
use crate::model::{critical_constants, ModelParams, WeightTable};
use crate::special::{binomial, log_sum_exp};

/// Default limit on memory held by canonical tables.
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 31;
/// Default cap on the number of configurations enumerated.
pub const DEFAULT_FIBER_CAP: u64 = 10_000_000;

/// Linear sums below this are recomputed in log space.
const LINEAR_FLOOR: f64 = 1e-200;

/// `ln Σ_k exp(a_k + b_{n−k})` for `n < len`.
pub fn log_convolve(a: &[f64], b: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; len];
    if a.is_empty() || b.is_empty() {
        return out;
    }
    let ma = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mb = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if ma == f64::NEG_INFINITY || mb == f64::NEG_INFINITY {
        return out;
    }
    let la: Vec<f64> = a.iter().map(|x| (x - ma).exp()).collect();
    // reversed so both operands of the dot product run forwards
    let lb_rev: Vec<f64> = b.iter().rev().map(|x| (x - mb).exp()).collect();
    let nb = b.len();
    for (n, slot) in out.iter_mut().enumerate() {
        let lo = (n + 1).saturating_sub(nb);
        let hi = n.min(a.len() - 1);
        if lo > hi {
            continue;
        }
        let start = nb - 1 - n + lo;
        let s = dot(&la[lo..=hi], &lb_rev[start..start + hi - lo + 1]);
        *slot = if s > LINEAR_FLOOR {
            s.ln() + ma + mb
        } else {
            let terms: Vec<f64> = (lo..=hi).map(|k| a[k] + b[n - k]).collect();
            log_sum_exp(&terms)
        };
    }
    out
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let cx = x.chunks_exact(4);
    let cy = y.chunks_exact(4);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (p, q) in cx.zip(cy) {
        acc[0] += p[0] * q[0];
        acc[1] += p[1] * q[1];
        acc[2] += p[2] * q[2];
        acc[3] += p[3] * q[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (p, q) in rx.iter().zip(ry) {
        s += p * q;
    }
    s
}

/// `ln` of the `l`-fold convolution power of `exp(logw)`, truncated to `len`.
pub fn log_convolution_power(logw: &[f64], l: usize, len: usize) -> Vec<f64> {
    let mut result = delta_row(len);
    let mut base: Vec<f64> = logw.iter().take(len).cloned().collect();
    let mut e = l;
    while e > 0 {
        if e & 1 == 1 {
            result = log_convolve(&result, &base, len);
        }
        e >>= 1;
        if e > 0 {
            base = log_convolve(&base, &base, len);
        }
    }
    result
}

/// `ln Q_0`: all mass at zero.
fn delta_row(len: usize) -> Vec<f64> {
    let mut r = vec![f64::NEG_INFINITY; len];
    if len > 0 {
        r[0] = 0.0;
    }
    r
}

fn weight_prefix(params: &ModelParams, n: usize) -> Result<Vec<f64>> {
    let wt = WeightTable::build_covering(*params, n)?;
    Ok((0..=n as u64).map(|k| wt.log_weight(k)).collect())
}

fn check_budget(bytes: usize, budget: usize) -> Result<()> {
    if bytes > budget {
        return Err(Error::Resource(format!(
            "canonical table needs {bytes} bytes, budget is {budget}"
        )));
    }
    Ok(())
}

/// All rows `ln Q_l(n)` for `1 ≤ l ≤ L`, `0 ≤ n ≤ N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTable {
    params: ModelParams,
    l: usize,
    n: usize,
    /// `rows[l−1][n] = ln Q_l(n)`.
    rows: Vec<Vec<f64>>,
}

impl CanonicalTable {
    pub fn build(params: ModelParams, l: usize, n: usize) -> Result<Self> {
        Self::build_with_budget(params, l, n, DEFAULT_MEMORY_BUDGET)
    }

    pub fn build_with_budget(params: ModelParams, l: usize, n: usize, budget: usize) -> Result<Self> {
        params.validate()?;
        if l == 0 {
            return Err(domain!("canonical table needs L >= 1"));
        }
        check_budget(l.saturating_mul(n + 1).saturating_mul(8), budget)?;
        let logw = weight_prefix(&params, n)?;
        Ok(Self::from_log_weights(params, l, logw))
    }

    /// Builds from explicit log-weights `ln W(0..=N)`.
    pub fn from_log_weights(params: ModelParams, l: usize, logw: Vec<f64>) -> Self {
        let n = logw.len() - 1;
        let mut rows = Vec::with_capacity(l);
        rows.push(logw);
        for i in 1..l {
            let next = log_convolve(&rows[0], &rows[i - 1], n + 1);
            rows.push(next);
        }
        CanonicalTable { params, l, n, rows }
    }

    pub(crate) fn from_rows(params: ModelParams, rows: Vec<Vec<f64>>) -> Result<Self> {
        let l = rows.len();
        if l == 0 || rows[0].is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(Error::Format("ragged or empty canonical table".into()));
        }
        let n = rows[0].len() - 1;
        Ok(CanonicalTable { params, l, n, rows })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn sites(&self) -> usize {
        self.l
    }

    pub fn particles(&self) -> usize {
        self.n
    }

    /// `ln Q_l(·)` for `0 ≤ l ≤ L`; row 0 is the point mass at zero.
    pub fn log_row(&self, l: usize) -> std::borrow::Cow<'_, [f64]> {
        if l == 0 {
            std::borrow::Cow::Owned(delta_row(self.n + 1))
        } else {
            std::borrow::Cow::Borrowed(&self.rows[l - 1])
        }
    }

    /// `ln Q_l(n)`; `ln Q_0(n)` is `0` at `n = 0` and `−∞` otherwise.
    #[inline]
    pub fn log_q(&self, l: usize, n: usize) -> f64 {
        if l == 0 {
            if n == 0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            self.rows[l - 1][n]
        }
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.rows[0]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Largest `Σ_{n≤N} Q_l(n)` over all rows; at most one.
    pub fn max_row_mass(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().map(|x| x.exp()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest relative difference between the last row and the same row
    /// recomputed with the operands of every convolution swapped.
    pub fn symmetric_role_error(&self) -> f64 {
        let mut row = self.rows[0].clone();
        for _ in 1..self.l {
            row = log_convolve(&row, &self.rows[0], self.n + 1);
        }
        row.iter()
            .zip(&self.rows[self.l - 1])
            .filter(|(a, _)| a.is_finite())
            .map(|(a, b)| (a - b).exp_m1().abs())
            .fold(0.0, f64::max)
    }

    pub fn distribution(&self) -> CanonicalDistribution {
        CanonicalDistribution {
            params: self.params,
            l: self.l,
            n: self.n,
            logw: self.rows[0].clone(),
            log_q: self.rows[self.l - 1].clone(),
            log_q_prev: self.log_row(self.l - 1).into_owned(),
        }
    }
}

/// The canonical measure `μ^{N,L}` through `W`, `Q_L` and `Q_{L−1}`.
#[derive(Debug, Clone)]
pub struct CanonicalDistribution {
    params: ModelParams,
    l: usize,
    n: usize,
    logw: Vec<f64>,
    log_q: Vec<f64>,
    log_q_prev: Vec<f64>,
}

impl CanonicalDistribution {
    /// Two-row construction by repeated squaring, `O(N² log L)`.
    pub fn new(params: ModelParams, l: usize, n: usize) -> Result<Self> {
        params.validate()?;
        if l == 0 {
            return Err(domain!("canonical distribution needs L >= 1"));
        }
        let logw = weight_prefix(&params, n)?;
        let log_q_prev = log_convolution_power(&logw, l - 1, n + 1);
        let log_q = log_convolve(&log_q_prev, &logw, n + 1);
        Ok(CanonicalDistribution {
            params,
            l,
            n,
            logw,
            log_q,
            log_q_prev,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn sites(&self) -> usize {
        self.l
    }

    pub fn particles(&self) -> usize {
        self.n
    }

    /// `ln Q_L(m)` for `m ≤ N`.
    pub fn log_q(&self, m: usize) -> f64 {
        self.log_q[m]
    }

    /// `ln Q_{L−1}(m)` for `m ≤ N`.
    pub fn log_q_prev(&self, m: usize) -> f64 {
        self.log_q_prev[m]
    }

    pub fn log_weight(&self, k: usize) -> f64 {
        self.logw[k]
    }

    pub fn canonical_log_prob(&self, eta: &Configuration) -> Result<f64> {
        if eta.len() != self.l {
            return Err(domain!("configuration has {} sites, expected {}", eta.len(), self.l));
        }
        if eta.total() != self.n as u64 {
            return Err(domain!("configuration holds {} particles, expected {}", eta.total(), self.n));
        }
        let s: f64 = eta.as_slice().iter().map(|&k| self.logw[k as usize]).sum();
        Ok(s - self.log_q[self.n])
    }

    /// `Π_x W(η_x) / Q_L(N)`.
    pub fn canonical_prob(&self, eta: &Configuration) -> Result<f64> {
        Ok(self.canonical_log_prob(eta)?.exp())
    }

    /// `μ^{N,L}[η_{x_1} = k] = W(k)Q_{L−1}(N−k)/Q_L(N)`.
    pub fn site_marginal(&self, k: usize) -> f64 {
        if k > self.n {
            return 0.0;
        }
        (self.logw[k] + self.log_q_prev[self.n - k] - self.log_q[self.n]).exp()
    }

    pub fn site_marginal_pmf(&self) -> Vec<f64> {
        (0..=self.n).map(|k| self.site_marginal(k)).collect()
    }
}

/// Rows `ln Q_s` for every block size `s` reached by halving `L`.
#[derive(Debug, Clone)]
pub struct BisectionTable {
    params: ModelParams,
    l: usize,
    n: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl BisectionTable {
    pub fn build(params: ModelParams, l: usize, n: usize) -> Result<Self> {
        Self::build_with_budget(params, l, n, DEFAULT_MEMORY_BUDGET)
    }

    pub fn build_with_budget(params: ModelParams, l: usize, n: usize, budget: usize) -> Result<Self> {
        params.validate()?;
        if l == 0 {
            return Err(domain!("bisection table needs L >= 1"));
        }
        let mut sizes = std::collections::BTreeSet::new();
        let mut frontier = vec![l];
        while let Some(s) = frontier.pop() {
            if sizes.insert(s) && s > 1 {
                frontier.push(s / 2);
                frontier.push(s - s / 2);
            }
        }
        check_budget(sizes.len().saturating_mul(n + 1).saturating_mul(16), budget)?;
        let logw = weight_prefix(&params, n)?;
        let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &s in &sizes {
            let row = if s == 1 {
                logw.clone()
            } else {
                log_convolve(&rows[&(s / 2)], &rows[&(s - s / 2)], n + 1)
            };
            rows.insert(s, row);
        }
        Ok(BisectionTable { params, l, n, rows })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn sites(&self) -> usize {
        self.l
    }

    pub fn particles(&self) -> usize {
        self.n
    }

    /// `ln Q_s` for a block size produced by halving.
    pub fn log_row(&self, s: usize) -> Option<&[f64]> {
        self.rows.get(&s).map(|v| v.as_slice())
    }

    pub fn block_sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }
}

/// All compositions of `n` into `l` nonnegative parts, in lexicographic order.
pub fn enumerate_fiber(l: usize, n: u64, cap: u64) -> Result<Vec<Configuration>> {
    let size = fiber_size(l, n)?;
    if size > cap {
        return Err(Error::Resource(format!(
            "fiber L={l}, N={n} has {size} configurations, cap is {cap}"
        )));
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut cur = vec![0u64; l];
    fill(&mut cur, 0, n, &mut out);
    Ok(out)
}

fn fill(cur: &mut [u64], i: usize, rest: u64, out: &mut Vec<Configuration>) {
    if i + 1 == cur.len() {
        cur[i] = rest;
        out.push(Configuration::new(cur.to_vec()).expect("nonempty"));
        return;
    }
    for k in 0..=rest {
        cur[i] = k;
        fill(cur, i + 1, rest - k, out);
    }
}

/// `C(N+L−1, L−1)`, saturating at `u64::MAX`.
pub fn fiber_size(l: usize, n: u64) -> Result<u64> {
    if l == 0 {
        return Err(domain!("fiber needs L >= 1"));
    }
    Ok(binomial(n + l as u64 - 1, l as u64 - 1)
        .map(|c| c.min(u64::MAX as u128) as u64)
        .unwrap_or(u64::MAX))
}

/// `Q_L(N) / (L · W(N − ⌊ρ_c L⌋))`.
pub fn llt_ratio(params: &ModelParams, l: usize, n: usize) -> Result<f64> {
    params.validate()?;
    if l == 0 {
        return Err(domain!("llt ratio needs L >= 1"));
    }
    let rho_c = critical_constants(params)?.rho_c;
    let shift = (rho_c * l as f64).floor() as i64;
    let excess = n as i64 - shift;
    if excess < 0 {
        return Err(domain!("N - floor(rho_c L) = {excess} is negative"));
    }
    let logw = weight_prefix(params, n)?;
    let log_q = log_convolution_power(&logw, l, n + 1)[n];
    Ok((log_q - (l as f64).ln() - logw[excess as usize]).exp())
}

/// Smallest `N` above the moderate-deviation threshold for a given `γ(L)`.
///
/// Power law (`b > 3`):
/// `ρ_c L + ((b−1)/(b−2))√(L ln L)(1 + (b/(2(b−3))) ln ln L/ln L + γ/ln L)`;
/// stretched: `ρ_c L + γ L^{1/(2λ)}`.
pub fn moderate_deviation_threshold(params: &ModelParams, l: u64, gamma_l: f64) -> Result<u64> {
    params.validate()?;
    if l < 2 {
        return Err(domain!("threshold needs L >= 2"));
    }
    let lf = l as f64;
    let rho_c = critical_constants(params)?.rho_c;
    let value = match *params {
        ModelParams::PowerLaw { b } => {
            if b <= 3.0 {
                return Err(domain!("moderate-deviation threshold is only available for b > 3, got {b}"));
            }
            let ln_l = lf.ln();
            rho_c * lf
                + (b - 1.0) / (b - 2.0)
                    * (lf * ln_l).sqrt()
                    * (1.0 + b / (2.0 * (b - 3.0)) * ln_l.ln() / ln_l + gamma_l / ln_l)
        }
        ModelParams::Stretched { lambda, .. } => rho_c * lf + gamma_l * lf.powf(0.5 / lambda),
    };
    if !value.is_finite() || value < 0.0 {
        return Err(domain!("threshold evaluates to {value}"));
    }
    Ok(value.ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pl(b: f64) -> ModelParams {
        ModelParams::power_law(b).unwrap()
    }

    #[test]
    fn two_site_example() {
        let t = CanonicalTable::build(pl(4.0), 2, 2).unwrap();
        assert!((t.log_q(2, 2).exp() - 0.0975).abs() < 1e-14);
        let d = t.distribution();
        let p = d.canonical_prob(&Configuration::new(vec![0, 2]).unwrap()).unwrap();
        assert!((p - 0.75 * 0.05 / 0.0975).abs() < 1e-13);
        assert!((d.site_marginal(1) - 0.0225 / 0.0975).abs() < 1e-13);
        assert!(d.canonical_prob(&Configuration::new(vec![1, 2]).unwrap()).is_err());
    }

    #[test]
    fn trivial_rows() {
        let t = CanonicalTable::build(pl(4.0), 5, 0).unwrap();
        assert!((t.log_q(5, 0) - 5.0 * 0.75f64.ln()).abs() < 1e-13);
        let t = CanonicalTable::build(pl(4.0), 1, 6).unwrap();
        let wt = WeightTable::build(pl(4.0), 10).unwrap();
        for k in 0..=6 {
            assert!((t.log_q(1, k) - wt.log_weight(k as u64)).abs() < 1e-15);
        }
        let d = t.distribution();
        assert!((d.site_marginal(6) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn marginal_sums_to_one() {
        let d = CanonicalDistribution::new(pl(4.0), 50, 100).unwrap();
        let s: f64 = d.site_marginal_pmf().iter().sum();
        assert!((s - 1.0).abs() < 1e-10);
    }

    #[test]
    fn two_row_mode_matches_full_table() {
        let t = CanonicalTable::build(pl(3.0), 37, 60).unwrap();
        let d = CanonicalDistribution::new(pl(3.0), 37, 60).unwrap();
        let full = t.distribution();
        for m in 0..=60 {
            assert!((d.log_q(m) - full.log_q(m)).abs() < 1e-11);
            assert!((d.log_q_prev(m) - full.log_q_prev(m)).abs() < 1e-11);
        }
    }

    #[test]
    fn underflowing_rows_stay_accurate() {
        // Q_L(0) = W(0)^L ≈ e^{−1150}, far below the linear range
        let l = 4000;
        let d = CanonicalDistribution::new(pl(4.0), l, 50).unwrap();
        assert!((d.log_q(0) - l as f64 * 0.75f64.ln()).abs() < 1e-9);
        // Q_L(1) = L W(0)^{L−1} W(1)
        let expected = (l as f64).ln() + (l - 1) as f64 * 0.75f64.ln() + 0.15f64.ln();
        assert!((d.log_q(1) - expected).abs() < 1e-9);
    }

    #[test]
    fn symmetric_roles_and_substochastic() {
        let t = CanonicalTable::build(pl(2.5), 30, 80).unwrap();
        assert!(t.symmetric_role_error() < 1e-10);
        assert!(t.max_row_mass() <= 1.0 + 1e-12);
    }

    #[test]
    fn bisection_rows_match_full_table() {
        let t = CanonicalTable::build(pl(4.0), 23, 40).unwrap();
        let bt = BisectionTable::build(pl(4.0), 23, 40).unwrap();
        for s in bt.block_sizes() {
            let row = bt.log_row(s).unwrap();
            for m in 0..=40 {
                assert!((row[m] - t.log_q(s, m)).abs() < 1e-11, "s={s} m={m}");
            }
        }
        assert!(bt.block_sizes().count() <= 2 * 5 + 1);
    }

    #[test]
    fn memory_budget_enforced() {
        let e = CanonicalTable::build_with_budget(pl(4.0), 1000, 1000, 1000).unwrap_err();
        assert!(matches!(e, Error::Resource(_)));
    }

    #[test]
    fn fibers() {
        let f = enumerate_fiber(2, 2, 100).unwrap();
        let v: Vec<Vec<u64>> = f.into_iter().map(|c| c.into_vec()).collect();
        assert_eq!(v, vec![vec![0, 2], vec![1, 1], vec![2, 0]]);
        assert_eq!(enumerate_fiber(3, 0, 100).unwrap().len(), 1);
        assert_eq!(enumerate_fiber(3, 5, 100).unwrap().len(), 21);
        assert!(matches!(enumerate_fiber(10, 30, 1000), Err(Error::Resource(_))));
    }

    #[test]
    fn dp_matches_enumeration() {
        for b in [2.5, 4.0] {
            let wt = WeightTable::build(pl(b), 20).unwrap();
            for (l, n) in [(3usize, 5u64), (4, 6), (2, 9)] {
                let d = CanonicalDistribution::new(pl(b), l, n as usize).unwrap();
                let fiber = enumerate_fiber(l, n, 1000).unwrap();
                let weights: Vec<f64> = fiber
                    .iter()
                    .map(|c| c.as_slice().iter().map(|&k| wt.weight(k)).product())
                    .collect();
                let z: f64 = weights.iter().sum();
                for (c, w) in fiber.iter().zip(&weights) {
                    assert!((d.canonical_prob(c).unwrap() - w / z).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn llt_single_site() {
        assert!((llt_ratio(&pl(4.0), 1, 3).unwrap() - 1.0).abs() < 1e-14);
        assert!(llt_ratio(&pl(2.5), 10, 5).is_err());
    }

    #[test]
    fn llt_needs_supercriticality() {
        let l = 800;
        let super_ = llt_ratio(&pl(4.0), l, l).unwrap();
        let crit = llt_ratio(&pl(4.0), l, l / 2).unwrap();
        assert!((super_ - 1.0).abs() < 0.2);
        assert!(crit < 0.5 || crit > 2.0, "critical ratio {crit}");
    }

    #[test]
    fn threshold_formula() {
        let b = 4.0;
        let l = 10_000f64;
        let ln_l = l.ln();
        let direct = 0.5 * l + 1.5 * (l * ln_l).sqrt() * (1.0 + 2.0 * ln_l.ln() / ln_l + 10.0 / ln_l);
        assert_eq!(moderate_deviation_threshold(&pl(b), 10_000, 10.0).unwrap(), direct.ceil() as u64);
        assert!(moderate_deviation_threshold(&pl(3.0), 10_000, 10.0).is_err());
        assert!(moderate_deviation_threshold(&pl(2.5), 10_000, 10.0).is_err());
    }

    proptest! {
        #[test]
        fn threshold_increasing_in_gamma(g in 0.0f64..50.0, dg in 0.5f64..10.0, l in 100u64..100_000) {
            let p = pl(4.5);
            let a = moderate_deviation_threshold(&p, l, g).unwrap();
            let c = moderate_deviation_threshold(&p, l, g + dg).unwrap();
            prop_assert!(c > a);
        }

        #[test]
        fn permutation_invariance(seed in proptest::collection::vec(0u64..4, 4)) {
            let n: u64 = seed.iter().sum();
            let d = CanonicalDistribution::new(pl(4.0), 4, n as usize).unwrap();
            let p = d.canonical_prob(&Configuration::new(seed.clone()).unwrap()).unwrap();
            let mut rev = seed.clone();
            rev.reverse();
            let q = d.canonical_prob(&Configuration::new(rev).unwrap()).unwrap();
            prop_assert!((p - q).abs() <= 1e-14 * p.max(1e-300));
        }
    }
}
