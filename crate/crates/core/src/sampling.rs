//! Samplers for the critical marginal and the canonical ensemble.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::configuration::Configuration;
use crate::error::{domain, Error, Result};
use crate::exact::{BisectionTable, CanonicalTable, DEFAULT_MEMORY_BUDGET};
use crate::limits::normalization_al;
use crate::model::{critical_constants, ModelParams, WeightTable};
use crate::rng::RngStream;
use crate::special::ln_tail_power_law;

/// Tolerance on the normalisation of every conditional pmf.
const NORMALISATION_TOL: f64 = 1e-8;

/// One draw from the critical law `ν_{φ_c}`.
///
/// Inverts the tail: with `v ∈ (0, 1]` the result is the least `m` with
/// `F̄(m+1) < v`. Past the table the power law uses the exact tail formula,
/// so arbitrarily large values are reachable.
pub fn sample_critical_marginal(wt: &WeightTable, rng: &mut RngStream) -> u64 {
    let v = rng.uniform_open0();
    invert_tail(wt, v)
}

pub(crate) fn invert_tail(wt: &WeightTable, v: f64) -> u64 {
    let tails = wt.tails();
    let last = tails.len() - 1;
    if tails[last] < v {
        // first index j ≥ 1 with tails[j] < v, answer j − 1
        let j = tails[1..].partition_point(|&t| t >= v) + 1;
        return (j - 1) as u64;
    }
    match *wt.params() {
        ModelParams::PowerLaw { b } => {
            let ln_v = v.ln();
            let below = |m: u64| ln_tail_power_law(m as f64 + 1.0, b) < ln_v;
            let mut lo = last as u64 - 1; // F̄(lo + 1) ≥ v
            let mut step = lo.max(1);
            let mut hi = lo + step;
            while !below(hi) {
                lo = hi;
                step = step.saturating_mul(2);
                hi = hi.saturating_add(step);
                if hi == u64::MAX {
                    return hi;
                }
            }
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if below(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        }
        ModelParams::Stretched { .. } => {
            let mut m = last as u64;
            let mut t = tails[last];
            // F̄(m+1) = F̄(m) − W(m)
            loop {
                let next = t - wt.weight(m);
                if next < v || next <= 0.0 {
                    return m;
                }
                t = next;
                m += 1;
            }
        }
    }
}

/// Anything that draws configurations from a stream.
pub trait ConfigSampler: Sync {
    fn id(&self) -> &'static str;
    fn params(&self) -> &ModelParams;
    fn sites(&self) -> usize;
    /// Fixed particle number, if the sampler is canonical.
    fn particles(&self) -> Option<usize>;
    fn sample(&self, rng: &mut RngStream) -> Result<Configuration>;
}

/// A batch of configurations with the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub params: ModelParams,
    pub sites: usize,
    pub particles: Option<usize>,
    pub seed: u64,
    pub sampler: String,
    pub configs: Vec<Configuration>,
}

/// Draws `count` configurations, the `i`-th from stream `(seed, i)`.
/// The result does not depend on the number of worker threads.
pub fn draw_batch<S: ConfigSampler + ?Sized>(sampler: &S, count: usize, seed: u64) -> Result<SampleBatch> {
    let configs = (0..count)
        .into_par_iter()
        .map(|i| sampler.sample(&mut RngStream::new(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleBatch {
        params: *sampler.params(),
        sites: sampler.sites(),
        particles: sampler.particles(),
        seed,
        sampler: sampler.id().to_string(),
        configs,
    })
}

/// `L` independent critical draws.
pub struct IidSampler {
    table: WeightTable,
    sites: usize,
}

impl IidSampler {
    pub fn new(table: WeightTable, sites: usize) -> Result<Self> {
        if sites == 0 {
            return Err(domain!("need at least one site"));
        }
        Ok(IidSampler { table, sites })
    }
}

impl ConfigSampler for IidSampler {
    fn id(&self) -> &'static str {
        "iid"
    }
    fn params(&self) -> &ModelParams {
        self.table.params()
    }
    fn sites(&self) -> usize {
        self.sites
    }
    fn particles(&self) -> Option<usize> {
        None
    }
    fn sample(&self, rng: &mut RngStream) -> Result<Configuration> {
        Configuration::new((0..self.sites).map(|_| sample_critical_marginal(&self.table, rng)).collect())
    }
}

/// Site-by-site conditioning on the full table:
/// `P(η_1 = k) = W(k)Q_{L−1}(N−k)/Q_L(N)`, then recurse.
pub struct SequentialSampler {
    table: CanonicalTable,
}

impl SequentialSampler {
    pub fn new(table: CanonicalTable) -> Self {
        SequentialSampler { table }
    }

    pub fn build(params: ModelParams, l: usize, n: usize) -> Result<Self> {
        Ok(Self::new(CanonicalTable::build(params, l, n)?))
    }

    pub fn table(&self) -> &CanonicalTable {
        &self.table
    }

    /// Largest deviation from one of `Σ_k P(k)` over every state
    /// `(sites left, particles left)` the sampler can visit.
    pub fn normalisation_error(&self) -> f64 {
        let t = &self.table;
        let mut worst = 0.0f64;
        for l in 1..=t.sites() {
            for r in 0..=t.particles() {
                let norm = t.log_q(l, r);
                if !norm.is_finite() {
                    continue;
                }
                let s: f64 = (0..=r)
                    .map(|k| (t.log_q(1, k) + t.log_q(l - 1, r - k) - norm).exp())
                    .sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

impl ConfigSampler for SequentialSampler {
    fn id(&self) -> &'static str {
        "exact-sequential"
    }
    fn params(&self) -> &ModelParams {
        self.table.params()
    }
    fn sites(&self) -> usize {
        self.table.sites()
    }
    fn particles(&self) -> Option<usize> {
        Some(self.table.particles())
    }
    fn sample(&self, rng: &mut RngStream) -> Result<Configuration> {
        let t = &self.table;
        let l = t.sites();
        let mut out = Vec::with_capacity(l);
        let mut rest = t.particles();
        for left in (1..=l).rev() {
            if left == 1 {
                out.push(rest as u64);
                break;
            }
            let norm = t.log_q(left, rest);
            let u = rng.uniform_open0();
            let mut cum = 0.0;
            let mut pick = None;
            for k in 0..=rest {
                cum += (t.log_q(1, k) + t.log_q(left - 1, rest - k) - norm).exp();
                if cum >= u {
                    pick = Some(k);
                    break;
                }
            }
            if cum > 1.0 + NORMALISATION_TOL {
                return Err(Error::Consistency(format!(
                    "conditional pmf sums past {cum} at {left} sites, {rest} particles"
                )));
            }
            let k = match pick {
                Some(k) => k,
                None if cum >= 1.0 - NORMALISATION_TOL => rest,
                None => {
                    return Err(Error::Consistency(format!(
                        "conditional pmf sums to {cum} at {left} sites, {rest} particles"
                    )))
                }
            };
            out.push(k as u64);
            rest -= k;
        }
        Configuration::new(out)
    }
}

/// Recursive halving: a block of `s` sites holding `n` particles splits
/// into `⌊s/2⌋` and `⌈s/2⌉` sites with
/// `P(n₁) = Q_{⌊s/2⌋}(n₁)Q_{⌈s/2⌉}(n−n₁)/Q_s(n)`.
pub struct BisectionSampler {
    table: BisectionTable,
}

impl BisectionSampler {
    pub fn new(table: BisectionTable) -> Self {
        BisectionSampler { table }
    }

    pub fn build(params: ModelParams, l: usize, n: usize) -> Result<Self> {
        Ok(Self::new(BisectionTable::build(params, l, n)?))
    }

    fn split(&self, s: usize, n: usize, rng: &mut RngStream, out: &mut Vec<u64>) -> Result<()> {
        if s == 1 {
            out.push(n as u64);
            return Ok(());
        }
        if n == 0 {
            out.extend(std::iter::repeat(0).take(s));
            return Ok(());
        }
        let (s1, s2) = (s / 2, s - s / 2);
        let q1 = self.table.log_row(s1).expect("halving closure");
        let q2 = self.table.log_row(s2).expect("halving closure");
        let norm = self.table.log_row(s).expect("halving closure")[n];
        let u = rng.uniform_open0();
        let mut cum = 0.0;
        let mut pick = None;
        for n1 in 0..=n {
            cum += (q1[n1] + q2[n - n1] - norm).exp();
            if cum >= u {
                pick = Some(n1);
                break;
            }
        }
        if cum > 1.0 + NORMALISATION_TOL {
            return Err(Error::Consistency(format!(
                "split pmf sums past {cum} for block {s}, {n} particles"
            )));
        }
        let n1 = match pick {
            Some(k) => k,
            None if cum >= 1.0 - NORMALISATION_TOL => n,
            None => {
                return Err(Error::Consistency(format!(
                    "split pmf sums to {cum} for block {s}, {n} particles"
                )))
            }
        };
        self.split(s1, n1, rng, out)?;
        self.split(s2, n - n1, rng, out)
    }
}

impl ConfigSampler for BisectionSampler {
    fn id(&self) -> &'static str {
        "exact-bisection"
    }
    fn params(&self) -> &ModelParams {
        self.table.params()
    }
    fn sites(&self) -> usize {
        self.table.sites()
    }
    fn particles(&self) -> Option<usize> {
        Some(self.table.particles())
    }
    fn sample(&self, rng: &mut RngStream) -> Result<Configuration> {
        let mut out = Vec::with_capacity(self.table.sites());
        self.split(self.table.sites(), self.table.particles(), rng, &mut out)?;
        Configuration::new(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactMethod {
    Sequential,
    Bisection,
    /// Sequential for small `L`, bisection otherwise.
    Auto,
}

/// Exact sampler of `μ^{N,L}` by either method.
pub enum ExactSampler {
    Sequential(SequentialSampler),
    Bisection(BisectionSampler),
}

impl ExactSampler {
    pub fn build(params: ModelParams, l: usize, n: usize, method: ExactMethod) -> Result<Self> {
        let method = match method {
            ExactMethod::Auto if l <= 64 => ExactMethod::Sequential,
            ExactMethod::Auto => ExactMethod::Bisection,
            m => m,
        };
        Ok(match method {
            ExactMethod::Sequential => ExactSampler::Sequential(SequentialSampler::new(
                CanonicalTable::build_with_budget(params, l, n, DEFAULT_MEMORY_BUDGET)?,
            )),
            _ => ExactSampler::Bisection(BisectionSampler::build(params, l, n)?),
        })
    }

    fn inner(&self) -> &dyn ConfigSampler {
        match self {
            ExactSampler::Sequential(s) => s,
            ExactSampler::Bisection(s) => s,
        }
    }
}

impl ConfigSampler for ExactSampler {
    fn id(&self) -> &'static str {
        self.inner().id()
    }
    fn params(&self) -> &ModelParams {
        self.inner().params()
    }
    fn sites(&self) -> usize {
        self.inner().sites()
    }
    fn particles(&self) -> Option<usize> {
        self.inner().particles()
    }
    fn sample(&self, rng: &mut RngStream) -> Result<Configuration> {
        self.inner().sample(rng)
    }
}

/// Retries allowed for one condensate draw before giving up.
const CONDENSATE_MAX_TRIES: u64 = 10_000;

/// `L−1` critical draws plus the remaining mass on a uniform site.
pub struct CondensateSampler {
    table: WeightTable,
    sites: usize,
    particles: usize,
    attempts: AtomicU64,
    rejections: AtomicU64,
    regime_warning: Option<String>,
}

/// One condensate draw with the index of the site that took the excess.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensateDraw {
    pub config: Configuration,
    pub site: usize,
    pub rejections: u64,
}

impl CondensateSampler {
    pub fn new(table: WeightTable, l: usize, n: usize) -> Result<Self> {
        if l == 0 {
            return Err(domain!("need at least one site"));
        }
        let params = *table.params();
        let rho_c = critical_constants(&params)?.rho_c;
        let edge = rho_c * l as f64 + normalization_al(&params, l)?;
        let regime_warning = (n as f64 <= edge).then(|| {
            format!("N = {n} is not above rho_c L + a_L = {edge:.1}; the condensate approximation is not justified")
        });
        Ok(CondensateSampler {
            table,
            sites: l,
            particles: n,
            attempts: AtomicU64::new(0),
            rejections: AtomicU64::new(0),
            regime_warning,
        })
    }

    pub fn regime_warning(&self) -> Option<&str> {
        self.regime_warning.as_deref()
    }

    /// Fraction of attempts rejected so far.
    pub fn rejection_rate(&self) -> f64 {
        let a = self.attempts.load(Ordering::Relaxed);
        if a == 0 {
            0.0
        } else {
            self.rejections.load(Ordering::Relaxed) as f64 / a as f64
        }
    }

    pub fn draw(&self, rng: &mut RngStream) -> Result<CondensateDraw> {
        let mut rejections = 0;
        let l = self.sites;
        let n = self.particles as u64;
        loop {
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let bulk: Vec<u64> = (0..l - 1).map(|_| sample_critical_marginal(&self.table, rng)).collect();
            let s: u64 = bulk.iter().try_fold(0u64, |a, &x| a.checked_add(x)).unwrap_or(u64::MAX);
            if s <= n {
                let site = rng.below(l as u64) as usize;
                let mut out = Vec::with_capacity(l);
                out.extend_from_slice(&bulk[..site]);
                out.push(n - s);
                out.extend_from_slice(&bulk[site..]);
                return Ok(CondensateDraw {
                    config: Configuration::new(out)?,
                    site,
                    rejections,
                });
            }
            rejections += 1;
            self.rejections.fetch_add(1, Ordering::Relaxed);
            if rejections >= CONDENSATE_MAX_TRIES {
                return Err(Error::Regime(format!(
                    "condensate sampler rejected {rejections} draws in a row at L={l}, N={n}"
                )));
            }
        }
    }

    /// Draws a batch and fails if more than half of all attempts were rejected.
    pub fn draw_batch(&self, count: usize, seed: u64) -> Result<Vec<CondensateDraw>> {
        let draws = (0..count)
            .into_par_iter()
            .map(|i| self.draw(&mut RngStream::new(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        if self.rejection_rate() > 0.5 {
            return Err(Error::Regime(format!(
                "condensate rejection rate {:.3} exceeds 50%",
                self.rejection_rate()
            )));
        }
        Ok(draws)
    }
}

impl ConfigSampler for CondensateSampler {
    fn id(&self) -> &'static str {
        "condensate"
    }
    fn params(&self) -> &ModelParams {
        self.table.params()
    }
    fn sites(&self) -> usize {
        self.sites
    }
    fn particles(&self) -> Option<usize> {
        Some(self.particles)
    }
    fn sample(&self, rng: &mut RngStream) -> Result<Configuration> {
        Ok(self.draw(rng)?.config)
    }
}

/// Independent oracle: draw `ν^L` until `S_L = N`.
pub struct RejectionSampler {
    table: WeightTable,
    sites: usize,
    particles: usize,
    cap: u64,
}

impl RejectionSampler {
    pub fn new(table: WeightTable, l: usize, n: usize, cap: u64) -> Result<Self> {
        if l == 0 {
            return Err(domain!("need at least one site"));
        }
        Ok(RejectionSampler {
            table,
            sites: l,
            particles: n,
            cap,
        })
    }

    /// A single attempt: `Some` iff the draw lands on the fiber.
    pub fn attempt(&self, rng: &mut RngStream) -> Option<Configuration> {
        let n = self.particles as u64;
        let mut out = Vec::with_capacity(self.sites);
        let mut s = 0u64;
        for _ in 0..self.sites {
            let x = sample_critical_marginal(&self.table, rng);
            s = s.saturating_add(x);
            out.push(x);
        }
        (s == n).then(|| Configuration::new(out).expect("nonempty"))
    }
}

impl ConfigSampler for RejectionSampler {
    fn id(&self) -> &'static str {
        "rejection"
    }
    fn params(&self) -> &ModelParams {
        self.table.params()
    }
    fn sites(&self) -> usize {
        self.sites
    }
    fn particles(&self) -> Option<usize> {
        Some(self.particles)
    }
    fn sample(&self, rng: &mut RngStream) -> Result<Configuration> {
        for _ in 0..self.cap {
            if let Some(c) = self.attempt(rng) {
                return Ok(c);
            }
        }
        Err(Error::Resource(format!(
            "rejection sampler found no configuration with S_L = {} in {} attempts",
            self.particles, self.cap
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{enumerate_fiber, CanonicalDistribution};
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::collections::HashMap;

    fn pl(b: f64) -> ModelParams {
        ModelParams::power_law(b).unwrap()
    }

    #[test]
    fn marginal_inversion_matches_tails() {
        let wt = WeightTable::build(pl(4.0), 20).unwrap();
        assert_eq!(invert_tail(&wt, 1.0), 0);
        assert_eq!(invert_tail(&wt, 0.25 + 1e-12), 0);
        assert_eq!(invert_tail(&wt, 0.25 - 1e-12), 1);
        assert_eq!(invert_tail(&wt, 0.1 - 1e-12), 2);
        // beyond the table: F̄(m+1) < v ≤ F̄(m)
        for v in [1e-4, 1e-6, 1e-9, 1e-12] {
            let m = invert_tail(&wt, v);
            assert!(m > 20);
            assert!(wt.tail(m + 1) < v && wt.tail(m) >= v, "v={v} m={m}");
        }
        let st = WeightTable::build(ModelParams::stretched(1.0, 0.75).unwrap(), 30).unwrap();
        for v in [1e-3, 1e-5] {
            let m = invert_tail(&st, v);
            assert!(st.tail(m + 1) < v && st.tail(m) >= v * (1.0 - 1e-9), "v={v} m={m}");
        }
    }

    #[test]
    fn marginal_frequencies() {
        let wt = WeightTable::build_default(pl(4.0)).unwrap();
        let mut rng = RngStream::new(11, 0);
        let n = 1_000_000;
        let (mut zeros, mut sum) = (0u64, 0f64);
        for _ in 0..n {
            let x = sample_critical_marginal(&wt, &mut rng);
            zeros += (x == 0) as u64;
            sum += x as f64;
        }
        assert!((zeros as f64 / n as f64 - 0.75).abs() < 0.002);
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn sequential_trivial_cases() {
        let s = SequentialSampler::build(pl(4.0), 1, 7).unwrap();
        let mut rng = RngStream::new(1, 0);
        assert_eq!(s.sample(&mut rng).unwrap().as_slice(), &[7]);
        let s = SequentialSampler::build(pl(4.0), 5, 0).unwrap();
        assert_eq!(s.sample(&mut rng).unwrap().as_slice(), &[0; 5]);
        let s = BisectionSampler::build(pl(4.0), 5, 0).unwrap();
        assert_eq!(s.sample(&mut rng).unwrap().as_slice(), &[0; 5]);
    }

    #[test]
    fn sequential_normalisation() {
        let s = SequentialSampler::build(pl(2.5), 12, 40).unwrap();
        assert!(s.normalisation_error() < 1e-10);
    }

    fn chi_square_p(counts: &HashMap<Vec<u64>, u64>, probs: &[(Vec<u64>, f64)], draws: u64) -> f64 {
        let mut stat = 0.0;
        for (c, p) in probs {
            let e = p * draws as f64;
            let o = *counts.get(c).unwrap_or(&0) as f64;
            stat += (o - e).powi(2) / e;
        }
        1.0 - ChiSquared::new((probs.len() - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn both_exact_samplers_match_enumeration() {
        let (l, n) = (3usize, 5usize);
        let d = CanonicalDistribution::new(pl(4.0), l, n).unwrap();
        let probs: Vec<(Vec<u64>, f64)> = enumerate_fiber(l, n as u64, 100)
            .unwrap()
            .into_iter()
            .map(|c| {
                let p = d.canonical_prob(&c).unwrap();
                (c.into_vec(), p)
            })
            .collect();
        let draws = 100_000;
        let samplers: Vec<Box<dyn ConfigSampler>> = vec![
            Box::new(SequentialSampler::build(pl(4.0), l, n).unwrap()),
            Box::new(BisectionSampler::build(pl(4.0), l, n).unwrap()),
        ];
        for s in samplers {
            let batch = draw_batch(s.as_ref(), draws, 2024).unwrap();
            let mut counts = HashMap::new();
            for c in batch.configs {
                assert_eq!(c.total(), n as u64);
                *counts.entry(c.into_vec()).or_insert(0u64) += 1;
            }
            let p = chi_square_p(&counts, &probs, draws as u64);
            assert!(p > 0.001, "{} p={p}", s.id());
        }
    }

    #[test]
    fn batches_are_reproducible() {
        let s = ExactSampler::build(pl(4.0), 100, 120, ExactMethod::Auto).unwrap();
        assert_eq!(s.id(), "exact-bisection");
        let a = draw_batch(&s, 50, 7).unwrap();
        let b = draw_batch(&s, 50, 7).unwrap();
        assert_eq!(a, b);
        let c = draw_batch(&s, 50, 8).unwrap();
        assert_ne!(a.configs, c.configs);
    }

    #[test]
    fn rejection_acceptance_rate() {
        let wt = WeightTable::build(pl(4.0), 50).unwrap();
        let r = RejectionSampler::new(wt.clone(), 2, 2, 1000).unwrap();
        let mut rng = RngStream::new(5, 0);
        let attempts = 1_000_000;
        let acc = (0..attempts).filter(|_| r.attempt(&mut rng).is_some()).count();
        assert!((acc as f64 / attempts as f64 - 0.0975).abs() < 0.001);
        let r1 = RejectionSampler::new(wt.clone(), 1, 3, 1_000_000).unwrap();
        assert_eq!(r1.sample(&mut rng).unwrap().as_slice(), &[3]);
        let hopeless = RejectionSampler::new(wt, 3, 1000, 10).unwrap();
        assert!(matches!(hopeless.sample(&mut rng), Err(Error::Resource(_))));
    }

    #[test]
    fn condensate_conserves_and_warns() {
        let wt = WeightTable::build_default(pl(4.0)).unwrap();
        let s = CondensateSampler::new(wt.clone(), 1000, 2000).unwrap();
        assert!(s.regime_warning().is_none());
        let draws = s.draw_batch(200, 3).unwrap();
        for d in &draws {
            assert_eq!(d.config.total(), 2000);
        }
        assert!(s.rejection_rate() < 0.01);
        let sub = CondensateSampler::new(wt, 1000, 500).unwrap();
        assert!(sub.regime_warning().is_some());
    }
}
