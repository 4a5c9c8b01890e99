//! Continuous-time zero-range dynamics and exact stationarity checks on
//! small fibers.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::configuration::Configuration;
use crate::error::{domain, Error, Result};
use crate::exact::enumerate_fiber;
use crate::model::{jump_rate, ModelParams};
use crate::rng::RngStream;

/// Tolerance on row and column sums of a custom kernel.
pub const KERNEL_SUM_TOL: f64 = 1e-12;
/// Largest fiber on which the generator is assembled.
pub const GENERATOR_FIBER_CAP: u64 = 10_000;
/// Events between exact recomputations of the total rate.
pub const RATE_REFRESH_INTERVAL: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    UniformOffDiagonal,
    RingNearestNeighbor,
    /// Row-major `L × L` matrix.
    Custom { matrix: Vec<f64> },
}

/// Doubly stochastic, irreducible transition matrix `p(x, y)` on `L` sites.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    l: usize,
    kind: KernelKind,
    // row-wise cumulative sums for custom kernels
    cumulative: Vec<f64>,
}

impl TransitionKernel {
    /// `p(x, y) = 1/(L−1)` for `y ≠ x`.
    pub fn uniform(l: usize) -> Result<Self> {
        if l < 2 {
            return Err(domain!("the off-diagonal uniform kernel needs L >= 2"));
        }
        Ok(TransitionKernel {
            l,
            kind: KernelKind::UniformOffDiagonal,
            cumulative: Vec::new(),
        })
    }

    /// `p(x, x±1) = 1/2` on the ring; for `L = 2` both steps reach the other site.
    pub fn ring(l: usize) -> Result<Self> {
        if l < 2 {
            return Err(domain!("the ring kernel needs L >= 2"));
        }
        Ok(TransitionKernel {
            l,
            kind: KernelKind::RingNearestNeighbor,
            cumulative: Vec::new(),
        })
    }

    /// Validates double stochasticity and irreducibility of a row-major matrix.
    pub fn custom(l: usize, matrix: Vec<f64>) -> Result<Self> {
        if l == 0 || matrix.len() != l * l {
            return Err(domain!("custom kernel must be {l}x{l}, got {} entries", matrix.len()));
        }
        if let Some(v) = matrix.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(domain!("kernel entries must be finite and nonnegative, found {v}"));
        }
        for x in 0..l {
            let row: f64 = matrix[x * l..(x + 1) * l].iter().sum();
            let col: f64 = (0..l).map(|y| matrix[y * l + x]).sum();
            if (row - 1.0).abs() > KERNEL_SUM_TOL || (col - 1.0).abs() > KERNEL_SUM_TOL {
                return Err(domain!(
                    "kernel is not doubly stochastic at site {x}: row sum {row}, column sum {col}"
                ));
            }
        }
        let mut cumulative = Vec::with_capacity(l * l);
        for x in 0..l {
            let mut s = 0.0;
            for y in 0..l {
                s += matrix[x * l + y];
                cumulative.push(s);
            }
        }
        let kernel = TransitionKernel {
            l,
            kind: KernelKind::Custom { matrix },
            cumulative,
        };
        if !kernel.is_irreducible() {
            return Err(domain!("custom kernel is reducible"));
        }
        Ok(kernel)
    }

    pub fn from_kind(l: usize, kind: KernelKind) -> Result<Self> {
        match kind {
            KernelKind::UniformOffDiagonal => Self::uniform(l),
            KernelKind::RingNearestNeighbor => Self::ring(l),
            KernelKind::Custom { matrix } => Self::custom(l, matrix),
        }
    }

    pub fn sites(&self) -> usize {
        self.l
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            KernelKind::UniformOffDiagonal => "uniform",
            KernelKind::RingNearestNeighbor => "ring",
            KernelKind::Custom { .. } => "custom",
        }
    }

    /// `p(x, y)`.
    pub fn prob(&self, x: usize, y: usize) -> f64 {
        let l = self.l;
        match &self.kind {
            KernelKind::UniformOffDiagonal => {
                if x == y {
                    0.0
                } else {
                    1.0 / (l - 1) as f64
                }
            }
            KernelKind::RingNearestNeighbor => {
                let (up, down) = ((x + 1) % l, (x + l - 1) % l);
                0.5 * ((y == up) as u8 as f64 + (y == down) as u8 as f64)
            }
            KernelKind::Custom { matrix } => matrix[x * l + y],
        }
    }

    /// Nonzero entries of row `x`, self-loops included.
    pub fn row(&self, x: usize) -> Vec<(usize, f64)> {
        match &self.kind {
            KernelKind::RingNearestNeighbor if self.l == 2 => vec![(1 - x, 1.0)],
            KernelKind::RingNearestNeighbor => {
                vec![((x + 1) % self.l, 0.5), ((x + self.l - 1) % self.l, 0.5)]
            }
            _ => (0..self.l)
                .map(|y| (y, self.prob(x, y)))
                .filter(|&(_, p)| p > 0.0)
                .collect(),
        }
    }

    /// Draws a target from `p(x, ·)`.
    #[inline]
    pub fn sample_target(&self, x: usize, rng: &mut RngStream) -> usize {
        let l = self.l;
        match &self.kind {
            KernelKind::UniformOffDiagonal => {
                let y = rng.below(l as u64 - 1) as usize;
                if y >= x {
                    y + 1
                } else {
                    y
                }
            }
            KernelKind::RingNearestNeighbor => {
                if rng.next_u64() >> 63 == 0 {
                    (x + 1) % l
                } else {
                    (x + l - 1) % l
                }
            }
            KernelKind::Custom { .. } => {
                let row = &self.cumulative[x * l..(x + 1) * l];
                let u = rng.uniform() * row[l - 1];
                row.partition_point(|&c| c <= u).min(l - 1)
            }
        }
    }

    /// Strong connectivity of the graph `x → y` for `p(x, y) > 0`.
    pub fn is_irreducible(&self) -> bool {
        let fwd: Vec<Vec<usize>> = (0..self.l)
            .map(|x| self.row(x).into_iter().map(|(y, _)| y).collect())
            .collect();
        let mut bwd = vec![Vec::new(); self.l];
        for (x, ys) in fwd.iter().enumerate() {
            for &y in ys {
                bwd[y].push(x);
            }
        }
        reaches_all(&fwd) && reaches_all(&bwd)
    }
}

fn reaches_all(adj: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(x) = queue.pop_front() {
        for &y in &adj[x] {
            if !seen[y] {
                seen[y] = true;
                count += 1;
                queue.push_back(y);
            }
        }
    }
    count == adj.len()
}

/// One transition. `from == to` marks a null self-jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub dt: f64,
    pub from: usize,
    pub to: usize,
}

/// Total departure rate `R(η) = Σ_x g(η_x)`.
pub fn total_rate(params: &ModelParams, eta: &Configuration) -> f64 {
    eta.as_slice().iter().map(|&k| jump_rate(params, k)).sum()
}

/// One Gillespie transition computed from scratch in `O(L)`: waiting time
/// `Exp(R)`, departure site with probability `g(η_x)/R` by linear search,
/// target from `p(x, ·)`. The move is applied to `eta`.
pub fn gillespie_step(
    params: &ModelParams,
    eta: &mut Configuration,
    kernel: &TransitionKernel,
    rng: &mut RngStream,
) -> Result<Step> {
    if kernel.sites() != eta.len() {
        return Err(domain!("kernel has {} sites, configuration {}", kernel.sites(), eta.len()));
    }
    let r = total_rate(params, eta);
    if r <= 0.0 {
        return Err(domain!("no particles: total rate is zero"));
    }
    let dt = rng.exponential(r);
    let u = rng.uniform() * r;
    let v = eta.as_slice();
    let mut acc = 0.0;
    let mut from = None;
    for (x, &k) in v.iter().enumerate() {
        if k == 0 {
            continue;
        }
        acc += jump_rate(params, k);
        from = Some(x);
        if u < acc {
            break;
        }
    }
    let from = from.expect("some site is occupied");
    let to = kernel.sample_target(from, rng);
    if to != from {
        let s = eta.as_mut_slice();
        s[from] -= 1;
        s[to] += 1;
    }
    Ok(Step { dt, from, to })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: Configuration,
    pub events: Vec<Event>,
    pub final_state: Configuration,
    pub t_end: f64,
}

impl Trajectory {
    /// Replays the event log and checks legality and time ordering.
    pub fn replay(&self) -> Result<Configuration> {
        let mut s = self.initial.clone().into_vec();
        let mut t = 0.0;
        for e in &self.events {
            if !(e.time > t || (t == 0.0 && e.time >= 0.0)) || e.time > self.t_end {
                return Err(Error::Consistency(format!("event time {} out of order", e.time)));
            }
            if e.from >= s.len() || e.to >= s.len() || s[e.from] == 0 {
                return Err(Error::Consistency(format!("illegal move {} -> {}", e.from, e.to)));
            }
            s[e.from] -= 1;
            s[e.to] += 1;
            t = e.time;
        }
        Configuration::new(s)
    }
}

/// Event-driven simulator with `O(1)` work per event.
///
/// Occupied sites are kept in a dense list. The departure site is drawn by
/// rejection against `g_max = g(1)` from that list, which yields the exact
/// law `g(η_x)/R`; `R` itself is updated incrementally and recomputed
/// exactly every [`RATE_REFRESH_INTERVAL`] events.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: ModelParams,
    kernel: TransitionKernel,
    rng: RngStream,
    eta: Vec<u64>,
    occupied: Vec<usize>,
    position: Vec<usize>,
    rates: Vec<f64>,
    g_max: f64,
    total: f64,
    time: f64,
    events: u64,
    null_events: u64,
}

const EMPTY: usize = usize::MAX;
const RATE_CACHE: usize = 1 << 20;

impl Simulator {
    pub fn new(params: ModelParams, eta0: Configuration, kernel: TransitionKernel, rng: RngStream) -> Result<Self> {
        params.validate()?;
        if kernel.sites() != eta0.len() {
            return Err(domain!("kernel has {} sites, configuration {}", kernel.sites(), eta0.len()));
        }
        let eta = eta0.into_vec();
        let n: u64 = eta.iter().sum();
        if n == 0 {
            return Err(domain!("no particles: total rate is zero"));
        }
        let cache = (n as usize).min(RATE_CACHE);
        let rates = (0..=cache as u64).map(|k| jump_rate(&params, k)).collect();
        let mut position = vec![EMPTY; eta.len()];
        let mut occupied = Vec::new();
        for (x, &k) in eta.iter().enumerate() {
            if k > 0 {
                position[x] = occupied.len();
                occupied.push(x);
            }
        }
        let mut sim = Simulator {
            g_max: params.max_rate(),
            params,
            kernel,
            rng,
            eta,
            occupied,
            position,
            rates,
            total: 0.0,
            time: 0.0,
            events: 0,
            null_events: 0,
        };
        sim.total = sim.exact_rate();
        Ok(sim)
    }

    #[inline]
    fn g(&self, k: u64) -> f64 {
        match self.rates.get(k as usize) {
            Some(&r) => r,
            None => jump_rate(&self.params, k),
        }
    }

    fn exact_rate(&self) -> f64 {
        self.occupied.iter().map(|&x| self.g(self.eta[x])).sum()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn state(&self) -> &[u64] {
        &self.eta
    }

    pub fn configuration(&self) -> Configuration {
        Configuration::new(self.eta.clone()).expect("nonempty")
    }

    /// Incrementally maintained `R(η)`.
    pub fn total_rate(&self) -> f64 {
        self.total
    }

    /// `|R_incremental − R_exact|` without resetting the accumulator.
    pub fn rate_drift(&self) -> f64 {
        (self.total - self.exact_rate()).abs()
    }

    /// Transitions performed so far, null self-jumps included.
    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn null_events(&self) -> u64 {
        self.null_events
    }

    fn pick_departure(&mut self) -> usize {
        let m = self.occupied.len() as u64;
        loop {
            let x = self.occupied[self.rng.below(m) as usize];
            if self.rng.uniform() * self.g_max < self.g(self.eta[x]) {
                return x;
            }
        }
    }

    /// Samples the next transition without applying it.
    #[inline]
    fn propose(&mut self) -> Step {
        let dt = self.rng.exponential(self.total);
        let from = self.pick_departure();
        let to = self.kernel.sample_target(from, &mut self.rng);
        Step { dt, from, to }
    }

    fn apply(&mut self, step: Step) {
        self.time += step.dt;
        self.events += 1;
        if step.from == step.to {
            self.null_events += 1;
        } else {
            let (x, y) = (step.from, step.to);
            let (kx, ky) = (self.eta[x], self.eta[y]);
            self.total += self.g(kx - 1) - self.g(kx) + self.g(ky + 1) - self.g(ky);
            self.eta[x] = kx - 1;
            self.eta[y] = ky + 1;
            if kx == 1 {
                let p = self.position[x];
                let last = *self.occupied.last().expect("nonempty");
                self.occupied.swap_remove(p);
                if last != x {
                    self.position[last] = p;
                }
                self.position[x] = EMPTY;
            }
            if ky == 0 {
                self.position[y] = self.occupied.len();
                self.occupied.push(y);
            }
        }
        if self.events % RATE_REFRESH_INTERVAL == 0 {
            self.total = self.exact_rate();
        }
    }

    /// Performs one transition and returns it.
    pub fn step(&mut self) -> Step {
        let s = self.propose();
        self.apply(s);
        s
    }

    /// Runs until `t_end`. `hold(η, dt)` sees every sojourn, including the
    /// final partial one; `event` sees every non-null jump. The proposal that
    /// would overshoot `t_end` is discarded, which is exact by memorylessness.
    pub fn advance_to(
        &mut self,
        t_end: f64,
        mut hold: impl FnMut(&[u64], f64),
        mut event: impl FnMut(Event),
    ) {
        while self.time < t_end {
            let s = self.propose();
            if self.time + s.dt > t_end {
                hold(&self.eta, t_end - self.time);
                self.time = t_end;
                break;
            }
            hold(&self.eta, s.dt);
            self.apply(s);
            if s.from != s.to {
                event(Event {
                    time: self.time,
                    from: s.from,
                    to: s.to,
                });
            }
        }
    }

    /// Runs for a fixed number of transitions.
    pub fn run_events(&mut self, count: u64) {
        for _ in 0..count {
            self.step();
        }
    }
}

fn check_horizon(t_end: f64) -> Result<()> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(domain!("t_end must be positive and finite, got {t_end}"));
    }
    Ok(())
}

/// Full event log of a run on `[0, t_end]`.
pub fn simulate(
    params: &ModelParams,
    eta0: &Configuration,
    kernel: &TransitionKernel,
    t_end: f64,
    rng: RngStream,
) -> Result<Trajectory> {
    check_horizon(t_end)?;
    let mut sim = Simulator::new(*params, eta0.clone(), kernel.clone(), rng)?;
    let mut events = Vec::new();
    sim.advance_to(t_end, |_, _| {}, |e| events.push(e));
    Ok(Trajectory {
        initial: eta0.clone(),
        events,
        final_state: sim.configuration(),
        t_end,
    })
}

/// States at the (nondecreasing) times in `grid`.
pub fn snapshots(
    params: &ModelParams,
    eta0: &Configuration,
    kernel: &TransitionKernel,
    grid: &[f64],
    rng: RngStream,
) -> Result<Vec<Configuration>> {
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(domain!("snapshot times must be finite, nonnegative and sorted"));
    }
    let mut sim = Simulator::new(*params, eta0.clone(), kernel.clone(), rng)?;
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid {
        sim.advance_to(t, |_, _| {}, |_| {});
        out.push(sim.configuration());
    }
    Ok(out)
}

/// Independent replicas on streams `0..count` of `seed`, run in parallel.
pub fn simulate_replicas(
    params: &ModelParams,
    eta0: &Configuration,
    kernel: &TransitionKernel,
    t_end: f64,
    seed: u64,
    count: usize,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .into_par_iter()
        .map(|i| simulate(params, eta0, kernel, t_end, RngStream::new(seed, i as u64)))
        .collect()
}

/// Time-averaged single-site occupation law, pooled over all sites.
pub fn time_averaged_marginal(
    params: &ModelParams,
    eta0: &Configuration,
    kernel: &TransitionKernel,
    t_end: f64,
    rng: RngStream,
) -> Result<Vec<f64>> {
    check_horizon(t_end)?;
    let n = eta0.total() as usize;
    let mut sim = Simulator::new(*params, eta0.clone(), kernel.clone(), rng)?;
    let mut acc = vec![0.0; n + 1];
    sim.advance_to(
        t_end,
        |eta, dt| {
            for &k in eta {
                acc[k as usize] += dt;
            }
        },
        |_| {},
    );
    let norm = t_end * eta0.len() as f64;
    Ok(acc.into_iter().map(|a| a / norm).collect())
}

/// Sparse generator on the fiber `X_{L,N}`, states in lexicographic order.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub states: Vec<Configuration>,
    /// Off-diagonal entries `(column, rate)` of each row.
    pub off_diagonal: Vec<Vec<(usize, f64)>>,
    pub diagonal: Vec<f64>,
}

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diagonal[i];
        }
        self.off_diagonal[i].iter().filter(|e| e.0 == j).map(|e| e.1).sum()
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| (0..self.dim()).map(|j| self.entry(i, j)).collect()).collect()
    }

    pub fn max_row_sum(&self) -> f64 {
        (0..self.dim())
            .map(|i| (self.diagonal[i] + self.off_diagonal[i].iter().map(|e| e.1).sum::<f64>()).abs())
            .fold(0.0, f64::max)
    }

    /// `μ Q` for a row vector `μ`.
    pub fn left_multiply(&self, mu: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .into_par_iter()
            .fold(
                || vec![0.0; d],
                |mut acc, i| {
                    acc[i] += mu[i] * self.diagonal[i];
                    for &(j, q) in &self.off_diagonal[i] {
                        acc[j] += mu[i] * q;
                    }
                    acc
                },
            )
            .reduce(
                || vec![0.0; d],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                    a
                },
            )
    }

    /// Strong connectivity of the transition graph.
    pub fn is_irreducible(&self) -> bool {
        let fwd: Vec<Vec<usize>> = self
            .off_diagonal
            .iter()
            .map(|r| r.iter().filter(|e| e.1 > 0.0).map(|e| e.0).collect())
            .collect();
        let mut bwd = vec![Vec::new(); self.dim()];
        for (i, r) in fwd.iter().enumerate() {
            for &j in r {
                bwd[j].push(i);
            }
        }
        reaches_all(&fwd) && reaches_all(&bwd)
    }
}

/// `Q(η, η^{x,y}) = g(η_x) p(x, y)`; self-jumps cancel and are omitted.
pub fn generator_matrix(params: &ModelParams, l: usize, n: u64, kernel: &TransitionKernel) -> Result<GeneratorMatrix> {
    params.validate()?;
    if kernel.sites() != l {
        return Err(domain!("kernel has {} sites, fiber {l}", kernel.sites()));
    }
    let states = enumerate_fiber(l, n, GENERATOR_FIBER_CAP)?;
    let index: HashMap<&[u64], usize> = states.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();
    let rows: Vec<(Vec<(usize, f64)>, f64)> = states
        .par_iter()
        .map(|s| {
            let mut v = s.as_slice().to_vec();
            let mut off = Vec::new();
            let mut out = 0.0;
            for x in 0..l {
                if v[x] == 0 {
                    continue;
                }
                let g = jump_rate(params, v[x]);
                for (y, p) in kernel.row(x) {
                    if y == x {
                        continue;
                    }
                    v[x] -= 1;
                    v[y] += 1;
                    let j = index[v.as_slice()];
                    v[x] += 1;
                    v[y] -= 1;
                    off.push((j, g * p));
                    out += g * p;
                }
            }
            (off, -out)
        })
        .collect();
    let (off_diagonal, diagonal) = rows.into_iter().unzip();
    Ok(GeneratorMatrix {
        states,
        off_diagonal,
        diagonal,
    })
}

/// Normalised product measure `μ(η) ∝ Π_x 1/g(η_x)!` on the fiber.
pub fn canonical_weights(params: &ModelParams, states: &[Configuration]) -> Vec<f64> {
    let n = states.first().map(|s| s.total()).unwrap_or(0);
    let ln_u: Vec<f64> = (0..=n).map(|k| -params.ln_rate_factorial(k)).collect();
    let logs: Vec<f64> = states
        .iter()
        .map(|s| s.as_slice().iter().map(|&k| ln_u[k as usize]).sum())
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Deliberate corruption of the measure, for negative controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    None,
    /// Multiply the weight of the most probable configuration by `1 + ε`
    /// and renormalise.
    ScaleModalWeight(f64),
}

/// `max_η |(μ Q)(η)|` for the product-form measure.
pub fn stationarity_residual(params: &ModelParams, l: usize, n: u64, kernel: &TransitionKernel) -> Result<f64> {
    stationarity_residual_with(params, l, n, kernel, Perturbation::None)
}

pub fn stationarity_residual_with(
    params: &ModelParams,
    l: usize,
    n: u64,
    kernel: &TransitionKernel,
    perturbation: Perturbation,
) -> Result<f64> {
    let q = generator_matrix(params, l, n, kernel)?;
    let mut mu = canonical_weights(params, &q.states);
    if let Perturbation::ScaleModalWeight(eps) = perturbation {
        let i = (0..mu.len()).max_by(|&a, &b| mu[a].total_cmp(&mu[b])).expect("nonempty fiber");
        mu[i] *= 1.0 + eps;
        let z: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|x| *x /= z);
    }
    Ok(q.left_multiply(&mu).into_iter().map(f64::abs).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::CanonicalDistribution;
    use crate::limits::tv_distance;
    use proptest::prelude::*;

    fn pl(b: f64) -> ModelParams {
        ModelParams::power_law(b).unwrap()
    }

    fn cfg(v: &[u64]) -> Configuration {
        Configuration::new(v.to_vec()).unwrap()
    }

    #[test]
    fn two_site_step_is_forced() {
        let k = TransitionKernel::uniform(2).unwrap();
        let mut eta = cfg(&[2, 0]);
        assert_eq!(total_rate(&pl(4.0), &eta), 3.0);
        let s = gillespie_step(&pl(4.0), &mut eta, &k, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!((s.from, s.to), (0, 1));
        assert_eq!(eta.as_slice(), &[1, 1]);
    }

    #[test]
    fn single_particle_rate() {
        for b in [2.5, 4.0, 7.0] {
            assert_eq!(total_rate(&pl(b), &cfg(&[0, 1, 0])), 1.0 + b);
        }
        let mut eta = cfg(&[0, 0]);
        let k = TransitionKernel::ring(2).unwrap();
        assert!(gillespie_step(&pl(4.0), &mut eta, &k, &mut RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn kernels_validate() {
        assert!(TransitionKernel::uniform(1).is_err());
        assert!(TransitionKernel::custom(2, vec![0.5, 0.5, 0.5, 0.5]).is_ok());
        assert!(TransitionKernel::custom(2, vec![0.5, 0.5, 0.5, 0.5 + 1e-11]).is_err());
        assert!(TransitionKernel::custom(2, vec![1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(TransitionKernel::custom(2, vec![0.6, 0.4, 0.5, 0.5]).is_err());
        assert!(TransitionKernel::custom(3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).is_ok());
        let r = TransitionKernel::ring(5).unwrap();
        for x in 0..5 {
            let s: f64 = (0..5).map(|y| r.prob(x, y)).sum();
            let c: f64 = (0..5).map(|y| r.prob(y, x)).sum();
            assert_eq!((s, c), (1.0, 1.0));
        }
        assert_eq!(TransitionKernel::ring(2).unwrap().prob(0, 1), 1.0);
    }

    #[test]
    fn custom_target_frequencies() {
        let m = vec![0.2, 0.5, 0.3, 0.5, 0.2, 0.3, 0.3, 0.3, 0.4];
        let k = TransitionKernel::custom(3, m.clone()).unwrap();
        let mut rng = RngStream::new(5, 0);
        let mut c = [0u32; 3];
        let n = 200_000;
        for _ in 0..n {
            c[k.sample_target(1, &mut rng)] += 1;
        }
        for y in 0..3 {
            assert!((c[y] as f64 / n as f64 - m[3 + y]).abs() < 0.005);
        }
    }

    #[test]
    fn two_state_generator() {
        let k = TransitionKernel::uniform(2).unwrap();
        let q = generator_matrix(&pl(4.0), 2, 1, &k).unwrap();
        assert_eq!(q.dense(), vec![vec![-5.0, 5.0], vec![5.0, -5.0]]);
    }

    #[test]
    fn generator_rows_and_irreducibility() {
        let q = generator_matrix(&pl(4.0), 3, 4, &TransitionKernel::ring(3).unwrap()).unwrap();
        assert!(q.max_row_sum() < 1e-12);
        assert!(q.is_irreducible());
        let q = generator_matrix(&pl(2.5), 4, 6, &TransitionKernel::uniform(4).unwrap()).unwrap();
        assert!(q.max_row_sum() < 1e-12);
        assert!(q.is_irreducible());
    }

    #[test]
    fn stationarity_and_negative_control() {
        let u2 = TransitionKernel::uniform(2).unwrap();
        assert!(stationarity_residual(&pl(4.0), 2, 3, &u2).unwrap() < 1e-12);
        let r3 = TransitionKernel::ring(3).unwrap();
        assert!(stationarity_residual(&pl(4.0), 3, 4, &r3).unwrap() < 1e-10);
        for (l, n) in [(2, 3), (3, 4)] {
            let k = TransitionKernel::ring(l).unwrap();
            let bad = stationarity_residual_with(&pl(4.0), l, n, &k, Perturbation::ScaleModalWeight(0.01)).unwrap();
            assert!(bad > 1e-4, "{bad}");
        }
        let s = ModelParams::stretched(1.0, 0.7).unwrap();
        let m = vec![0.0, 0.7, 0.3, 0.3, 0.0, 0.7, 0.7, 0.3, 0.0];
        let c = TransitionKernel::custom(3, m).unwrap();
        assert!(stationarity_residual(&s, 3, 7, &c).unwrap() < 1e-10);
    }

    #[test]
    fn incremental_rate_stays_exact() {
        let l = 1000;
        let eta0 = Configuration::new(vec![2; l]).unwrap();
        let mut sim = Simulator::new(pl(4.0), eta0, TransitionKernel::uniform(l).unwrap(), RngStream::new(3, 0)).unwrap();
        sim.run_events(1_000_000);
        assert!(sim.rate_drift() < 1e-9, "{}", sim.rate_drift());
        assert_eq!(sim.configuration().total(), 2 * l as u64);
    }

    #[test]
    fn trajectory_is_legal() {
        let k = TransitionKernel::ring(5).unwrap();
        let eta0 = cfg(&[3, 0, 1, 0, 6]);
        let t = simulate(&pl(3.5), &eta0, &k, 50.0, RngStream::new(4, 0)).unwrap();
        assert!(!t.events.is_empty());
        assert_eq!(t.replay().unwrap(), t.final_state);
        assert!(t.events.windows(2).all(|w| w[1].time > w[0].time));
        for e in &t.events {
            assert!(e.to == (e.from + 1) % 5 || e.to == (e.from + 4) % 5);
        }
        let again = simulate(&pl(3.5), &eta0, &k, 50.0, RngStream::new(4, 0)).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn self_jumps_are_null_events() {
        let m = vec![0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.5];
        let k = TransitionKernel::custom(3, m).unwrap();
        let mut sim = Simulator::new(pl(4.0), cfg(&[4, 0, 0]), k, RngStream::new(2, 0)).unwrap();
        let mut moves = 0u64;
        sim.advance_to(1000.0, |_, _| {}, |e| {
            assert_ne!(e.from, e.to);
            moves += 1;
        });
        assert!(sim.null_events() > 0);
        assert_eq!(moves + sim.null_events(), sim.events());
    }

    #[test]
    fn two_routes_agree_on_departure_law() {
        // reference O(L) step against the rejection-based simulator
        let p = pl(4.0);
        let eta = cfg(&[1, 5, 2, 0, 9]);
        let k = TransitionKernel::uniform(5).unwrap();
        let r = total_rate(&p, &eta);
        let n = 200_000;
        let mut a = [0u32; 5];
        let mut b = [0u32; 5];
        let mut rng = RngStream::new(8, 0);
        let mut sim = Simulator::new(p, eta.clone(), k.clone(), RngStream::new(8, 1)).unwrap();
        for _ in 0..n {
            let mut e = eta.clone();
            a[gillespie_step(&p, &mut e, &k, &mut rng).unwrap().from] += 1;
            b[sim.pick_departure()] += 1;
        }
        for x in 0..5 {
            let expect = jump_rate(&p, eta[x]) / r;
            assert!((a[x] as f64 / n as f64 - expect).abs() < 0.005);
            assert!((b[x] as f64 / n as f64 - expect).abs() < 0.005);
        }
    }

    #[test]
    fn ergodic_average_matches_canonical_marginal() {
        let p = pl(4.0);
        let k = TransitionKernel::uniform(3).unwrap();
        let emp = time_averaged_marginal(&p, &cfg(&[5, 0, 0]), &k, 200_000.0, RngStream::new(11, 0)).unwrap();
        let exact = CanonicalDistribution::new(p, 3, 5).unwrap().site_marginal_pmf();
        assert!(tv_distance(&emp, &exact) < 0.02);
    }

    proptest! {
        #[test]
        fn conservation_and_rate_additivity(v in proptest::collection::vec(0u64..6, 2..8), seed in 0u64..1000) {
            prop_assume!(v.iter().sum::<u64>() > 0);
            let p = pl(3.0);
            let eta = Configuration::new(v.clone()).unwrap();
            let per_site: f64 = v.iter().map(|&k| if k == 0 { 0.0 } else { 1.0 + 3.0 / k as f64 }).sum();
            prop_assert!((total_rate(&p, &eta) - per_site).abs() < 1e-12);
            let k = TransitionKernel::uniform(v.len()).unwrap();
            let t = simulate(&p, &eta, &k, 5.0, RngStream::new(seed, 0)).unwrap();
            prop_assert_eq!(t.final_state.total(), eta.total());
            prop_assert_eq!(t.replay().unwrap(), t.final_state);
        }
    }
}
