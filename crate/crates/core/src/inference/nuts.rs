//! No-U-turn sampler with multinomial trajectory sampling, dual-averaging
//! step-size adaptation and windowed diagonal metric adaptation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ChainDraws, InferenceError, LogDensity, PosteriorDraws};
use crate::stats::log_sum_exp;

const MAX_DELTA_H: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_depth: u32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            seed: 1,
            target_accept: 0.9,
            max_depth: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let fail = |m: &str| Err(InferenceError::Config(m.to_string()));
        if self.chains == 0 {
            return fail("chains must be at least 1");
        }
        if self.draws == 0 {
            return fail("draws must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return fail("target_accept must lie in (0, 1)");
        }
        if !(1..=30).contains(&self.max_depth) {
            return fail("max_depth must lie in 1..=30");
        }
        Ok(())
    }
}

/// Runs every chain on its own thread and merges the results in chain order.
/// Chain `c` uses stream `c` of a ChaCha8 generator seeded with `config.seed`.
pub fn sample<M: LogDensity + ?Sized>(model: &M, config: &SamplerConfig) -> Result<PosteriorDraws, InferenceError> {
    config.validate()?;
    let results: Vec<Result<ChainDraws, InferenceError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| scope.spawn(move || run_chain(model, config, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    let chains = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(PosteriorDraws::new(model.param_names(), chains, model.grid()))
}

fn run_chain<M: LogDensity + ?Sized>(model: &M, config: &SamplerConfig, chain: usize) -> Result<ChainDraws, InferenceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);
    let dim = model.dim();

    let mut z = initial_state(model, &mut rng, chain)?;
    let mut nuts = Nuts {
        model,
        rng,
        inv_metric: vec![1.0; dim],
        eps: 1.0,
        max_depth: config.max_depth,
        n_leapfrog: 0,
        divergent: false,
        sum_metro: 0.0,
    };
    nuts.init_stepsize(&mut z)
        .map_err(|reason| InferenceError::StepSize { chain, reason })?;

    let mut step = DualAveraging::new(config.target_accept, nuts.eps);
    let mut windows = MetricWindows::new(config.warmup, dim);
    for _ in 0..config.warmup {
        let t = nuts.transition(&z);
        z = t.state;
        nuts.eps = step.learn(t.accept_stat);
        if windows.learn(&mut nuts.inv_metric, &z.q) {
            nuts.init_stepsize(&mut z)
                .map_err(|reason| InferenceError::StepSize { chain, reason })?;
            step = DualAveraging::new(config.target_accept, nuts.eps);
        }
    }
    if config.warmup > 0 {
        nuts.eps = step.final_step_size();
    }

    let n_out = model.param_names().len();
    let mut out = ChainDraws {
        values: Vec::with_capacity(config.draws * n_out),
        lp: Vec::with_capacity(config.draws),
        accept_stat: Vec::with_capacity(config.draws),
        step_size: nuts.eps,
        tree_depth: Vec::with_capacity(config.draws),
        n_leapfrog: Vec::with_capacity(config.draws),
        divergent: Vec::with_capacity(config.draws),
    };
    for _ in 0..config.draws {
        let t = nuts.transition(&z);
        z = t.state;
        out.values.extend(model.to_output(&z.q));
        out.lp.push(z.lp);
        out.accept_stat.push(t.accept_stat);
        out.tree_depth.push(t.depth);
        out.n_leapfrog.push(t.n_leapfrog);
        out.divergent.push(t.divergent);
    }
    Ok(out)
}

fn initial_state<M: LogDensity + ?Sized>(model: &M, rng: &mut ChaCha8Rng, chain: usize) -> Result<State, InferenceError> {
    let dim = model.dim();
    for _ in 0..INIT_ATTEMPTS {
        let q = model.initial_point(rng);
        let mut g = vec![0.0; dim];
        if let Ok(lp) = model.log_density_grad(&q, &mut g) {
            if lp.is_finite() && g.iter().all(|v| v.is_finite()) {
                return Ok(State {
                    q,
                    p: vec![0.0; dim],
                    g,
                    lp,
                });
            }
        }
    }
    Err(InferenceError::Initialization {
        chain,
        attempts: INIT_ATTEMPTS,
    })
}

#[derive(Debug, Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    /// Gradient of the log density at `q`.
    g: Vec<f64>,
    lp: f64,
}

struct Transition {
    state: State,
    accept_stat: f64,
    depth: u32,
    n_leapfrog: u32,
    divergent: bool,
}

struct Nuts<'a, M: LogDensity + ?Sized> {
    model: &'a M,
    rng: ChaCha8Rng,
    inv_metric: Vec<f64>,
    eps: f64,
    max_depth: u32,
    n_leapfrog: u32,
    divergent: bool,
    sum_metro: f64,
}

/// Ends and momentum sums of a trajectory segment, named as in the
/// multinomial NUTS recursion.
struct Edge<'v> {
    p_sharp_beg: &'v mut Vec<f64>,
    p_sharp_end: &'v mut Vec<f64>,
    rho: &'v mut Vec<f64>,
    p_beg: &'v mut Vec<f64>,
    p_end: &'v mut Vec<f64>,
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl<M: LogDensity + ?Sized> Nuts<'_, M> {
    fn hamiltonian(&self, z: &State) -> f64 {
        let kinetic: f64 = z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum();
        let h = -z.lp + 0.5 * kinetic;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum(&mut self, z: &mut State) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = self.rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    fn leapfrog(&self, z: &mut State, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.g) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.lp = match self.model.log_density_grad(&z.q, &mut z.g) {
            Ok(lp) if !lp.is_nan() => lp,
            _ => f64::NEG_INFINITY,
        };
        for (p, g) in z.p.iter_mut().zip(&z.g) {
            *p += 0.5 * eps * g;
        }
    }

    /// Doubles or halves the step size until one leapfrog step crosses an
    /// acceptance of 0.8.
    fn init_stepsize(&mut self, z: &mut State) -> Result<(), String> {
        if self.eps == 0.0 || self.eps > 1e7 || !self.eps.is_finite() {
            return Ok(());
        }
        let start = z.clone();
        let threshold = 0.8f64.ln();
        let trial = |this: &mut Self| {
            let mut w = start.clone();
            this.sample_momentum(&mut w);
            let h0 = this.hamiltonian(&w);
            this.leapfrog(&mut w, this.eps);
            h0 - this.hamiltonian(&w)
        };
        let direction = if trial(self) > threshold { 1.0 } else { -1.0 };
        loop {
            let delta_h = trial(self);
            if (direction > 0.0 && !(delta_h > threshold)) || (direction < 0.0 && !(delta_h < threshold)) {
                break;
            }
            self.eps = if direction > 0.0 { 2.0 * self.eps } else { 0.5 * self.eps };
            if self.eps > 1e7 {
                return Err("step size diverged to infinity; posterior may be improper".into());
            }
            if self.eps == 0.0 {
                return Err("step size collapsed to zero".into());
            }
        }
        *z = start;
        Ok(())
    }

    fn transition(&mut self, start: &State) -> Transition {
        let mut z = start.clone();
        self.sample_momentum(&mut z);
        self.n_leapfrog = 0;
        self.divergent = false;
        self.sum_metro = 0.0;

        let p_sharp = self.p_sharp(&z.p);
        let (mut p_fwd_fwd, mut p_fwd_bck) = (z.p.clone(), z.p.clone());
        let (mut p_bck_fwd, mut p_bck_bck) = (z.p.clone(), z.p.clone());
        let (mut ps_fwd_fwd, mut ps_fwd_bck) = (p_sharp.clone(), p_sharp.clone());
        let (mut ps_bck_fwd, mut ps_bck_bck) = (p_sharp.clone(), p_sharp);
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let h0 = self.hamiltonian(&z);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z;
        let mut depth = 0;

        while depth < self.max_depth {
            let dim = rho.len();
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                ps_bck_fwd.clone_from(&ps_fwd_bck);
                let edge = Edge {
                    p_sharp_beg: &mut ps_fwd_bck,
                    p_sharp_end: &mut ps_fwd_fwd,
                    rho: &mut rho_fwd,
                    p_beg: &mut p_fwd_bck,
                    p_end: &mut p_fwd_fwd,
                };
                self.build_tree(depth, &mut z_fwd, &mut z_propose, edge, h0, 1.0, &mut lsw_subtree)
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                ps_fwd_bck.clone_from(&ps_bck_fwd);
                let edge = Edge {
                    p_sharp_beg: &mut ps_bck_fwd,
                    p_sharp_end: &mut ps_bck_bck,
                    rho: &mut rho_bck,
                    p_beg: &mut p_bck_fwd,
                    p_end: &mut p_bck_bck,
                };
                self.build_tree(depth, &mut z_bck, &mut z_propose, edge, h0, -1.0, &mut lsw_subtree)
            };
            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            rho = add(&rho_bck, &rho_fwd);
            let mut persist = criterion(&ps_bck_bck, &ps_fwd_fwd, &rho);
            persist &= criterion(&ps_bck_bck, &ps_fwd_bck, &add(&rho_bck, &p_fwd_bck));
            persist &= criterion(&ps_bck_fwd, &ps_fwd_fwd, &add(&rho_fwd, &p_bck_fwd));
            if !persist {
                break;
            }
        }

        Transition {
            state: z_sample,
            accept_stat: self.sum_metro / f64::from(self.n_leapfrog.max(1)),
            depth,
            n_leapfrog: self.n_leapfrog,
            divergent: self.divergent,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: u32,
        z: &mut State,
        z_propose: &mut State,
        edge: Edge<'_>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            self.sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *edge.p_sharp_beg = self.p_sharp(&z.p);
            edge.p_sharp_end.clone_from(edge.p_sharp_beg);
            for (r, p) in edge.rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            edge.p_beg.clone_from(&z.p);
            edge.p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut ps_init_end = vec![0.0; dim];
        let mut p_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        let init = Edge {
            p_sharp_beg: &mut *edge.p_sharp_beg,
            p_sharp_end: &mut ps_init_end,
            rho: &mut rho_init,
            p_beg: &mut *edge.p_beg,
            p_end: &mut p_init_end,
        };
        if !self.build_tree(depth - 1, z, z_propose, init, h0, sign, &mut lsw_init) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut ps_final_beg = vec![0.0; dim];
        let mut p_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        let last = Edge {
            p_sharp_beg: &mut ps_final_beg,
            p_sharp_end: &mut *edge.p_sharp_end,
            rho: &mut rho_final,
            p_beg: &mut p_final_beg,
            p_end: &mut *edge.p_end,
        };
        if !self.build_tree(depth - 1, z, &mut z_propose_final, last, h0, sign, &mut lsw_final) {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in edge.rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(edge.p_sharp_beg, edge.p_sharp_end, &rho_subtree);
        persist &= criterion(edge.p_sharp_beg, &ps_final_beg, &add(&rho_init, &p_final_beg));
        persist &= criterion(&ps_init_end, edge.p_sharp_end, &add(&rho_final, &p_init_end));
        persist
    }
}

/// Dual averaging of the log step size toward a target acceptance statistic.
#[derive(Debug, Clone)]
struct DualAveraging {
    target: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(target: f64, eps: f64) -> Self {
        Self {
            target,
            mu: (10.0 * eps).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup schedule: a fast initial buffer, doubling slow windows that each
/// end with a metric update, and a fast terminal buffer.
#[derive(Debug, Clone)]
struct MetricWindows {
    warmup: i64,
    init_buffer: i64,
    term_buffer: i64,
    window_size: i64,
    next_window: i64,
    counter: i64,
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MetricWindows {
    fn new(warmup: usize, dim: usize) -> Self {
        let warmup = warmup as i64;
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        if warmup >= 20 && init_buffer + base + term_buffer > warmup {
            init_buffer = (0.15 * warmup as f64) as i64;
            term_buffer = (0.1 * warmup as f64) as i64;
            base = warmup - (init_buffer + term_buffer);
        }
        Self {
            warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_window: init_buffer + base - 1,
            counter: 0,
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn window_ends(&self) -> bool {
        self.counter == self.next_window && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_window = last;
        }
    }

    /// Records `q`; returns true when a window closed and the metric changed.
    fn learn(&mut self, inv_metric: &mut [f64], q: &[f64]) -> bool {
        if self.in_window() {
            self.n += 1.0;
            for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(q) {
                let d = x - *m;
                *m += d / self.n;
                *s += d * (x - *m);
            }
        }
        if self.window_ends() {
            self.compute_next_window();
            let n = self.n;
            for (v, s) in inv_metric.iter_mut().zip(&self.m2) {
                let var = s / (n - 1.0);
                *v = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
            }
            self.n = 0.0;
            self.mean.iter_mut().for_each(|m| *m = 0.0);
            self.m2.iter_mut().for_each(|m| *m = 0.0);
            self.counter += 1;
            return true;
        }
        self.counter += 1;
        false
    }
}
