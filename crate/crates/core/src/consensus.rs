//! KL consensus over per-level Gaussian forecasts.
//!
//! Every aggregate forecast `N(mu_hat, sigma_hat^2)` of window `j` constrains
//! the joint horizon distribution `Q = N(mu, Sigma)` through its marginal
//! `N(a^T mu, a^T Sigma a)`, where `a` is the padded weight of that window.
//! The weighted sum of `KL(marginal || forecast)` splits into a quadratic in
//! `mu`, solved exactly by the normal equations, and a non-convex objective in
//! `Sigma = Diag(sigma^2) + V V^T`, minimized by gradient descent.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregates::{tile_horizon, AggregateKind, AggregateSpec, PaddedWeight};
use crate::error::{Error, Result};
use crate::forecasters::GaussianForecast;

/// Largest horizon for which a dense covariance is materialized.
pub const DENSE_GUARD: usize = 4096;

/// Per-kind KL weights. Direct average forecasts tend to be more accurate
/// than aggregated base forecasts and get a larger weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaMap {
    pub base: f64,
    pub average: f64,
    pub trend: f64,
    pub halfdiff: f64,
    pub custom: f64,
}

impl Default for AlphaMap {
    fn default() -> Self {
        Self {
            base: 1.0,
            average: 10.0,
            trend: 0.5,
            halfdiff: 1.0,
            custom: 1.0,
        }
    }
}

impl AlphaMap {
    pub fn for_kind(&self, kind: AggregateKind) -> f64 {
        match kind {
            AggregateKind::Base => self.base,
            AggregateKind::Average => self.average,
            AggregateKind::Trend => self.trend,
            AggregateKind::Halfdiff => self.halfdiff,
            AggregateKind::Custom => self.custom,
        }
    }
}

/// One KL term: the marginal along `weight` should match `N(mean, std^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusEntry {
    pub level: usize,
    pub weight: PaddedWeight,
    pub mean: f64,
    pub std: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusProblem {
    horizon: usize,
    rank: usize,
    entries: Vec<ConsensusEntry>,
}

impl ConsensusProblem {
    pub fn new(horizon: usize, rank: usize, entries: Vec<ConsensusEntry>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        let mut covered = vec![false; horizon];
        for (i, e) in entries.iter().enumerate() {
            if e.weight.horizon() != horizon {
                return Err(Error::LengthMismatch {
                    expected: horizon,
                    found: e.weight.horizon(),
                });
            }
            if !(e.std > 0.0 && e.std.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "entry {i} has non-positive std {}",
                    e.std
                )));
            }
            if !(e.alpha > 0.0 && e.alpha.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "entry {i} has non-positive alpha {}",
                    e.alpha
                )));
            }
            if !e.mean.is_finite() {
                return Err(Error::InvalidArgument(format!("entry {i} has non-finite mean")));
            }
            for (t, w) in e.weight.iter() {
                if w != 0.0 {
                    covered[t] = true;
                }
            }
        }
        let uncovered: Vec<usize> = covered
            .iter()
            .enumerate()
            .filter(|(_, c)| !**c)
            .map(|(t, _)| t)
            .collect();
        if !uncovered.is_empty() {
            return Err(Error::Uncovered(uncovered));
        }
        Ok(Self {
            horizon,
            rank,
            entries,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn entries(&self) -> &[ConsensusEntry] {
        &self.entries
    }

    /// `sum alpha (a^T mu - mu_hat)^2 / sigma_hat^2`.
    pub fn mean_objective(&self, mu: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                let r = e.weight.dot(mu) - e.mean;
                e.alpha * r * r / (e.std * e.std)
            })
            .sum()
    }

    /// For every start index `s`, the furthest end over entries that contain
    /// `s`. A pair `s < t` was jointly constrained iff `reach[s] > t`.
    fn joint_reach(&self) -> Vec<usize> {
        let mut reach: Vec<usize> = (1..=self.horizon).collect();
        for e in &self.entries {
            let sup = e.weight.support();
            for s in sup.clone() {
                reach[s] = reach[s].max(sup.end);
            }
        }
        reach
    }
}

/// A level's forecast together with the aggregate it predicts.
#[derive(Debug, Clone, Copy)]
pub struct LevelForecast<'a> {
    pub spec: &'a AggregateSpec,
    pub forecast: &'a GaussianForecast,
    pub alpha: f64,
}

/// One entry per (level, forecast window), tiled over the horizon.
pub fn build_problem(levels: &[LevelForecast<'_>], horizon: usize, rank: usize) -> Result<ConsensusProblem> {
    let mut entries = Vec::new();
    for (i, l) in levels.iter().enumerate() {
        let tiles = tile_horizon(l.spec, horizon)?;
        if l.forecast.horizon() != tiles.len() {
            return Err(Error::LengthMismatch {
                expected: tiles.len(),
                found: l.forecast.horizon(),
            });
        }
        for ((weight, &mean), &std) in tiles.into_iter().zip(&l.forecast.means).zip(&l.forecast.stds) {
            entries.push(ConsensusEntry {
                level: i,
                weight,
                mean,
                std,
                alpha: l.alpha,
            });
        }
    }
    ConsensusProblem::new(horizon, rank, entries)
}

fn degenerate_indices(m: &DMatrix<f64>) -> Vec<usize> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut out = Vec::new();
    for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() <= 1e-12 * top {
            for t in 0..m.nrows() {
                if eig.eigenvectors[(t, c)].abs() > 1e-8 && !out.contains(&t) {
                    out.push(t);
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Normal-equations matrix `M` and right-hand side `b` of the mean objective.
pub fn normal_equations(problem: &ConsensusProblem) -> (DMatrix<f64>, DVector<f64>) {
    let r = problem.horizon;
    let mut m = DMatrix::<f64>::zeros(r, r);
    let mut b = DVector::<f64>::zeros(r);
    for e in &problem.entries {
        let w = e.alpha / (e.std * e.std);
        for (s, a_s) in e.weight.iter() {
            b[s] += w * e.mean * a_s;
            for (t, a_t) in e.weight.iter() {
                m[(s, t)] += w * a_s * a_t;
            }
        }
    }
    (m, b)
}

/// Coherent mean: the exact minimizer of the weighted quadratic.
pub fn solve_mean(problem: &ConsensusProblem) -> Result<Vec<f64>> {
    solve_mean_with_residual(problem).map(|(mu, _)| mu)
}

fn solve_mean_with_residual(problem: &ConsensusProblem) -> Result<(Vec<f64>, f64)> {
    let (m, b) = normal_equations(problem);
    let diag_max = m.diagonal().iter().fold(0.0f64, |a, &d| a.max(d));
    let chol = m.clone().cholesky();
    let Some(chol) = chol.filter(|c| {
        let l = c.l_dirty();
        (0..m.nrows()).all(|i| l[(i, i)] * l[(i, i)] > 1e-13 * diag_max)
    }) else {
        return Err(Error::Singular(degenerate_indices(&m)));
    };
    // Start from the single-step targets and solve for the correction, so
    // steps constrained only by their own forecast keep it exactly.
    let mut mu = DVector::from_vec(single_step_targets(problem));
    for _ in 0..2 {
        let resid = &b - &m * &mu;
        mu += chol.solve(&resid);
    }
    let resid = (&b - &m * &mu).norm();
    let rel = resid / b.norm().max(f64::MIN_POSITIVE);
    if rel > 1e-10 && resid > 1e-300 {
        log::warn!("mean normal equations residual {rel:.3e} exceeds 1e-10");
    }
    Ok((mu.iter().copied().collect(), rel))
}

/// Mean of the targets of unit-support entries per step, 0 where none exist.
fn single_step_targets(problem: &ConsensusProblem) -> Vec<f64> {
    let mut sum = vec![0.0; problem.horizon];
    let mut n = vec![0usize; problem.horizon];
    for e in &problem.entries {
        if let [a] = e.weight.coeffs() {
            let t = e.weight.support().start;
            sum[t] += e.mean / a;
            n[t] += 1;
        }
    }
    sum.iter()
        .zip(&n)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

fn default_max_iter() -> usize {
    10_000
}
fn default_tol() -> f64 {
    1e-7
}
fn default_log_coeff() -> f64 {
    0.5
}
fn default_step() -> f64 {
    0.1
}
fn default_init_scale() -> f64 {
    1e-2
}

/// Search direction of the covariance optimizer. Both use the same
/// step control: halve on an objective increase, grow 1.1x on success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Steepest descent.
    #[default]
    GradientDescent,
    /// Limited-memory BFGS direction; far fewer iterations on
    /// ill-conditioned problems (long horizons, many levels).
    Lbfgs,
}

/// Number of curvature pairs kept by [`Method::Lbfgs`].
const LBFGS_MEMORY: usize = 10;

/// Settings of the covariance optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Stop when the gradient infinity-norm falls to this value.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Coefficient on `log(a^T Sigma a)`; `0.5` is the exact Gaussian KL.
    #[serde(default = "default_log_coeff")]
    pub log_coeff: f64,
    #[serde(default = "default_step")]
    pub initial_step: f64,
    /// Half-width of the uniform initialization of the low-rank factor,
    /// relative to the initial per-step std.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::GradientDescent,
            max_iter: default_max_iter(),
            tol: default_tol(),
            log_coeff: default_log_coeff(),
            initial_step: default_step(),
            init_scale: default_init_scale(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub mean_residual: f64,
    pub log_coeff: f64,
}

/// Fitted diagonal and low-rank factor of the consensus covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFit {
    pub sigma: Vec<f64>,
    /// Row-major `R x k`.
    pub factor: Vec<f64>,
    pub rank: usize,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Objective value after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Flattened entries used by the optimizer inner loop.
struct Terms {
    start: Vec<usize>,
    offset: Vec<usize>,
    coeffs: Vec<f64>,
    alpha: Vec<f64>,
    target_var: Vec<f64>,
}

impl Terms {
    fn new(problem: &ConsensusProblem) -> Self {
        let mut t = Terms {
            start: Vec::new(),
            offset: vec![0],
            coeffs: Vec::new(),
            alpha: Vec::new(),
            target_var: Vec::new(),
        };
        for e in &problem.entries {
            t.start.push(e.weight.support().start);
            t.coeffs.extend_from_slice(e.weight.coeffs());
            t.offset.push(t.coeffs.len());
            t.alpha.push(e.alpha);
            t.target_var.push(e.std * e.std);
        }
        t
    }

    fn len(&self) -> usize {
        self.alpha.len()
    }

    fn coeffs(&self, e: usize) -> &[f64] {
        &self.coeffs[self.offset[e]..self.offset[e + 1]]
    }
}

/// Optimizer state: `rho = log sigma` and `V = diag(scale) W`.
struct CovState<'a> {
    terms: &'a Terms,
    horizon: usize,
    rank: usize,
    scale: Vec<f64>,
    log_coeff: f64,
}

impl CovState<'_> {
    fn variances(&self, x: &[f64], out: &mut [f64], proj: &mut [f64]) {
        let (rho, w) = x.split_at(self.horizon);
        let k = self.rank;
        for e in 0..self.terms.len() {
            let start = self.terms.start[e];
            let u = &mut proj[e * k..(e + 1) * k];
            u.fill(0.0);
            let mut s = 0.0;
            for (i, &a) in self.terms.coeffs(e).iter().enumerate() {
                let t = start + i;
                s += a * a * (2.0 * rho[t]).exp();
                let sa = a * self.scale[t];
                for c in 0..k {
                    u[c] += sa * w[t * k + c];
                }
            }
            out[e] = s + u.iter().map(|v| v * v).sum::<f64>();
        }
    }

    fn objective_from(&self, s: &[f64]) -> f64 {
        let mut f = 0.0;
        for (e, &s_e) in s.iter().enumerate() {
            let tv = self.terms.target_var[e];
            f += self.terms.alpha[e]
                * (s_e / (2.0 * tv) - self.log_coeff * (s_e / tv).ln() - 0.5);
        }
        f
    }

    fn gradient(&self, x: &[f64], s: &[f64], proj: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
        let k = self.rank;
        let (rho, _) = x.split_at(self.horizon);
        let (g_rho, g_w) = grad.split_at_mut(self.horizon);
        for e in 0..self.terms.len() {
            let g = self.terms.alpha[e]
                * (1.0 / (2.0 * self.terms.target_var[e]) - self.log_coeff / s[e]);
            let start = self.terms.start[e];
            let u = &proj[e * k..(e + 1) * k];
            for (i, &a) in self.terms.coeffs(e).iter().enumerate() {
                let t = start + i;
                g_rho[t] += g * 2.0 * a * a * (2.0 * rho[t]).exp();
                let sa = 2.0 * g * a * self.scale[t];
                for c in 0..k {
                    g_w[t * k + c] += sa * u[c];
                }
            }
        }
    }
}

/// Per-step std used to initialize the optimizer: the base forecast where a
/// single-index entry exists, otherwise the average aggregate-implied std
/// `sigma_hat / ||a||` over entries covering the step.
fn initial_sigma(problem: &ConsensusProblem) -> Vec<f64> {
    let r = problem.horizon;
    let mut direct: Vec<Option<f64>> = vec![None; r];
    let mut implied_sum = vec![0.0; r];
    let mut implied_n = vec![0usize; r];
    for e in &problem.entries {
        let coeffs = e.weight.coeffs();
        let norm = coeffs.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        if coeffs.len() == 1 {
            direct[e.weight.support().start] = Some(e.std / norm);
        }
        for (t, a) in e.weight.iter() {
            if a != 0.0 {
                implied_sum[t] += e.std / norm;
                implied_n[t] += 1;
            }
        }
    }
    (0..r)
        .map(|t| direct[t].unwrap_or_else(|| implied_sum[t] / implied_n[t].max(1) as f64))
        .collect()
}

/// Minimize the covariance part of the KL objective over `(sigma, V)`.
pub fn solve_covariance(problem: &ConsensusProblem, config: &OptimizerConfig) -> Result<CovarianceFit> {
    if !(config.tol > 0.0) || !(config.initial_step > 0.0) || !(config.log_coeff > 0.0) {
        return Err(Error::InvalidArgument(
            "optimizer tol, initial_step and log_coeff must be positive".into(),
        ));
    }
    let r = problem.horizon;
    let k = problem.rank;
    let terms = Terms::new(problem);
    let scale = initial_sigma(problem);
    let state = CovState {
        terms: &terms,
        horizon: r,
        rank: k,
        scale: scale.clone(),
        log_coeff: config.log_coeff,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x: Vec<f64> = scale.iter().map(|s| s.ln()).collect();
    x.extend((0..r * k).map(|_| rng.random_range(-config.init_scale..=config.init_scale)));

    let n_terms = terms.len();
    let mut s = vec![0.0; n_terms];
    let mut proj = vec![0.0; n_terms * k];
    let mut grad = vec![0.0; x.len()];
    let mut trial = x.clone();
    let mut s_trial = s.clone();
    let mut proj_trial = proj.clone();

    state.variances(&x, &mut s, &mut proj);
    let mut f = state.objective_from(&s);
    state.gradient(&x, &s, &proj, &mut grad);
    let mut gnorm = inf_norm(&grad);
    let mut step = match config.method {
        Method::GradientDescent => config.initial_step,
        Method::Lbfgs => 1.0,
    };
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut history = Lbfgs::new(x.len());
    let mut direction: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut grad_prev = grad.clone();

    while gnorm > config.tol && iterations < config.max_iter {
        iterations += 1;
        for (xt, (xi, di)) in trial.iter_mut().zip(x.iter().zip(&direction)) {
            *xt = xi + step * di;
        }
        state.variances(&trial, &mut s_trial, &mut proj_trial);
        let f_trial = state.objective_from(&s_trial);
        if f_trial.is_finite() && f_trial <= f {
            std::mem::swap(&mut x, &mut trial);
            std::mem::swap(&mut s, &mut s_trial);
            std::mem::swap(&mut proj, &mut proj_trial);
            f = f_trial;
            std::mem::swap(&mut grad, &mut grad_prev);
            state.gradient(&x, &s, &proj, &mut grad);
            gnorm = inf_norm(&grad);
            trace.push(f);
            match config.method {
                Method::GradientDescent => {
                    step *= 1.1;
                    for (d, g) in direction.iter_mut().zip(&grad) {
                        *d = -g;
                    }
                }
                Method::Lbfgs => {
                    // `trial` now holds the previous iterate.
                    history.push(&x, &trial, &grad, &grad_prev);
                    history.direction(&grad, &mut direction);
                    step = (step * 1.1).min(1.0);
                }
            }
        } else {
            step *= 0.5;
            if step < 1e-300 {
                if config.method == Method::Lbfgs && !history.is_empty() {
                    // Stale curvature; restart from steepest descent.
                    history.clear();
                    for (d, g) in direction.iter_mut().zip(&grad) {
                        *d = -g;
                    }
                    step = config.initial_step;
                    continue;
                }
                break;
            }
        }
    }
    let converged = gnorm <= config.tol;
    if !converged {
        log::warn!(
            "covariance optimizer stopped after {iterations} iterations with gradient norm {gnorm:.3e}"
        );
    }

    let (rho, w) = x.split_at(r);
    let sigma = rho.iter().map(|p| p.exp()).collect();
    let factor = (0..r * k).map(|i| w[i] * scale[i / k.max(1)]).collect();
    Ok(CovarianceFit {
        sigma,
        factor,
        rank: k,
        objective: f,
        iterations,
        grad_norm: gnorm,
        converged,
        trace,
    })
}

/// Curvature pairs for the two-loop recursion.
struct Lbfgs {
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    rho: Vec<f64>,
    alpha: Vec<f64>,
    dim: usize,
}

impl Lbfgs {
    fn new(dim: usize) -> Self {
        Self {
            s: Vec::new(),
            y: Vec::new(),
            rho: Vec::new(),
            alpha: vec![0.0; LBFGS_MEMORY],
            dim,
        }
    }

    fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    /// Record `x - x_prev`, `g - g_prev`; pairs without positive curvature are skipped.
    fn push(&mut self, x: &[f64], x_prev: &[f64], g: &[f64], g_prev: &[f64]) {
        let s: Vec<f64> = x.iter().zip(x_prev).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(g_prev).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt()) {
            return;
        }
        if self.s.len() == LBFGS_MEMORY {
            self.s.remove(0);
            self.y.remove(0);
            self.rho.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
        self.rho.push(1.0 / sy);
    }

    /// `d = -H g` by the two-loop recursion, falling back to `-g` if that
    /// is not a descent direction.
    fn direction(&mut self, g: &[f64], d: &mut [f64]) {
        debug_assert_eq!(g.len(), self.dim);
        d.iter_mut().zip(g).for_each(|(d, g)| *d = -g);
        let m = self.s.len();
        if m == 0 {
            return;
        }
        for i in (0..m).rev() {
            let a = self.rho[i] * dot(&self.s[i], d);
            self.alpha[i] = a;
            d.iter_mut().zip(&self.y[i]).for_each(|(d, y)| *d -= a * y);
        }
        let last = m - 1;
        let gamma = 1.0 / (self.rho[last] * dot(&self.y[last], &self.y[last]));
        d.iter_mut().for_each(|d| *d *= gamma);
        for i in 0..m {
            let b = self.rho[i] * dot(&self.y[i], d);
            let a = self.alpha[i];
            d.iter_mut().zip(&self.s[i]).for_each(|(d, s)| *d += (a - b) * s);
        }
        if !(dot(d, g) < 0.0) {
            self.clear();
            d.iter_mut().zip(g).for_each(|(d, g)| *d = -g);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// Covariance objective at an explicit `(sigma, V)`, for checking optimizer output.
pub fn covariance_objective(problem: &ConsensusProblem, sigma: &[f64], factor: &[f64], log_coeff: f64) -> f64 {
    let k = problem.rank;
    problem
        .entries
        .iter()
        .map(|e| {
            let mut s = 0.0;
            let mut u = vec![0.0; k];
            for (t, a) in e.weight.iter() {
                s += a * a * sigma[t] * sigma[t];
                for c in 0..k {
                    u[c] += a * factor[t * k + c];
                }
            }
            s += u.iter().map(|v| v * v).sum::<f64>();
            let tv = e.std * e.std;
            e.alpha * (s / (2.0 * tv) - log_coeff * (s / tv).ln() - 0.5)
        })
        .sum()
}

/// The coherent joint Gaussian over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusDistribution {
    #[serde(rename = "R")]
    horizon: usize,
    k: usize,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    #[serde(rename = "V")]
    factor: Vec<Vec<f64>>,
    diagnostics: Diagnostics,
    /// Furthest jointly constrained end index for each start index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joint_reach: Option<Vec<usize>>,
    /// Index of the first horizon step in the source series, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<usize>,
}

/// Marginal of one linear aggregate under the consensus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub mean: f64,
    pub variance: f64,
    /// False when the query mixes steps whose correlation no training
    /// constraint ever touched; the cross terms are then unidentified.
    pub jointly_constrained: bool,
}

impl QueryResult {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

impl ConsensusDistribution {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, factor: Vec<Vec<f64>>, diagnostics: Diagnostics) -> Result<Self> {
        let r = mu.len();
        if sigma.len() != r || factor.len() != r {
            return Err(Error::LengthMismatch {
                expected: r,
                found: if sigma.len() != r { sigma.len() } else { factor.len() },
            });
        }
        let k = factor.first().map_or(0, Vec::len);
        if factor.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidArgument("ragged low-rank factor".into()));
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        Ok(Self {
            horizon: r,
            k,
            mu,
            sigma,
            factor,
            diagnostics,
            joint_reach: None,
            origin: None,
        })
    }

    /// Independent per-step Gaussians with no low-rank part.
    pub fn independent(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let r = mu.len();
        Self::new(
            mu,
            sigma,
            vec![Vec::new(); r],
            Diagnostics {
                objective: 0.0,
                iterations: 0,
                grad_norm: 0.0,
                converged: true,
                mean_residual: 0.0,
                log_coeff: default_log_coeff(),
            },
        )
    }

    /// Check invariants after deserialization.
    pub fn validate(&self) -> Result<()> {
        let r = self.mu.len();
        if self.horizon != r || self.sigma.len() != r || self.factor.len() != r {
            return Err(Error::LengthMismatch {
                expected: self.horizon,
                found: r,
            });
        }
        if self.factor.iter().any(|row| row.len() != self.k) {
            return Err(Error::InvalidArgument("low-rank factor rows must have length k".into()));
        }
        if self.sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        if let Some(reach) = &self.joint_reach {
            if reach.len() != r {
                return Err(Error::LengthMismatch {
                    expected: r,
                    found: reach.len(),
                });
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn rank(&self) -> usize {
        self.k
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Rows `v_t` of the low-rank factor.
    pub fn factor(&self) -> &[Vec<f64>] {
        &self.factor
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// Per-step marginal variances `sigma_t^2 + ||v_t||^2`.
    pub fn marginal_variances(&self) -> Vec<f64> {
        self.sigma
            .iter()
            .zip(&self.factor)
            .map(|(s, v)| s * s + v.iter().map(|x| x * x).sum::<f64>())
            .collect()
    }

    /// Closed-form marginal of `a^T y`, in `O(|support| * k)`.
    pub fn marginalize(&self, weight: &PaddedWeight) -> Result<QueryResult> {
        if weight.horizon() != self.horizon {
            return Err(Error::LengthMismatch {
                expected: self.horizon,
                found: weight.horizon(),
            });
        }
        let mut mean = 0.0;
        let mut diag = 0.0;
        let mut u = vec![0.0; self.k];
        for (t, a) in weight.iter() {
            mean += a * self.mu[t];
            diag += a * a * self.sigma[t] * self.sigma[t];
            for (uc, v) in u.iter_mut().zip(&self.factor[t]) {
                *uc += a * v;
            }
        }
        let variance = diag + u.iter().map(|x| x * x).sum::<f64>();
        Ok(QueryResult {
            mean,
            variance,
            jointly_constrained: self.jointly_constrained(weight),
        })
    }

    pub fn marginalize_dense(&self, weights: &[f64]) -> Result<QueryResult> {
        self.marginalize(&PaddedWeight::from_dense(weights))
    }

    fn jointly_constrained(&self, weight: &PaddedWeight) -> bool {
        let Some(reach) = &self.joint_reach else {
            return true;
        };
        let nz: Vec<usize> = weight.iter().filter(|(_, a)| *a != 0.0).map(|(t, _)| t).collect();
        let Some(&last) = nz.last() else {
            return true;
        };
        nz.iter().all(|&s| reach[s] > last)
    }

    /// `Diag(sigma^2) + V V^T` as a dense matrix.
    pub fn dense_covariance(&self) -> Result<DMatrix<f64>> {
        let r = self.horizon;
        if r > DENSE_GUARD {
            return Err(Error::TooLarge(r));
        }
        let v = DMatrix::from_fn(r, self.k, |i, c| self.factor[i][c]);
        let mut cov = &v * v.transpose();
        for t in 0..r {
            cov[(t, t)] += self.sigma[t] * self.sigma[t];
        }
        Ok(cov)
    }
}

/// Consensus settings shared by every rolling window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_rank() -> usize {
    4
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Solve an assembled problem: mean and covariance are independent.
pub fn solve(problem: &ConsensusProblem, optimizer: &OptimizerConfig) -> Result<ConsensusDistribution> {
    let (mu, mean_residual) = solve_mean_with_residual(problem)?;
    let cov = solve_covariance(problem, optimizer)?;
    let k = cov.rank;
    let factor = (0..problem.horizon)
        .map(|t| cov.factor[t * k..(t + 1) * k].to_vec())
        .collect();
    let mut q = ConsensusDistribution::new(
        mu,
        cov.sigma,
        factor,
        Diagnostics {
            objective: cov.objective,
            iterations: cov.iterations,
            grad_norm: cov.grad_norm,
            converged: cov.converged,
            mean_residual,
            log_coeff: optimizer.log_coeff,
        },
    )?;
    q.joint_reach = Some(problem.joint_reach());
    Ok(q)
}

/// Build and solve the consensus for one forecast origin.
pub fn reconcile(levels: &[LevelForecast<'_>], horizon: usize, config: &ConsensusConfig) -> Result<ConsensusDistribution> {
    let problem = build_problem(levels, horizon, config.rank)?;
    solve(&problem, &config.optimizer)
}
