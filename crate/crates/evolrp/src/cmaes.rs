//! Covariance matrix adaptation evolution strategy, minimizing a black-box
//! objective over an unconstrained real vector.
//!
//! This is the standard (μ/μ_w, λ) scheme: candidates are drawn from
//! N(mean, σ²C), the mean is recombined from the best μ with log-rank
//! weights, σ follows cumulative step-size adaptation, and C receives the
//! rank-one plus rank-μ update. Ties in fitness are broken by candidate
//! index so runs are bit-reproducible.
//!
//! The objective receives `(parameters, generation)`; the generation index
//! lets noisy objectives share random draws across one population (common
//! random numbers) while still varying them over time.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// Objective to minimize: `(parameters, generation index)` to a finite value.
pub type Objective<'a> = dyn FnMut(&[f64], usize) -> Result<f64> + 'a;

/// Population size used when none is requested: 4 + ⌊3 ln n⌋.
pub fn default_lambda(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

/// Condition-number ceiling; beyond it the covariance diagonal is lifted.
const MAX_CONDITION: f64 = 1e14;

/// Step size below which the search has collapsed and the run stops.
const SIGMA_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmaConfig {
    /// Initial mean; its length sets the problem dimension.
    pub theta0: Vec<f64>,
    /// Population size; `None` picks `default_lambda(dim)`.
    pub lambda: Option<usize>,
    pub max_iter: usize,
    pub sigma0: f64,
    pub seed: u64,
    /// Stop once best-so-far fitness is at or below this value; `None`
    /// disables the check (fitness scales vary, e.g. negated metrics).
    pub tol: Option<f64>,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            theta0: vec![0.0],
            lambda: None,
            max_iter: 300,
            sigma0: 0.5,
            seed: 7,
            tol: None,
        }
    }
}

/// One generation of a run: the generation's own best and mean fitness, the
/// running best, and the step size after the update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_so_far: f64,
    pub sigma: f64,
    /// The generation's best candidate (the initial mean for generation 0).
    pub best_theta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CmaRun {
    pub best_theta: Vec<f64>,
    pub best_fitness: f64,
    pub history: Vec<GenerationStats>,
    pub evaluations: usize,
}

/// Sampling and update state. Strategy constants follow the standard
/// tutorial formulas and are fixed at construction.
#[derive(Debug, Clone)]
pub struct CmaState {
    dim: usize,
    lambda: usize,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    generation: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    /// Cached eigendecomposition of `cov` as (B, sqrt of eigenvalues);
    /// invalidated by every covariance update.
    eigen: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl CmaState {
    pub fn new(theta0: &[f64], sigma0: f64, lambda: usize) -> Result<CmaState> {
        let dim = theta0.len();
        if dim == 0 {
            return Err(Error::Optimizer("dimension must be positive".into()));
        }
        if theta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Optimizer("initial mean must be finite".into()));
        }
        if !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(Error::Optimizer(format!(
                "initial step size must be finite and positive, got {sigma0}"
            )));
        }
        if lambda < 2 {
            return Err(Error::Optimizer(format!(
                "population size must be at least 2, got {lambda}"
            )));
        }

        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let sum_sq: f64 = raw.iter().map(|w| w * w).sum();
        let mu_eff = sum * sum / sum_sq;
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff);
        let c_mu = (1.0 - c_1)
            .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) * (n + 2.0) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Ok(CmaState {
            dim,
            lambda,
            mean: DVector::from_column_slice(theta0),
            sigma: sigma0,
            cov: DMatrix::identity(dim, dim),
            p_sigma: DVector::zeros(dim),
            p_c: DVector::zeros(dim),
            generation: 0,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            eigen: None,
        })
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    /// Lifts the covariance diagonal so the condition number lands near the
    /// ceiling. `max_ev` may come from a failed decomposition attempt, in
    /// which case the trace stands in for it.
    fn recondition(&mut self, max_ev: f64, min_ev: f64) {
        let scale = if max_ev.is_finite() && max_ev > 0.0 {
            max_ev
        } else {
            (self.cov.trace() / self.dim as f64).abs().max(1e-300)
        };
        // Aim two decades below the ceiling so the retry's own eigenvalue
        // shift cannot push the condition number back over it.
        let bump = scale / (MAX_CONDITION / 100.0) - min_ev.min(0.0).max(-scale);
        let bump = bump.max(scale * f64::EPSILON);
        for i in 0..self.dim {
            self.cov[(i, i)] += bump;
        }
        self.eigen = None;
    }

    /// Eigendecomposition of the covariance, reconditioning and retrying
    /// once if it fails or is numerically indefinite.
    fn decompose(&mut self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if let Some(cached) = &self.eigen {
            return Ok(cached.clone());
        }
        for _ in 0..2 {
            let attempt =
                nalgebra::SymmetricEigen::try_new(self.cov.clone(), f64::EPSILON, 500);
            let Some(eig) = attempt else {
                self.recondition(f64::NAN, 0.0);
                continue;
            };
            let max_ev = eig.eigenvalues.max();
            let min_ev = eig.eigenvalues.min();
            if !max_ev.is_finite() || !min_ev.is_finite() || min_ev <= 0.0
                || max_ev / min_ev > MAX_CONDITION
            {
                self.recondition(max_ev, min_ev);
                continue;
            }
            let sqrt_evals = eig.eigenvalues.map(f64::sqrt);
            let factors = (eig.eigenvectors, sqrt_evals);
            self.eigen = Some(factors.clone());
            return Ok(factors);
        }
        Err(Error::Optimizer(
            "covariance decomposition failed after reconditioning".into(),
        ))
    }

    /// Draws the generation's candidate set: mean + σ·B·diag(√λᵢ)·z.
    pub fn ask(&mut self, stream: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let (basis, sqrt_evals) = self.decompose()?;
        let mut candidates = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let z = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(stream));
            let y = &basis * z.component_mul(&sqrt_evals);
            let x = &self.mean + self.sigma * y;
            candidates.push(x.as_slice().to_vec());
        }
        Ok(candidates)
    }

    /// Consumes the fitnesses (lower is better) of the candidates returned
    /// by the matching `ask` and updates mean, paths, covariance, and step
    /// size. Ties are broken by candidate index.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitnesses: &[f64]) -> Result<()> {
        if candidates.len() != self.lambda || fitnesses.len() != self.lambda {
            return Err(Error::Optimizer(format!(
                "tell expects {} candidates and fitnesses, got {} and {}",
                self.lambda,
                candidates.len(),
                fitnesses.len()
            )));
        }
        for (i, f) in fitnesses.iter().enumerate() {
            if !f.is_finite() {
                return Err(Error::Optimizer(format!(
                    "non-finite fitness {f} for candidate {i}"
                )));
            }
        }
        for (i, c) in candidates.iter().enumerate() {
            if c.len() != self.dim {
                return Err(Error::Optimizer(format!(
                    "candidate {i} has dimension {}, state has {}",
                    c.len(),
                    self.dim
                )));
            }
        }

        // C^{-1/2} of the covariance that generated the candidates, needed
        // for the step-size path before C itself is updated.
        let (basis, sqrt_evals) = self.decompose()?;
        let inv_sqrt =
            &basis * DMatrix::from_diagonal(&sqrt_evals.map(|d| 1.0 / d)) * basis.transpose();

        let mut order: Vec<usize> = (0..self.lambda).collect();
        order.sort_by(|&a, &b| fitnesses[a].total_cmp(&fitnesses[b]).then(a.cmp(&b)));

        let selected: Vec<DVector<f64>> = order
            .iter()
            .take(self.weights.len())
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &self.mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(self.dim);
        for (w, y) in self.weights.iter().zip(&selected) {
            y_w += *w * y;
        }

        self.mean += self.sigma * &y_w;

        let g = self.generation as i32;
        self.p_sigma = (1.0 - self.c_sigma) * &self.p_sigma
            + (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt() * (&inv_sqrt * &y_w);
        let expected_decay = (1.0 - (1.0 - self.c_sigma).powi(2 * (g + 1))).sqrt();
        let h_sigma = if self.p_sigma.norm() / expected_decay
            < (1.4 + 2.0 / (self.dim as f64 + 1.0)) * self.chi_n
        {
            1.0
        } else {
            0.0
        };
        self.p_c = (1.0 - self.c_c) * &self.p_c
            + h_sigma * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt() * &y_w;

        let delta_h = (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c);
        let mut rank_mu = DMatrix::zeros(self.dim, self.dim);
        for (w, y) in self.weights.iter().zip(&selected) {
            rank_mu += *w * y * y.transpose();
        }
        self.cov = (1.0 - self.c_1 - self.c_mu) * &self.cov
            + self.c_1 * (&self.p_c * self.p_c.transpose() + delta_h * &self.cov)
            + self.c_mu * rank_mu;
        // Restore exact symmetry lost to floating-point accumulation.
        let transpose = self.cov.transpose();
        self.cov = (&self.cov + transpose) * 0.5;

        self.sigma *=
            ((self.c_sigma / self.d_sigma) * (self.p_sigma.norm() / self.chi_n - 1.0)).exp();
        if !self.sigma.is_finite() {
            return Err(Error::Optimizer(format!(
                "step size became non-finite at generation {}",
                self.generation
            )));
        }

        self.generation += 1;
        self.eigen = None;
        Ok(())
    }
}

/// Runs CMA-ES to completion. The initial mean is evaluated first (as
/// generation 0), so a zero-iteration run reports the starting point's
/// fitness; afterwards each generation asks, evaluates, and tells until
/// max_iter, the fitness tolerance, or step-size collapse.
pub fn run_cmaes(objective: &mut Objective, config: &CmaConfig) -> Result<CmaRun> {
    let dim = config.theta0.len();
    let lambda = config.lambda.unwrap_or_else(|| default_lambda(dim));
    let mut state = CmaState::new(&config.theta0, config.sigma0, lambda)?;
    let mut stream = rng::substream(config.seed, "cma", 0);

    let wrap = |generation: usize, candidate: usize, e: Error| {
        Error::Optimizer(format!(
            "objective failed at generation {generation}, candidate {candidate}: {e}"
        ))
    };

    let f0 = objective(&config.theta0, 0).map_err(|e| wrap(0, 0, e))?;
    if !f0.is_finite() {
        return Err(Error::Optimizer(format!(
            "non-finite fitness {f0} for the initial mean"
        )));
    }
    let mut best_theta = config.theta0.clone();
    let mut best_fitness = f0;
    let mut evaluations = 1;
    let mut history = vec![GenerationStats {
        generation: 0,
        best_fitness: f0,
        mean_fitness: f0,
        best_so_far: f0,
        sigma: state.sigma(),
        best_theta: config.theta0.clone(),
    }];

    for generation in 1..=config.max_iter {
        if config.tol.is_some_and(|tol| best_fitness <= tol) || state.sigma() < SIGMA_FLOOR {
            break;
        }
        let candidates = state.ask(&mut stream)?;
        let mut fitnesses = Vec::with_capacity(candidates.len());
        for (i, candidate) in candidates.iter().enumerate() {
            let f = objective(candidate, generation).map_err(|e| wrap(generation, i, e))?;
            fitnesses.push(f);
        }
        evaluations += fitnesses.len();

        let mut gen_best = 0;
        for i in 1..fitnesses.len() {
            if fitnesses[i] < fitnesses[gen_best] {
                gen_best = i;
            }
        }
        if fitnesses[gen_best] < best_fitness {
            best_fitness = fitnesses[gen_best];
            best_theta = candidates[gen_best].clone();
        }
        let mean_fitness = fitnesses.iter().sum::<f64>() / fitnesses.len() as f64;

        let gen_best_theta = candidates[gen_best].clone();
        state.tell(&candidates, &fitnesses)?;
        history.push(GenerationStats {
            generation,
            best_fitness: fitnesses[gen_best],
            mean_fitness,
            best_so_far: best_fitness,
            sigma: state.sigma(),
            best_theta: gen_best_theta,
        });
    }

    Ok(CmaRun {
        best_theta,
        best_fitness,
        history,
        evaluations,
    })
}
