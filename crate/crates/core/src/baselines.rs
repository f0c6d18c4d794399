//! Reference solvers that work on the allocation matrix directly: the naive
//! even split and full-batch gradient descent on the Eisenberg-Gale
//! Lagrangian, with or without heavy-ball momentum.

use std::time::Instant;

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::ces;
use crate::error::{Error, Result};
use crate::history::{EpochRecord, History};
use crate::market::{softplus, softplus_inverse, Market};
use crate::metrics::{self, EquilibriumCandidate};
use crate::trainer::LagrangianTerms;

/// Every buyer receives one unit of each good and prices split the total
/// budget evenly across goods.
pub fn naive(market: &Market) -> EquilibriumCandidate {
    let total = market.total_budget();
    let m = market.m() as f64;
    let prices = market.supplies().iter().map(|y| total / (m * y)).collect();
    let allocation = Array2::from_shape_fn((market.n(), market.m()), |(_, j)| market.normalized_supplies()[j]);
    EquilibriumCandidate { allocation, prices }
}

/// How the raw parameters map to allocations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `x = softplus(z)`; allocations stay strictly positive.
    #[default]
    Softplus,
    /// `x` itself, clipped at zero after every step. Reaches exact zeros,
    /// which linear utilities need at equilibrium.
    Projected,
}

/// Multiplier step size `beta_t` at epoch `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    InverseSqrt,
    Constant(f64),
}

impl StepSchedule {
    pub fn at(self, epoch: usize) -> f64 {
        match self {
            StepSchedule::InverseSqrt => 1.0 / (epoch as f64).sqrt(),
            StepSchedule::Constant(beta) => beta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceInit {
    Ones,
    /// Start from the naive rule's prices.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgConfig {
    pub learning_rate: f64,
    /// Heavy-ball coefficient: 0 for plain gradient descent.
    pub momentum: f64,
    pub inner_iters: usize,
    pub epochs: usize,
    pub rho: f64,
    pub schedule: StepSchedule,
    /// Stop after the first epoch whose projected Nash gap is below this.
    pub early_stop: Option<f64>,
    pub parameterization: Parameterization,
    pub price_init: PriceInit,
    /// Score the projected candidate after every epoch.
    pub evaluate_epochs: bool,
}

impl EgConfig {
    /// Tuned step sizes by regime and market size; `K_b = 1000` above 1000
    /// buyers, else 100; 30 epochs; `rho = 0.2`.
    pub fn defaults_for(market: &Market, momentum: f64) -> Self {
        let large = market.n() > 1000;
        let learning_rate = match (market.ces().is_linear(), large) {
            (true, true) => 1e2,
            (false, true) => 1e3,
            (false, false) => 1.0,
            (true, false) => 0.1,
        };
        EgConfig {
            learning_rate,
            momentum,
            inner_iters: if large { 1000 } else { 100 },
            epochs: 30,
            rho: 0.2,
            schedule: StepSchedule::InverseSqrt,
            early_stop: Some(1e-3),
            parameterization: Parameterization::Softplus,
            price_init: PriceInit::Ones,
            evaluate_epochs: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid(format!("rho must be positive, got {}", self.rho)));
        }
        if self.inner_iters == 0 || self.epochs == 0 {
            return Err(Error::invalid("inner iterations and epochs must be >= 1"));
        }
        if let StepSchedule::Constant(beta) = self.schedule {
            if !(beta > 0.0) {
                return Err(Error::invalid("multiplier step must be positive"));
            }
        }
        Ok(())
    }

    fn method_name(&self) -> &'static str {
        if self.momentum > 0.0 {
            "eg-m"
        } else {
            "eg"
        }
    }
}

/// Gradient descent on the penalized Eisenberg-Gale Lagrangian
///
/// ```text
/// -(1/n) sum_i B_i log u_i + sum_j lambda_j (mean_j - s_j) + rho/2 sum_j (mean_j - s_j)^2
/// ```
///
/// over one parameter per (buyer, good), alternated with multiplier ascent.
#[derive(Clone, Debug)]
pub struct EgSolver<'a> {
    market: &'a Market,
    config: EgConfig,
    params: Array2<f64>,
    velocity: Array2<f64>,
    lambda: Vec<f64>,
    targets: Vec<f64>,
    epoch: usize,
    history: History,
}

impl<'a> EgSolver<'a> {
    pub fn new(market: &'a Market, config: EgConfig) -> Result<Self> {
        config.validate()?;
        let targets = market.normalized_supplies();
        let params = Array2::from_shape_fn((market.n(), market.m()), |(_, j)| match config.parameterization {
            Parameterization::Softplus => softplus_inverse(targets[j]),
            Parameterization::Projected => targets[j],
        });
        let lambda = match config.price_init {
            PriceInit::Ones => vec![1.0; market.m()],
            PriceInit::Naive => naive(market).prices,
        };
        let history = History::new(config.method_name());
        Ok(EgSolver {
            market,
            velocity: Array2::zeros(params.raw_dim()),
            params,
            lambda,
            targets,
            epoch: 0,
            config,
            history,
        })
    }

    pub fn config(&self) -> &EgConfig {
        &self.config
    }

    pub fn multipliers(&self) -> &[f64] {
        &self.lambda
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn allocation(&self) -> Array2<f64> {
        match self.config.parameterization {
            Parameterization::Softplus => self.params.mapv(softplus),
            Parameterization::Projected => self.params.clone(),
        }
    }

    fn means(&self, x: &Array2<f64>) -> Vec<f64> {
        (x.sum_axis(Axis(0)) / self.market.n() as f64).to_vec()
    }

    /// Lagrangian terms at allocation `x` and, optionally, the gradient with
    /// respect to `x`.
    fn evaluate_at(&self, x: &Array2<f64>, grad: Option<&mut Array2<f64>>) -> Result<LagrangianTerms> {
        let market = self.market;
        let n = market.n() as f64;
        let spec = market.ces();
        let residual: Vec<f64> = self.means(x).iter().zip(&self.targets).map(|(a, s)| a - s).collect();
        let mut objective = 0.0;
        match grad {
            Some(grad) => {
                let mut dlog = vec![0.0; market.m()];
                for (i, (row, mut g)) in x.rows().into_iter().zip(grad.rows_mut()).enumerate() {
                    let bundle = row.as_slice().expect("row-major allocation");
                    let log_u = ces::log_utility_grad(market.buyer_values(i), bundle, spec, &mut dlog)?;
                    let b = market.budgets()[i];
                    objective -= b * log_u;
                    for j in 0..market.m() {
                        g[j] = (-b * dlog[j] + self.lambda[j] + self.config.rho * residual[j]) / n;
                    }
                }
            }
            None => {
                for (i, row) in x.rows().into_iter().enumerate() {
                    let bundle = row.as_slice().expect("row-major allocation");
                    objective -= market.budgets()[i] * ces::log_utility(market.buyer_values(i), bundle, spec)?;
                }
            }
        }
        Ok(LagrangianTerms {
            objective: objective / n,
            multiplier: self.lambda.iter().zip(&residual).map(|(l, r)| l * r).sum(),
            penalty: 0.5 * self.config.rho * residual.iter().map(|r| r * r).sum::<f64>(),
        })
    }

    /// The full-population Lagrangian at the current iterate.
    pub fn lagrangian(&self) -> Result<LagrangianTerms> {
        self.evaluate_at(&self.allocation(), None)
    }

    /// One gradient step on the allocation parameters. Returns the Lagrangian
    /// before the step.
    pub fn inner_step(&mut self) -> Result<LagrangianTerms> {
        let x = self.allocation();
        let mut grad = Array2::zeros(x.raw_dim());
        let terms = self
            .evaluate_at(&x, Some(&mut grad))
            .map_err(|e| Error::NumericFailure { layer: usize::MAX, detail: e.to_string() })?;
        if !terms.is_finite() {
            return Err(Error::NumericFailure { layer: usize::MAX, detail: format!("loss is {}", terms.total()) });
        }
        if self.config.parameterization == Parameterization::Softplus {
            // dx/dz = sigmoid(z) = 1 - exp(-softplus(z))
            Zip::from(&mut grad).and(&x).for_each(|g, &xv| *g *= -(-xv).exp_m1());
        }
        let (eta, mu) = (self.config.learning_rate, self.config.momentum);
        Zip::from(&mut self.velocity).and(&grad).for_each(|v, &g| *v = mu * *v + g);
        Zip::from(&mut self.params).and(&self.velocity).for_each(|p, &v| *p -= eta * v);
        if self.config.parameterization == Parameterization::Projected {
            Zip::from(&mut self.params).and(&mut self.velocity).for_each(|p, v| {
                if *p < 0.0 {
                    *p = 0.0;
                    *v = 0.0;
                }
            });
        }
        Ok(terms)
    }

    /// `lambda_j += beta * rho * (mean_j - s_j)` at the current allocation.
    pub fn multiplier_step(&mut self, beta: f64) {
        let means = self.means(&self.allocation());
        crate::trainer::apply_multiplier_step(&mut self.lambda, &means, &self.targets, self.config.rho, beta);
    }

    fn abort(&self, detail: String) -> Error {
        Error::SolverAborted {
            method: self.config.method_name(),
            epoch: self.epoch + 1,
            detail,
            history: Box::new(self.history.clone()),
        }
    }

    /// `K_b` inner steps, one multiplier step and (if configured) scoring of
    /// the projected candidate.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let started = Instant::now();
        let mut loss = 0.0;
        for step in 0..self.config.inner_iters {
            let terms = self.inner_step().map_err(|e| self.abort(format!("step {step}: {e}")))?;
            loss += terms.total();
        }
        let train_seconds = started.elapsed().as_secs_f64();
        self.epoch += 1;

        let started = Instant::now();
        self.multiplier_step(self.config.schedule.at(self.epoch));
        let multiplier_seconds = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let mut record = EpochRecord {
            epoch: self.epoch,
            loss: loss / self.config.inner_iters as f64,
            train_seconds,
            multiplier_seconds,
            ..Default::default()
        };
        if self.config.evaluate_epochs && self.lambda.iter().all(|&l| l > 0.0) {
            let (ng, voa, vop) = metrics::projected_gap(self.market, self.allocation().view(), &self.lambda)?;
            record.ng = Some(ng);
            record.voa = Some(voa);
            record.vop = Some(vop);
        }
        record.eval_seconds = started.elapsed().as_secs_f64();
        log::debug!("{} epoch {}: loss {:.6e} ng {:?}", self.history.method, self.epoch, record.loss, record.ng);
        self.history.records.push(record);
        Ok(self.history.records.last().expect("just pushed"))
    }

    /// The current (unprojected) allocation and multipliers as a candidate.
    pub fn candidate(&self) -> Result<EquilibriumCandidate> {
        if let Some((good, &price)) = self.lambda.iter().enumerate().find(|(_, &l)| !(l > 0.0)) {
            return Err(Error::InvalidPrice { good, price });
        }
        EquilibriumCandidate::new(self.allocation(), self.lambda.clone())
    }

    /// Runs to the epoch budget or the early-stopping threshold.
    pub fn solve(mut self) -> Result<(EquilibriumCandidate, History)> {
        while self.epoch < self.config.epochs {
            let ng = self.run_epoch()?.ng;
            if let (Some(threshold), Some(ng)) = (self.config.early_stop, ng) {
                if ng < threshold {
                    break;
                }
            }
        }
        let candidate = self.candidate()?;
        Ok((candidate, self.history))
    }
}

/// Gradient descent without momentum; `config.momentum` is ignored.
pub fn eg_solve(market: &Market, config: &EgConfig) -> Result<(EquilibriumCandidate, History)> {
    EgSolver::new(market, EgConfig { momentum: 0.0, ..config.clone() })?.solve()
}

/// Heavy-ball gradient descent with coefficient 0.9 unless the config sets
/// another nonzero value.
pub fn eg_momentum_solve(market: &Market, config: &EgConfig) -> Result<(EquilibriumCandidate, History)> {
    let momentum = if config.momentum > 0.0 { config.momentum } else { 0.9 };
    EgSolver::new(market, EgConfig { momentum, ..config.clone() })?.solve()
}
