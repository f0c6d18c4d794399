//! Training the allocation network with the augmented Lagrangian method of
//! multipliers.
//!
//! With per-buyer supply `s_j = Y_j / n` the penalized Lagrangian is
//!
//! ```text
//! L(x, lambda) = -E_b[B(b) log u(b; x(b, .))]
//!                + sum_j lambda_j (E_b[x(b, g_j)] - s_j)
//!                + rho/2 sum_j (E_b[x(b, g_j)] - s_j)^2
//! ```
//!
//! Each optimizer step sees an unbiased estimate built from `2M` buyers drawn
//! uniformly with replacement: the first `M` estimate the objective and
//! multiplier terms, and the squared expectation is estimated by pairing
//! sample `i` with the independent sample `i + M`. Multipliers move between
//! epochs by `lambda_j += beta_t * rho * (E_b[x(b, g_j)] - s_j)` with
//! `beta_t = 1 / sqrt(t)`; at the end they are the prices.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ces;
use crate::error::{Error, Result};
use crate::history::{EpochRecord, History};
use crate::market::{BuyerSampler, Market};
use crate::metrics::{self, EquilibriumCandidate};
use crate::net::{pair_inputs, AdamConfig, AllocationNet, Architecture, OptimizerState};
use crate::rng::{substream, Stream};

/// Markets up to this many buyers get an exact multiplier pass under
/// [`MultiplierPass::Auto`].
pub const EXACT_PASS_LIMIT: usize = 1 << 20;

/// Sample size used by [`MultiplierPass::Auto`] above [`EXACT_PASS_LIMIT`].
pub const AUTO_MULTIPLIER_BATCH: usize = 1 << 16;

/// Buyers per chunk when evaluating the network on the whole market.
const FORWARD_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierPass {
    Auto,
    Exact,
    Sampled(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `M`: the estimator draws `2M` buyers per step.
    pub batch_size: usize,
    pub multiplier_pass: MultiplierPass,
    pub rho: f64,
    /// Optimizer steps per epoch.
    pub inner_iters: usize,
    pub epochs: usize,
    /// Hidden layers of the allocation network.
    pub depth: usize,
    pub width: usize,
    pub optimizer: AdamConfig,
    pub initial_multiplier: f64,
    /// Project and score the candidate after every epoch.
    pub evaluate_epochs: bool,
    /// Also record the full-population Lagrangian after every epoch.
    pub exact_lagrangian: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            multiplier_pass: MultiplierPass::Auto,
            rho: 0.2,
            inner_iters: 100,
            epochs: 30,
            depth: 5,
            width: 256,
            optimizer: AdamConfig::default(),
            initial_multiplier: 1.0,
            evaluate_epochs: true,
            exact_lagrangian: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.inner_iters == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size, inner iterations and epochs must be >= 1"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid(format!("rho must be positive, got {}", self.rho)));
        }
        if matches!(self.multiplier_pass, MultiplierPass::Sampled(0)) {
            return Err(Error::invalid("multiplier batch must be >= 1"));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self, market: &Market) -> Architecture {
        Architecture::for_contexts(market.k(), self.depth, self.width)
    }
}

/// The three parts of the penalized Lagrangian, kept apart so each can be
/// checked on its own.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LagrangianTerms {
    /// `-E[B log u]` (or its sample mean).
    pub objective: f64,
    /// `sum_j lambda_j (E[x_j] - s_j)`.
    pub multiplier: f64,
    /// `rho/2 sum_j (E[x_j] - s_j)^2`.
    pub penalty: f64,
}

impl LagrangianTerms {
    pub fn total(&self) -> f64 {
        self.objective + self.multiplier + self.penalty
    }

    /// False when some buyer's utility was zero.
    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

fn check_multipliers(market: &Market, lambda: &[f64]) -> Result<()> {
    if lambda.len() != market.m() {
        return Err(Error::shape(format!("{} multipliers for {} goods", lambda.len(), market.m())));
    }
    Ok(())
}

/// Minibatch terms and, if requested, their derivative with respect to each
/// network output. `outputs` holds one row per sampled buyer.
fn sample_terms(
    market: &Market,
    sample: &[usize],
    outputs: ArrayView2<'_, f64>,
    lambda: &[f64],
    rho: f64,
    want_grad: bool,
) -> Result<(LagrangianTerms, Option<Array2<f64>>)> {
    let half = sample.len() / 2;
    let m = market.m();
    let targets = market.normalized_supplies();
    let spec = market.ces();
    let inv_m = 1.0 / half as f64;
    let mut grad = want_grad.then(|| Array2::zeros((sample.len(), m)));
    let mut terms = LagrangianTerms::default();
    let mut dlog = vec![0.0; m];
    for (r, &buyer) in sample[..half].iter().enumerate() {
        let bundle = outputs.row(r).to_vec();
        let values = market.buyer_values(buyer);
        let weight = market.budgets()[buyer];
        let log_u = if want_grad {
            ces::log_utility_grad(values, &bundle, spec, &mut dlog).map_err(|e| Error::NumericFailure {
                layer: usize::MAX,
                detail: format!("utility of sampled buyer {buyer}: {e}"),
            })?
        } else {
            ces::log_utility(values, &bundle, spec)?
        };
        terms.objective -= inv_m * weight * log_u;
        let partner = outputs.row(r + half);
        for j in 0..m {
            terms.multiplier += inv_m * lambda[j] * bundle[j];
            terms.penalty += 0.5 * rho * inv_m * (bundle[j] - targets[j]) * (partner[j] - targets[j]);
        }
        if let Some(g) = grad.as_mut() {
            for j in 0..m {
                g[[r, j]] = inv_m * (-weight * dlog[j] + lambda[j]) + 0.5 * rho * inv_m * (partner[j] - targets[j]);
                g[[r + half, j]] = 0.5 * rho * inv_m * (bundle[j] - targets[j]);
            }
        }
    }
    terms.multiplier -= lambda.iter().zip(&targets).map(|(l, s)| l * s).sum::<f64>();
    Ok((terms, grad))
}

fn check_sample(market: &Market, sample: &[usize]) -> Result<()> {
    if sample.is_empty() || !sample.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "the estimator needs an even, nonzero number of samples (got {})",
            sample.len()
        )));
    }
    if let Some(&bad) = sample.iter().find(|&&i| i >= market.n()) {
        return Err(Error::IndexOutOfRange { index: bad, len: market.n() });
    }
    Ok(())
}

fn sample_inputs(market: &Market, sample: &[usize]) -> Result<Array2<f64>> {
    let buyers = market.buyers().select(Axis(0), sample);
    pair_inputs(buyers.view(), market.goods())
}

/// Unbiased estimate of the penalized Lagrangian from `2M` sampled buyer
/// indices. The objective and multiplier terms use the first `M` samples;
/// the penalty pairs sample `i` with sample `i + M`. A zero utility shows up
/// as a non-finite objective (see [`LagrangianTerms::is_finite`]).
pub fn estimate_lagrangian(
    net: &AllocationNet,
    lambda: &[f64],
    rho: f64,
    market: &Market,
    sample: &[usize],
) -> Result<LagrangianTerms> {
    check_multipliers(market, lambda)?;
    check_sample(market, sample)?;
    let out = net.forward_inputs(sample_inputs(market, sample)?.view())?;
    let out = out.into_shape_with_order((sample.len(), market.m())).expect("2M x m outputs");
    Ok(sample_terms(market, sample, out.view(), lambda, rho, false)?.0)
}

/// The estimate together with its gradient with respect to the parameters.
pub fn estimate_with_gradient(
    net: &AllocationNet,
    lambda: &[f64],
    rho: f64,
    market: &Market,
    sample: &[usize],
) -> Result<(LagrangianTerms, Vec<f64>)> {
    check_multipliers(market, lambda)?;
    check_sample(market, sample)?;
    let m = market.m();
    let mut terms = LagrangianTerms::default();
    let (_, grad) = net.loss_gradient(sample_inputs(market, sample)?, |out| {
        let out = out.into_shape_with_order((sample.len(), m)).expect("2M x m outputs");
        let (t, g) = sample_terms(market, sample, out, lambda, rho, true)?;
        terms = t;
        let g = g.expect("gradient requested");
        Ok((t.total(), Array1::from_iter(g)))
    })?;
    Ok((terms, grad))
}

/// The network's allocation matrix for every buyer (n x m).
pub fn allocation_matrix(net: &AllocationNet, market: &Market) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((market.n(), market.m()));
    let mut start = 0;
    while start < market.n() {
        let end = (start + FORWARD_CHUNK).min(market.n());
        let block = net.forward_batch(market.buyers().slice(ndarray::s![start..end, ..]), market.goods())?;
        x.slice_mut(ndarray::s![start..end, ..]).assign(&block);
        start = end;
    }
    Ok(x)
}

fn terms_from_allocation(market: &Market, x: ArrayView2<'_, f64>, lambda: &[f64], rho: f64) -> Result<LagrangianTerms> {
    let n = market.n() as f64;
    let spec = market.ces();
    let mut objective = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        objective -= market.budgets()[i] * ces::log_utility(market.buyer_values(i), &row.to_vec(), spec)?;
    }
    let means = x.sum_axis(Axis(0)) / n;
    let targets = market.normalized_supplies();
    let residual: Vec<f64> = means.iter().zip(&targets).map(|(a, s)| a - s).collect();
    Ok(LagrangianTerms {
        objective: objective / n,
        multiplier: lambda.iter().zip(&residual).map(|(l, r)| l * r).sum(),
        penalty: 0.5 * rho * residual.iter().map(|r| r * r).sum::<f64>(),
    })
}

/// The penalized Lagrangian with expectations taken over all `n` buyers.
pub fn exact_lagrangian(net: &AllocationNet, lambda: &[f64], rho: f64, market: &Market) -> Result<LagrangianTerms> {
    check_multipliers(market, lambda)?;
    terms_from_allocation(market, allocation_matrix(net, market)?.view(), lambda, rho)
}

/// Mean allocation of each good over the population (exact) or over a
/// uniform sample of buyers. The full allocation matrix is returned when it
/// was computed.
pub fn mean_allocation<R: Rng>(
    net: &AllocationNet,
    market: &Market,
    pass: MultiplierPass,
    rng: &mut R,
) -> Result<(Vec<f64>, Option<Array2<f64>>)> {
    let pass = match pass {
        MultiplierPass::Auto if market.n() <= EXACT_PASS_LIMIT => MultiplierPass::Exact,
        MultiplierPass::Auto => MultiplierPass::Sampled(AUTO_MULTIPLIER_BATCH),
        other => other,
    };
    match pass {
        MultiplierPass::Sampled(size) => {
            let sample: Vec<usize> = (0..size).map(|_| market.sample_buyer(rng)).collect();
            let buyers = market.buyers().select(Axis(0), &sample);
            let x = net.forward_batch(buyers.view(), market.goods())?;
            Ok(((x.sum_axis(Axis(0)) / size as f64).to_vec(), None))
        }
        _ => {
            let x = allocation_matrix(net, market)?;
            let means = (x.sum_axis(Axis(0)) / market.n() as f64).to_vec();
            Ok((means, Some(x)))
        }
    }
}

/// `lambda_j += step * rho * (mean_j - s_j)`.
pub fn apply_multiplier_step(lambda: &mut [f64], means: &[f64], targets: &[f64], rho: f64, step: f64) {
    for ((l, mean), s) in lambda.iter_mut().zip(means).zip(targets) {
        *l += step * rho * (mean - s);
    }
}

/// One multiplier ascent step; returns the mean allocations it used.
pub fn multiplier_update<R: Rng>(
    lambda: &mut [f64],
    net: &AllocationNet,
    market: &Market,
    rho: f64,
    step: f64,
    pass: MultiplierPass,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_multipliers(market, lambda)?;
    if !(step > 0.0) {
        return Err(Error::invalid(format!("multiplier step must be positive, got {step}")));
    }
    let (means, _) = mean_allocation(net, market, pass, rng)?;
    apply_multiplier_step(lambda, &means, &market.normalized_supplies(), rho, step);
    Ok(means)
}

/// The candidate read off a trained network: `x_ij = x(b_i, g_j)` and
/// `p_j = lambda_j`. Requires every multiplier to be positive.
pub fn extract_solution(net: &AllocationNet, lambda: &[f64], market: &Market) -> Result<EquilibriumCandidate> {
    check_multipliers(market, lambda)?;
    if let Some((good, &price)) = lambda.iter().enumerate().find(|(_, &l)| !(l > 0.0)) {
        return Err(Error::InvalidPrice { good, price });
    }
    EquilibriumCandidate::new(allocation_matrix(net, market)?, lambda.to_vec())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: AllocationNet,
    pub multipliers: Vec<f64>,
    pub optimizer: OptimizerState,
    pub history: History,
}

impl TrainOutcome {
    pub fn candidate(&self, market: &Market) -> Result<EquilibriumCandidate> {
        extract_solution(&self.net, &self.multipliers, market)
    }
}

fn abort(epoch: usize, detail: String, history: &History) -> Error {
    Error::SolverAborted { method: "fcnet", epoch, detail, history: Box::new(history.clone()) }
}

/// Runs `epochs` rounds of `inner_iters` Adam steps followed by a multiplier
/// update. Deterministic for a fixed config and market.
pub fn train(market: &Market, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let arch = config.architecture(market);
    let mut net = AllocationNet::new(arch, config.seed)?;
    let mut optimizer = OptimizerState::new(config.optimizer, arch.parameter_count());
    let mut lambda = vec![config.initial_multiplier; market.m()];
    let mut sampler = substream(config.seed, Stream::Sampler);
    let mut multiplier_rng = substream(config.seed, Stream::Aux(0));
    let targets = market.normalized_supplies();
    let mut history = History::new("fcnet");
    let mut sample = vec![0usize; 2 * config.batch_size];

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for step in 0..config.inner_iters {
            sample.iter_mut().for_each(|s| *s = market.sample_buyer(&mut sampler));
            let (terms, grad) = estimate_with_gradient(&net, &lambda, config.rho, market, &sample)
                .map_err(|e| abort(epoch, format!("step {step}: {e}"), &history))?;
            if !terms.is_finite() {
                return Err(abort(epoch, format!("step {step}: loss is {}", terms.total()), &history));
            }
            loss_sum += terms.total();
            optimizer.apply(net.parameters_mut(), &grad).map_err(|e| abort(epoch, e.to_string(), &history))?;
        }
        let train_seconds = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let (means, full) = mean_allocation(&net, market, config.multiplier_pass, &mut multiplier_rng)?;
        apply_multiplier_step(&mut lambda, &means, &targets, config.rho, 1.0 / (epoch as f64).sqrt());
        let multiplier_seconds = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let mut record = EpochRecord {
            epoch,
            loss: loss_sum / config.inner_iters as f64,
            train_seconds,
            multiplier_seconds,
            ..Default::default()
        };
        if config.evaluate_epochs || config.exact_lagrangian {
            let x = match full {
                Some(x) => x,
                None => allocation_matrix(&net, market)?,
            };
            if config.exact_lagrangian {
                record.lagrangian = Some(terms_from_allocation(market, x.view(), &lambda, config.rho)?.total());
            }
            if config.evaluate_epochs && lambda.iter().all(|&l| l > 0.0) {
                let (ng, voa, vop) = metrics::projected_gap(market, x.view(), &lambda)?;
                record.ng = Some(ng);
                record.voa = Some(voa);
                record.vop = Some(vop);
            }
        }
        record.eval_seconds = started.elapsed().as_secs_f64();
        log::debug!("fcnet epoch {epoch}: loss {:.6e} ng {:?}", record.loss, record.ng);
        history.records.push(record);
    }
    Ok(TrainOutcome { net, multipliers: lambda, optimizer, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ces::CesSpec;
    use crate::market::ContextDistribution;

    fn toy_market(n: usize) -> Market {
        Market::generate(n, 2, 2, ContextDistribution::StandardNormal, CesSpec::general(0.5).unwrap(), 4).unwrap()
    }

    fn constant_net(arch: Architecture, value: f64) -> AllocationNet {
        let mut net = AllocationNet::new(arch, 0).unwrap();
        net.zero_final_layer();
        let len = net.parameters().len();
        net.parameters_mut()[len - 1] = crate::market::softplus_inverse(value);
        net
    }

    #[test]
    fn odd_sample_rejected() {
        let market = toy_market(3);
        let net = AllocationNet::new(Architecture::for_contexts(2, 1, 4), 0).unwrap();
        assert!(matches!(
            estimate_lagrangian(&net, &[1.0, 1.0], 0.2, &market, &[0, 1, 2]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn clearance_exact_net_leaves_only_objective() {
        let market = toy_market(3);
        let net = constant_net(Architecture::for_contexts(2, 1, 4), 1.0);
        let sample = [0, 2, 1, 1];
        let terms = estimate_lagrangian(&net, &[0.7, -3.0], 0.2, &market, &sample).unwrap();
        assert!(terms.multiplier.abs() < 1e-14);
        assert!(terms.penalty.abs() < 1e-28);
        let ones = [1.0, 1.0];
        let expected: f64 = -[0usize, 2]
            .iter()
            .map(|&i| market.budgets()[i] * ces::log_utility(market.buyer_values(i), &ones, market.ces()).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((terms.objective - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_rho_drops_penalty() {
        let market = toy_market(4);
        let net = AllocationNet::new(Architecture::for_contexts(2, 2, 5), 1).unwrap();
        let with = estimate_lagrangian(&net, &[0.5, 0.5], 0.3, &market, &[0, 1, 2, 3]).unwrap();
        let without = estimate_lagrangian(&net, &[0.5, 0.5], 0.0, &market, &[0, 1, 2, 3]).unwrap();
        assert_eq!(without.penalty, 0.0);
        assert_eq!(with.objective, without.objective);
        assert_eq!(with.multiplier, without.multiplier);
    }

    #[test]
    fn multiplier_update_examples() {
        let market = toy_market(3);
        let arch = Architecture::for_contexts(2, 1, 4);
        let mut rng = substream(0, Stream::Aux(9));
        let mut lambda = vec![0.3, 0.6];
        let one = constant_net(arch, 1.0);
        multiplier_update(&mut lambda, &one, &market, 0.2, 1.0, MultiplierPass::Exact, &mut rng).unwrap();
        assert!((lambda[0] - 0.3).abs() < 1e-14 && (lambda[1] - 0.6).abs() < 1e-14);
        let two = constant_net(arch, 2.0);
        multiplier_update(&mut lambda, &two, &market, 0.2, 1.0, MultiplierPass::Exact, &mut rng).unwrap();
        assert!((lambda[0] - 0.5).abs() < 1e-13 && (lambda[1] - 0.8).abs() < 1e-13);
    }

    #[test]
    fn extraction_requires_positive_multipliers() {
        let market = toy_market(2);
        let net = AllocationNet::new(Architecture::for_contexts(2, 1, 4), 0).unwrap();
        assert!(matches!(extract_solution(&net, &[0.5, -0.1], &market), Err(Error::InvalidPrice { good: 1, .. })));
        let c = extract_solution(&net, &[0.5, 0.1], &market).unwrap();
        assert_eq!(c.allocation.dim(), (2, 2));
        assert_eq!(c.allocation[[1, 0]], net.forward(market.buyer(1), market.good(0)).unwrap());
    }
}
