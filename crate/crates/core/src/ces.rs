//! CES utilities `u(x) = (sum_j v_j^a x_j^a)^(1/a)` and their closed forms.
//!
//! All four regimes are homogeneous of degree one. Besides evaluation and
//! gradients this module provides, for a buyer facing fixed prices, the best
//! affordable utility (the indirect or "fixed-price" utility) and a bundle
//! attaining it. Solvers use [`log_utility_grad`], which works in log space
//! through a log-sum-exp so that large or tiny `v_j x_j` do not overflow.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Distance from 0 or 1 below which a general exponent is flagged as
/// ill-conditioned.
const CONDITIONING_WINDOW: f64 = 1e-6;

/// Utility regime. `General` holds the exponent `alpha`, which lies in
/// `(-inf, 1)` and is not `0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CesSpec {
    Linear,
    General { alpha: f64 },
    CobbDouglas,
    Leontief,
}

impl CesSpec {
    pub fn general(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha >= 1.0 || alpha == 0.0 {
            return Err(Error::invalid(format!(
                "general CES exponent must be finite, below 1 and nonzero, got {alpha}"
            )));
        }
        if alpha.abs() < CONDITIONING_WINDOW || (1.0 - alpha).abs() < CONDITIONING_WINDOW {
            log::warn!(
                "CES exponent {alpha} is within {CONDITIONING_WINDOW} of a regime boundary; \
                 closed forms are ill-conditioned here"
            );
        }
        Ok(CesSpec::General { alpha })
    }

    /// Maps an exponent onto its regime: `1` is linear, `0` Cobb-Douglas and
    /// `-inf` Leontief.
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if alpha == 1.0 {
            Ok(CesSpec::Linear)
        } else if alpha == 0.0 {
            Ok(CesSpec::CobbDouglas)
        } else if alpha == f64::NEG_INFINITY {
            Ok(CesSpec::Leontief)
        } else {
            CesSpec::general(alpha)
        }
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            CesSpec::Linear => 1.0,
            CesSpec::General { alpha } => alpha,
            CesSpec::CobbDouglas => 0.0,
            CesSpec::Leontief => f64::NEG_INFINITY,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, CesSpec::Linear)
    }
}

impl fmt::Display for CesSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CesSpec::Linear => write!(f, "linear"),
            CesSpec::General { alpha } => write!(f, "ces(alpha={alpha})"),
            CesSpec::CobbDouglas => write!(f, "cobb-douglas"),
            CesSpec::Leontief => write!(f, "leontief"),
        }
    }
}

impl std::str::FromStr for CesSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(CesSpec::Linear),
            "cobb-douglas" | "cobbdouglas" => Ok(CesSpec::CobbDouglas),
            "leontief" | "-inf" | "-infinity" => Ok(CesSpec::Leontief),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("unrecognized utility regime '{s}'")))
                .and_then(CesSpec::from_alpha),
        }
    }
}

// Serialized as the exponent; Leontief uses the string "-inf" because JSON has
// no infinities.
impl Serialize for CesSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CesSpec::Leontief => serializer.serialize_str("-inf"),
            other => serializer.serialize_f64(other.alpha()),
        }
    }
}

impl<'de> Deserialize<'de> for CesSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let parsed = match Repr::deserialize(deserializer)? {
            Repr::Num(alpha) => CesSpec::from_alpha(alpha),
            Repr::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

fn check_bundle(values: &[f64], bundle: &[f64]) -> Result<()> {
    if values.len() != bundle.len() {
        return Err(Error::shape(format!("{} values but bundle of length {}", values.len(), bundle.len())));
    }
    if values.is_empty() {
        return Err(Error::invalid("empty bundle"));
    }
    for (j, &x) in bundle.iter().enumerate() {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(Error::invalid(format!("bundle component {j} is {x}; must be finite and >= 0")));
        }
    }
    Ok(())
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Utility of `bundle`. With a negative exponent, any zero component gives
/// utility zero, the limit of the CES form.
pub fn utility(values: &[f64], bundle: &[f64], spec: CesSpec) -> Result<f64> {
    check_bundle(values, bundle)?;
    Ok(match spec {
        CesSpec::Leontief => values.iter().zip(bundle).map(|(v, x)| v * x).fold(f64::INFINITY, f64::min),
        _ => log_utility_unchecked(values, bundle, spec).exp(),
    })
}

/// `log u(bundle)`, or `-inf` when the utility is zero.
pub fn log_utility(values: &[f64], bundle: &[f64], spec: CesSpec) -> Result<f64> {
    check_bundle(values, bundle)?;
    Ok(log_utility_unchecked(values, bundle, spec))
}

fn log_utility_unchecked(values: &[f64], bundle: &[f64], spec: CesSpec) -> f64 {
    match spec {
        CesSpec::Linear => values.iter().zip(bundle).map(|(v, x)| v * x).sum::<f64>().ln(),
        CesSpec::General { alpha } => {
            if alpha < 0.0 && bundle.contains(&0.0) {
                return f64::NEG_INFINITY;
            }
            let terms = values.iter().zip(bundle).map(move |(v, x)| alpha * (v * x).ln());
            log_sum_exp(terms) / alpha
        }
        CesSpec::CobbDouglas => {
            let total: f64 = values.iter().sum();
            values.iter().zip(bundle).map(|(v, x)| v * x.ln()).sum::<f64>() / total
        }
        CesSpec::Leontief => values.iter().zip(bundle).map(|(v, x)| v * x).fold(f64::INFINITY, f64::min).ln(),
    }
}

/// Writes `d log u / d x_j` into `grad` and returns `log u`.
///
/// The gradient is singular on the boundary of the orthant for the general
/// and Cobb-Douglas regimes, and wherever the utility is zero; those points
/// yield a domain error. Leontief returns the supergradient supported on the
/// lowest index attaining the minimum.
pub fn log_utility_grad(values: &[f64], bundle: &[f64], spec: CesSpec, grad: &mut [f64]) -> Result<f64> {
    check_bundle(values, bundle)?;
    if grad.len() != bundle.len() {
        return Err(Error::shape("gradient buffer length differs from bundle"));
    }
    let singular = || Error::Domain(format!("log-utility gradient is singular at {bundle:?} under {spec}"));
    match spec {
        CesSpec::Linear => {
            let total: f64 = values.iter().zip(bundle).map(|(v, x)| v * x).sum();
            if total <= 0.0 {
                return Err(singular());
            }
            for (g, v) in grad.iter_mut().zip(values) {
                *g = v / total;
            }
            Ok(total.ln())
        }
        CesSpec::General { alpha } => {
            if bundle.contains(&0.0) {
                return Err(singular());
            }
            // Softmax weights of alpha*log(v x): d log u / d x_j = w_j / x_j.
            let mut max = f64::NEG_INFINITY;
            for ((g, v), x) in grad.iter_mut().zip(values).zip(bundle) {
                *g = alpha * (v * x).ln();
                max = max.max(*g);
            }
            let mut sum = 0.0;
            for g in grad.iter_mut() {
                *g = (*g - max).exp();
                sum += *g;
            }
            for (g, x) in grad.iter_mut().zip(bundle) {
                *g /= sum * x;
            }
            Ok((max + sum.ln()) / alpha)
        }
        CesSpec::CobbDouglas => {
            if bundle.contains(&0.0) {
                return Err(singular());
            }
            let total: f64 = values.iter().sum();
            let mut log_u = 0.0;
            for ((g, v), x) in grad.iter_mut().zip(values).zip(bundle) {
                let w = v / total;
                log_u += w * x.ln();
                *g = w / x;
            }
            Ok(log_u)
        }
        CesSpec::Leontief => {
            let (argmin, min) = leontief_argmin(values, bundle);
            if min <= 0.0 {
                return Err(singular());
            }
            grad.fill(0.0);
            grad[argmin] = 1.0 / bundle[argmin];
            Ok(min.ln())
        }
    }
}

fn leontief_argmin(values: &[f64], bundle: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, (v, x)) in values.iter().zip(bundle).enumerate() {
        let t = v * x;
        if t < best.1 {
            best = (j, t);
        }
    }
    best
}

/// `du / dx_j`. Satisfies Euler's identity `<grad u(x), x> = u(x)`.
pub fn utility_gradient(values: &[f64], bundle: &[f64], spec: CesSpec) -> Result<Vec<f64>> {
    check_bundle(values, bundle)?;
    match spec {
        CesSpec::Linear => Ok(values.to_vec()),
        CesSpec::Leontief => {
            let (argmin, _) = leontief_argmin(values, bundle);
            let mut grad = vec![0.0; values.len()];
            grad[argmin] = values[argmin];
            Ok(grad)
        }
        CesSpec::General { .. } | CesSpec::CobbDouglas => {
            if bundle.iter().any(|&x| x <= 0.0) {
                return Err(Error::Domain(format!("{spec} gradient requires a strictly positive bundle")));
            }
            let mut grad = vec![0.0; values.len()];
            let u = log_utility_grad(values, bundle, spec, &mut grad)?.exp();
            grad.iter_mut().for_each(|g| *g *= u);
            Ok(grad)
        }
    }
}

/// One buyer facing fixed prices: valuations, budget and the price vector.
#[derive(Clone, Copy, Debug)]
pub struct BuyerProblem<'a> {
    values: &'a [f64],
    budget: f64,
    prices: &'a [f64],
}

impl<'a> BuyerProblem<'a> {
    pub fn new(values: &'a [f64], budget: f64, prices: &'a [f64]) -> Result<Self> {
        if values.len() != prices.len() || values.is_empty() {
            return Err(Error::shape(format!("{} values but {} prices", values.len(), prices.len())));
        }
        if let Some((good, &price)) = prices.iter().enumerate().find(|(_, &p)| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidPrice { good, price });
        }
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(Error::invalid(format!("budget must be positive, got {budget}")));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("valuations must be positive and finite"));
        }
        Ok(BuyerProblem { values, budget, prices })
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn prices(&self) -> &'a [f64] {
        self.prices
    }
}

/// Exponent `alpha / (1 - alpha)` of the general-regime demand system.
fn demand_exponent(alpha: f64) -> f64 {
    alpha / (1.0 - alpha)
}

/// `log c0` with `c0 = sum_j (v_j / p_j)^(alpha / (1 - alpha))`.
fn log_c0(problem: &BuyerProblem<'_>, alpha: f64) -> f64 {
    let r = demand_exponent(alpha);
    log_sum_exp(problem.values.iter().zip(problem.prices).map(move |(v, p)| r * (v / p).ln()))
}

/// Logarithm of the best utility affordable at the problem's prices.
pub fn fixed_price_log_utility(problem: &BuyerProblem<'_>, spec: CesSpec) -> f64 {
    let BuyerProblem { values, budget, prices } = *problem;
    let log_b = budget.ln();
    match spec {
        CesSpec::Linear => {
            log_b + values.iter().zip(prices).map(|(v, p)| (v / p).ln()).fold(f64::NEG_INFINITY, f64::max)
        }
        CesSpec::CobbDouglas => {
            let total: f64 = values.iter().sum();
            log_b + values.iter().zip(prices).map(|(v, p)| (v / total) * (v / (p * total)).ln()).sum::<f64>()
        }
        CesSpec::Leontief => log_b - values.iter().zip(prices).map(|(v, p)| p / v).sum::<f64>().ln(),
        CesSpec::General { alpha } => log_b + (1.0 - alpha) / alpha * log_c0(problem, alpha),
    }
}

/// A utility-maximizing affordable bundle. It spends the whole budget.
///
/// Linear buyers put everything on the lowest-index good with the best
/// value-per-price ratio.
pub fn demand(problem: &BuyerProblem<'_>, spec: CesSpec) -> Vec<f64> {
    let BuyerProblem { values, budget, prices } = *problem;
    match spec {
        CesSpec::Linear => {
            let mut best = 0;
            for j in 1..values.len() {
                if values[j] / prices[j] > values[best] / prices[best] {
                    best = j;
                }
            }
            let mut x = vec![0.0; values.len()];
            x[best] = budget / prices[best];
            x
        }
        CesSpec::CobbDouglas => {
            let total: f64 = values.iter().sum();
            values.iter().zip(prices).map(|(v, p)| v / total * budget / p).collect()
        }
        CesSpec::Leontief => {
            let level = budget / values.iter().zip(prices).map(|(v, p)| p / v).sum::<f64>();
            values.iter().map(|v| level / v).collect()
        }
        CesSpec::General { alpha } => {
            let r = demand_exponent(alpha);
            let shift = budget.ln() - log_c0(problem, alpha);
            values.iter().zip(prices).map(|(v, p)| (r * v.ln() - p.ln() / (1.0 - alpha) + shift).exp()).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn utility_examples() {
        let half = CesSpec::general(0.5).unwrap();
        assert!(rel(utility(&[1.0, 1.0], &[1.0, 1.0], half).unwrap(), 4.0) < 1e-14);
        assert_eq!(utility(&[2.0, 3.0], &[1.0, 0.0], CesSpec::Leontief).unwrap(), 0.0);
        let cd = utility(&[1.0, 2.0], &[2.0, 1.0], CesSpec::CobbDouglas).unwrap();
        assert!((cd - 1.259_921_049_894_873).abs() < 1e-12);
    }

    #[test]
    fn negative_exponent_with_zero_component_is_zero() {
        let spec = CesSpec::general(-1.0).unwrap();
        assert_eq!(utility(&[1.0, 2.0], &[0.0, 3.0], spec).unwrap(), 0.0);
        assert_eq!(log_utility(&[1.0, 2.0], &[0.0, 3.0], spec).unwrap(), f64::NEG_INFINITY);
        // alpha = -1 is a weighted harmonic form: (1/(v1 x1) + 1/(v2 x2))^-1.
        let u = utility(&[1.0, 2.0], &[1.0, 1.0], spec).unwrap();
        assert!(rel(u, 1.0 / (1.0 + 0.5)) < 1e-14);
    }

    #[test]
    fn negative_bundle_rejected() {
        assert!(matches!(utility(&[1.0], &[-1.0], CesSpec::Linear), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(utility_gradient(&[1.0, 1.0], &[1.0, 1.0], CesSpec::Linear).unwrap(), vec![1.0, 1.0]);
        let half = CesSpec::general(0.5).unwrap();
        let g = utility_gradient(&[1.0, 1.0], &[1.0, 1.0], half).unwrap();
        // u^(1-a) v^a x^(a-1) = 2 at the symmetric point; Euler gives 2 + 2 = u = 4.
        assert!(rel(g[0], 2.0) < 1e-14 && rel(g[1], 2.0) < 1e-14);
        assert_eq!(utility_gradient(&[1.0, 2.0], &[4.0, 1.0], CesSpec::Leontief).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn leontief_ties_pick_lowest_index() {
        assert_eq!(utility_gradient(&[1.0, 2.0], &[2.0, 1.0], CesSpec::Leontief).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn gradient_on_boundary_is_a_domain_error() {
        for spec in [CesSpec::CobbDouglas, CesSpec::general(0.5).unwrap()] {
            assert!(matches!(utility_gradient(&[1.0, 1.0], &[0.0, 1.0], spec), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn fixed_price_examples() {
        let p = [1.0, 1.0];
        let lin = BuyerProblem::new(&[2.0, 1.0], 1.0, &p).unwrap();
        assert!((fixed_price_log_utility(&lin, CesSpec::Linear) - 2f64.ln()).abs() < 1e-15);
        let sym = BuyerProblem::new(&[1.0, 1.0], 1.0, &p).unwrap();
        assert!((fixed_price_log_utility(&sym, CesSpec::CobbDouglas) - 0.5f64.ln()).abs() < 1e-15);
        let half = CesSpec::general(0.5).unwrap();
        assert!((fixed_price_log_utility(&sym, half) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn general_fixed_price_matches_numeric_maximizer() {
        // Brute-force the budget line x = (t, 1 - t) at unit prices: the best
        // utility is 2 at t = 1/2.
        let half = CesSpec::general(0.5).unwrap();
        let best = (1..200_000)
            .map(|i| {
                let t = i as f64 / 200_000.0;
                utility(&[1.0, 1.0], &[t, 1.0 - t], half).unwrap()
            })
            .fold(0.0, f64::max);
        let sym = BuyerProblem::new(&[1.0, 1.0], 1.0, &[1.0, 1.0]).unwrap();
        assert!((fixed_price_log_utility(&sym, half).exp() - best).abs() < 1e-8);
    }

    #[test]
    fn demand_examples() {
        let p = [1.0, 1.0];
        let lin = BuyerProblem::new(&[2.0, 1.0], 1.0, &p).unwrap();
        assert_eq!(demand(&lin, CesSpec::Linear), vec![1.0, 0.0]);
        let sym = BuyerProblem::new(&[1.0, 1.0], 1.0, &p).unwrap();
        assert_eq!(demand(&sym, CesSpec::Leontief), vec![0.5, 0.5]);
        let cd = BuyerProblem::new(&[1.0, 3.0], 2.0, &[1.0, 2.0]).unwrap();
        let x = demand(&cd, CesSpec::CobbDouglas);
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 0.75).abs() < 1e-15);
        assert!((x[0] * 1.0 + x[1] * 2.0 - 2.0).abs() < 1e-15);
        // First-order conditions: (B/u) du/dx_j equals p_j.
        let u = utility(&[1.0, 3.0], &x, CesSpec::CobbDouglas).unwrap();
        let g = utility_gradient(&[1.0, 3.0], &x, CesSpec::CobbDouglas).unwrap();
        assert!(rel(2.0 / u * g[0], 1.0) < 1e-12 && rel(2.0 / u * g[1], 2.0) < 1e-12);
    }

    #[test]
    fn linear_demand_ties_pick_lowest_index() {
        let tie = BuyerProblem::new(&[1.0, 2.0], 1.0, &[1.0, 2.0]).unwrap();
        assert_eq!(demand(&tie, CesSpec::Linear), vec![1.0, 0.0]);
    }

    #[test]
    fn invalid_prices_rejected() {
        assert!(matches!(BuyerProblem::new(&[1.0, 1.0], 1.0, &[1.0, 0.0]), Err(Error::InvalidPrice { good: 1, .. })));
        assert!(matches!(BuyerProblem::new(&[1.0, 1.0], 1.0, &[-1.0, 1.0]), Err(Error::InvalidPrice { good: 0, .. })));
    }

    #[test]
    fn regime_parsing_and_serde() {
        assert_eq!(CesSpec::from_alpha(1.0).unwrap(), CesSpec::Linear);
        assert_eq!(CesSpec::from_alpha(0.0).unwrap(), CesSpec::CobbDouglas);
        assert_eq!("leontief".parse::<CesSpec>().unwrap(), CesSpec::Leontief);
        assert!(CesSpec::general(1.5).is_err());
        assert!(CesSpec::general(0.0).is_err());
        for spec in [CesSpec::Linear, CesSpec::CobbDouglas, CesSpec::Leontief, CesSpec::general(-2.5).unwrap()] {
            let json = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<CesSpec>(&json).unwrap(), spec);
        }
        assert_eq!(serde_json::to_string(&CesSpec::Leontief).unwrap(), "\"-inf\"");
    }
}
