//! Reference equilibria for small markets: the Cobb-Douglas closed form, the
//! one-buyer one-good case, and a long, tightly configured gradient solve
//! that only returns once its answer is certified by the Nash gap and the
//! KKT residuals.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::baselines::{EgConfig, EgSolver, Parameterization, PriceInit, StepSchedule};
use crate::ces::CesSpec;
use crate::error::{Error, Result};
use crate::market::Market;
use crate::metrics::{self, EquilibriumCandidate};

/// Largest market [`numeric_equilibrium`] accepts.
pub const NUMERIC_MAX_BUYERS: usize = 200;
pub const NUMERIC_MAX_GOODS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    ClosedForm,
    Numeric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub candidate: EquilibriumCandidate,
    pub certified_ng: f64,
    pub kkt_residual: f64,
    pub method: OracleMethod,
}

/// Certification thresholds for [`numeric_equilibrium`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTolerance {
    pub ng: f64,
    pub kkt: f64,
    /// Epoch budget of the underlying solve.
    pub max_epochs: usize,
}

impl Default for OracleTolerance {
    fn default() -> Self {
        OracleTolerance { ng: 1e-6, kkt: 1e-4, max_epochs: 4000 }
    }
}

fn certify(market: &Market, candidate: EquilibriumCandidate, method: OracleMethod) -> Result<OracleResult> {
    let certified_ng = metrics::nash_gap(market, candidate.allocation.view(), &candidate.prices)?;
    let kkt_residual = metrics::kkt_residuals(market, &candidate)?;
    Ok(OracleResult { candidate, certified_ng, kkt_residual, method })
}

/// `p_j = (1/Y_j) sum_i B_i v_ij / v_t,i` and `x_ij = (v_ij / v_t,i) B_i / p_j`,
/// where `v_t,i` is buyer `i`'s total valuation.
pub fn cobb_douglas_equilibrium(market: &Market) -> Result<OracleResult> {
    if market.ces() != CesSpec::CobbDouglas {
        return Err(Error::UnsupportedRegime {
            regime: market.ces().to_string(),
            operation: "closed-form Cobb-Douglas equilibrium",
        });
    }
    let (n, m) = (market.n(), market.m());
    let mut shares = Array2::zeros((n, m));
    for i in 0..n {
        let v = market.buyer_values(i);
        let total: f64 = v.iter().sum();
        for j in 0..m {
            shares[[i, j]] = v[j] / total;
        }
    }
    let budgets = market.budgets();
    let prices: Vec<f64> =
        (0..m).map(|j| (0..n).map(|i| budgets[i] * shares[[i, j]]).sum::<f64>() / market.supplies()[j]).collect();
    let allocation = Array2::from_shape_fn((n, m), |(i, j)| shares[[i, j]] * budgets[i] / prices[j]);
    certify(market, EquilibriumCandidate::new(allocation, prices)?, OracleMethod::ClosedForm)
}

/// One buyer and one good: the buyer takes the whole supply and spends the
/// whole budget, whatever the utility.
pub fn single_pair_equilibrium(market: &Market) -> Result<OracleResult> {
    if market.n() != 1 || market.m() != 1 {
        return Err(Error::shape(format!("expected a 1 x 1 market, got {} x {}", market.n(), market.m())));
    }
    let supply = market.supplies()[0];
    let candidate = EquilibriumCandidate::new(Array2::from_elem((1, 1), supply), vec![market.budgets()[0] / supply])?;
    Ok(OracleResult { candidate, certified_ng: 0.0, kkt_residual: 0.0, method: OracleMethod::ClosedForm })
}

/// The solver configuration the numeric oracle runs with.
pub fn numeric_config(market: &Market) -> EgConfig {
    let linear = market.ces().is_linear();
    EgConfig {
        // The Lagrangian carries a 1/n factor, so the step scales with n.
        learning_rate: 0.25 * market.n() as f64,
        momentum: 0.9,
        inner_iters: 200,
        epochs: usize::MAX,
        rho: 1.0,
        schedule: StepSchedule::Constant(1.0),
        early_stop: None,
        parameterization: if linear { Parameterization::Projected } else { Parameterization::Softplus },
        price_init: PriceInit::Naive,
        evaluate_epochs: false,
    }
}

/// Solves the Eisenberg-Gale program to high accuracy and returns the
/// projected candidate once its Nash gap and KKT residual are both below
/// `tol`. Fails with [`Error::OracleFailure`] otherwise.
pub fn numeric_equilibrium(market: &Market, tol: OracleTolerance) -> Result<OracleResult> {
    if market.n() > NUMERIC_MAX_BUYERS || market.m() > NUMERIC_MAX_GOODS {
        return Err(Error::invalid(format!(
            "numeric oracle is limited to {NUMERIC_MAX_BUYERS} buyers and {NUMERIC_MAX_GOODS} goods, got {} x {}",
            market.n(),
            market.m()
        )));
    }
    if market.ces() == CesSpec::Leontief {
        return Err(Error::UnsupportedRegime { regime: market.ces().to_string(), operation: "numeric equilibrium" });
    }
    let mut solver = EgSolver::new(market, numeric_config(market))?;
    let mut last = (f64::INFINITY, f64::INFINITY);
    for _ in 0..tol.max_epochs {
        solver.run_epoch().map_err(|e| Error::OracleFailure(e.to_string()))?;
        if solver.multipliers().iter().any(|&l| !(l > 0.0)) {
            continue;
        }
        let projected = metrics::project(market, solver.allocation().view(), solver.multipliers())?.candidate();
        let ng = metrics::nash_gap(market, projected.allocation.view(), &projected.prices)?;
        last.0 = ng;
        if ng > tol.ng {
            continue;
        }
        let kkt = metrics::kkt_residuals(market, &projected)?;
        last.1 = kkt;
        if kkt <= tol.kkt {
            return Ok(OracleResult {
                candidate: projected,
                certified_ng: ng.max(0.0),
                kkt_residual: kkt,
                method: OracleMethod::Numeric,
            });
        }
    }
    Err(Error::OracleFailure(format!(
        "no certified equilibrium after {} epochs (last NG {:e}, last KKT {:e})",
        tol.max_epochs, last.0, last.1
    )))
}

/// Closed form where one exists, numeric solve otherwise.
pub fn equilibrium(market: &Market, tol: OracleTolerance) -> Result<OracleResult> {
    if market.n() == 1 && market.m() == 1 {
        single_pair_equilibrium(market)
    } else if market.ces() == CesSpec::CobbDouglas {
        cobb_douglas_equilibrium(market)
    } else {
        numeric_equilibrium(market, tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::ContextDistribution;
    use ndarray::array;

    #[test]
    fn symmetric_cobb_douglas() {
        let market = Market::from_tables(
            &[1.0, 1.0],
            array![[1.0, 1.0], [1.0, 1.0]].view(),
            CesSpec::CobbDouglas,
            Some(vec![2.0, 2.0]),
        )
        .unwrap();
        let r = cobb_douglas_equilibrium(&market).unwrap();
        for &p in &r.candidate.prices {
            assert!((p - 0.5).abs() < 1e-14);
        }
        for &x in r.candidate.allocation.iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
        assert!(r.certified_ng <= 1e-10);
    }

    #[test]
    fn asymmetric_cobb_douglas() {
        let market = Market::from_tables(
            &[1.0, 1.0],
            array![[1.0, 3.0], [3.0, 1.0]].view(),
            CesSpec::CobbDouglas,
            Some(vec![2.0, 2.0]),
        )
        .unwrap();
        let r = cobb_douglas_equilibrium(&market).unwrap();
        assert!((r.candidate.prices[0] - 0.5).abs() < 1e-12 && (r.candidate.prices[1] - 0.5).abs() < 1e-12);
        let x = &r.candidate.allocation;
        assert!((x[[0, 0]] - 0.5).abs() < 1e-12 && (x[[0, 1]] - 1.5).abs() < 1e-12);
        assert!((x[[1, 0]] - 1.5).abs() < 1e-12 && (x[[1, 1]] - 0.5).abs() < 1e-12);
        assert!(r.certified_ng.abs() <= 1e-10);
    }

    #[test]
    fn single_buyer_cobb_douglas() {
        let market =
            Market::from_tables(&[2.0], array![[1.0, 3.0]].view(), CesSpec::CobbDouglas, Some(vec![4.0, 0.5])).unwrap();
        let r = cobb_douglas_equilibrium(&market).unwrap();
        assert!((r.candidate.prices[0] - 2.0 * 0.25 / 4.0).abs() < 1e-14);
        assert!((r.candidate.prices[1] - 2.0 * 0.75 / 0.5).abs() < 1e-14);
    }

    #[test]
    fn regime_mismatch() {
        let market = Market::generate(2, 2, 2, ContextDistribution::StandardNormal, CesSpec::Linear, 0).unwrap();
        assert!(matches!(cobb_douglas_equilibrium(&market), Err(Error::UnsupportedRegime { .. })));
    }

    #[test]
    fn single_pair() {
        for (b, y, p) in [(1.0, 1.0, 1.0), (3.0, 2.0, 1.5)] {
            for spec in [CesSpec::Linear, CesSpec::CobbDouglas, CesSpec::Leontief] {
                let market = Market::from_tables(&[b], array![[1.0]].view(), spec, Some(vec![y])).unwrap();
                let r = single_pair_equilibrium(&market).unwrap();
                assert_eq!(r.candidate.prices, vec![p]);
                assert_eq!(r.candidate.allocation[[0, 0]], y);
                assert_eq!(r.certified_ng, 0.0);
            }
        }
        let market = Market::generate(2, 1, 2, ContextDistribution::StandardNormal, CesSpec::Linear, 0).unwrap();
        assert!(matches!(single_pair_equilibrium(&market), Err(Error::Shape(_))));
    }

    #[test]
    fn numeric_size_limit() {
        let market = Market::generate(201, 2, 2, ContextDistribution::StandardNormal, CesSpec::Linear, 0).unwrap();
        assert!(numeric_equilibrium(&market, OracleTolerance::default()).is_err());
    }
}
