//! Certifying how far a candidate `(x, p)` is from market equilibrium.
//!
//! The Nash gap `NG = LFW(p) - LNW(x)` compares the welfare buyers could
//! afford at prices `p` with the welfare they actually receive under `x`.
//! On pairs that clear the market and satisfy `sum_j p_j Y_j = sum_i B_i` it
//! is nonnegative and vanishes exactly at equilibrium. Arbitrary positive
//! pairs are first projected onto that set by rescaling each good's column
//! and the price level; the log-sizes of those rescalings are the violation
//! measures `VoA` and `VoP`.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::ces::{self, BuyerProblem, CesSpec};
use crate::error::{Error, Result};
use crate::market::Market;

/// Relative tolerance on clearance and on the price identity before a pair
/// is accepted by [`nash_gap`].
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Scale of the active-set threshold `eps_ij = KKT_ACTIVE_SCALE * B_i / p_j`.
pub const KKT_ACTIVE_SCALE: f64 = 1e-8;

/// An allocation matrix (n x m) together with a price per good.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CandidateFile", into = "CandidateFile")]
pub struct EquilibriumCandidate {
    pub allocation: Array2<f64>,
    pub prices: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CandidateFile {
    allocation: Vec<Vec<f64>>,
    prices: Vec<f64>,
}

impl From<EquilibriumCandidate> for CandidateFile {
    fn from(c: EquilibriumCandidate) -> Self {
        CandidateFile { allocation: c.allocation.rows().into_iter().map(|r| r.to_vec()).collect(), prices: c.prices }
    }
}

impl TryFrom<CandidateFile> for EquilibriumCandidate {
    type Error = Error;

    fn try_from(f: CandidateFile) -> Result<Self> {
        let n = f.allocation.len();
        let m = f.allocation.first().map_or(0, Vec::len);
        if f.allocation.iter().any(|r| r.len() != m) {
            return Err(Error::shape("allocation rows have different lengths"));
        }
        let allocation = Array2::from_shape_vec((n, m), f.allocation.concat()).expect("checked shape");
        EquilibriumCandidate::new(allocation, f.prices)
    }
}

impl EquilibriumCandidate {
    pub fn new(allocation: Array2<f64>, prices: Vec<f64>) -> Result<Self> {
        if allocation.ncols() != prices.len() {
            return Err(Error::shape(format!(
                "allocation has {} goods but {} prices were given",
                allocation.ncols(),
                prices.len()
            )));
        }
        if allocation.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::invalid("allocation entries must be finite and nonnegative"));
        }
        if prices.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("prices must be finite"));
        }
        Ok(EquilibriumCandidate { allocation, prices })
    }

    pub fn check_against(&self, market: &Market) -> Result<()> {
        check_allocation(market, self.allocation.view())?;
        check_prices_len(market, &self.prices)
    }
}

fn check_allocation(market: &Market, x: ArrayView2<'_, f64>) -> Result<()> {
    if x.dim() != (market.n(), market.m()) {
        return Err(Error::shape(format!(
            "allocation is {:?} but the market is {}x{}",
            x.dim(),
            market.n(),
            market.m()
        )));
    }
    if x.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid("allocation entries must be finite and nonnegative"));
    }
    Ok(())
}

fn check_prices_len(market: &Market, p: &[f64]) -> Result<()> {
    if p.len() != market.m() {
        return Err(Error::shape(format!("{} prices for {} goods", p.len(), market.m())));
    }
    Ok(())
}

fn check_positive_prices(market: &Market, p: &[f64]) -> Result<()> {
    check_prices_len(market, p)?;
    match p.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
        Some((good, &price)) => Err(Error::InvalidPrice { good, price }),
        None => Ok(()),
    }
}

/// Log Nash welfare `(1 / B_total) sum_i B_i log u_i(x_i)`. Returns `-inf`
/// if some buyer has zero utility.
pub fn lnw(market: &Market, x: ArrayView2<'_, f64>) -> Result<f64> {
    check_allocation(market, x)?;
    let spec = market.ces();
    let mut acc = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let bundle = row.to_vec();
        acc += market.budgets()[i] * ces::log_utility(market.buyer_values(i), &bundle, spec)?;
    }
    Ok(acc / market.total_budget())
}

/// Log fixed-price welfare `(1 / B_total) sum_i B_i log u~_i(p)`.
pub fn lfw(market: &Market, p: &[f64]) -> Result<f64> {
    check_positive_prices(market, p)?;
    let spec = market.ces();
    let mut acc = 0.0;
    for i in 0..market.n() {
        let problem = BuyerProblem::new(market.buyer_values(i), market.budgets()[i], p)?;
        acc += market.budgets()[i] * ces::fixed_price_log_utility(&problem, spec);
    }
    Ok(acc / market.total_budget())
}

/// Budget-weighted mean utility.
pub fn wsw(market: &Market, x: ArrayView2<'_, f64>) -> Result<f64> {
    check_allocation(market, x)?;
    let spec = market.ces();
    let mut acc = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        acc += market.budgets()[i] * ces::utility(market.buyer_values(i), &row.to_vec(), spec)?;
    }
    Ok(acc / market.total_budget())
}

/// `(sum_j p_j Y_j - sum_i B_i) / sum_i B_i`.
pub fn price_residual(market: &Market, p: &[f64]) -> Result<f64> {
    check_prices_len(market, p)?;
    let spent: f64 = p.iter().zip(market.supplies()).map(|(p, y)| p * y).sum();
    let total = market.total_budget();
    Ok((spent - total) / total)
}

/// `NG(x, p) = LFW(p) - LNW(x)` for a pair that clears the market and meets
/// the price identity to relative [`FEASIBILITY_TOL`].
pub fn nash_gap(market: &Market, x: ArrayView2<'_, f64>, p: &[f64]) -> Result<f64> {
    check_allocation(market, x)?;
    check_positive_prices(market, p)?;
    for (j, (col, y)) in x.axis_iter(Axis(1)).zip(market.supplies()).enumerate() {
        let sold: f64 = col.sum();
        if (sold - y).abs() > FEASIBILITY_TOL * y {
            return Err(Error::ConstraintViolation(format!("good {j} allocates {sold} units against supply {y}")));
        }
    }
    let residual = price_residual(market, p)?;
    if residual.abs() > FEASIBILITY_TOL {
        return Err(Error::ConstraintViolation(format!(
            "prices value the supply at {:+e} relative to total budget",
            residual
        )));
    }
    Ok(lfw(market, p)? - lnw(market, x)?)
}

/// A candidate rescaled onto the clearance and price-identity constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub allocation: Array2<f64>,
    pub prices: Vec<f64>,
    /// Per-good allocation scale `Y_j / sum_i x_ij`.
    pub column_scales: Vec<f64>,
    /// Price scale `sum_i B_i / sum_j Y_j p_j`.
    pub price_scale: f64,
    pub voa: f64,
    pub vop: f64,
}

impl Projection {
    pub fn candidate(&self) -> EquilibriumCandidate {
        EquilibriumCandidate { allocation: self.allocation.clone(), prices: self.prices.clone() }
    }
}

pub fn project(market: &Market, x: ArrayView2<'_, f64>, p: &[f64]) -> Result<Projection> {
    check_allocation(market, x)?;
    check_prices_len(market, p)?;
    let mut column_scales = Vec::with_capacity(market.m());
    for (j, (col, y)) in x.axis_iter(Axis(1)).zip(market.supplies()).enumerate() {
        let sold: f64 = col.sum();
        if !(sold > 0.0) {
            return Err(Error::ProjectionUndefined(format!("nothing of good {j} is allocated")));
        }
        column_scales.push(y / sold);
    }
    let valued: f64 = p.iter().zip(market.supplies()).map(|(p, y)| p * y).sum();
    if !(valued > 0.0 && valued.is_finite()) {
        return Err(Error::ProjectionUndefined(format!("supply is valued at {valued}")));
    }
    let price_scale = market.total_budget() / valued;
    let mut allocation = x.to_owned();
    for (mut col, s) in allocation.axis_iter_mut(Axis(1)).zip(&column_scales) {
        col.mapv_inplace(|v| v * s);
    }
    let prices = p.iter().map(|v| v * price_scale).collect();
    let voa = column_scales.iter().map(|a| a.ln().abs()).sum::<f64>() / market.m() as f64;
    Ok(Projection { allocation, prices, column_scales, price_scale, voa, vop: price_scale.ln().abs() })
}

/// Largest violation of the equilibrium conditions, each measured relative
/// to the price or budget it concerns:
///
/// - `max(0, r_ij - p_j) / p_j` where `r_ij = B_i d log u_i / d x_ij`,
/// - `|r_ij - p_j| / p_j` where `x_ij > 1e-8 B_i / p_j`,
/// - `|<p, x_i> - B_i| / B_i`.
///
/// Undefined for Leontief utilities, whose marginals are not unique.
pub fn kkt_residuals(market: &Market, candidate: &EquilibriumCandidate) -> Result<f64> {
    candidate.check_against(market)?;
    let spec = market.ces();
    if spec == CesSpec::Leontief {
        return Err(Error::UnsupportedRegime { regime: spec.to_string(), operation: "kkt_residuals" });
    }
    let p = &candidate.prices;
    check_positive_prices(market, p)?;
    let mut worst: f64 = 0.0;
    let mut grad = vec![0.0; market.m()];
    for (i, row) in candidate.allocation.rows().into_iter().enumerate() {
        let bundle = row.to_vec();
        let b = market.budgets()[i];
        let spent: f64 = bundle.iter().zip(p).map(|(x, p)| x * p).sum();
        worst = worst.max((spent - b).abs() / b);
        if ces::log_utility_grad(market.buyer_values(i), &bundle, spec, &mut grad).is_err() {
            // Zero utility or an empty coordinate under a singular regime:
            // marginal utility is unbounded there.
            return Ok(f64::INFINITY);
        }
        for j in 0..market.m() {
            let ratio = (b * grad[j] - p[j]) / p[j];
            worst = worst.max(ratio.max(0.0));
            if bundle[j] > KKT_ACTIVE_SCALE * b / p[j] {
                worst = worst.max(ratio.abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Log Nash welfare of the projected allocation.
    pub lnw: f64,
    /// Log fixed-price welfare of the projected prices.
    pub lfw: f64,
    /// Nash gap of the projected pair (`+inf` when some utility is zero).
    pub ng: f64,
    pub voa: f64,
    pub vop: f64,
    /// Budget-weighted mean utility of the projected allocation.
    pub wsw: f64,
    /// Relative price-identity residual of the raw prices.
    pub price_residual: f64,
    /// KKT residual of the projected pair; absent for Leontief markets.
    pub kkt_max_residual: Option<f64>,
    /// Set when some buyer's utility is zero and `lnw` is `-inf`.
    pub zero_utility: bool,
}

impl MetricsReport {
    pub const CSV_COLUMNS: [&'static str; 8] =
        ["lnw", "lfw", "ng", "voa", "vop", "wsw", "price_residual", "kkt_max_residual"];

    pub fn csv_fields(&self) -> [String; 8] {
        [
            self.lnw.to_string(),
            self.lfw.to_string(),
            self.ng.to_string(),
            self.voa.to_string(),
            self.vop.to_string(),
            self.wsw.to_string(),
            self.price_residual.to_string(),
            self.kkt_max_residual.map(|v| v.to_string()).unwrap_or_default(),
        ]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_COLUMNS)?;
        w.write_record(self.csv_fields())?;
        w.flush()?;
        Ok(())
    }
}

/// Projects the candidate and evaluates every measure on the result.
pub fn evaluate(market: &Market, candidate: &EquilibriumCandidate) -> Result<MetricsReport> {
    candidate.check_against(market)?;
    check_positive_prices(market, &candidate.prices)?;
    let projected = project(market, candidate.allocation.view(), &candidate.prices)?;
    let lnw_value = lnw(market, projected.allocation.view())?;
    let lfw_value = lfw(market, &projected.prices)?;
    let kkt = match market.ces() {
        CesSpec::Leontief => None,
        _ => Some(kkt_residuals(market, &projected.candidate())?),
    };
    Ok(MetricsReport {
        lnw: lnw_value,
        lfw: lfw_value,
        ng: lfw_value - lnw_value,
        voa: projected.voa,
        vop: projected.vop,
        wsw: wsw(market, projected.allocation.view())?,
        price_residual: price_residual(market, &candidate.prices)?,
        kkt_max_residual: kkt,
        zero_utility: lnw_value == f64::NEG_INFINITY,
    })
}

/// Projected Nash gap with its violation measures, for training curves.
pub fn projected_gap(market: &Market, x: ArrayView2<'_, f64>, p: &[f64]) -> Result<(f64, f64, f64)> {
    check_positive_prices(market, p)?;
    let projected = project(market, x, p)?;
    let ng = lfw(market, &projected.prices)? - lnw(market, projected.allocation.view())?;
    Ok((ng, projected.voa, projected.vop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn symmetric_cd() -> Market {
        Market::from_tables(&[1.0, 1.0], array![[1.0, 1.0], [1.0, 1.0]].view(), CesSpec::CobbDouglas, None).unwrap()
    }

    fn unit_market(spec: CesSpec) -> Market {
        Market::from_tables(&[1.0], array![[1.0]].view(), spec, None).unwrap()
    }

    #[test]
    fn welfare_examples() {
        let one = unit_market(CesSpec::Linear);
        assert!(lnw(&one, array![[1.0]].view()).unwrap().abs() < 1e-15);
        assert!(lfw(&one, &[1.0]).unwrap().abs() < 1e-15);
        assert!((wsw(&one, array![[1.0]].view()).unwrap() - 1.0).abs() < 1e-15);

        let sym = symmetric_cd();
        let ones = Array2::ones((2, 2));
        assert!(lnw(&sym, ones.view()).unwrap().abs() < 1e-15);
        assert!(lfw(&sym, &[0.5, 0.5]).unwrap().abs() < 1e-15);
        assert!((wsw(&sym, ones.view()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_utility_gives_minus_infinity() {
        let sym = symmetric_cd();
        let x = array![[0.0, 2.0], [2.0, 0.0]];
        assert_eq!(lnw(&sym, x.view()).unwrap(), f64::NEG_INFINITY);
        let report = evaluate(&sym, &EquilibriumCandidate::new(x, vec![0.5, 0.5]).unwrap()).unwrap();
        assert!(report.zero_utility);
        assert_eq!(report.ng, f64::INFINITY);
    }

    #[test]
    fn lfw_rejects_nonpositive_prices() {
        assert!(matches!(lfw(&symmetric_cd(), &[0.5, 0.0]), Err(Error::InvalidPrice { good: 1, .. })));
    }

    #[test]
    fn projection_examples() {
        let sym = symmetric_cd();
        let ones = Array2::ones((2, 2));
        let id = project(&sym, ones.view(), &[0.5, 0.5]).unwrap();
        assert_eq!(id.allocation, ones);
        assert_eq!(id.prices, vec![0.5, 0.5]);
        assert_eq!((id.voa, id.vop), (0.0, 0.0));

        let doubled = project(&sym, (&ones * 2.0).view(), &[0.5, 0.5]).unwrap();
        assert_eq!(doubled.column_scales, vec![0.5, 0.5]);
        assert!((doubled.voa - 2f64.ln()).abs() < 1e-15);

        // Sum of budgets 2, unit supplies, p = (1, 3): beta = 2 / 4.
        let unit_supply = Market::from_tables(
            &[1.0, 1.0],
            array![[1.0, 1.0], [1.0, 1.0]].view(),
            CesSpec::CobbDouglas,
            Some(vec![1.0, 1.0]),
        )
        .unwrap();
        let pp = project(&unit_supply, ones.view(), &[1.0, 3.0]).unwrap();
        assert_eq!(pp.price_scale, 0.5);
        assert_eq!(pp.prices, vec![0.5, 1.5]);
        assert!((pp.vop - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn projection_undefined_cases() {
        let sym = symmetric_cd();
        let empty_good = array![[1.0, 0.0], [1.0, 0.0]];
        assert!(matches!(project(&sym, empty_good.view(), &[1.0, 1.0]), Err(Error::ProjectionUndefined(_))));
        assert!(matches!(project(&sym, Array2::ones((2, 2)).view(), &[0.0, 0.0]), Err(Error::ProjectionUndefined(_))));
    }

    #[test]
    fn nash_gap_requires_feasible_pairs() {
        let sym = symmetric_cd();
        let ones = Array2::ones((2, 2));
        assert!(nash_gap(&sym, ones.view(), &[0.5, 0.5]).unwrap().abs() < 1e-15);
        assert!(matches!(nash_gap(&sym, (&ones * 1.5).view(), &[0.5, 0.5]), Err(Error::ConstraintViolation(_))));
        assert!(matches!(nash_gap(&sym, ones.view(), &[1.0, 0.5]), Err(Error::ConstraintViolation(_))));
    }

    #[test]
    fn kkt_at_symmetric_equilibrium_is_zero() {
        let sym = symmetric_cd();
        let c = EquilibriumCandidate::new(Array2::ones((2, 2)), vec![0.5, 0.5]).unwrap();
        assert!(kkt_residuals(&sym, &c).unwrap() < 1e-15);
        let leo = sym.with_ces(CesSpec::Leontief);
        assert!(matches!(kkt_residuals(&leo, &c), Err(Error::UnsupportedRegime { .. })));
    }

    #[test]
    fn candidate_json_round_trip() {
        let c = EquilibriumCandidate::new(array![[0.25, 1.0], [1.75, 1.0]], vec![0.3, 0.7]).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<EquilibriumCandidate>(&text).unwrap(), c);
        assert!(serde_json::from_str::<EquilibriumCandidate>(r#"{"allocation":[[-1.0]],"prices":[1.0]}"#).is_err());
    }

    #[test]
    fn report_csv_column_order() {
        let sym = symmetric_cd();
        let c = EquilibriumCandidate::new(Array2::ones((2, 2)), vec![0.5, 0.5]).unwrap();
        let mut buf = Vec::new();
        evaluate(&sym, &c).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("lnw,lfw,ng,voa,vop,wsw,price_residual,kkt_max_residual\n"));
    }
}
