//! Contextual Fisher markets.
//!
//! Buyers and goods are points in `R^k`. Budgets, valuations and supplies are
//! fixed functions of those points, so a market is fully described by its
//! contexts (or by the seed that generated them).

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ces::CesSpec;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextDistribution {
    #[serde(alias = "normal")]
    StandardNormal,
    #[serde(alias = "uniform")]
    Uniform01,
    #[serde(alias = "exponential")]
    ExponentialUnitRate,
}

impl ContextDistribution {
    pub const ALL: [ContextDistribution; 3] =
        [ContextDistribution::StandardNormal, ContextDistribution::Uniform01, ContextDistribution::ExponentialUnitRate];

    pub fn short_name(self) -> &'static str {
        match self {
            ContextDistribution::StandardNormal => "normal",
            ContextDistribution::Uniform01 => "uniform",
            ContextDistribution::ExponentialUnitRate => "exponential",
        }
    }

    fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            ContextDistribution::StandardNormal => rng.sample(StandardNormal),
            ContextDistribution::Uniform01 => rng.random::<f64>(),
            ContextDistribution::ExponentialUnitRate => rng.sample(Exp1),
        }
    }
}

impl std::str::FromStr for ContextDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" | "standard_normal" => Ok(ContextDistribution::StandardNormal),
            "uniform" | "uniform01" => Ok(ContextDistribution::Uniform01),
            "exponential" | "exponential_unit_rate" => Ok(ContextDistribution::ExponentialUnitRate),
            other => Err(Error::invalid(format!("unknown context distribution '{other}'"))),
        }
    }
}

/// `softplus(z) = log(1 + e^z)`, evaluated as `max(z, 0) + log1p(e^-|z|)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] on `(0, inf)`: `log(e^y - 1)`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y < 30.0 {
        y.exp_m1().ln()
    } else {
        y + (-(-y).exp()).ln_1p()
    }
}

/// Budget of a buyer: the Euclidean norm of its context.
pub fn budget(buyer: &[f64]) -> Result<f64> {
    let norm = buyer.iter().map(|b| b * b).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        Ok(norm)
    } else if norm == 0.0 {
        Err(Error::DegenerateBudget(0))
    } else {
        Err(Error::invalid("buyer context is not finite"))
    }
}

/// Valuation `softplus(<b, g>)` of a good by a buyer.
pub fn valuation(buyer: &[f64], good: &[f64]) -> Result<f64> {
    if buyer.len() != good.len() {
        return Err(Error::invalid(format!(
            "buyer context has dimension {} but good context has {}",
            buyer.len(),
            good.len()
        )));
    }
    Ok(softplus(buyer.iter().zip(good).map(|(b, g)| b * g).sum()))
}

/// A source of buyer indices. Finite markets sample uniformly over their
/// buyers; the trait leaves room for an infinite-population sampler.
pub trait BuyerSampler {
    fn sample_buyer<R: Rng>(&self, rng: &mut R) -> usize;
}

/// A contextual market instance. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Market {
    ces: CesSpec,
    dist: ContextDistribution,
    seed: u64,
    buyers: Array2<f64>,
    goods: Array2<f64>,
    budgets: Vec<f64>,
    values: Array2<f64>,
    supplies: Vec<f64>,
    supply_override: bool,
    explicit_contexts: bool,
}

impl Market {
    /// Draws every context component i.i.d. from `dist`. Buyer `i` and good
    /// `j` read from their own random streams, so growing `n` keeps the
    /// existing buyers unchanged.
    pub fn generate(n: usize, m: usize, k: usize, dist: ContextDistribution, ces: CesSpec, seed: u64) -> Result<Self> {
        if n == 0 || m == 0 || k == 0 {
            return Err(Error::invalid(format!("market needs n, m, k >= 1 (got {n}, {m}, {k})")));
        }
        let draw = |stream: Stream| {
            let mut rng = substream(seed, stream);
            (0..k).map(move |_| dist.sample(&mut rng))
        };
        let buyers = Array2::from_shape_vec((n, k), (0..n as u64).flat_map(|i| draw(Stream::Buyer(i))).collect())
            .expect("n*k buyer components");
        let goods = Array2::from_shape_vec((m, k), (0..m as u64).flat_map(|j| draw(Stream::Good(j))).collect())
            .expect("m*k good components");
        let mut market = Market::assemble(buyers, goods, ces, None)?;
        market.dist = dist;
        market.seed = seed;
        market.explicit_contexts = false;
        Ok(market)
    }

    /// Builds a market from explicit contexts, with optional supplies
    /// (default `Y_j = n`).
    pub fn from_contexts(
        buyers: Array2<f64>,
        goods: Array2<f64>,
        ces: CesSpec,
        supplies: Option<Vec<f64>>,
    ) -> Result<Self> {
        Market::assemble(buyers, goods, ces, supplies)
    }

    /// Builds a market whose derived budgets and valuations equal the given
    /// tables (up to rounding). Buyer `i` gets context `B_i e_i` in `R^n`
    /// and good `j` the context `softplus^-1(v_ij) / B_i` in coordinate `i`.
    pub fn from_tables(
        budgets: &[f64],
        values: ArrayView2<'_, f64>,
        ces: CesSpec,
        supplies: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = budgets.len();
        if values.nrows() != n || values.ncols() == 0 {
            return Err(Error::shape(format!("value table is {:?} but there are {n} budgets", values.dim())));
        }
        if budgets.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::invalid("table budgets must be positive and finite"));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("table valuations must be positive and finite"));
        }
        let m = values.ncols();
        let buyers = Array2::from_shape_fn((n, n), |(i, c)| if i == c { budgets[i] } else { 0.0 });
        let goods = Array2::from_shape_fn((m, n), |(j, i)| softplus_inverse(values[[i, j]]) / budgets[i]);
        Market::assemble(buyers, goods, ces, supplies)
    }

    fn assemble(buyers: Array2<f64>, goods: Array2<f64>, ces: CesSpec, supplies: Option<Vec<f64>>) -> Result<Self> {
        let (n, k) = buyers.dim();
        let (m, kg) = goods.dim();
        if n == 0 || m == 0 || k == 0 {
            return Err(Error::invalid("market needs at least one buyer, good and context dimension"));
        }
        if k != kg {
            return Err(Error::invalid(format!("buyer contexts have dimension {k} but good contexts have {kg}")));
        }
        if buyers.iter().chain(goods.iter()).any(|c| !c.is_finite()) {
            return Err(Error::invalid("contexts must be finite"));
        }
        let buyers = buyers.as_standard_layout().into_owned();
        let goods = goods.as_standard_layout().into_owned();
        let budgets = buyers
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, b)| {
                budget(b.as_slice().expect("standard layout")).map_err(|e| match e {
                    Error::DegenerateBudget(_) => Error::DegenerateBudget(i),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let values = Array2::from_shape_fn((n, m), |(i, j)| {
            softplus(buyers.row(i).iter().zip(goods.row(j)).map(|(b, g)| b * g).sum())
        });
        if let Some(bad) = values.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "valuation of pair {:?} is {}; contexts are too large",
                (bad / m, bad % m),
                values.as_slice().unwrap()[bad]
            )));
        }
        let supply_override = supplies.is_some();
        let supplies = match supplies {
            Some(y) => {
                if y.len() != m || y.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                    return Err(Error::invalid("supplies must be m positive finite numbers"));
                }
                y
            }
            None => vec![n as f64; m],
        };
        Ok(Market {
            ces,
            dist: ContextDistribution::StandardNormal,
            seed: 0,
            buyers,
            goods,
            budgets,
            values,
            supplies,
            supply_override,
            explicit_contexts: true,
        })
    }

    pub fn n(&self) -> usize {
        self.buyers.nrows()
    }

    pub fn m(&self) -> usize {
        self.goods.nrows()
    }

    pub fn k(&self) -> usize {
        self.buyers.ncols()
    }

    pub fn ces(&self) -> CesSpec {
        self.ces
    }

    pub fn dist(&self) -> ContextDistribution {
        self.dist
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same contexts under a different utility regime.
    pub fn with_ces(&self, ces: CesSpec) -> Market {
        Market { ces, ..self.clone() }
    }

    pub fn buyer(&self, i: usize) -> &[f64] {
        self.buyers.row(i).to_slice().expect("standard layout")
    }

    pub fn good(&self, j: usize) -> &[f64] {
        self.goods.row(j).to_slice().expect("standard layout")
    }

    pub fn buyers(&self) -> ArrayView2<'_, f64> {
        self.buyers.view()
    }

    pub fn goods(&self) -> ArrayView2<'_, f64> {
        self.goods.view()
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    pub fn total_budget(&self) -> f64 {
        self.budgets.iter().sum()
    }

    /// Valuation table `v_ij` (n x m).
    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn buyer_values(&self, i: usize) -> &[f64] {
        self.values.row(i).to_slice().expect("standard layout")
    }

    pub fn supplies(&self) -> &[f64] {
        &self.supplies
    }

    /// Supply `Y_j`; `n` unless overridden.
    pub fn supply(&self, j: usize) -> Result<f64> {
        self.supplies.get(j).copied().ok_or(Error::IndexOutOfRange { index: j, len: self.m() })
    }

    /// Per-buyer supply `Y_j / n`, the clearing target for mean allocations.
    pub fn normalized_supplies(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.supplies.iter().map(|y| y / n).collect()
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    pub fn to_file(&self, include_contexts: bool) -> MarketFile {
        let contexts = include_contexts || self.explicit_contexts;
        let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        MarketFile {
            n: self.n(),
            m: self.m(),
            k: self.k(),
            dist: self.dist,
            alpha: self.ces,
            seed: self.seed,
            supplies: self.supply_override.then(|| self.supplies.clone()),
            buyers: contexts.then(|| rows(&self.buyers)),
            goods: contexts.then(|| rows(&self.goods)),
        }
    }

    pub fn to_json(&self, include_contexts: bool) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file(include_contexts))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<MarketFile>(text)?.into_market()
    }
}

impl BuyerSampler for Market {
    fn sample_buyer<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.n())
    }
}

/// On-disk market description. Without explicit contexts the market is
/// regenerated from `(n, m, k, dist, seed)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarketFile {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub dist: ContextDistribution,
    pub alpha: CesSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supplies: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buyers: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goods: Option<Vec<Vec<f64>>>,
}

impl MarketFile {
    pub fn into_market(self) -> Result<Market> {
        let to_array = |rows: Vec<Vec<f64>>, expect: usize, what: &str| -> Result<Array2<f64>> {
            if rows.len() != expect || rows.iter().any(|r| r.len() != self.k) {
                return Err(Error::shape(format!("{what} contexts do not match n/m/k")));
            }
            Ok(Array2::from_shape_vec((expect, self.k), rows.concat()).expect("checked shape"))
        };
        match (self.buyers.clone(), self.goods.clone()) {
            (Some(b), Some(g)) => {
                let mut market = Market::from_contexts(
                    to_array(b, self.n, "buyer")?,
                    to_array(g, self.m, "good")?,
                    self.alpha,
                    self.supplies,
                )?;
                market.dist = self.dist;
                market.seed = self.seed;
                Ok(market)
            }
            (None, None) => {
                let market = Market::generate(self.n, self.m, self.k, self.dist, self.alpha, self.seed)?;
                match self.supplies {
                    Some(y) => {
                        let mut explicit =
                            Market::from_contexts(market.buyers.clone(), market.goods.clone(), self.alpha, Some(y))?;
                        explicit.dist = self.dist;
                        explicit.seed = self.seed;
                        explicit.explicit_contexts = false;
                        Ok(explicit)
                    }
                    None => Ok(market),
                }
            }
            _ => Err(Error::invalid("market file must list both buyer and good contexts or neither")),
        }
    }
}

#[cfg(test)]
#[allow(clippy::excessive_precision, clippy::approx_constant)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn budget_examples() {
        assert_eq!(budget(&[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(budget(&[1.0]).unwrap(), 1.0);
        assert!((budget(&[0.3, -0.4, 1.2]).unwrap() - 1.3).abs() < 1e-15);
        assert!(matches!(budget(&[0.0, 0.0]), Err(Error::DegenerateBudget(_))));
    }

    #[test]
    fn valuation_examples() {
        assert!((valuation(&[0.0], &[5.0]).unwrap() - 2f64.ln()).abs() < 1e-16);
        assert!((valuation(&[5.0, 5.0], &[5.0, 5.0]).unwrap() - 50.0).abs() < 1e-12);
        let v = valuation(&[1.0], &[-1.0]).unwrap();
        assert!((v - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert!(valuation(&[1.0, 2.0], &[1.0]).is_err());
    }

    // Reference values computed with 50-digit arithmetic.
    const SOFTPLUS_REFERENCE: [(f64, f64); 8] = [
        (-700.0, 9.859_676_543_759_770_856_7e-305),
        (-50.0, 1.928_749_847_963_917_783e-22),
        (-1e-3, 0.692_647_305_559_940_101_08),
        (0.0, 0.693_147_180_559_945_309_42),
        (1e-8, 0.693_147_185_559_945_321_92),
        (3.5, 3.529_750_418_272_620_565_2),
        (36.0, 36.000_000_000_000_000_232),
        (700.0, 700.0),
    ];

    #[test]
    fn softplus_matches_extended_precision() {
        for (z, expected) in SOFTPLUS_REFERENCE {
            let got = softplus(z);
            assert!((got - expected).abs() <= 1e-12 * expected, "softplus({z}) = {got}, want {expected}");
        }
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-8, 0.3, 1.0, 3.0, 40.0] {
            let back = softplus(softplus_inverse(y));
            // softplus is ill-conditioned far left of zero, so allow a few dozen ulps there.
            assert!((back - y).abs() <= 1e-14 * y, "{y} -> {back}");
        }
    }

    #[test]
    fn generated_market_shape_and_positivity() {
        let m = Market::generate(1, 1, 1, ContextDistribution::Uniform01, CesSpec::Linear, 7).unwrap();
        assert_eq!((m.n(), m.m(), m.k()), (1, 1, 1));
        assert_eq!(m.budgets()[0], m.buyer(0)[0].abs());
        assert!(m.budgets()[0] > 0.0);
        let e = Market::generate(4, 3, 2, ContextDistribution::ExponentialUnitRate, CesSpec::CobbDouglas, 42).unwrap();
        assert!(e.values().iter().all(|&v| v > 2f64.ln()));
    }

    #[test]
    fn zero_counts_rejected() {
        for (n, m, k) in [(0, 1, 1), (1, 0, 1), (1, 1, 0)] {
            assert!(matches!(
                Market::generate(n, m, k, ContextDistribution::StandardNormal, CesSpec::Linear, 1),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let a = Market::generate(50, 4, 3, ContextDistribution::StandardNormal, CesSpec::Linear, 9).unwrap();
        let b = Market::generate(50, 4, 3, ContextDistribution::StandardNormal, CesSpec::Linear, 9).unwrap();
        let c = Market::generate(80, 4, 3, ContextDistribution::StandardNormal, CesSpec::Linear, 9).unwrap();
        assert_eq!(a.buyers(), b.buyers());
        assert_eq!(a.values(), b.values());
        assert_eq!(a.buyers(), c.buyers().slice(ndarray::s![..50, ..]));
        assert_eq!(a.goods(), c.goods());
    }

    #[test]
    fn supply_defaults_to_buyer_count() {
        let m = Market::generate(5, 3, 2, ContextDistribution::StandardNormal, CesSpec::Linear, 1).unwrap();
        assert_eq!(m.supply(0).unwrap(), 5.0);
        assert!(matches!(m.supply(3), Err(Error::IndexOutOfRange { index: 3, len: 3 })));
        let one = Market::generate(1, 4, 2, ContextDistribution::StandardNormal, CesSpec::Linear, 1).unwrap();
        assert!(one.supplies().iter().all(|&y| y == 1.0));
    }

    #[test]
    fn tables_reproduce_budgets_and_values() {
        let values = array![[1.0, 3.0], [3.0, 1.0]];
        let m = Market::from_tables(&[1.0, 2.0], values.view(), CesSpec::CobbDouglas, None).unwrap();
        assert_eq!(m.budgets(), &[1.0, 2.0]);
        for (a, b) in m.values().iter().zip(values.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn json_round_trip_with_and_without_contexts() {
        let m = Market::generate(4, 2, 3, ContextDistribution::Uniform01, CesSpec::general(0.5).unwrap(), 3).unwrap();
        for include in [false, true] {
            let back = Market::from_json(&m.to_json(include).unwrap()).unwrap();
            assert_eq!(back.buyers(), m.buyers());
            assert_eq!(back.goods(), m.goods());
            assert_eq!(back.ces(), m.ces());
            assert_eq!(back.seed(), 3);
        }
    }
}
