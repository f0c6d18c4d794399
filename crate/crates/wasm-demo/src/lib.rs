//! Browser bindings for the demo page. Every function takes plain numbers or
//! strings and returns a JSON string; failures come back as `{"error": ...}`.

use ctxmarket::baselines::{self, EgConfig};
use ctxmarket::ces::{self, BuyerProblem, CesSpec};
use ctxmarket::market::ContextDistribution;
use ctxmarket::{metrics, oracle, Market, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

/// Largest market the page may ask for.
pub const MAX_BUYERS: usize = 2000;
pub const MAX_GOODS: usize = 10;

fn respond(result: Result<Value>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn parse<T: std::str::FromStr<Err = ctxmarket::Error>>(text: &str) -> Result<T> {
    text.trim().parse()
}

/// Demand of a two-good buyer as the price of good 1 sweeps `[p_min, p_max]`
/// on a log grid, with good 2 priced at 1.
#[wasm_bindgen]
pub fn demand_curve(alpha: &str, v1: f64, v2: f64, budget: f64, p_min: f64, p_max: f64, points: usize) -> String {
    respond((|| {
        let spec: CesSpec = parse(alpha)?;
        if !(p_min > 0.0 && p_max > p_min) || !(2..=500).contains(&points) {
            return Err(ctxmarket::Error::invalid("need 0 < p_min < p_max and 2..=500 points"));
        }
        let values = [v1, v2];
        let mut rows = Vec::with_capacity(points);
        for t in 0..points {
            let p1 = p_min * (p_max / p_min).powf(t as f64 / (points - 1) as f64);
            let prices = [p1, 1.0];
            let problem = BuyerProblem::new(&values, budget, &prices)?;
            let x = ces::demand(&problem, spec);
            let u = ces::utility(&values, &x, spec)?;
            rows.push(json!({ "p1": p1, "x1": x[0], "x2": x[1], "utility": u }));
        }
        Ok(json!({ "alpha": spec.to_string(), "curve": rows }))
    })())
}

/// Generates a market and solves it with `naive`, `eg-m` or `oracle`.
#[wasm_bindgen]
pub fn solve_market(n: usize, m: usize, alpha: &str, dist: &str, seed: u32, method: &str) -> String {
    respond((|| {
        if n > MAX_BUYERS || m > MAX_GOODS {
            return Err(ctxmarket::Error::invalid(format!(
                "demo is limited to {MAX_BUYERS} buyers and {MAX_GOODS} goods"
            )));
        }
        let spec: CesSpec = parse(alpha)?;
        let dist: ContextDistribution = parse(dist)?;
        let market = Market::generate(n, m, 5, dist, spec, u64::from(seed))?;
        let (candidate, epochs) = match method {
            "naive" => (baselines::naive(&market), 0),
            "eg-m" => {
                let outcome = baselines::eg_momentum_solve(&market, &EgConfig::defaults_for(&market, 0.9))?;
                (outcome.0, outcome.1.records.len())
            }
            "oracle" => (oracle::equilibrium(&market, oracle::OracleTolerance::default())?.candidate, 0),
            other => return Err(ctxmarket::Error::invalid(format!("unknown method {other:?}"))),
        };
        let report = metrics::evaluate(&market, &candidate)?;
        Ok(json!({
            "method": method,
            "n": n,
            "m": m,
            "epochs": epochs,
            "prices": candidate.prices,
            "report": report,
        }))
    })())
}

/// Log fixed-price welfare of a two-good market along the prices that
/// exactly spend the total budget, indexed by the share `t` spent on good 1.
#[wasm_bindgen]
pub fn lfw_landscape(n: usize, alpha: &str, seed: u32, points: usize) -> String {
    respond((|| {
        if n == 0 || n > MAX_BUYERS || !(3..=1000).contains(&points) {
            return Err(ctxmarket::Error::invalid("need 1..=2000 buyers and 3..=1000 points"));
        }
        let spec: CesSpec = parse(alpha)?;
        let market = Market::generate(n, 2, 5, ContextDistribution::StandardNormal, spec, u64::from(seed))?;
        let total = market.total_budget();
        let supplies = market.supplies();
        let mut curve = Vec::with_capacity(points);
        let mut best = (f64::INFINITY, 0.0);
        for s in 1..=points {
            let t = s as f64 / (points + 1) as f64;
            let prices = [t * total / supplies[0], (1.0 - t) * total / supplies[1]];
            let value = metrics::lfw(&market, &prices)?;
            if value < best.0 {
                best = (value, t);
            }
            curve.push(json!({ "share": t, "p1": prices[0], "p2": prices[1], "lfw": value }));
        }
        Ok(json!({ "curve": curve, "min_share": best.1, "min_lfw": best.0 }))
    })())
}
