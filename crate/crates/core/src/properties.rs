//! Randomized invariant checks across every module, with one runner.
//!
//! Each property draws its inputs from its own random stream, so a failure
//! replays exactly from the suite seed. Failures are reported as data
//! together with the worst witness (the full inputs that broke the check).

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{self, EgConfig, EgSolver};
use crate::ces::{self, BuyerProblem, CesSpec};
use crate::error::Result;
use crate::harness::{self, MethodConfig};
use crate::market::{softplus, ContextDistribution, Market};
use crate::metrics::{self, EquilibriumCandidate};
use crate::net::{self, AllocationNet, Architecture};
use crate::oracle::{self, OracleTolerance};
use crate::rng::{substream, Stream};
use crate::trainer::{self, MultiplierPass, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Quick,
    Full,
}

impl Profile {
    /// Trial count for this profile given the full-profile count.
    pub fn trials(self, full: usize) -> usize {
        match self {
            Profile::Full => full,
            Profile::Quick => (full / 10).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub module: String,
    /// The result the property exercises.
    pub anchor: String,
    pub trials: usize,
    pub failures: usize,
    /// Inputs of the worst failing trial.
    pub witness: Option<Value>,
    pub seconds: f64,
}

impl PropertyOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Running count of trials and failures.
#[derive(Clone, Debug, Default)]
pub struct Tally {
    pub trials: usize,
    pub failures: usize,
    worst: f64,
    pub witness: Option<Value>,
}

impl Tally {
    /// Records one trial. `severity` ranks failures so the worst witness is kept.
    pub fn record(&mut self, ok: bool, severity: f64, witness: impl FnOnce() -> Value) {
        self.trials += 1;
        if !ok {
            self.failures += 1;
            let severity = if severity.is_nan() { f64::INFINITY } else { severity };
            if self.witness.is_none() || severity > self.worst {
                self.worst = severity;
                self.witness = Some(witness());
            }
        }
    }

    /// Records a trial that could not be evaluated.
    pub fn error(&mut self, err: impl std::fmt::Display, witness: impl FnOnce() -> Value) {
        self.record(false, f64::INFINITY, || json!({ "error": err.to_string(), "inputs": witness() }));
    }
}

type Check = fn(u64, Profile) -> Tally;

struct Property {
    name: &'static str,
    module: &'static str,
    anchor: &'static str,
    check: Check,
}

const REGIMES: [CesSpec; 5] = [
    CesSpec::Linear,
    CesSpec::General { alpha: 0.5 },
    CesSpec::CobbDouglas,
    CesSpec::General { alpha: -1.0 },
    CesSpec::Leontief,
];

const PROPERTIES: &[Property] = &[
    Property {
        name: "market_determinism",
        module: "market",
        anchor: "contextual market model",
        check: market_determinism,
    },
    Property { name: "market_positivity", module: "market", anchor: "softplus valuations", check: market_positivity },
    Property { name: "softplus_stability", module: "market", anchor: "softplus valuations", check: softplus_stability },
    Property { name: "ces_consistency", module: "ces", anchor: "CES demand closed forms", check: ces_consistency },
    Property {
        name: "ces_budget_exhaustion",
        module: "ces",
        anchor: "CES demand closed forms",
        check: ces_budget_exhaustion,
    },
    Property { name: "ces_optimality", module: "ces", anchor: "CES demand closed forms", check: ces_optimality },
    Property { name: "ces_homogeneity", module: "ces", anchor: "homogeneous utilities", check: ces_homogeneity },
    Property { name: "ces_euler", module: "ces", anchor: "homogeneous utilities", check: ces_euler },
    Property { name: "ces_gradient", module: "ces", anchor: "CES demand closed forms", check: ces_gradient },
    Property { name: "ng_nonnegative", module: "metrics", anchor: "Nash gap nonnegativity", check: ng_nonnegative },
    Property {
        name: "ng_zero_at_equilibrium",
        module: "metrics",
        anchor: "Nash gap vanishes exactly at equilibrium",
        check: ng_zero_at_equilibrium,
    },
    Property {
        name: "projection_idempotent",
        module: "metrics",
        anchor: "Nash gap evaluation",
        check: projection_idempotent,
    },
    Property {
        name: "budget_scaling",
        module: "metrics",
        anchor: "linear structure of equilibria",
        check: budget_scaling,
    },
    Property {
        name: "welfare_saddle",
        module: "metrics",
        anchor: "saddle point of social welfare",
        check: welfare_saddle,
    },
    Property {
        name: "lfw_curvature",
        module: "metrics",
        anchor: "quadratic growth of fixed-price welfare",
        check: lfw_curvature,
    },
    Property {
        name: "net_positivity",
        module: "allocation-net",
        anchor: "softplus allocation network",
        check: net_positivity,
    },
    Property {
        name: "net_determinism",
        module: "allocation-net",
        anchor: "softplus allocation network",
        check: net_determinism,
    },
    Property {
        name: "net_gradient",
        module: "allocation-net",
        anchor: "softplus allocation network",
        check: net_gradient,
    },
    Property {
        name: "estimator_unbiased",
        module: "fcnet-trainer",
        anchor: "unbiased minibatch Lagrangian",
        check: estimator_unbiased,
    },
    Property {
        name: "estimator_monte_carlo",
        module: "fcnet-trainer",
        anchor: "unbiased minibatch Lagrangian",
        check: estimator_monte_carlo,
    },
    Property {
        name: "estimator_gradient",
        module: "fcnet-trainer",
        anchor: "unbiased minibatch Lagrangian",
        check: estimator_gradient,
    },
    Property {
        name: "training_determinism",
        module: "fcnet-trainer",
        anchor: "augmented Lagrangian training",
        check: training_determinism,
    },
    Property {
        name: "epoch_cost_flat_in_n",
        module: "fcnet-trainer",
        anchor: "per-step cost independent of n",
        check: epoch_cost_flat_in_n,
    },
    Property { name: "naive_feasible", module: "baselines", anchor: "naive even split", check: naive_feasible },
    Property { name: "eg_descent", module: "baselines", anchor: "Eisenberg-Gale gradient descent", check: eg_descent },
    Property {
        name: "eg_reaches_equilibrium",
        module: "baselines",
        anchor: "Eisenberg-Gale gradient descent",
        check: eg_reaches_equilibrium,
    },
    Property {
        name: "oracle_price_identity",
        module: "oracle",
        anchor: "price identity",
        check: oracle_price_identity,
    },
    Property {
        name: "oracle_positive_prices",
        module: "oracle",
        anchor: "positive equilibrium prices",
        check: oracle_positive_prices,
    },
    Property {
        name: "oracle_cross_check",
        module: "oracle",
        anchor: "Cobb-Douglas closed form",
        check: oracle_cross_check,
    },
    Property {
        name: "artifact_round_trip",
        module: "harness",
        anchor: "reproducible runs",
        check: artifact_round_trip,
    },
    Property { name: "timing_separation", module: "harness", anchor: "reproducible runs", check: timing_separation },
];

/// Names of every property in execution order.
pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|p| p.name).collect()
}

fn run_property(p: &Property, seed: u64, profile: Profile) -> PropertyOutcome {
    let started = Instant::now();
    let tally = (p.check)(seed, profile);
    let outcome = PropertyOutcome {
        name: p.name.into(),
        module: p.module.into(),
        anchor: p.anchor.into(),
        trials: tally.trials,
        failures: tally.failures,
        witness: tally.witness,
        seconds: started.elapsed().as_secs_f64(),
    };
    log::info!("{} {}/{} failed in {:.2}s", outcome.name, outcome.failures, outcome.trials, outcome.seconds);
    outcome
}

/// Runs every property.
pub fn run_all(seed: u64, profile: Profile) -> Vec<PropertyOutcome> {
    PROPERTIES.iter().map(|p| run_property(p, seed, profile)).collect()
}

/// Runs a single property by name; used to replay a failure.
pub fn run_one(name: &str, seed: u64, profile: Profile) -> Option<PropertyOutcome> {
    PROPERTIES.iter().find(|p| p.name == name).map(|p| run_property(p, seed, profile))
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// JUnit-style XML report.
pub fn write_junit<W: Write>(outcomes: &[PropertyOutcome], mut out: W) -> Result<()> {
    let failures = outcomes.iter().filter(|o| !o.passed()).count();
    let total: f64 = outcomes.iter().map(|o| o.seconds).sum();
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
    writeln!(
        out,
        r#"<testsuite name="ctxmarket-properties" tests="{}" failures="{failures}" time="{total:.3}">"#,
        outcomes.len()
    )?;
    for o in outcomes {
        write!(
            out,
            r#"  <testcase classname="{}" name="{}" time="{:.3}""#,
            xml_escape(&o.module),
            xml_escape(&o.name),
            o.seconds
        )?;
        if o.passed() {
            writeln!(out, "/>")?;
        } else {
            let witness = o.witness.as_ref().map(Value::to_string).unwrap_or_default();
            writeln!(out, ">")?;
            writeln!(
                out,
                r#"    <failure message="{} of {} trials failed ({})">{}</failure>"#,
                o.failures,
                o.trials,
                xml_escape(&o.anchor),
                xml_escape(&witness)
            )?;
            writeln!(out, "  </testcase>")?;
        }
    }
    writeln!(out, "</testsuite>")?;
    Ok(())
}

/// One line per property plus a total.
pub fn summary(outcomes: &[PropertyOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        let _ = writeln!(
            s,
            "{:<4} {:<16} {:<24} {:>6} trials {:>4} failed {:>8.2}s  [{}]",
            if o.passed() { "ok" } else { "FAIL" },
            o.module,
            o.name,
            o.trials,
            o.failures,
            o.seconds,
            o.anchor
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    let _ = writeln!(s, "{} properties, {} failed", outcomes.len(), failed);
    s
}

fn rng_for(seed: u64, property: &str) -> ChaCha8Rng {
    let tag = property.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    substream(seed, Stream::Aux(tag & 0x00ff_ffff_ffff_ffff))
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn random_dist<R: Rng>(rng: &mut R) -> ContextDistribution {
    ContextDistribution::ALL[rng.random_range(0..ContextDistribution::ALL.len())]
}

/// A generated market with `n` in `[2, max_n]` and `m` in `[2, max_m]`.
pub fn random_market<R: Rng>(rng: &mut R, spec: CesSpec, max_n: usize, max_m: usize) -> Market {
    let n = rng.random_range(2..=max_n);
    let m = rng.random_range(2..=max_m);
    let k = rng.random_range(1..=5);
    Market::generate(n, m, k, random_dist(rng), spec, rng.random()).expect("valid market arguments")
}

fn market_witness(market: &Market) -> Value {
    serde_json::to_value(market.to_file(true)).unwrap_or(Value::Null)
}

fn candidate_witness(market: &Market, x: &Array2<f64>, p: &[f64]) -> Value {
    json!({
        "market": market_witness(market),
        "candidate": serde_json::to_value(EquilibriumCandidate { allocation: x.clone(), prices: p.to_vec() })
            .unwrap_or(Value::Null),
    })
}

struct RandomProblem {
    values: Vec<f64>,
    budget: f64,
    prices: Vec<f64>,
}

impl RandomProblem {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let m = rng.random_range(1..=6);
        let values = (0..m).map(|_| softplus(2.0 * rng.sample::<f64, _>(StandardNormal))).collect();
        let prices = (0..m).map(|_| rng.random_range(0.1..5.0)).collect();
        RandomProblem { values, budget: rng.random_range(0.1..5.0), prices }
    }

    fn problem(&self) -> BuyerProblem<'_> {
        BuyerProblem::new(&self.values, self.budget, &self.prices).expect("valid random problem")
    }

    fn witness(&self, spec: CesSpec) -> Value {
        json!({ "regime": spec.to_string(), "values": self.values, "budget": self.budget, "prices": self.prices })
    }
}

/// An interior bundle with entries in `[0.05, 3]`.
fn random_bundle<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(0.05..3.0)).collect()
}

fn market_determinism(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "market_determinism");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(100) {
        let spec = REGIMES[rng.random_range(0..REGIMES.len())];
        let market = random_market(&mut rng, spec, 40, 6);
        let again = Market::generate(market.n(), market.m(), market.k(), market.dist(), spec, market.seed()).unwrap();
        let same = market.buyers() == again.buyers()
            && market.goods() == again.goods()
            && market.budgets() == again.budgets()
            && market.values() == again.values();
        tally.record(same, 1.0, || market_witness(&market));
    }
    tally
}

fn market_positivity(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "market_positivity");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(200) {
        let market = random_market(&mut rng, CesSpec::CobbDouglas, 60, 8);
        let ok = market.budgets().iter().all(|&b| b > 0.0) && market.values().iter().all(|&v| v > 0.0);
        tally.record(ok, 1.0, || market_witness(&market));
    }
    tally
}

/// `max(z, 0) + log(1 + t)` with `t = e^-|z|`, where `log(1 + t)` is summed
/// as `2 atanh(t / (2 + t))`. The series argument is at most 1/3, so the sum
/// is accurate to a few ulps by a route independent of `ln_1p`.
fn softplus_reference(z: f64) -> f64 {
    let t = (-z.abs()).exp();
    let s = t / (2.0 + t);
    let s2 = s * s;
    let mut power = s;
    let mut sum = 0.0;
    let mut k = 0u32;
    loop {
        let term = power / f64::from(2 * k + 1);
        sum += term;
        if term <= 1e-18 * sum {
            break;
        }
        power *= s2;
        k += 1;
    }
    z.max(0.0) + 2.0 * sum
}

fn softplus_stability(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "softplus_stability");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(10_000) {
        let z = rng.random_range(-700.0..700.0);
        let err = relative_gap(softplus(z), softplus_reference(z));
        tally.record(err <= 1e-12, err, || json!({ "z": z }));
    }
    tally
}

fn ces_consistency(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "ces_consistency");
    let mut tally = Tally::default();
    for spec in REGIMES {
        for _ in 0..profile.trials(200) {
            let p = RandomProblem::draw(&mut rng);
            let problem = p.problem();
            let x = ces::demand(&problem, spec);
            match ces::utility(&p.values, &x, spec) {
                Ok(u) => {
                    let err = relative_gap(u, ces::fixed_price_log_utility(&problem, spec).exp());
                    tally.record(err <= 1e-8, err, || p.witness(spec));
                }
                Err(e) => tally.error(e, || p.witness(spec)),
            }
        }
    }
    tally
}

fn ces_budget_exhaustion(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "ces_budget_exhaustion");
    let mut tally = Tally::default();
    for spec in REGIMES {
        for _ in 0..profile.trials(200) {
            let p = RandomProblem::draw(&mut rng);
            let x = ces::demand(&p.problem(), spec);
            let spent: f64 = x.iter().zip(&p.prices).map(|(x, p)| x * p).sum();
            let err = relative_gap(spent, p.budget);
            tally.record(err <= 1e-10, err, || p.witness(spec));
        }
    }
    tally
}

/// Checks that no bundle on the budget hyperplane beats the fixed-price
/// utility; one trial per problem.
pub fn check_ces_optimality(seed: u64, problems: usize, bundles: usize) -> Tally {
    let mut rng = rng_for(seed, "ces_optimality");
    let mut tally = Tally::default();
    for spec in REGIMES {
        for _ in 0..problems {
            let p = RandomProblem::draw(&mut rng);
            let best = ces::fixed_price_log_utility(&p.problem(), spec).exp();
            let mut worst_excess: f64 = 0.0;
            let mut failed = None;
            for _ in 0..bundles {
                let weights: Vec<f64> = p.values.iter().map(|_| rng.sample::<f64, _>(Exp1)).collect();
                let total: f64 = weights.iter().sum();
                let x: Vec<f64> =
                    weights.iter().zip(&p.prices).map(|(w, price)| p.budget * w / (total * price)).collect();
                let u = ces::utility(&p.values, &x, spec).unwrap_or(f64::INFINITY);
                let excess = (u - best) / best;
                if excess > worst_excess {
                    worst_excess = excess;
                }
                if u > best + 1e-9 * best.max(1.0) {
                    failed = Some(x);
                }
            }
            tally.record(failed.is_none(), worst_excess, || json!({ "problem": p.witness(spec), "bundle": failed }));
        }
    }
    tally
}

fn ces_optimality(seed: u64, profile: Profile) -> Tally {
    check_ces_optimality(seed, profile.trials(100), 500)
}

fn ces_homogeneity(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "ces_homogeneity");
    let mut tally = Tally::default();
    for spec in REGIMES {
        for _ in 0..profile.trials(200) {
            let p = RandomProblem::draw(&mut rng);
            let x = random_bundle(&mut rng, p.values.len());
            let u = ces::utility(&p.values, &x, spec).unwrap();
            for scale in [0.5, 2.0, 10.0] {
                let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
                let err = relative_gap(ces::utility(&p.values, &scaled, spec).unwrap(), scale * u);
                tally.record(err <= 1e-12, err, || json!({ "problem": p.witness(spec), "bundle": x, "scale": scale }));
            }
        }
    }
    tally
}

fn ces_euler(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "ces_euler");
    let mut tally = Tally::default();
    for spec in REGIMES {
        for _ in 0..profile.trials(200) {
            let p = RandomProblem::draw(&mut rng);
            let x = random_bundle(&mut rng, p.values.len());
            let witness = || json!({ "problem": p.witness(spec), "bundle": x });
            match (ces::utility(&p.values, &x, spec), ces::utility_gradient(&p.values, &x, spec)) {
                (Ok(u), Ok(g)) => {
                    let dot: f64 = g.iter().zip(&x).map(|(g, x)| g * x).sum();
                    let err = relative_gap(dot, u);
                    tally.record(err <= 1e-8, err, witness);
                }
                (Err(e), _) | (_, Err(e)) => tally.error(e, witness),
            }
        }
    }
    tally
}

fn ces_gradient(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "ces_gradient");
    let mut tally = Tally::default();
    let h = 1e-6;
    for spec in [
        CesSpec::General { alpha: 0.5 },
        CesSpec::General { alpha: -1.0 },
        CesSpec::General { alpha: 0.8 },
        CesSpec::CobbDouglas,
    ] {
        for _ in 0..profile.trials(200) {
            let p = RandomProblem::draw(&mut rng);
            let x = random_bundle(&mut rng, p.values.len());
            let g = ces::utility_gradient(&p.values, &x, spec).unwrap();
            let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut err: f64 = 0.0;
            for j in 0..x.len() {
                let mut up = x.clone();
                up[j] += h;
                let mut down = x.clone();
                down[j] -= h;
                let fd = (ces::utility(&p.values, &up, spec).unwrap() - ces::utility(&p.values, &down, spec).unwrap())
                    / (2.0 * h);
                err = err.max((fd - g[j]).abs() / scale);
            }
            tally.record(err <= 1e-5, err, || json!({ "problem": p.witness(spec), "bundle": x }));
        }
    }
    tally
}

fn random_feasible_pair<R: Rng>(rng: &mut R, market: &Market) -> Result<(Array2<f64>, Vec<f64>)> {
    let x = Array2::from_shape_fn((market.n(), market.m()), |_| rng.sample::<f64, _>(Exp1) + 1e-3);
    let p: Vec<f64> = (0..market.m()).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
    let projected = metrics::project(market, x.view(), &p)?;
    Ok((projected.allocation, projected.prices))
}

/// Nash gap of random projected candidates on markets of each listed regime.
pub fn check_ng_nonnegative(seed: u64, regimes: &[CesSpec], per_regime: usize) -> Tally {
    let mut rng = rng_for(seed, "ng_nonnegative");
    let mut tally = Tally::default();
    for &spec in regimes {
        for _ in 0..per_regime {
            let market = random_market(&mut rng, spec, 50, 5);
            let (x, p) = match random_feasible_pair(&mut rng, &market) {
                Ok(pair) => pair,
                Err(e) => {
                    tally.error(e, || market_witness(&market));
                    continue;
                }
            };
            match metrics::nash_gap(&market, x.view(), &p) {
                Ok(ng) => tally.record(ng >= -1e-9, -ng, || candidate_witness(&market, &x, &p)),
                Err(e) => tally.error(e, || candidate_witness(&market, &x, &p)),
            }
        }
    }
    tally
}

fn ng_nonnegative(seed: u64, profile: Profile) -> Tally {
    check_ng_nonnegative(seed, &REGIMES, profile.trials(1000))
}

fn ng_zero_at_equilibrium(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "ng_zero_at_equilibrium");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(50) {
        let market = random_market(&mut rng, CesSpec::CobbDouglas, 10, 4);
        let eq = oracle::cobb_douglas_equilibrium(&market).unwrap().candidate;
        let ng = metrics::nash_gap(&market, eq.allocation.view(), &eq.prices).unwrap();
        tally.record(ng <= 1e-6, ng, || candidate_witness(&market, &eq.allocation, &eq.prices));
        for eps in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
            let x = eq.allocation.mapv(|v| v * (1.0 + eps * rng.sample::<f64, _>(StandardNormal)));
            let p: Vec<f64> =
                eq.prices.iter().map(|v| v * (1.0 + eps * rng.sample::<f64, _>(StandardNormal))).collect();
            let projected = metrics::project(&market, x.view(), &p).unwrap();
            let ng = metrics::nash_gap(&market, projected.allocation.view(), &projected.prices).unwrap();
            if ng <= 1e-8 {
                let kkt = metrics::kkt_residuals(&market, &projected.candidate()).unwrap();
                tally.record(kkt <= 1e-3, kkt, || candidate_witness(&market, &projected.allocation, &projected.prices));
            }
        }
    }
    tally
}

fn projection_idempotent(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "projection_idempotent");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(500) {
        let spec = REGIMES[rng.random_range(0..REGIMES.len())];
        let market = random_market(&mut rng, spec, 50, 5);
        let x = Array2::from_shape_fn((market.n(), market.m()), |_| rng.sample::<f64, _>(Exp1) + 1e-3);
        let p: Vec<f64> = (0..market.m()).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
        let once = metrics::project(&market, x.view(), &p).unwrap();
        let twice = metrics::project(&market, once.allocation.view(), &once.prices).unwrap();
        let err = once
            .allocation
            .iter()
            .zip(twice.allocation.iter())
            .chain(once.prices.iter().zip(&twice.prices))
            .map(|(a, b)| relative_gap(*a, *b))
            .fold(0.0, f64::max);
        tally.record(err <= 1e-12, err, || candidate_witness(&market, &x, &p));
    }
    tally
}

fn budget_scaling(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "budget_scaling");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(100) {
        let generated = random_market(&mut rng, CesSpec::CobbDouglas, 30, 5);
        let beta = rng.random_range(0.1..10.0);
        let base = Market::from_tables(generated.budgets(), generated.values(), CesSpec::CobbDouglas, None).unwrap();
        let scaled_budgets: Vec<f64> = generated.budgets().iter().map(|b| b * beta).collect();
        let scaled = Market::from_tables(&scaled_budgets, generated.values(), CesSpec::CobbDouglas, None).unwrap();
        let a = oracle::cobb_douglas_equilibrium(&base).unwrap().candidate;
        let b = oracle::cobb_douglas_equilibrium(&scaled).unwrap().candidate;
        let price_err = a.prices.iter().zip(&b.prices).map(|(pa, pb)| relative_gap(beta * pa, *pb)).fold(0.0, f64::max);
        let alloc_err =
            a.allocation.iter().zip(b.allocation.iter()).map(|(xa, xb)| relative_gap(*xa, *xb)).fold(0.0, f64::max);
        let err = price_err.max(alloc_err);
        tally.record(err <= 1e-10, err, || json!({ "market": market_witness(&generated), "beta": beta }));
    }
    tally
}

fn welfare_saddle(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "welfare_saddle");
    let mut tally = Tally::default();
    let samples = profile.trials(1000);
    for trial in 0..profile.trials(20).max(2) {
        let spec = if trial % 2 == 0 { CesSpec::CobbDouglas } else { CesSpec::General { alpha: 0.5 } };
        let market = random_market(&mut rng, spec, 8, 4);
        let eq = match oracle::equilibrium(&market, OracleTolerance::default()) {
            Ok(r) => r.candidate,
            Err(e) => {
                tally.error(e, || market_witness(&market));
                continue;
            }
        };
        let opt = metrics::lnw(&market, eq.allocation.view()).unwrap();
        let mut min_lfw = f64::INFINITY;
        let mut max_lnw = f64::NEG_INFINITY;
        for _ in 0..samples {
            let (x, p) = random_feasible_pair(&mut rng, &market).unwrap();
            min_lfw = min_lfw.min(metrics::lfw(&market, &p).unwrap());
            max_lnw = max_lnw.max(metrics::lnw(&market, x.view()).unwrap());
        }
        let slack = 1e-9 * opt.abs().max(1.0);
        let ok = min_lfw >= opt - slack && opt >= max_lnw - slack;
        tally.record(
            ok,
            (max_lnw - min_lfw).max(0.0),
            || json!({ "market": market_witness(&market), "opt": opt, "min_lfw": min_lfw, "max_lnw": max_lnw }),
        );
    }
    tally
}

/// Least-squares slope of `log(LFW(p* + t d) - LFW(p*))` against `log t` on a
/// Cobb-Douglas market, for a random direction `d` that keeps the price
/// identity.
pub fn curvature_slope<R: Rng>(market: &Market, rng: &mut R) -> Result<f64> {
    let eq = oracle::cobb_douglas_equilibrium(market)?.candidate;
    let opt = metrics::lfw(market, &eq.prices)?;
    let mut d: Vec<f64> = eq.prices.iter().map(|p| p * rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0)).collect();
    let drift: f64 = d.iter().zip(market.supplies()).map(|(d, y)| d * y).sum::<f64>() / market.total_budget();
    for (dj, pj) in d.iter_mut().zip(&eq.prices) {
        *dj -= drift * pj;
    }
    let ts = [1e-1, 10f64.powf(-1.5), 1e-2, 10f64.powf(-2.5), 1e-3];
    let mut points = Vec::with_capacity(ts.len());
    for t in ts {
        let p: Vec<f64> = eq.prices.iter().zip(&d).map(|(p, d)| p + t * d).collect();
        let gap = metrics::lfw(market, &p)? - opt;
        points.push((t.ln(), gap.ln()));
    }
    let count = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / count;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / count;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mean_x).powi(2)).sum();
    Ok(sxy / sxx)
}

fn lfw_curvature(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "lfw_curvature");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(20) {
        let market = Market::generate(3, 3, 3, random_dist(&mut rng), CesSpec::CobbDouglas, rng.random()).unwrap();
        match curvature_slope(&market, &mut rng) {
            Ok(slope) => tally.record(
                (slope - 2.0).abs() <= 0.3,
                (slope - 2.0).abs(),
                || json!({ "market": market_witness(&market), "slope": slope }),
            ),
            Err(e) => tally.error(e, || market_witness(&market)),
        }
    }
    tally
}

fn random_net<R: Rng>(rng: &mut R) -> AllocationNet {
    let arch = Architecture::for_contexts(rng.random_range(1..=5), rng.random_range(0..=3), rng.random_range(2..=24));
    AllocationNet::new(arch, rng.random()).unwrap()
}

fn net_positivity(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "net_positivity");
    let mut tally = Tally::default();
    let mut net = random_net(&mut rng);
    for trial in 0..profile.trials(10_000) {
        if trial % 100 == 0 {
            net = random_net(&mut rng);
        }
        let k = net.architecture().input / 2;
        let b: Vec<f64> = (0..k).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let g: Vec<f64> = (0..k).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let y = net.forward(&b, &g).unwrap_or(f64::NAN);
        tally.record(
            y > 0.0,
            1.0,
            || json!({ "architecture": net.architecture(), "parameters": net.parameters(), "buyer": b, "good": g }),
        );
    }
    tally
}

fn net_determinism(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "net_determinism");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(100) {
        let arch =
            Architecture::for_contexts(rng.random_range(1..=5), rng.random_range(0..=3), rng.random_range(2..=24));
        let net_seed: u64 = rng.random();
        let a = AllocationNet::new(arch, net_seed).unwrap();
        let b = AllocationNet::new(arch, net_seed).unwrap();
        let k = arch.input / 2;
        let buyer: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let good: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let same = a.parameters() == b.parameters()
            && a.forward(&buyer, &good).unwrap().to_bits() == b.forward(&buyer, &good).unwrap().to_bits();
        tally.record(same, 1.0, || json!({ "architecture": arch, "seed": net_seed }));
    }
    tally
}

/// Central differences at step `h` against `grad` on the listed parameters:
/// the largest `|fd - g| / max(|fd|, 1e-3)`.
pub fn finite_difference_error(
    params: &mut [f64],
    grad: &[f64],
    indices: &[usize],
    h: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &p in indices {
        let keep = params[p];
        params[p] = keep + h;
        let up = loss(params);
        params[p] = keep - h;
        let down = loss(params);
        params[p] = keep;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[p]).abs() / fd.abs().max(1e-3));
    }
    worst
}

fn net_gradient(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "net_gradient");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(50) {
        let net = random_net(&mut rng);
        let arch = net.architecture();
        let rows = rng.random_range(1..=6);
        let inputs = Array2::from_shape_fn((rows, arch.input), |_| rng.sample::<f64, _>(StandardNormal));
        let weights: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss_of = |out: ndarray::ArrayView1<'_, f64>| -> f64 {
            out.iter().zip(&weights).map(|(y, w)| w * y.ln() + 0.5 * y * y).sum()
        };
        let (_, grad) = net
            .loss_gradient(inputs.clone(), |out| {
                let d = ndarray::Array1::from_iter(out.iter().zip(&weights).map(|(y, w)| w / y + y));
                Ok((loss_of(out), d))
            })
            .unwrap();
        let indices: Vec<usize> = (0..10).map(|_| rng.random_range(0..grad.len())).collect();
        let mut params = net.parameters().to_vec();
        let err = finite_difference_error(&mut params, &grad, &indices, 1e-5, |p| {
            let probe = AllocationNet::from_parameters(arch, p.to_vec()).unwrap();
            loss_of(probe.forward_inputs(inputs.view()).unwrap().view())
        });
        tally.record(err <= 1e-4, err, || {
            json!({ "architecture": arch, "parameters": net.parameters(), "inputs": inputs.iter().collect::<Vec<_>>() })
        });
    }
    tally
}

fn random_multipliers<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-0.5..2.0)).collect()
}

/// Averages the estimator over every ordered pair of buyers (`M = 1`) and
/// returns the largest absolute difference from the exact Lagrangian across
/// the three terms.
pub fn enumeration_gap(net: &AllocationNet, lambda: &[f64], rho: f64, market: &Market) -> Result<f64> {
    let n = market.n();
    let mut mean = trainer::LagrangianTerms::default();
    let weight = 1.0 / (n * n) as f64;
    for a in 0..n {
        for b in 0..n {
            let t = trainer::estimate_lagrangian(net, lambda, rho, market, &[a, b])?;
            mean.objective += weight * t.objective;
            mean.multiplier += weight * t.multiplier;
            mean.penalty += weight * t.penalty;
        }
    }
    let exact = trainer::exact_lagrangian(net, lambda, rho, market)?;
    Ok((mean.objective - exact.objective)
        .abs()
        .max((mean.multiplier - exact.multiplier).abs())
        .max((mean.penalty - exact.penalty).abs()))
}

fn estimator_unbiased(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "estimator_unbiased");
    let mut tally = Tally::default();
    for trial in 0..profile.trials(100) {
        let n = 2 + trial % 2;
        let m = rng.random_range(1..=4);
        let spec = REGIMES[rng.random_range(0..4)];
        let market =
            Market::generate(n, m, rng.random_range(1..=4), random_dist(&mut rng), spec, rng.random()).unwrap();
        let net = AllocationNet::new(Architecture::for_contexts(market.k(), 2, 8), rng.random()).unwrap();
        let lambda = random_multipliers(&mut rng, m);
        let rho = rng.random_range(0.0..2.0);
        match enumeration_gap(&net, &lambda, rho, &market) {
            Ok(gap) => tally.record(gap <= 1e-12, gap, || market_witness(&market)),
            Err(e) => tally.error(e, || market_witness(&market)),
        }
    }
    tally
}

fn estimator_monte_carlo(seed: u64, profile: Profile) -> Tally {
    use crate::market::BuyerSampler;
    let mut rng = rng_for(seed, "estimator_monte_carlo");
    let mut tally = Tally::default();
    let draws = profile.trials(10_000);
    for _ in 0..3 {
        let market =
            Market::generate(100, 3, 3, random_dist(&mut rng), CesSpec::General { alpha: 0.5 }, rng.random()).unwrap();
        let net = AllocationNet::new(Architecture::for_contexts(3, 2, 8), rng.random()).unwrap();
        let lambda = random_multipliers(&mut rng, 3);
        let exact = trainer::exact_lagrangian(&net, &lambda, 0.2, &market).unwrap().total();
        let mut sample = vec![0usize; 100];
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            sample.iter_mut().for_each(|s| *s = market.sample_buyer(&mut rng));
            let v = trainer::estimate_lagrangian(&net, &lambda, 0.2, &market, &sample).unwrap().total();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws as f64;
        let var = (sum_sq / draws as f64 - mean * mean).max(0.0) * draws as f64 / (draws as f64 - 1.0).max(1.0);
        let se = (var / draws as f64).sqrt();
        let z = (mean - exact).abs() / se;
        tally.record(
            z <= 4.0,
            z,
            || json!({ "market": market_witness(&market), "mean": mean, "exact": exact, "se": se }),
        );
    }
    tally
}

/// Reverse-mode gradient of the minibatch Lagrangian against central
/// differences on `params` randomly chosen parameters of a small network.
pub fn check_estimator_gradient(seed: u64, trials: usize, params: usize) -> Tally {
    use crate::market::BuyerSampler;
    let mut rng = rng_for(seed, "estimator_gradient");
    let mut tally = Tally::default();
    for trial in 0..trials {
        let spec =
            [CesSpec::General { alpha: 0.5 }, CesSpec::CobbDouglas, CesSpec::Linear, CesSpec::General { alpha: -1.0 }]
                [trial % 4];
        let market = Market::generate(20, 3, 3, random_dist(&mut rng), spec, rng.random()).unwrap();
        let arch = Architecture::for_contexts(3, 2, 8);
        let net = AllocationNet::new(arch, rng.random()).unwrap();
        let lambda = random_multipliers(&mut rng, 3);
        let sample: Vec<usize> = (0..8).map(|_| market.sample_buyer(&mut rng)).collect();
        let (_, grad) = trainer::estimate_with_gradient(&net, &lambda, 0.2, &market, &sample).unwrap();
        let h = 1e-5;
        let mut theta = net.parameters().to_vec();
        // Central differences are meaningless across a ReLU kink, so only
        // parameters whose perturbation keeps every unit on its side are used.
        let rows: Vec<usize> = sample.clone();
        let inputs = net::pair_inputs(market.buyers().select(ndarray::Axis(0), &rows).view(), market.goods()).unwrap();
        let pattern = net.relu_pattern(inputs.view()).unwrap();
        let mut indices = Vec::with_capacity(params);
        while indices.len() < params {
            let p = rng.random_range(0..grad.len());
            let keep = theta[p];
            let smooth = [keep + h, keep - h].iter().all(|&v| {
                theta[p] = v;
                let probe = AllocationNet::from_parameters(arch, theta.clone()).unwrap();
                probe.relu_pattern(inputs.view()).unwrap() == pattern
            });
            theta[p] = keep;
            if smooth {
                indices.push(p);
            }
        }
        let err = finite_difference_error(&mut theta, &grad, &indices, h, |p| {
            let probe = AllocationNet::from_parameters(arch, p.to_vec()).unwrap();
            trainer::estimate_lagrangian(&probe, &lambda, 0.2, &market, &sample).unwrap().total()
        });
        tally.record(err <= 1e-4, err, || {
            json!({ "market": market_witness(&market), "parameters": net.parameters(), "sample": sample, "lambda": lambda })
        });
    }
    tally
}

fn estimator_gradient(seed: u64, profile: Profile) -> Tally {
    check_estimator_gradient(seed, profile.trials(40), 25)
}

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 16, inner_iters: 5, epochs: 3, depth: 1, width: 8, seed, ..TrainConfig::default() }
}

fn training_determinism(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "training_determinism");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(10) {
        let market = random_market(&mut rng, CesSpec::General { alpha: 0.5 }, 64, 4);
        let config = tiny_train_config(rng.random());
        let a = trainer::train(&market, &config).unwrap();
        let b = trainer::train(&market, &config).unwrap();
        let same = a.history.curve_csv_string() == b.history.curve_csv_string()
            && a.net.parameters() == b.net.parameters()
            && a.multipliers == b.multipliers;
        tally.record(same, 1.0, || json!({ "market": market_witness(&market), "config": config }));
    }
    tally
}

/// Median optimizer-phase seconds per epoch.
pub fn median_train_seconds(history: &crate::history::History) -> f64 {
    let mut t: Vec<f64> = history.records.iter().map(|r| r.train_seconds).collect();
    t.sort_by(f64::total_cmp);
    t[t.len() / 2]
}

fn epoch_cost_flat_in_n(seed: u64, profile: Profile) -> Tally {
    let mut tally = Tally::default();
    let config = TrainConfig {
        inner_iters: profile.trials(100).max(20),
        epochs: 3,
        depth: 3,
        width: 64,
        evaluate_epochs: false,
        multiplier_pass: MultiplierPass::Exact,
        seed,
        ..TrainConfig::default()
    };
    let mut seconds = Vec::new();
    for n in [1 << 12, 1 << 16] {
        let market =
            Market::generate(n, 5, 5, ContextDistribution::StandardNormal, CesSpec::General { alpha: 0.5 }, seed)
                .unwrap();
        match trainer::train(&market, &config) {
            Ok(out) => seconds.push(median_train_seconds(&out.history)),
            Err(e) => tally.error(e, || json!({ "n": n })),
        }
    }
    if let [small, large] = seconds[..] {
        let ratio = large / small;
        tally.record(ratio < 2.0, ratio, || json!({ "small_seconds": small, "large_seconds": large }));
    }
    tally
}

fn naive_feasible(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "naive_feasible");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(100) {
        let spec = REGIMES[rng.random_range(0..REGIMES.len())];
        let market = random_market(&mut rng, spec, 200, 10);
        let c = baselines::naive(&market);
        let projected = metrics::project(&market, c.allocation.view(), &c.prices).unwrap();
        // The price identity holds up to the rounding of sum_j (sum B / m).
        let ok = projected.voa == 0.0 && projected.vop <= 4.0 * f64::EPSILON;
        tally.record(ok, projected.voa.max(projected.vop), || market_witness(&market));
    }
    tally
}

fn eg_descent(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "eg_descent");
    let mut tally = Tally::default();
    for trial in 0..profile.trials(20) {
        let spec = if trial % 2 == 0 { CesSpec::CobbDouglas } else { CesSpec::General { alpha: 0.5 } };
        let market = random_market(&mut rng, spec, 30, 4);
        let config = EgConfig { epochs: 3, early_stop: None, ..EgConfig::defaults_for(&market, 0.0) };
        let mut solver = EgSolver::new(&market, config.clone()).unwrap();
        let (mut steps, mut increases) = (0usize, 0usize);
        for _ in 0..config.epochs {
            let mut previous: Option<f64> = None;
            for _ in 0..config.inner_iters {
                let value = solver.inner_step().unwrap().total();
                if let Some(prev) = previous {
                    steps += 1;
                    if value > prev + 1e-12 * prev.abs() {
                        increases += 1;
                    }
                }
                previous = Some(value);
            }
            solver.multiplier_step(config.schedule.at(solver.history().records.len() + 1));
        }
        let share = 1.0 - increases as f64 / steps as f64;
        tally.record(
            share >= 0.95,
            1.0 - share,
            || json!({ "market": market_witness(&market), "descent_share": share }),
        );
    }
    tally
}

fn eg_reaches_equilibrium(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "eg_reaches_equilibrium");
    let mut tally = Tally::default();
    for trial in 0..profile.trials(20) {
        let spec = if trial % 2 == 0 { CesSpec::CobbDouglas } else { CesSpec::General { alpha: 0.5 } };
        // Five context dimensions, as in the experiments the step sizes were tuned on.
        let (n, m) = (rng.random_range(2..=100), rng.random_range(2..=5));
        let market = Market::generate(n, m, 5, random_dist(&mut rng), spec, rng.random()).unwrap();
        for momentum in [0.0, 0.9] {
            let config = EgConfig::defaults_for(&market, momentum);
            let result = if momentum > 0.0 {
                baselines::eg_momentum_solve(&market, &config)
            } else {
                baselines::eg_solve(&market, &config)
            };
            match result.and_then(|(c, _)| metrics::evaluate(&market, &c)) {
                Ok(report) => tally.record(
                    report.ng <= 1e-3,
                    report.ng,
                    || json!({ "market": market_witness(&market), "momentum": momentum, "ng": report.ng }),
                ),
                Err(e) => tally.error(e, || json!({ "market": market_witness(&market), "momentum": momentum })),
            }
        }
    }
    tally
}

/// Certified oracle results on random small markets across the
/// differentiable regimes; each result is handed to `check`.
fn certified_results(
    seed: u64,
    name: &str,
    count: usize,
    mut check: impl FnMut(&Market, &oracle::OracleResult, &mut Tally),
) -> Tally {
    let mut rng = rng_for(seed, name);
    let mut tally = Tally::default();
    for trial in 0..count {
        let spec = REGIMES[trial % 4];
        let market = random_market(&mut rng, spec, 40, 5);
        match oracle::equilibrium(&market, OracleTolerance::default()) {
            Ok(result) => check(&market, &result, &mut tally),
            Err(e) => tally.error(e, || market_witness(&market)),
        }
    }
    tally
}

fn oracle_price_identity(seed: u64, profile: Profile) -> Tally {
    certified_results(seed, "oracle_price_identity", profile.trials(40), |market, result, tally| {
        let spent: f64 = result.candidate.prices.iter().zip(market.supplies()).map(|(p, y)| p * y).sum();
        let err = (spent - market.total_budget()).abs() / market.total_budget();
        tally.record(err <= 1e-8 && result.certified_ng <= 1e-6, err, || market_witness(market));
    })
}

fn oracle_positive_prices(seed: u64, profile: Profile) -> Tally {
    certified_results(seed, "oracle_positive_prices", profile.trials(40), |market, result, tally| {
        let ok = result.candidate.prices.iter().all(|&p| p > 0.0);
        tally.record(ok, 1.0, || market_witness(market));
    })
}

/// Closed-form against numeric Cobb-Douglas prices on `count` random markets
/// with up to 100 buyers and 5 goods; one trial per market.
pub fn check_oracle_cross(seed: u64, count: usize, tolerance: f64) -> Tally {
    let mut rng = rng_for(seed, "oracle_cross_check");
    let mut tally = Tally::default();
    // The KKT bound is the relative price error it certifies, so it is set
    // well inside the tolerance being checked.
    let tight = OracleTolerance { kkt: tolerance / 100.0, ..OracleTolerance::default() };
    for _ in 0..count {
        let market = random_market(&mut rng, CesSpec::CobbDouglas, 100, 5);
        let closed = oracle::cobb_douglas_equilibrium(&market).unwrap();
        match oracle::numeric_equilibrium(&market, tight) {
            Ok(numeric) => {
                let err = closed
                    .candidate
                    .prices
                    .iter()
                    .zip(&numeric.candidate.prices)
                    .map(|(a, b)| relative_gap(*a, *b))
                    .fold(0.0, f64::max);
                tally.record(err <= tolerance, err, || market_witness(&market));
            }
            Err(e) => tally.error(e, || market_witness(&market)),
        }
    }
    tally
}

fn oracle_cross_check(seed: u64, profile: Profile) -> Tally {
    check_oracle_cross(seed, profile.trials(20), 1e-5)
}

fn scratch_dir(seed: u64, name: &str) -> std::path::PathBuf {
    std::env::temp_dir().join(format!("ctxmarket-{name}-{seed}-{}", std::process::id()))
}

fn small_method_configs(market: &Market, seed: u64) -> Vec<MethodConfig> {
    vec![
        MethodConfig::Naive,
        MethodConfig::EgM(EgConfig { epochs: 3, ..EgConfig::defaults_for(market, 0.9) }),
        MethodConfig::Fcnet(tiny_train_config(seed)),
    ]
}

fn artifact_round_trip(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "artifact_round_trip");
    let mut tally = Tally::default();
    let root = scratch_dir(seed, "round-trip");
    for trial in 0..profile.trials(10) {
        let spec = REGIMES[trial % 4];
        let market = random_market(&mut rng, spec, 40, 4);
        let dir = root.join(trial.to_string());
        let market_path = dir.join("market.json");
        let outcome = (|| -> Result<bool> {
            std::fs::create_dir_all(&dir)?;
            harness::save_market(&market_path, &market, false)?;
            let reloaded = harness::load_market(&market_path)?;
            let mut ok = true;
            for method in small_method_configs(&reloaded, rng.random()) {
                let out = harness::run(&reloaded, &method)?;
                let run_dir = dir.join(out.record.method.name());
                let record = harness::write_artifacts(&run_dir, &out)?;
                let again = harness::load_market(&market_path)?;
                let candidate =
                    harness::load_candidate(&run_dir.join(record.candidate.as_deref().unwrap_or_default()))?;
                ok &= metrics::evaluate(&again, &candidate)? == record.report;
                if let Some(name) = &record.checkpoint {
                    let checkpoint = crate::net::Checkpoint::load(&run_dir.join(name))?;
                    let replay = harness::checkpoint_candidate(&again, &checkpoint)?;
                    ok &= metrics::evaluate(&again, &replay)? == record.report;
                }
            }
            Ok(ok)
        })();
        match outcome {
            Ok(ok) => tally.record(ok, 1.0, || market_witness(&market)),
            Err(e) => tally.error(e, || market_witness(&market)),
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    tally
}

fn timing_separation(seed: u64, profile: Profile) -> Tally {
    let mut rng = rng_for(seed, "timing_separation");
    let mut tally = Tally::default();
    for _ in 0..profile.trials(10) {
        let market = random_market(&mut rng, CesSpec::CobbDouglas, 40, 4);
        for method in small_method_configs(&market, rng.random()) {
            match harness::run(&market, &method) {
                Ok(out) => {
                    let r = &out.record;
                    let json = serde_json::to_value(r).unwrap_or(Value::Null);
                    let ok = r.train_seconds.is_finite()
                        && r.eval_seconds.is_finite()
                        && r.train_seconds >= 0.0
                        && r.eval_seconds > 0.0
                        && json.get("train_seconds").is_some()
                        && json.get("eval_seconds").is_some();
                    tally.record(ok, 1.0, || json);
                }
                Err(e) => tally.error(e, || market_witness(&market)),
            }
        }
    }
    tally
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    #[test]
    fn reference_softplus_matches_known_values() {
        assert!(relative_gap(softplus_reference(0.0), std::f64::consts::LN_2) < 1e-15);
        assert!(relative_gap(softplus_reference(-700.0), 9.8596765437597708567e-305) < 1e-14);
        assert!(relative_gap(softplus_reference(3.5), 3.5297504182726205652) < 1e-15);
    }

    #[test]
    fn quick_profile_shrinks_trials() {
        assert_eq!(Profile::Quick.trials(1000), 100);
        assert_eq!(Profile::Quick.trials(5), 1);
        assert_eq!(Profile::Full.trials(5), 5);
    }

    #[test]
    fn tally_keeps_worst_witness() {
        let mut t = Tally::default();
        t.record(true, 0.0, || json!(0));
        t.record(false, 1.0, || json!(1));
        t.record(false, 3.0, || json!(3));
        t.record(false, 2.0, || json!(2));
        assert_eq!((t.trials, t.failures), (4, 3));
        assert_eq!(t.witness, Some(json!(3)));
    }

    #[test]
    fn junit_escapes_and_counts() {
        let outcomes = vec![
            PropertyOutcome {
                name: "a".into(),
                module: "m".into(),
                anchor: "x < y".into(),
                trials: 3,
                failures: 1,
                witness: Some(json!({ "k": "<&>" })),
                seconds: 0.5,
            },
            PropertyOutcome {
                name: "b".into(),
                module: "m".into(),
                anchor: "z".into(),
                trials: 2,
                failures: 0,
                witness: None,
                seconds: 0.1,
            },
        ];
        let mut buf = Vec::new();
        write_junit(&outcomes, &mut buf).unwrap();
        let xml = String::from_utf8(buf).unwrap();
        assert!(xml.contains(r#"tests="2" failures="1""#));
        assert!(xml.contains("x &lt; y"));
        assert!(xml.contains("&lt;&amp;&gt;"));
        assert!(summary(&outcomes).contains("2 properties, 1 failed"));
    }

    #[test]
    fn every_property_is_named_once() {
        let mut names = property_names();
        let count = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), count);
        assert_eq!(count, 31);
    }
}
