//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ctxmarket::baselines::{self, EgConfig};
use ctxmarket::ces::CesSpec;
use ctxmarket::history::History;
use ctxmarket::market::ContextDistribution;
use ctxmarket::metrics;
use ctxmarket::net::{AllocationNet, Architecture};
use ctxmarket::oracle::{self, OracleTolerance};
use ctxmarket::properties::{self, Tally};
use ctxmarket::rng::{substream, Stream};
use ctxmarket::trainer::{self, MultiplierPass, TrainConfig};
use ctxmarket::Market;
use rand::Rng;

const SEED: u64 = 20240601;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn within(elapsed: Duration, limit_seconds: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s <= limit_seconds, format!("{s:.2}s of {limit_seconds}s"))
}

fn tally_detail(t: &Tally) -> String {
    match &t.witness {
        None => format!("{}/{} trials ok", t.trials - t.failures, t.trials),
        Some(w) => {
            let mut w = w.to_string();
            w.truncate(300);
            format!("{} of {} trials failed; worst witness {w}", t.failures, t.trials)
        }
    }
}

fn closed_forms() -> Verdict {
    let started = Instant::now();
    let optimal = properties::check_ces_optimality(SEED, 100, 500);
    let consistent = properties::run_one("ces_consistency", SEED, properties::Profile::Full).unwrap();
    let exhausted = properties::run_one("ces_budget_exhaustion", SEED, properties::Profile::Full).unwrap();
    let (fast, time) = within(started.elapsed(), 10.0);
    verdict(
        optimal.failures == 0 && consistent.passed() && exhausted.passed() && fast,
        format!(
            "optimality: {}; demand utility: {} failed; budget: {} failed; {time}",
            tally_detail(&optimal),
            consistent.failures,
            exhausted.failures
        ),
    )
}

fn unbiasedness() -> Verdict {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rng = substream(SEED, Stream::Aux(2));
    let mut count = 0;
    for n in [2, 3] {
        for spec in [CesSpec::General { alpha: 0.5 }, CesSpec::CobbDouglas, CesSpec::Linear] {
            let market = Market::generate(n, 3, 3, ContextDistribution::StandardNormal, spec, rng.random()).unwrap();
            let net = AllocationNet::new(Architecture::for_contexts(3, 2, 16), rng.random()).unwrap();
            let lambda: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
            worst = worst.max(properties::enumeration_gap(&net, &lambda, 0.2, &market).unwrap());
            count += 1;
        }
    }
    let (fast, time) = within(started.elapsed(), 1.0);
    verdict(worst <= 1e-12 && fast, format!("{count} markets, worst term gap {worst:e}; {time}"))
}

fn gradient() -> Verdict {
    let started = Instant::now();
    let tally = properties::check_estimator_gradient(SEED, 8, 25);
    let (fast, time) = within(started.elapsed(), 30.0);
    verdict(tally.failures == 0 && fast, format!("{} parameters; {}; {time}", 8 * 25, tally_detail(&tally)))
}

/// Certified oracle results on random Cobb-Douglas and alpha = 0.5 markets.
fn certified(rng: &mut impl Rng, count: usize) -> Vec<(Market, Result<oracle::OracleResult, String>)> {
    (0..count)
        .map(|i| {
            let spec = if i % 2 == 0 { CesSpec::CobbDouglas } else { CesSpec::General { alpha: 0.5 } };
            let market = properties::random_market(rng, spec, 50, 5);
            let result = oracle::equilibrium(&market, OracleTolerance::default()).map_err(|e| e.to_string());
            (market, result)
        })
        .collect()
}

fn nonnegativity(results: &[(Market, Result<oracle::OracleResult, String>)], started: Instant) -> Verdict {
    let tally = properties::check_ng_nonnegative(SEED, &[CesSpec::CobbDouglas, CesSpec::General { alpha: 0.5 }], 500);
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for (market, result) in results {
        match result {
            Ok(r) => {
                let ng = metrics::nash_gap(market, r.candidate.allocation.view(), &r.candidate.prices).unwrap();
                worst = worst.max(ng);
            }
            Err(e) => failed.push(format!("{}x{} {}: {e}", market.n(), market.m(), market.ces())),
        }
    }
    let (fast, time) = within(started.elapsed(), 120.0);
    verdict(
        tally.failures == 0 && failed.is_empty() && worst <= 1e-6 && fast,
        format!(
            "random candidates: {}; {} oracle equilibria, worst NG {worst:e}, {} uncertified {failed:?}; {time}",
            tally_detail(&tally),
            results.len(),
            failed.len()
        ),
    )
}

fn price_identity(results: &[(Market, Result<oracle::OracleResult, String>)]) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut positive = true;
    let mut certified = 0;
    for (market, result) in results {
        if let Ok(r) = result {
            let spent: f64 = r.candidate.prices.iter().zip(market.supplies()).map(|(p, y)| p * y).sum();
            worst = worst.max((spent - market.total_budget()).abs() / market.total_budget());
            positive &= r.candidate.prices.iter().all(|&p| p > 0.0);
            certified += 1;
        }
    }
    verdict(
        worst <= 1e-8 && positive && certified > 0,
        format!(
            "{certified} certified results, worst relative identity residual {worst:e}, positive prices {positive}"
        ),
    )
}

fn cross_check() -> Verdict {
    let started = Instant::now();
    let tally = properties::check_oracle_cross(SEED, 20, 1e-5);
    let (fast, time) = within(started.elapsed(), 300.0);
    verdict(tally.failures == 0 && fast, format!("{}; {time}", tally_detail(&tally)))
}

fn desk_market() -> Market {
    Market::generate(4096, 5, 5, ContextDistribution::StandardNormal, CesSpec::General { alpha: 0.5 }, 7).unwrap()
}

fn desk_train_config() -> TrainConfig {
    TrainConfig { depth: 3, width: 64, seed: 7, ..TrainConfig::default() }
}

struct DeskRun {
    naive: f64,
    fcnet: f64,
    fcnet_voa: f64,
    eg: f64,
    fcnet_history: History,
    eg_history: History,
    seconds: f64,
}

fn desk_run() -> Result<DeskRun, String> {
    let started = Instant::now();
    let market = desk_market();
    let naive = metrics::evaluate(&market, &baselines::naive(&market)).map_err(|e| e.to_string())?.ng;
    let fc = trainer::train(&market, &desk_train_config()).map_err(|e| e.to_string())?;
    let fc_report =
        metrics::evaluate(&market, &fc.candidate(&market).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let (eg, eg_history) =
        baselines::eg_momentum_solve(&market, &EgConfig::defaults_for(&market, 0.9)).map_err(|e| e.to_string())?;
    let eg_report = metrics::evaluate(&market, &eg).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        naive,
        fcnet: fc_report.ng,
        fcnet_voa: fc_report.voa,
        eg: eg_report.ng,
        fcnet_history: fc.history,
        eg_history,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn desk(run: &Result<DeskRun, String>) -> Verdict {
    match run {
        Err(e) => verdict(false, format!("run failed: {e}")),
        Ok(r) => verdict(
            r.fcnet <= 5e-2 && r.fcnet <= r.naive / 5.0 && r.eg <= 1e-2 && r.seconds <= 1200.0,
            format!(
                "FCNet NG {:.3e} (VoA {:.3e}), EG-m NG {:.3e}, naive NG {:.3e}; {:.1}s of 1200s",
                r.fcnet, r.fcnet_voa, r.eg, r.naive, r.seconds
            ),
        ),
    }
}

fn median_eg_epoch_seconds(history: &History) -> f64 {
    properties::median_train_seconds(history)
}

fn scale_trend() -> Verdict {
    let started = Instant::now();
    let train = TrainConfig {
        epochs: 3,
        depth: 3,
        width: 64,
        evaluate_epochs: false,
        multiplier_pass: MultiplierPass::Exact,
        seed: SEED,
        ..TrainConfig::default()
    };
    let mut fc = Vec::new();
    let mut eg = Vec::new();
    for n in [1 << 12, 1 << 16] {
        let market =
            Market::generate(n, 5, 5, ContextDistribution::StandardNormal, CesSpec::General { alpha: 0.5 }, SEED)
                .unwrap();
        match trainer::train(&market, &train) {
            Ok(out) => fc.push(properties::median_train_seconds(&out.history)),
            Err(e) => return verdict(false, format!("FCNet at n={n} failed: {e}")),
        }
        let config =
            EgConfig { epochs: 3, early_stop: None, evaluate_epochs: false, ..EgConfig::defaults_for(&market, 0.9) };
        match baselines::eg_momentum_solve(&market, &config) {
            Ok((_, history)) => eg.push(median_eg_epoch_seconds(&history)),
            Err(e) => return verdict(false, format!("EG-m at n={n} failed: {e}")),
        }
    }
    let fc_ratio = fc[1] / fc[0];
    let eg_ratio = eg[1] / eg[0];
    let (fast, time) = within(started.elapsed(), 1800.0);
    verdict(
        fc_ratio < 2.0 && eg_ratio >= 8.0 && fast,
        format!(
            "FCNet epoch {:.3}s -> {:.3}s (x{fc_ratio:.2}), EG epoch {:.3}s -> {:.3}s (x{eg_ratio:.1}); {time}",
            fc[0], fc[1], eg[0], eg[1]
        ),
    )
}

fn curvature() -> Verdict {
    let started = Instant::now();
    let market = Market::generate(3, 3, 3, ContextDistribution::StandardNormal, CesSpec::CobbDouglas, SEED).unwrap();
    let mut rng = substream(SEED, Stream::Aux(9));
    let slopes: Vec<f64> = (0..5).map(|_| properties::curvature_slope(&market, &mut rng).unwrap()).collect();
    let ok = slopes.iter().all(|s| (s - 2.0).abs() <= 0.3);
    let (fast, time) = within(started.elapsed(), 10.0);
    verdict(ok && fast, format!("slopes over five directions {slopes:.3?}; {time}"))
}

fn determinism(first: &Result<DeskRun, String>) -> Verdict {
    let (Ok(a), Ok(b)) = (first, desk_run()) else {
        return verdict(false, "a desk run failed");
    };
    let fc_same = a.fcnet_history.curve_csv_string() == b.fcnet_history.curve_csv_string();
    let eg_same = a.eg_history.curve_csv_string() == b.eg_history.curve_csv_string();
    verdict(
        fc_same && eg_same,
        format!(
            "FCNet curve identical: {fc_same} ({} epochs), EG-m curve identical: {eg_same} ({} epochs)",
            a.fcnet_history.records.len(),
            a.eg_history.records.len()
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |c: u32| wanted.is_empty() || wanted.contains(&c);
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |c: u32, name: &'static str, v: Verdict| {
        println!("{} criterion {c:>2} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        results.push((c, name, v));
    };

    if run(1) {
        report(1, "closed-form demand certification", closed_forms());
    }
    if run(2) {
        report(2, "estimator unbiasedness", unbiasedness());
    }
    if run(3) {
        report(3, "gradient correctness", gradient());
    }
    if run(4) || run(5) {
        let started = Instant::now();
        let mut rng = substream(SEED, Stream::Aux(4));
        let results = certified(&mut rng, 40);
        report(4, "Nash gap nonnegativity", nonnegativity(&results, started));
        report(5, "price identity and positive prices", price_identity(&results));
    }
    if run(6) {
        report(6, "Cobb-Douglas oracle cross-check", cross_check());
    }
    let desk_result = if run(7) || run(10) { Some(desk_run()) } else { None };
    if run(7) {
        report(7, "desk-scale comparison", desk(desk_result.as_ref().unwrap()));
    }
    if run(8) {
        report(8, "per-epoch cost against market size", scale_trend());
    }
    if run(9) {
        report(9, "fixed-price welfare curvature", curvature());
    }
    if run(10) {
        report(10, "determinism", determinism(desk_result.as_ref().unwrap()));
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!("{} criteria, {} failed {failed:?}", results.len(), failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
