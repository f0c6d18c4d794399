//! Experiment plumbing: run a solver on a market, score it, write the
//! artifacts, and sweep grids of markets and methods.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, EgConfig};
use crate::ces::CesSpec;
use crate::error::{Error, Result};
use crate::history::History;
use crate::market::{ContextDistribution, Market, MarketFile};
use crate::metrics::{self, EquilibriumCandidate, MetricsReport};
use crate::net::Checkpoint;
use crate::trainer::{self, TrainConfig};

/// Dense candidate files are written only up to this many entries.
pub const DENSE_CANDIDATE_LIMIT: usize = 10_000_000;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CANDIDATE_FILE: &str = "candidate.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Naive,
    Eg,
    EgM,
    Fcnet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Naive, Method::Eg, Method::EgM, Method::Fcnet];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Eg => "eg",
            Method::EgM => "eg-m",
            Method::Fcnet => "fcnet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Method::Naive),
            "eg" => Ok(Method::Eg),
            "eg-m" | "egm" => Ok(Method::EgM),
            "fcnet" | "marketfcnet" => Ok(Method::Fcnet),
            other => Err(Error::invalid(format!("unknown method {other:?} (naive, eg, eg-m, fcnet)"))),
        }
    }
}

/// A method together with its settings, so the two cannot disagree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "config", rename_all = "kebab-case")]
pub enum MethodConfig {
    Naive,
    Eg(EgConfig),
    EgM(EgConfig),
    Fcnet(TrainConfig),
}

impl MethodConfig {
    /// Tuned defaults for `market`; the network settings come from `train`.
    pub fn defaults(method: Method, market: &Market, train: &TrainConfig) -> Self {
        match method {
            Method::Naive => MethodConfig::Naive,
            Method::Eg => MethodConfig::Eg(EgConfig::defaults_for(market, 0.0)),
            Method::EgM => MethodConfig::EgM(EgConfig::defaults_for(market, 0.9)),
            Method::Fcnet => MethodConfig::Fcnet(train.clone()),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            MethodConfig::Naive => Method::Naive,
            MethodConfig::Eg(_) => Method::Eg,
            MethodConfig::EgM(_) => Method::EgM,
            MethodConfig::Fcnet(_) => Method::Fcnet,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub market: MarketFile,
    #[serde(flatten)]
    pub method: MethodConfig,
}

impl ExperimentConfig {
    pub fn new(market: &Market, method: MethodConfig) -> Self {
        ExperimentConfig { market: market.to_file(false), method }
    }

    /// FNV-1a over the canonical JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in text.bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub alpha: CesSpec,
    pub dist: ContextDistribution,
    pub report: MetricsReport,
    /// Solver wall-clock, including per-epoch scoring.
    pub train_seconds: f64,
    /// Wall-clock of the final projection and scoring.
    pub eval_seconds: f64,
    pub epochs: usize,
    #[serde(default)]
    pub curve: Option<String>,
    #[serde(default)]
    pub candidate: Option<String>,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub record: RunRecord,
    pub candidate: EquilibriumCandidate,
    pub history: Option<History>,
    pub checkpoint: Option<Checkpoint>,
}

/// Solves `market` with the configured method and scores the result.
pub fn run(market: &Market, method: &MethodConfig) -> Result<RunOutput> {
    let config = ExperimentConfig::new(market, method.clone());
    let started = Instant::now();
    let (candidate, history, checkpoint) = match method {
        MethodConfig::Naive => (baselines::naive(market), None, None),
        MethodConfig::Eg(cfg) => {
            let (c, h) = baselines::eg_solve(market, cfg)?;
            (c, Some(h), None)
        }
        MethodConfig::EgM(cfg) => {
            let (c, h) = baselines::eg_momentum_solve(market, cfg)?;
            (c, Some(h), None)
        }
        MethodConfig::Fcnet(cfg) => {
            let outcome = trainer::train(market, cfg)?;
            let candidate = outcome.candidate(market)?;
            let checkpoint = outcome.net.checkpoint(Some(&outcome.optimizer), Some(&outcome.multipliers));
            (candidate, Some(outcome.history), Some(checkpoint))
        }
    };
    let train_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let report = metrics::evaluate(market, &candidate)?;
    let eval_seconds = started.elapsed().as_secs_f64();
    let record = RunRecord {
        config_hash: config.hash(),
        method: method.method(),
        n: market.n(),
        m: market.m(),
        alpha: market.ces(),
        dist: market.dist(),
        report,
        train_seconds,
        eval_seconds,
        epochs: history.as_ref().map_or(0, |h| h.records.len()),
        curve: None,
        candidate: None,
        checkpoint: None,
    };
    Ok(RunOutput { config, record, candidate, history, checkpoint })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Writes the summary, config, curves, and either the dense candidate or the
/// checkpoint into `dir`. Returns the record with the file references set.
pub fn write_artifacts(dir: &Path, output: &RunOutput) -> Result<RunRecord> {
    fs::create_dir_all(dir)?;
    let mut record = output.record.clone();
    write_json(&dir.join("config.json"), &output.config)?;
    if let Some(history) = &output.history {
        history.write_curve_csv(fs::File::create(dir.join(CURVE_FILE))?)?;
        history.write_timing_csv(fs::File::create(dir.join(TIMING_FILE))?)?;
        record.curve = Some(CURVE_FILE.into());
    }
    if let Some(checkpoint) = &output.checkpoint {
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        record.checkpoint = Some(CHECKPOINT_FILE.into());
    }
    if record.n * record.m <= DENSE_CANDIDATE_LIMIT {
        write_json(&dir.join(CANDIDATE_FILE), &output.candidate)?;
        record.candidate = Some(CANDIDATE_FILE.into());
    }
    write_json(&dir.join(SUMMARY_FILE), &record)?;
    Ok(record)
}

pub fn load_market(path: &Path) -> Result<Market> {
    Market::from_json(&fs::read_to_string(path)?)
}

pub fn save_market(path: &Path, market: &Market, include_contexts: bool) -> Result<()> {
    write_json(path, &market.to_file(include_contexts))
}

pub fn load_candidate(path: &Path) -> Result<EquilibriumCandidate> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Candidate read off a stored network and its multipliers.
pub fn checkpoint_candidate(market: &Market, checkpoint: &Checkpoint) -> Result<EquilibriumCandidate> {
    let multipliers = checkpoint
        .multipliers
        .as_deref()
        .ok_or_else(|| Error::invalid("checkpoint has no multipliers to use as prices"))?;
    trainer::extract_solution(&checkpoint.net()?, multipliers, market)
}

/// Market grid and method set for [`sweep`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSpec {
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub alphas: Vec<CesSpec>,
    pub dists: Vec<ContextDistribution>,
    pub methods: Vec<Method>,
    pub k: usize,
    pub seed: u64,
    /// Settings for FCNet cells; the seed is replaced by the sweep seed.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub alpha: CesSpec,
    pub dist: ContextDistribution,
    pub ng: Option<f64>,
    pub voa: Option<f64>,
    pub vop: Option<f64>,
    pub seconds: f64,
    /// Set when the cell failed; the sweep carries on.
    pub error: Option<String>,
}

impl SweepRow {
    pub const CSV_COLUMNS: [&'static str; 10] =
        ["method", "n", "m", "alpha", "dist", "ng", "voa", "vop", "seconds", "error"];

    fn csv_fields(&self) -> [String; 10] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.method.to_string(),
            self.n.to_string(),
            self.m.to_string(),
            self.alpha.to_string(),
            self.dist.short_name().to_string(),
            opt(self.ng),
            opt(self.voa),
            opt(self.vop),
            self.seconds.to_string(),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

/// Runs every (dist, alpha, n, m, method) cell in that nesting order and
/// calls `on_row` as each finishes.
pub fn sweep(spec: &SweepSpec, on_row: impl FnMut(&SweepRow)) -> Vec<SweepRow> {
    sweep_with(spec, |config| config, on_row)
}

/// [`sweep`] with each cell's default method config passed through `adjust`.
pub fn sweep_with(
    spec: &SweepSpec,
    adjust: impl Fn(MethodConfig) -> MethodConfig,
    mut on_row: impl FnMut(&SweepRow),
) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    let train = TrainConfig { seed: spec.seed, ..spec.train.clone() };
    for &dist in &spec.dists {
        for &alpha in &spec.alphas {
            for &n in &spec.ns {
                for &m in &spec.ms {
                    let market = Market::generate(n, m, spec.k, dist, alpha, spec.seed);
                    for &method in &spec.methods {
                        let started = Instant::now();
                        let result = market
                            .as_ref()
                            .map_err(|e| Error::invalid(e.to_string()))
                            .and_then(|market| run(market, &adjust(MethodConfig::defaults(method, market, &train))));
                        let mut row = SweepRow {
                            method,
                            n,
                            m,
                            alpha,
                            dist,
                            ng: None,
                            voa: None,
                            vop: None,
                            seconds: 0.0,
                            error: None,
                        };
                        match result {
                            Ok(out) => {
                                row.ng = Some(out.record.report.ng);
                                row.voa = Some(out.record.report.voa);
                                row.vop = Some(out.record.report.vop);
                                row.seconds = out.record.train_seconds;
                            }
                            Err(e) => {
                                log::warn!("sweep cell {method} n={n} m={m} alpha={alpha} {dist:?} failed: {e}");
                                row.seconds = started.elapsed().as_secs_f64();
                                row.error = Some(e.to_string());
                            }
                        }
                        on_row(&row);
                        rows.push(row);
                    }
                }
            }
        }
    }
    rows
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SweepRow::CSV_COLUMNS)?;
    for row in rows {
        w.write_record(row.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Default output directory: `$CTXMARKET_OUT` or `./runs`.
pub fn default_output_dir() -> PathBuf {
    std::env::var_os("CTXMARKET_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("gd".parse::<Method>().is_err());
    }

    #[test]
    fn config_hash_tracks_settings() {
        let market = Market::generate(4, 2, 2, ContextDistribution::StandardNormal, CesSpec::CobbDouglas, 1).unwrap();
        let a = ExperimentConfig::new(&market, MethodConfig::Naive);
        let b = ExperimentConfig::new(&market, MethodConfig::Naive);
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::new(&market, MethodConfig::Eg(EgConfig::defaults_for(&market, 0.0)));
        assert_ne!(a.hash(), c.hash());
        let other = Market::generate(4, 2, 2, ContextDistribution::StandardNormal, CesSpec::CobbDouglas, 2).unwrap();
        assert_ne!(a.hash(), ExperimentConfig::new(&other, MethodConfig::Naive).hash());
    }

    #[test]
    fn method_config_serializes_with_tag() {
        let json = serde_json::to_string(&MethodConfig::Naive).unwrap();
        assert_eq!(json, r#"{"method":"naive"}"#);
        let market = Market::generate(4, 2, 2, ContextDistribution::StandardNormal, CesSpec::CobbDouglas, 1).unwrap();
        let eg = MethodConfig::EgM(EgConfig::defaults_for(&market, 0.9));
        let back: MethodConfig = serde_json::from_str(&serde_json::to_string(&eg).unwrap()).unwrap();
        assert_eq!(back, eg);
    }
}
