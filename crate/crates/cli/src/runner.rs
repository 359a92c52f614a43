//! Experiment execution: stream preparation per regime, the sequential
//! training loop, checkpoints and output files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use natstream_core::eval::{EvalReport, ReportSummary};
use natstream_core::ingest::load_stream;
use natstream_core::rng::{derive_seed, seeded};
use natstream_core::{
    balance_stream, generate_stream, preset_profile, shuffle_stream, split_into_experiences, Learner, StreamView,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Regime};

/// The unbalanced, ordered training stream and its test partitions.
#[derive(Debug, Clone)]
pub struct Streams {
    pub train: StreamView,
    pub test: StreamView,
    /// Whether test macro-experience `e` shares its condition with training
    /// macro-experience `e`.
    pub aligned: bool,
}

pub fn resolve_streams(cfg: &ExperimentConfig) -> anyhow::Result<Streams> {
    if let Some(name) = &cfg.preset {
        let mut spec = preset_profile(name)?;
        spec.seed = cfg.stream_seed.unwrap_or(cfg.seed);
        let (train, test) = generate_stream(&spec)?;
        return Ok(Streams {
            train,
            test,
            aligned: spec.test_macros.is_none(),
        });
    }
    let (Some(train_path), Some(test_path)) = (&cfg.train_manifest, &cfg.test_manifest) else {
        anyhow::bail!(crate::config::ConfigError("no stream source configured".into()));
    };
    let (train, _) = load_stream(train_path).with_context(|| format!("loading {}", train_path.display()))?;
    let (test, _) = load_stream(test_path).with_context(|| format!("loading {}", test_path.display()))?;
    if (train.dim, train.n_classes) != (test.dim, test.n_classes) {
        anyhow::bail!(crate::config::ConfigError(format!(
            "train stream has d={} N_c={} but test stream has d={} N_c={}",
            train.dim, train.n_classes, test.dim, test.n_classes
        )));
    }
    let aligned = train.macro_plan.len() == test.macro_plan.len();
    Ok(Streams { train, test, aligned })
}

/// Applies the regime transformation to the unbalanced ordered base.
pub fn prepare_regime(base: &StreamView, regime: Regime, seed: u64) -> anyhow::Result<StreamView> {
    Ok(match regime {
        Regime::OrderedUnbalanced => base.clone(),
        Regime::OrderedBalanced => balance_stream(base, &mut seeded(derive_seed(seed, "balance")))?,
        Regime::ShuffledBalanced => {
            let balanced = balance_stream(base, &mut seeded(derive_seed(seed, "balance")))?;
            shuffle_stream(&balanced, derive_seed(seed, "shuffle"))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        cell: String,
        n_classes: usize,
        n_test_macro: usize,
        train_len: usize,
        aligned: bool,
        config: ExperimentConfig,
    },
    Experience {
        index: usize,
        start: usize,
        len: usize,
        /// Memory stored flag per sample; empty without a memory.
        stored: Vec<bool>,
    },
    Checkpoint {
        index: usize,
        seen_macros: usize,
        position: usize,
        /// `confusion[macro][true][predicted]`.
        confusion: Vec<Vec<Vec<u64>>>,
        amca: f64,
        amca_seen: Option<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub report: EvalReport,
    pub log: Vec<LogRecord>,
}

impl RunResult {
    pub fn final_amca(&self) -> Option<f64> {
        self.report.trace.last().map(|c| c.amca)
    }
}

fn evaluate(learner: &Learner, test: &StreamView, report: &mut EvalReport) -> anyhow::Result<Vec<Vec<Vec<u64>>>> {
    let k = test.n_classes;
    let mut confusion = Vec::with_capacity(test.macro_plan.len());
    for e in 0..test.macro_plan.len() {
        let samples = test.macro_samples(e);
        let predicted = learner.predict_experience(samples)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        report.accumulate(e, &predicted, &labels)?;
        let mut m = vec![vec![0u64; k]; k];
        for (&p, &y) in predicted.iter().zip(&labels) {
            m[y][p] += 1;
        }
        confusion.push(m);
    }
    Ok(confusion)
}

/// Runs one configuration on already-resolved streams, entirely in memory.
pub fn execute(cfg: &ExperimentConfig, streams: &Streams) -> anyhow::Result<RunResult> {
    cfg.validate()?;
    let train = prepare_regime(&streams.train, cfg.regime, cfg.seed)?;
    let test = &streams.test;
    if test.macro_plan.is_empty() {
        anyhow::bail!(crate::config::ConfigError("test stream has no macro-experiences".into()));
    }
    let mut rng = seeded(derive_seed(cfg.seed, "learner"));
    let mut learner = Learner::build(&cfg.learner_config(), train.n_classes, train.dim, &mut rng)?;
    let mut report = EvalReport::new(test.n_classes, test.macro_plan.len())?;
    let mut log = vec![LogRecord::Header {
        cell: cfg.cell_name(),
        n_classes: train.n_classes,
        n_test_macro: test.macro_plan.len(),
        train_len: train.len(),
        aligned: streams.aligned,
        config: cfg.clone(),
    }];

    // Checkpoints fire once the stream position reaches the end of each
    // training macro-experience. Only the runner sees these boundaries.
    let boundaries: Vec<usize> = train.macro_plan.iter().map(|m| m.end).collect();
    let mut next_boundary = 0;
    let mut position = 0;
    for batch in split_into_experiences(&train, cfg.experience_size)? {
        let stored = learner.observe(&batch, &mut rng)?;
        log.push(LogRecord::Experience {
            index: batch.index,
            start: position,
            len: batch.len(),
            stored,
        });
        position += batch.len();
        while next_boundary < boundaries.len() && position >= boundaries[next_boundary] {
            next_boundary += 1;
            let confusion = evaluate(&learner, test, &mut report)?;
            let cp = report.commit_checkpoint(next_boundary, streams.aligned)?;
            log.push(LogRecord::Checkpoint {
                index: cp.index,
                seen_macros: cp.seen_macros,
                position,
                confusion,
                amca: cp.amca,
                amca_seen: cp.amca_seen,
            });
        }
    }
    Ok(RunResult {
        config: cfg.clone(),
        report,
        log,
    })
}

pub const REPORT_FILE: &str = "report.csv";
pub const LOG_FILE: &str = "run.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVES_FILE: &str = "curves.csv";

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_outputs(dir: &Path, result: &RunResult) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join(REPORT_FILE), result.report.to_csv().as_bytes())?;
    let mut log = Vec::new();
    for rec in &result.log {
        serde_json::to_writer(&mut log, rec)?;
        log.push(b'\n');
    }
    write_file(&dir.join(LOG_FILE), &log)?;
    let mut summary = serde_json::to_vec_pretty(&result.report.summary())?;
    summary.push(b'\n');
    write_file(&dir.join(SUMMARY_FILE), &summary)
}

/// Resolves the streams, runs, and writes the outputs to `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<RunResult> {
    cfg.validate()?;
    let streams = resolve_streams(cfg)?;
    let result = execute(cfg, &streams)?;
    write_outputs(&cfg.out_dir, &result)?;
    Ok(result)
}

/// Recomputes every checkpoint's AMCA from a run log. Returns
/// `(checkpoint, logged, recomputed)` triples.
pub fn recompute_from_log(path: &Path) -> anyhow::Result<Vec<(usize, f64, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(line)
            .map_err(|e| natstream_core::Error::Parse {
                path: path.to_path_buf(),
                line: line_no + 1,
                column: e.column(),
                msg: e.to_string(),
            })?;
        if let LogRecord::Checkpoint {
            index, confusion, amca, ..
        } = rec
        {
            let k = confusion.first().map_or(0, |m| m.len());
            let mut report = EvalReport::new(k, confusion.len())?;
            for (e, m) in confusion.iter().enumerate() {
                for (y, row) in m.iter().enumerate() {
                    for (p, &n) in row.iter().enumerate() {
                        report.accumulate(e, &vec![p; n as usize], &vec![y; n as usize])?;
                    }
                }
            }
            out.push((index, amca, report.amca()?));
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct GridOutcome {
    pub cells: Vec<(ExperimentConfig, Result<ReportSummary, String>)>,
    pub curves_csv: String,
}

impl GridOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|(_, r)| r.is_err()).count()
    }
}

/// Mean AMCA per checkpoint for each (learner, policy, regime), averaged
/// over seeds of the successful cells.
pub fn curves_table(cells: &[(ExperimentConfig, Result<ReportSummary, String>)]) -> String {
    let mut acc: BTreeMap<(String, String, String), Vec<Vec<f64>>> = BTreeMap::new();
    for (cfg, res) in cells {
        if let Ok(summary) = res {
            let key = (
                cfg.learner.name().to_string(),
                cfg.policy.name().to_string(),
                cfg.regime.name().to_string(),
            );
            acc.entry(key)
                .or_default()
                .push(summary.checkpoints.iter().map(|c| c.amca).collect());
        }
    }
    let mut out = String::from("checkpoint,learner,policy,regime,amca\n");
    for ((learner, policy, regime), runs) in &acc {
        let n = runs.iter().map(Vec::len).min().unwrap_or(0);
        for k in 0..n {
            let mean = runs.iter().map(|r| r[k]).sum::<f64>() / runs.len() as f64;
            out.push_str(&format!("{k},{learner},{policy},{regime},{mean:.6}\n"));
        }
    }
    out
}

/// Runs every cell in parallel with isolated state. Each cell writes to
/// `out_root/<cell name>`; a failing cell is recorded and the rest finish.
pub fn run_grid(cells: &[ExperimentConfig], out_root: &Path) -> anyhow::Result<GridOutcome> {
    if cells.is_empty() {
        anyhow::bail!(crate::config::ConfigError("grid has no cells".into()));
    }
    for cfg in cells {
        cfg.validate()?;
    }
    let results: Vec<(ExperimentConfig, Result<ReportSummary, String>)> = cells
        .par_iter()
        .map(|cfg| {
            let mut cell = cfg.clone();
            cell.out_dir = out_root.join(cfg.cell_name());
            let res = run_experiment(&cell)
                .map(|r| r.report.summary())
                .map_err(|e| format!("{e:#}"));
            if let Err(msg) = &res {
                log::error!("cell {} failed: {msg}", cell.cell_name());
            }
            (cell, res)
        })
        .collect();
    let curves_csv = curves_table(&results);
    fs::create_dir_all(out_root).with_context(|| format!("creating {}", out_root.display()))?;
    write_file(&out_root.join(CURVES_FILE), curves_csv.as_bytes())?;
    let mut status = fs::File::create(out_root.join("cells.jsonl"))
        .with_context(|| format!("writing {}", out_root.join("cells.jsonl").display()))?;
    for (cfg, res) in &results {
        let line = match res {
            Ok(s) => serde_json::json!({"cell": cfg.cell_name(), "ok": true, "final_amca": s.final_amca}),
            Err(e) => serde_json::json!({"cell": cfg.cell_name(), "ok": false, "error": e}),
        };
        writeln!(status, "{line}")?;
    }
    Ok(GridOutcome {
        cells: results,
        curves_csv,
    })
}

pub fn cell_dir(out_root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out_root.join(cfg.cell_name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PolicyChoice;
    use natstream_core::LearnerKind;

    fn small(learner: LearnerKind, policy: PolicyChoice, regime: Regime) -> ExperimentConfig {
        ExperimentConfig::new("soda-like", learner, policy, regime, 4)
    }

    #[test]
    fn checkpoints_follow_training_boundaries() {
        let cfg = small(LearnerKind::Sgd, PolicyChoice::Reservoir, Regime::OrderedBalanced);
        let streams = resolve_streams(&cfg).unwrap();
        let r = execute(&cfg, &streams).unwrap();
        assert_eq!(r.report.trace.len(), streams.train.macro_plan.len());
        let positions: Vec<usize> = r
            .log
            .iter()
            .filter_map(|l| match l {
                LogRecord::Checkpoint { position, .. } => Some(*position),
                _ => None,
            })
            .collect();
        assert_eq!(*positions.last().unwrap(), streams.train.len());
        let stored: usize = r
            .log
            .iter()
            .map(|l| match l {
                LogRecord::Experience { stored, .. } => stored.len(),
                _ => 0,
            })
            .sum();
        assert_eq!(stored, streams.train.len());
    }

    #[test]
    fn regimes_share_one_base() {
        let cfg = small(LearnerKind::Slda, PolicyChoice::None, Regime::OrderedUnbalanced);
        let base = resolve_streams(&cfg).unwrap().train;
        let ob = prepare_regime(&base, Regime::OrderedBalanced, 4).unwrap();
        let sb = prepare_regime(&base, Regime::ShuffledBalanced, 4).unwrap();
        assert_eq!(ob.len(), base.len());
        assert_eq!(ob.class_counts(), sb.class_counts());
        let mut a: Vec<_> = ob.samples.iter().map(|s| s.features.clone()).collect();
        let mut b: Vec<_> = sb.samples.iter().map(|s| s.features.clone()).collect();
        let key = |v: &Vec<f32>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
    }

    #[test]
    fn log_recomputes_amca() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(LearnerKind::Lwf, PolicyChoice::None, Regime::ShuffledBalanced);
        cfg.out_dir = dir.path().to_path_buf();
        let r = run_experiment(&cfg).unwrap();
        let rows = recompute_from_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(rows.len(), r.report.trace.len());
        for (_, logged, again) in rows {
            assert!((logged - again).abs() < 1e-12);
        }
    }

    #[test]
    fn curves_average_over_seeds() {
        let cfg = small(LearnerKind::Sgd, PolicyChoice::Random, Regime::OrderedBalanced);
        let mk = |a: f64| ReportSummary {
            n_classes: 2,
            n_macro: 1,
            checkpoints: vec![natstream_core::eval::CheckpointSummary {
                checkpoint: 0,
                seen_macros: 1,
                amca: a,
                amca_seen: None,
            }],
            final_amca: Some(a),
        };
        let cells = vec![(cfg.clone(), Ok(mk(0.5))), (cfg.clone(), Ok(mk(0.7))), (cfg, Err("x".into()))];
        assert_eq!(curves_table(&cells), "checkpoint,learner,policy,regime,amca\n0,sgd,random,ordered-balanced,0.600000\n");
    }
}
