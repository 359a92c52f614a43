//! Class-balanced accuracy bookkeeping and stream diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::StreamView;

/// Counts for one evaluation pass, indexed `[class][macro]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub corr: Vec<Vec<u64>>,
    pub tot: Vec<Vec<u64>>,
}

impl CellCounts {
    pub fn zeros(n_classes: usize, n_macro: usize) -> Self {
        Self {
            corr: vec![vec![0; n_macro]; n_classes],
            tot: vec![vec![0; n_macro]; n_classes],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub index: usize,
    /// Training macro-experiences completed when the checkpoint fired.
    pub seen_macros: usize,
    pub counts: CellCounts,
    /// AMCA over every test macro-experience.
    pub amca: f64,
    /// AMCA over the test macro-experiences already seen in training, when
    /// the test partition is aligned with the training one.
    pub amca_seen: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_classes: usize,
    pub n_macro: usize,
    pub corr: Vec<Vec<u64>>,
    pub tot: Vec<Vec<u64>>,
    pub trace: Vec<Checkpoint>,
}

impl EvalReport {
    pub fn new(n_classes: usize, n_macro: usize) -> Result<Self> {
        if n_classes == 0 || n_macro == 0 {
            return Err(Error::invalid("a report needs at least one class and one macro-experience"));
        }
        let CellCounts { corr, tot } = CellCounts::zeros(n_classes, n_macro);
        Ok(Self {
            n_classes,
            n_macro,
            corr,
            tot,
            trace: Vec::new(),
        })
    }

    /// Adds one batch of predictions for a test macro-experience.
    pub fn accumulate(&mut self, macro_index: usize, predicted: &[usize], labels: &[usize]) -> Result<()> {
        if predicted.len() != labels.len() {
            return Err(Error::Shape {
                expected: labels.len(),
                actual: predicted.len(),
            });
        }
        if macro_index >= self.n_macro {
            return Err(Error::invalid(format!(
                "macro index {macro_index} out of range for {} macro-experiences",
                self.n_macro
            )));
        }
        if let Some(&bad) = labels.iter().chain(predicted).find(|&&c| c >= self.n_classes) {
            return Err(Error::invalid(format!("class {bad} out of range for {} classes", self.n_classes)));
        }
        for (&p, &y) in predicted.iter().zip(labels) {
            self.tot[y][macro_index] += 1;
            if p == y {
                self.corr[y][macro_index] += 1;
            }
        }
        Ok(())
    }

    pub fn amca(&self) -> Result<f64> {
        amca_cells(&self.corr, &self.tot, 0..self.n_macro)
    }

    /// Records the current counts as a checkpoint and starts a fresh pass.
    pub fn commit_checkpoint(&mut self, seen_macros: usize, aligned: bool) -> Result<&Checkpoint> {
        let amca = self.amca()?;
        let amca_seen = if aligned && seen_macros > 0 {
            amca_cells(&self.corr, &self.tot, 0..seen_macros.min(self.n_macro)).ok()
        } else {
            None
        };
        let fresh = CellCounts::zeros(self.n_classes, self.n_macro);
        let counts = CellCounts {
            corr: std::mem::replace(&mut self.corr, fresh.corr),
            tot: std::mem::replace(&mut self.tot, fresh.tot),
        };
        self.trace.push(Checkpoint {
            index: self.trace.len(),
            seen_macros,
            counts,
            amca,
            amca_seen,
        });
        Ok(self.trace.last().expect("just pushed"))
    }

    pub fn amca_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|c| c.amca).collect()
    }

    /// One row per (checkpoint, macro, class) cell followed by two summary
    /// rows per checkpoint (`all` and `seen`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,macro_experience,class,correct,total,accuracy\n");
        for cp in &self.trace {
            let (mut corr_sum, mut tot_sum) = (0u64, 0u64);
            for e in 0..self.n_macro {
                for c in 0..self.n_classes {
                    let (k, n) = (cp.counts.corr[c][e], cp.counts.tot[c][e]);
                    corr_sum += k;
                    tot_sum += n;
                    let acc = if n > 0 { format!("{:.6}", k as f64 / n as f64) } else { String::new() };
                    let _ = writeln!(out, "{},{},{},{},{},{}", cp.index, e, c, k, n, acc);
                }
            }
            let _ = writeln!(out, "{},all,amca,{},{},{:.6}", cp.index, corr_sum, tot_sum, cp.amca);
            if let Some(seen) = cp.amca_seen {
                let _ = writeln!(out, "{},seen,amca,,,{:.6}", cp.index, seen);
            }
        }
        out
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            n_classes: self.n_classes,
            n_macro: self.n_macro,
            checkpoints: self
                .trace
                .iter()
                .map(|c| CheckpointSummary {
                    checkpoint: c.index,
                    seen_macros: c.seen_macros,
                    amca: c.amca,
                    amca_seen: c.amca_seen,
                })
                .collect(),
            final_amca: self.trace.last().map(|c| c.amca),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub checkpoint: usize,
    pub seen_macros: usize,
    pub amca: f64,
    pub amca_seen: Option<f64>,
}

/// Stable, diffable summary of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_classes: usize,
    pub n_macro: usize,
    pub checkpoints: Vec<CheckpointSummary>,
    pub final_amca: Option<f64>,
}

/// Mean per-cell accuracy over `macros`, skipping cells with no test
/// samples.
pub fn amca_cells(corr: &[Vec<u64>], tot: &[Vec<u64>], macros: std::ops::Range<usize>) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (cr, tr) in corr.iter().zip(tot) {
        for e in macros.clone() {
            if tr[e] == 0 {
                skipped += 1;
            } else {
                sum += cr[e] as f64 / tr[e] as f64;
                used += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("every (class, macro) cell is empty".into()));
    }
    if skipped > 0 {
        log::warn!("AMCA: {skipped} empty (class, macro) cells excluded; averaging over {used} cells");
    }
    Ok(sum / used as f64)
}

pub fn amca(report: &EvalReport) -> Result<f64> {
    report.amca()
}

/// Mean Euclidean distance between features `k` positions apart, for
/// `k = 1..=max_lag`.
pub fn temporal_similarity_profile(stream: &StreamView, max_lag: usize) -> Result<Vec<(usize, f64)>> {
    let n = stream.samples.len();
    if max_lag == 0 {
        return Err(Error::invalid("max_lag must be at least 1"));
    }
    if max_lag >= n {
        return Err(Error::invalid(format!("max_lag {max_lag} must be smaller than the stream length {n}")));
    }
    let feats: Vec<Vec<f64>> = stream.samples.iter().map(|s| s.features_f64()).collect();
    Ok((1..=max_lag)
        .map(|k| {
            let total: f64 = (0..n - k)
                .map(|t| {
                    feats[t]
                        .iter()
                        .zip(&feats[t + k])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            (k, total / (n - k) as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceWindow {
    pub start: usize,
    pub end: usize,
    pub frequencies: Vec<f64>,
    pub gini: f64,
}

/// Gini coefficient of a non-negative vector; 0 for an all-zero vector.
pub fn gini(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let total: f64 = x.iter().sum();
    if x.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let mean = total / n;
    let diff: f64 = x.iter().map(|a| x.iter().map(|b| (a - b).abs()).sum::<f64>()).sum();
    diff / (2.0 * n * n * mean)
}

/// Class frequencies and Gini over consecutive non-overlapping windows. A
/// trailing partial window is kept.
pub fn imbalance_profile(stream: &StreamView, window: usize) -> Result<Vec<ImbalanceWindow>> {
    if window == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    Ok(stream
        .samples
        .chunks(window)
        .enumerate()
        .map(|(i, chunk)| {
            let mut freq = vec![0.0; stream.n_classes];
            for s in chunk {
                freq[s.label] += 1.0;
            }
            for f in &mut freq {
                *f /= chunk.len() as f64;
            }
            let g = gini(&freq);
            ImbalanceWindow {
                start: i * window,
                end: i * window + chunk.len(),
                frequencies: freq,
                gini: g,
            }
        })
        .collect())
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric("spearman needs at least two points".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("spearman is undefined for a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
