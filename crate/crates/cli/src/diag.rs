//! Stream diagnostics: temporal similarity and class imbalance, with a
//! verdict against thresholds.

use std::fs;
use std::path::Path;

use anyhow::Context as _;
use natstream_core::eval::{imbalance_profile, spearman, temporal_similarity_profile, ImbalanceWindow};
use natstream_core::StreamView;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagOptions {
    pub max_lag: usize,
    pub window: usize,
    /// Minimum Spearman correlation between lag and distance. A
    /// non-positive threshold disables the check.
    pub spearman_threshold: f64,
    /// Minimum mean per-window Gini. A non-positive threshold disables the
    /// check.
    pub gini_threshold: f64,
}

impl Default for DiagOptions {
    fn default() -> Self {
        Self {
            max_lag: 50,
            window: 500,
            spearman_threshold: 0.5,
            gini_threshold: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub profile: Vec<(usize, f64)>,
    pub windows: Vec<ImbalanceWindow>,
    /// Zero when the profile is constant.
    pub spearman: f64,
    pub mean_gini: f64,
    pub temporally_similar: bool,
    pub imbalanced: bool,
    pub natural: bool,
}

impl Diagnostics {
    pub fn verdict(&self) -> &'static str {
        if self.natural {
            "natural"
        } else {
            "not natural"
        }
    }
}

pub fn diagnose(stream: &StreamView, opts: &DiagOptions) -> anyhow::Result<Diagnostics> {
    let max_lag = opts.max_lag.min(stream.len().saturating_sub(1));
    let profile = temporal_similarity_profile(stream, max_lag)?;
    let (lags, dists): (Vec<f64>, Vec<f64>) = profile.iter().map(|&(k, d)| (k as f64, d)).unzip();
    let rho = spearman(&lags, &dists).unwrap_or(0.0);
    let windows = imbalance_profile(stream, opts.window)?;
    let mean_gini = windows.iter().map(|w| w.gini).sum::<f64>() / windows.len().max(1) as f64;
    let temporally_similar = opts.spearman_threshold <= 0.0 || rho > opts.spearman_threshold;
    let imbalanced = opts.gini_threshold <= 0.0 || mean_gini > opts.gini_threshold;
    Ok(Diagnostics {
        profile,
        windows,
        spearman: rho,
        mean_gini,
        temporally_similar,
        imbalanced,
        natural: temporally_similar && imbalanced,
    })
}

pub fn write_diagnostics(dir: &Path, d: &Diagnostics) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut profile = String::from("lag,mean_distance\n");
    for (k, v) in &d.profile {
        profile.push_str(&format!("{k},{v:.6}\n"));
    }
    let n_classes = d.windows.first().map_or(0, |w| w.frequencies.len());
    let mut imbalance = String::from("window,start,end,gini");
    for c in 0..n_classes {
        imbalance.push_str(&format!(",class_{c}"));
    }
    imbalance.push('\n');
    for (i, w) in d.windows.iter().enumerate() {
        imbalance.push_str(&format!("{i},{},{},{:.6}", w.start, w.end, w.gini));
        for f in &w.frequencies {
            imbalance.push_str(&format!(",{f:.6}"));
        }
        imbalance.push('\n');
    }
    let verdict = serde_json::json!({
        "spearman": d.spearman,
        "mean_gini": d.mean_gini,
        "temporally_similar": d.temporally_similar,
        "imbalanced": d.imbalanced,
        "verdict": d.verdict(),
    });
    for (name, body) in [
        ("profile.csv", profile),
        ("imbalance.csv", imbalance),
        ("verdict.json", format!("{}\n", serde_json::to_string_pretty(&verdict)?)),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
