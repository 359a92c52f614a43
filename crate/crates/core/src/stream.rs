//! Stream data model: samples, experiences, and macro-experience metadata.
//!
//! Learners only ever see [`ExperienceBatch`]es, which carry samples and
//! nothing else. The macro-experience plan stays on [`StreamView`] and is
//! consumed by evaluation code only.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Default number of samples accumulated before a model update.
pub const DEFAULT_EXPERIENCE_SIZE: usize = 10;

/// Tolerance on `class_proportions` summing to one.
pub const PROPORTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Position in the stream, dense from 0.
    pub id: u64,
    pub features: Vec<f32>,
    pub label: usize,
    /// Contiguous same-class run that emitted this sample. Provenance only.
    pub run_id: u32,
}

impl Sample {
    pub fn new(id: u64, features: Vec<f32>, label: usize, run_id: u32) -> Self {
        Self {
            id,
            features,
            label,
            run_id,
        }
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroExperienceDescriptor {
    pub start: usize,
    pub end: usize,
    pub class_proportions: Vec<f64>,
    pub drift_tag: String,
}

impl MacroExperienceDescriptor {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Classes with zero mass in this macro-experience.
    pub fn absent_classes(&self) -> Vec<usize> {
        self.class_proportions
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 0.0)
            .map(|(c, _)| c)
            .collect()
    }
}

/// A contiguous slice of the stream handed to a learner for one update.
#[derive(Debug, Clone, Copy)]
pub struct ExperienceBatch<'a> {
    pub index: usize,
    pub samples: &'a [Sample],
}

impl<'a> ExperienceBatch<'a> {
    pub fn new(index: usize, samples: &'a [Sample]) -> Self {
        Self { index, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamView {
    pub samples: Vec<Sample>,
    pub dim: usize,
    pub n_classes: usize,
    /// Evaluation-only segmentation of the stream.
    pub macro_plan: Vec<MacroExperienceDescriptor>,
}

impl StreamView {
    /// Builds a view and checks sample shapes, labels, dense ids and the
    /// macro plan.
    pub fn new(
        samples: Vec<Sample>,
        dim: usize,
        n_classes: usize,
        macro_plan: Vec<MacroExperienceDescriptor>,
    ) -> Result<Self> {
        let view = Self {
            samples,
            dim,
            n_classes,
            macro_plan,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != self.dim {
                return Err(Error::Shape {
                    expected: self.dim,
                    actual: s.features.len(),
                });
            }
            if s.label >= self.n_classes {
                return Err(Error::invalid(format!(
                    "sample {i} has label {} but the stream has {} classes",
                    s.label, self.n_classes
                )));
            }
            if s.id != i as u64 {
                return Err(Error::invalid(format!(
                    "sample at position {i} carries id {}",
                    s.id
                )));
            }
        }
        validate_macro_plan(&self.macro_plan, self.samples.len(), self.n_classes)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Index of the macro-experience containing `position`, if any.
    pub fn macro_of(&self, position: usize) -> Option<usize> {
        self.macro_plan
            .iter()
            .position(|m| m.start <= position && position < m.end)
    }

    /// Samples belonging to macro-experience `index`.
    pub fn macro_samples(&self, index: usize) -> &[Sample] {
        let m = &self.macro_plan[index];
        &self.samples[m.start..m.end]
    }

    /// Same samples with the macro plan replaced by a single interval.
    pub fn without_plan(&self) -> StreamView {
        let mut out = self.clone();
        out.macro_plan.clear();
        out
    }
}

pub fn validate_macro_plan(
    plan: &[MacroExperienceDescriptor],
    len: usize,
    n_classes: usize,
) -> Result<()> {
    if plan.is_empty() {
        return Ok(());
    }
    let mut cursor = 0;
    for (i, m) in plan.iter().enumerate() {
        if m.start != cursor || m.end < m.start {
            return Err(Error::invalid(format!(
                "macro-experience {i} spans [{}, {}) but should start at {cursor}",
                m.start, m.end
            )));
        }
        if m.class_proportions.len() != n_classes {
            return Err(Error::Shape {
                expected: n_classes,
                actual: m.class_proportions.len(),
            });
        }
        let total: f64 = m.class_proportions.iter().sum();
        if (total - 1.0).abs() > PROPORTION_TOLERANCE
            || m.class_proportions.iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::invalid(format!(
                "macro-experience {i} proportions sum to {total}"
            )));
        }
        cursor = m.end;
    }
    if cursor != len {
        return Err(Error::invalid(format!(
            "macro plan covers [0, {cursor}) but the stream has {len} samples"
        )));
    }
    Ok(())
}

/// Cuts the stream into consecutive batches of `size` samples; only the last
/// batch may be shorter.
pub fn split_into_experiences(stream: &StreamView, size: usize) -> Result<Vec<ExperienceBatch<'_>>> {
    if size == 0 {
        return Err(Error::invalid("experience size must be at least 1"));
    }
    if stream.is_empty() {
        return Err(Error::EmptyInput("cannot split an empty stream".into()));
    }
    Ok(stream
        .samples
        .chunks(size)
        .enumerate()
        .map(|(index, samples)| ExperienceBatch { index, samples })
        .collect())
}

/// Globally permutes the stream. Ids are reassigned to the new positions and
/// macro boundaries are kept by position.
pub fn shuffle_stream(stream: &StreamView, seed: u64) -> StreamView {
    let mut rng = seeded(seed);
    let mut samples = stream.samples.clone();
    samples.shuffle(&mut rng);
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = i as u64;
    }
    StreamView {
        samples,
        dim: stream.dim,
        n_classes: stream.n_classes,
        macro_plan: stream.macro_plan.clone(),
    }
}

/// Reassigns dense ids in place.
pub(crate) fn renumber(samples: &mut [Sample]) {
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = i as u64;
    }
}
