//! Streaming learners. Every learner consumes one [`ExperienceBatch`] per
//! update, reading each sample once, and never sees macro-experience
//! metadata.

pub mod exstream;
pub mod head;
pub mod slda;
pub mod snapshot;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::{MemoryPolicy, ReplayMemory, DEFAULT_CAPACITY, DEFAULT_GSS_CANDIDATES};
use crate::rng::StreamRng;
use crate::stream::{ExperienceBatch, Sample};

pub use exstream::{train_head_on_buffers, PrototypeBuffers, TrainStatus, DEFAULT_BUFFER_CAPACITY};
pub use head::{Head, LinearHead, MlpHead};
pub use slda::{SldaState, DEFAULT_SHRINKAGE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    /// Replay samples added to each minibatch.
    pub replay_k: usize,
    pub replay_with_replacement: bool,
    pub temperature: f64,
    pub lambda: f64,
    /// Experiences between teacher snapshots.
    pub teacher_refresh: usize,
    /// Passes over the prototype buffers after each experience.
    pub exstream_passes: usize,
    /// Minibatch size when training on prototypes.
    pub batch_size: usize,
    pub gss_candidates: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.7,
            replay_k: 10,
            replay_with_replacement: false,
            temperature: 2.0,
            lambda: 1.0,
            teacher_refresh: 10,
            exstream_passes: 1,
            batch_size: 10,
            gss_candidates: DEFAULT_GSS_CANDIDATES,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.temperature >= 1.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("distillation temperature must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("distillation weight must be >= 0"));
        }
        if self.teacher_refresh == 0 || self.batch_size == 0 || self.gss_candidates == 0 {
            return Err(Error::invalid(
                "teacher_refresh, batch_size and gss_candidates must be positive",
            ));
        }
        Ok(())
    }
}

fn collect_experience<'a, I>(experience: I, dim: usize) -> Result<Vec<&'a Sample>>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let samples: Vec<&Sample> = experience.into_iter().collect();
    if samples.is_empty() {
        return Err(Error::EmptyInput("experience has no samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.features.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: s.features.len(),
        });
    }
    Ok(samples)
}

/// One SGD step on the experience plus up to `replay_k` replayed samples,
/// then every experience sample is offered to the memory in stream order.
/// Returns the memory's stored flag per experience sample.
pub fn sgd_update<'a, I>(
    head: &mut Head,
    experience: I,
    memory: Option<(&mut ReplayMemory, MemoryPolicy)>,
    hyper: &TrainHyper,
    rng: &mut StreamRng,
) -> Result<Vec<bool>>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let samples = collect_experience(experience, head.dim())?;
    let mut xs: Vec<(Vec<f64>, usize)> = samples.iter().map(|s| (s.features_f64(), s.label)).collect();
    if let Some((mem, _)) = &memory {
        for s in mem.draw_replay(hyper.replay_k, hyper.replay_with_replacement, rng) {
            xs.push((s.features_f64(), s.label));
        }
    }
    let batch: Vec<(&[f64], usize)> = xs.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (_, grad) = head::ce_objective(head, &batch);
    head.apply(&grad, hyper.lr);

    let Some((mem, policy)) = memory else {
        return Ok(Vec::new());
    };
    let h: &Head = head;
    let grad_of = |s: &Sample| h.output_gradient(&s.features_f64(), s.label);
    Ok(samples
        .iter()
        .map(|s| mem.offer(policy, s, grad_of, hyper.gss_candidates, rng))
        .collect())
}

/// Frozen teacher for distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct LwfState {
    pub teacher: Head,
    /// Updates performed so far.
    pub updates: u64,
}

impl LwfState {
    pub fn new(head: &Head) -> Self {
        Self {
            teacher: head.clone(),
            updates: 0,
        }
    }
}

/// One step on `CE + lambda T^2 KL(teacher || student)` averaged over the
/// experience. The teacher is replaced by a copy of the student before every
/// `teacher_refresh`-th update. No replay.
pub fn lwf_update<'a, I>(head: &mut Head, lwf: &mut LwfState, experience: I, hyper: &TrainHyper) -> Result<()>
where
    I: IntoIterator<Item = &'a Sample>,
{
    if !head.same_shape(&lwf.teacher) {
        return Err(Error::invalid("teacher and student heads differ in shape"));
    }
    let samples = collect_experience(experience, head.dim())?;
    if lwf.updates % hyper.teacher_refresh as u64 == 0 {
        lwf.teacher = head.clone();
    }
    let xs: Vec<(Vec<f64>, usize)> = samples.iter().map(|s| (s.features_f64(), s.label)).collect();
    let batch: Vec<(&[f64], usize)> = xs.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (_, grad) = head::lwf_objective(head, &lwf.teacher, &batch, hyper.temperature, hyper.lambda);
    head.apply(&grad, hyper.lr);
    lwf.updates += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Slda,
    Exstream,
    Sgd,
    Lwf,
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::Slda => "slda",
            LearnerKind::Exstream => "exstream",
            LearnerKind::Sgd => "sgd",
            LearnerKind::Lwf => "lwf",
        }
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slda" => Ok(Self::Slda),
            "exstream" => Ok(Self::Exstream),
            "sgd" => Ok(Self::Sgd),
            "lwf" => Ok(Self::Lwf),
            other => Err(Error::invalid(format!("unknown learner '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseInit {
    /// Fit the SLDA statistics on the first experience in one batch.
    FirstExperience,
    /// Start from empty statistics and stream everything.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub policy: Option<MemoryPolicy>,
    pub memory_capacity: usize,
    /// Hidden width of the optional one-hidden-layer head.
    pub hidden: Option<usize>,
    pub slda_epsilon: f64,
    pub slda_plastic: bool,
    pub slda_base_init: BaseInit,
    pub exstream_capacity: usize,
    pub hyper: TrainHyper,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            kind: LearnerKind::Sgd,
            policy: Some(MemoryPolicy::Random),
            memory_capacity: DEFAULT_CAPACITY,
            hidden: None,
            slda_epsilon: DEFAULT_SHRINKAGE,
            slda_plastic: true,
            slda_base_init: BaseInit::FirstExperience,
            exstream_capacity: DEFAULT_BUFFER_CAPACITY,
            hyper: TrainHyper::default(),
        }
    }
}

impl LearnerConfig {
    /// Rejects memory policies on learners that do not use replay.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        match (self.kind, self.policy) {
            (LearnerKind::Slda | LearnerKind::Exstream, Some(p)) => Err(Error::invalid(format!(
                "{} keeps its own state and cannot use the '{}' memory policy",
                self.kind.name(),
                p.name()
            ))),
            (LearnerKind::Lwf, Some(_)) => Err(Error::invalid("lwf is replay-free; use policy 'none'")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SldaLearner {
    pub state: SldaState,
    pub base_init: BaseInit,
    pub base_done: bool,
}

#[derive(Debug, Clone)]
pub struct ExStreamLearner {
    pub buffers: PrototypeBuffers,
    pub head: Head,
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone)]
pub struct SgdLearner {
    pub head: Head,
    pub memory: Option<(ReplayMemory, MemoryPolicy)>,
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone)]
pub struct LwfLearner {
    pub head: Head,
    pub lwf: LwfState,
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone)]
pub enum Learner {
    Slda(SldaLearner),
    ExStream(ExStreamLearner),
    Sgd(SgdLearner),
    Lwf(LwfLearner),
}

fn make_head(cfg: &LearnerConfig, n_classes: usize, dim: usize, rng: &mut StreamRng) -> Head {
    match cfg.hidden {
        Some(h) if h > 0 => Head::Mlp(MlpHead::init(n_classes, dim, h, rng)),
        _ => Head::linear(n_classes, dim),
    }
}

impl Learner {
    pub fn build(cfg: &LearnerConfig, n_classes: usize, dim: usize, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            LearnerKind::Slda => Learner::Slda(SldaLearner {
                state: SldaState::new(n_classes, dim, cfg.slda_epsilon, cfg.slda_plastic)?,
                base_init: cfg.slda_base_init,
                base_done: false,
            }),
            LearnerKind::Exstream => Learner::ExStream(ExStreamLearner {
                buffers: PrototypeBuffers::new(n_classes, dim, cfg.exstream_capacity)?,
                head: make_head(cfg, n_classes, dim, rng),
                hyper: cfg.hyper.clone(),
            }),
            LearnerKind::Sgd => Learner::Sgd(SgdLearner {
                head: make_head(cfg, n_classes, dim, rng),
                memory: match cfg.policy {
                    Some(p) => Some((ReplayMemory::new(cfg.memory_capacity)?, p)),
                    None => None,
                },
                hyper: cfg.hyper.clone(),
            }),
            LearnerKind::Lwf => {
                let head = make_head(cfg, n_classes, dim, rng);
                Learner::Lwf(LwfLearner {
                    lwf: LwfState::new(&head),
                    head,
                    hyper: cfg.hyper.clone(),
                })
            }
        })
    }

    pub fn kind(&self) -> LearnerKind {
        match self {
            Learner::Slda(_) => LearnerKind::Slda,
            Learner::ExStream(_) => LearnerKind::Exstream,
            Learner::Sgd(_) => LearnerKind::Sgd,
            Learner::Lwf(_) => LearnerKind::Lwf,
        }
    }

    /// Updates the learner with one experience. Returns the replay memory's
    /// stored flags (empty for learners without a memory).
    pub fn observe(&mut self, batch: &ExperienceBatch<'_>, rng: &mut StreamRng) -> Result<Vec<bool>> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("experience has no samples".into()));
        }
        match self {
            Learner::Slda(l) => {
                if !l.base_done && l.base_init == BaseInit::FirstExperience {
                    l.state.fit_base(batch.samples)?;
                } else {
                    for s in batch.samples {
                        l.state.update(s)?;
                    }
                }
                l.base_done = true;
                Ok(Vec::new())
            }
            Learner::ExStream(l) => {
                l.buffers.update(batch.samples)?;
                train_head_on_buffers(&mut l.head, &l.buffers, l.hyper.exstream_passes, l.hyper.batch_size, l.hyper.lr, rng)?;
                Ok(Vec::new())
            }
            Learner::Sgd(l) => {
                let mem = l.memory.as_mut().map(|(m, p)| (m, *p));
                sgd_update(&mut l.head, batch.samples, mem, &l.hyper, rng)
            }
            Learner::Lwf(l) => {
                lwf_update(&mut l.head, &mut l.lwf, batch.samples, &l.hyper)?;
                Ok(Vec::new())
            }
        }
    }

    pub fn predict(&self, features: &[f32]) -> Result<usize> {
        let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
        match self {
            Learner::Slda(l) => l.state.predict(&x),
            Learner::ExStream(l) => l.head.predict(&x),
            Learner::Sgd(l) => l.head.predict(&x),
            Learner::Lwf(l) => l.head.predict(&x),
        }
    }

    /// Predicted labels for a batch; does not mutate the learner.
    pub fn predict_experience(&self, samples: &[Sample]) -> Result<Vec<usize>> {
        samples.iter().map(|s| self.predict(&s.features)).collect()
    }

    pub fn memory(&self) -> Option<&ReplayMemory> {
        match self {
            Learner::Sgd(l) => l.memory.as_ref().map(|(m, _)| m),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::cell::Cell;

    fn fixture() -> Vec<Sample> {
        (0..10)
            .map(|i| {
                let c = i % 3;
                let f = (0..4).map(|j| ((i * 4 + j) as f32 * 0.37).sin() + c as f32).collect();
                Sample::new(i as u64, f, c, i as u32)
            })
            .collect()
    }

    #[test]
    fn config_rejects_contradictions() {
        let mut cfg = LearnerConfig { kind: LearnerKind::Slda, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.policy = None;
        assert!(cfg.validate().is_ok());
        let cfg = LearnerConfig { kind: LearnerKind::Lwf, policy: Some(MemoryPolicy::Gss), ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = LearnerConfig { kind: LearnerKind::Exstream, policy: Some(MemoryPolicy::Cbrs), ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sgd_reads_each_sample_once_and_offers_in_order() {
        let data = fixture();
        let mut head = Head::linear(3, 4);
        let mut mem = ReplayMemory::new(100).unwrap();
        let reads = Cell::new(0);
        let flags = sgd_update(
            &mut head,
            data.iter().inspect(|_| reads.set(reads.get() + 1)),
            Some((&mut mem, MemoryPolicy::Reservoir)),
            &TrainHyper::default(),
            &mut seeded(0),
        )
        .unwrap();
        assert_eq!(reads.get(), data.len());
        assert_eq!(flags, vec![true; 10]);
        let ids: Vec<u64> = mem.slots().iter().map(|s| s.id).collect();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn lwf_reads_each_sample_once() {
        let data = fixture();
        let mut head = Head::linear(3, 4);
        let mut lwf = LwfState::new(&head);
        let reads = Cell::new(0);
        lwf_update(&mut head, &mut lwf, data.iter().inspect(|_| reads.set(reads.get() + 1)), &TrainHyper::default())
            .unwrap();
        assert_eq!(reads.get(), data.len());
    }

    #[test]
    fn empty_experience_rejected() {
        let mut head = Head::linear(3, 4);
        let none: Vec<Sample> = Vec::new();
        assert!(matches!(
            sgd_update(&mut head, &none, None, &TrainHyper::default(), &mut seeded(0)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn lwf_without_distillation_matches_plain_sgd() {
        let data = fixture();
        let hyper = TrainHyper { lambda: 0.0, replay_k: 0, ..Default::default() };
        let mut a = Head::linear(3, 4);
        let mut b = Head::linear(3, 4);
        for _ in 0..5 {
            sgd_update(&mut a, &data, None, &hyper, &mut seeded(1)).unwrap();
        }
        let mut lwf = LwfState::new(&b);
        for _ in 0..5 {
            lwf_update(&mut b, &mut lwf, &data, &hyper).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn lwf_teacher_shape_checked() {
        let mut head = Head::linear(3, 4);
        let mut lwf = LwfState::new(&Head::linear(2, 4));
        assert!(lwf_update(&mut head, &mut lwf, &fixture(), &TrainHyper::default()).is_err());
    }

    #[test]
    fn descent_on_single_sample() {
        let s = &fixture()[..1];
        let mut head = Head::linear(3, 4);
        // start away from the zero tie so the check is non-trivial
        head.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p = (i as f64 * 0.3).cos());
        let x = s[0].features_f64();
        let before = head::cross_entropy(&head.logits(&x), s[0].label).0;
        let hyper = TrainHyper { lr: 1e-3, replay_k: 0, ..Default::default() };
        sgd_update(&mut head, s, None, &hyper, &mut seeded(0)).unwrap();
        let after = head::cross_entropy(&head.logits(&x), s[0].label).0;
        assert!(after < before);
    }

    #[test]
    fn predictions_are_pure() {
        let data = fixture();
        let cfg = LearnerConfig { kind: LearnerKind::Slda, policy: None, ..Default::default() };
        let mut l = Learner::build(&cfg, 3, 4, &mut seeded(0)).unwrap();
        assert!(matches!(l.predict_experience(&data), Err(Error::Uninitialized(_))));
        l.observe(&ExperienceBatch::new(0, &data), &mut seeded(0)).unwrap();
        let a = l.predict_experience(&data).unwrap();
        let b = l.predict_experience(&data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_head_predicts_lowest_class() {
        let cfg = LearnerConfig::default();
        let l = Learner::build(&cfg, 3, 4, &mut seeded(0)).unwrap();
        assert_eq!(l.predict_experience(&fixture()).unwrap(), vec![0; 10]);
    }
}
