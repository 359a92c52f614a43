//! Learners only ever see experience batches. Dropping or rewriting the
//! macro plan must not change what they store or predict.

use natstream_core::learners::LearnerConfig;
use natstream_core::rng::seeded;
use natstream_core::{generate_stream, preset_profile, split_into_experiences, Learner, LearnerKind, MemoryPolicy, StreamView};

fn trace(cfg: &LearnerConfig, train: &StreamView, test: &StreamView) -> (Vec<bool>, Vec<usize>) {
    let mut rng = seeded(9);
    let mut learner = Learner::build(cfg, train.n_classes, train.dim, &mut rng).unwrap();
    let mut stored = Vec::new();
    for batch in split_into_experiences(train, 10).unwrap() {
        stored.extend(learner.observe(&batch, &mut rng).unwrap());
    }
    (stored, learner.predict_experience(&test.samples).unwrap())
}

#[test]
fn learners_ignore_the_macro_plan() {
    let (train, test) = generate_stream(&preset_profile("core50-like").unwrap()).unwrap();
    let mut merged = train.clone();
    let last = merged.macro_plan.len() - 1;
    merged.macro_plan[0].end = merged.macro_plan[last].end;
    merged.macro_plan.truncate(1);
    let configs = [
        LearnerConfig { kind: LearnerKind::Slda, policy: None, ..Default::default() },
        LearnerConfig { kind: LearnerKind::Exstream, policy: None, ..Default::default() },
        LearnerConfig { kind: LearnerKind::Sgd, policy: Some(MemoryPolicy::Gss), memory_capacity: 100, ..Default::default() },
        LearnerConfig { kind: LearnerKind::Lwf, policy: None, ..Default::default() },
    ];
    for cfg in &configs {
        let reference = trace(cfg, &train, &test);
        assert_eq!(reference, trace(cfg, &train.without_plan(), &test), "{:?}", cfg.kind);
        assert_eq!(reference, trace(cfg, &merged, &test), "{:?}", cfg.kind);
    }
}
