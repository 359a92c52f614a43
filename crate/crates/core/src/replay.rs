//! Bounded replay memory and its population policies.
//!
//! All policies store unconditionally until the memory is full. After that:
//!
//! * reservoir: keep the newcomer with probability `m / n`, overwriting a
//!   uniformly random slot;
//! * random: keep it with probability 1/2, overwriting a random slot;
//! * CBRS: evict from the currently largest class unless the newcomer's class
//!   has been largest before, in which case do reservoir sampling within that
//!   class;
//! * GSS: score newcomers by their maximal gradient cosine similarity to a few
//!   stored samples and replace score-weighted victims, favouring diverse
//!   gradients. Each GSS insert costs `M + 1` gradient evaluations.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::write_samples;
use crate::rng::StreamRng;
use crate::stream::Sample;

pub const DEFAULT_CAPACITY: usize = 1000;
pub const DEFAULT_GSS_CANDIDATES: usize = 10;
/// Smoothing added to GSS slot scores when picking a victim.
pub const GSS_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryPolicy {
    Reservoir,
    Random,
    Cbrs,
    Gss,
}

impl MemoryPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            MemoryPolicy::Reservoir => "reservoir",
            MemoryPolicy::Random => "random",
            MemoryPolicy::Cbrs => "cbrs",
            MemoryPolicy::Gss => "gss",
        }
    }
}

impl std::str::FromStr for MemoryPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reservoir" => Ok(Self::Reservoir),
            "random" => Ok(Self::Random),
            "cbrs" => Ok(Self::Cbrs),
            "gss" => Ok(Self::Gss),
            other => Err(Error::invalid(format!("unknown memory policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayMemory {
    pub(crate) capacity: usize,
    pub(crate) slots: Vec<Sample>,
    /// GSS similarity score per slot; zero for other policies.
    pub(crate) scores: Vec<f64>,
    pub(crate) seen: u64,
    pub(crate) offered: Vec<u64>,
    pub(crate) stored: Vec<usize>,
    pub(crate) full_classes: Vec<bool>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("memory capacity must be positive"));
        }
        Ok(Self {
            capacity,
            slots: Vec::with_capacity(capacity),
            scores: Vec::with_capacity(capacity),
            seen: 0,
            offered: Vec::new(),
            stored: Vec::new(),
            full_classes: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    pub fn slots(&self) -> &[Sample] {
        &self.slots
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Number of samples offered so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn offered_per_class(&self) -> &[u64] {
        &self.offered
    }

    pub fn stored_per_class(&self) -> &[usize] {
        &self.stored
    }

    pub fn is_class_full(&self, class: usize) -> bool {
        self.full_classes.get(class).copied().unwrap_or(false)
    }

    fn ensure_class(&mut self, class: usize) {
        if class >= self.offered.len() {
            self.offered.resize(class + 1, 0);
            self.stored.resize(class + 1, 0);
            self.full_classes.resize(class + 1, false);
        }
    }

    fn count_offer(&mut self, class: usize) {
        self.ensure_class(class);
        self.seen += 1;
        self.offered[class] += 1;
    }

    fn push(&mut self, s: &Sample, score: f64) {
        self.stored[s.label] += 1;
        self.slots.push(s.clone());
        self.scores.push(score);
    }

    fn replace(&mut self, slot: usize, s: &Sample, score: f64) {
        self.stored[self.slots[slot].label] -= 1;
        self.stored[s.label] += 1;
        self.slots[slot] = s.clone();
        self.scores[slot] = score;
    }

    fn random_slot_of(&self, class: usize, rng: &mut StreamRng) -> Option<usize> {
        let n = self.stored.get(class).copied().unwrap_or(0);
        if n == 0 {
            return None;
        }
        let mut pick = rng.random_range(0..n);
        for (i, s) in self.slots.iter().enumerate() {
            if s.label == class {
                if pick == 0 {
                    return Some(i);
                }
                pick -= 1;
            }
        }
        None
    }

    pub fn reservoir_insert(&mut self, s: &Sample, rng: &mut StreamRng) -> bool {
        self.count_offer(s.label);
        if !self.is_full() {
            self.push(s, 0.0);
            return true;
        }
        let j = rng.random_range(0..self.seen);
        if (j as usize) < self.capacity {
            self.replace(j as usize, s, 0.0);
            true
        } else {
            false
        }
    }

    pub fn random_insert(&mut self, s: &Sample, rng: &mut StreamRng) -> bool {
        self.count_offer(s.label);
        if !self.is_full() {
            self.push(s, 0.0);
            return true;
        }
        if rng.random_bool(0.5) {
            let slot = rng.random_range(0..self.slots.len());
            self.replace(slot, s, 0.0);
            true
        } else {
            false
        }
    }

    pub fn cbrs_insert(&mut self, s: &Sample, rng: &mut StreamRng) -> bool {
        self.count_offer(s.label);
        if !self.is_full() {
            self.push(s, 0.0);
            return true;
        }
        let largest_count = self.stored.iter().copied().max().unwrap_or(0);
        let largest: Vec<usize> = (0..self.stored.len())
            .filter(|&k| self.stored[k] == largest_count)
            .collect();
        for &k in &largest {
            self.full_classes[k] = true;
        }
        let c = s.label;
        if !self.full_classes[c] {
            let victim_class = largest[rng.random_range(0..largest.len())];
            let slot = self
                .random_slot_of(victim_class, rng)
                .expect("largest class holds at least one slot");
            self.replace(slot, s, 0.0);
            return true;
        }
        let (mc, nc) = (self.stored[c], self.offered[c]);
        if mc > 0 && rng.random::<f64>() < mc as f64 / nc as f64 {
            let slot = self.random_slot_of(c, rng).expect("class holds slots");
            self.replace(slot, s, 0.0);
            true
        } else {
            false
        }
    }

    /// GSS-greedy insert. `grad_of` maps a sample to a flattened gradient;
    /// `candidates` is the number of stored samples compared against.
    pub fn gss_insert<F>(&mut self, s: &Sample, grad_of: F, candidates: usize, rng: &mut StreamRng) -> bool
    where
        F: Fn(&Sample) -> Vec<f64>,
    {
        self.count_offer(s.label);
        if !self.is_full() {
            self.push(s, 0.0);
            return true;
        }
        let g_new = grad_of(s);
        let k = candidates.max(1).min(self.slots.len());
        let c_new = index::sample(rng, self.slots.len(), k)
            .into_iter()
            .map(|i| clamped_cosine(&g_new, &grad_of(&self.slots[i])))
            .fold(0.0f64, f64::max);
        let weights: Vec<f64> = self.scores.iter().map(|c| c + GSS_SMOOTHING).collect();
        let victim = WeightedIndex::new(&weights)
            .expect("smoothed scores are positive")
            .sample(rng);
        let accept = gss_acceptance(self.scores[victim], c_new);
        if rng.random::<f64>() < accept {
            self.replace(victim, s, c_new);
            true
        } else {
            false
        }
    }

    pub fn offer<F>(&mut self, policy: MemoryPolicy, s: &Sample, grad_of: F, gss_candidates: usize, rng: &mut StreamRng) -> bool
    where
        F: Fn(&Sample) -> Vec<f64>,
    {
        match policy {
            MemoryPolicy::Reservoir => self.reservoir_insert(s, rng),
            MemoryPolicy::Random => self.random_insert(s, rng),
            MemoryPolicy::Cbrs => self.cbrs_insert(s, rng),
            MemoryPolicy::Gss => self.gss_insert(s, grad_of, gss_candidates, rng),
        }
    }

    /// Uniform draw of up to `k` stored samples. Without replacement the
    /// result holds `min(k, len)` distinct slots.
    pub fn draw_replay(&self, k: usize, with_replacement: bool, rng: &mut StreamRng) -> Vec<&Sample> {
        if self.slots.is_empty() || k == 0 {
            return Vec::new();
        }
        if with_replacement {
            return (0..k)
                .map(|_| &self.slots[rng.random_range(0..self.slots.len())])
                .collect();
        }
        let k = k.min(self.slots.len());
        index::sample(rng, self.slots.len(), k)
            .into_iter()
            .map(|i| &self.slots[i])
            .collect()
    }

    /// Checks the bookkeeping invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.slots.len() > self.capacity {
            return Err(format!("{} slots exceed capacity {}", self.slots.len(), self.capacity));
        }
        if self.stored.iter().sum::<usize>() != self.slots.len() {
            return Err("per-class stored counts do not sum to slot count".into());
        }
        if self.offered.iter().sum::<u64>() != self.seen {
            return Err("per-class offered counts do not sum to n".into());
        }
        for (c, (&m, &n)) in self.stored.iter().zip(&self.offered).enumerate() {
            if m as u64 > n {
                return Err(format!("class {c} stores {m} but was offered {n}"));
            }
        }
        let mut recount = vec![0usize; self.stored.len()];
        self.slots.iter().for_each(|s| recount[s.label] += 1);
        if recount != self.stored {
            return Err("stored counters disagree with slot contents".into());
        }
        Ok(())
    }

    /// Writes slot contents, in slot order, as an NDS1 file.
    pub fn dump(&self, dim: usize, n_classes: usize, path: &Path) -> Result<()> {
        write_samples(&self.slots, dim, n_classes, path)
    }
}

/// Cosine similarity clamped to `[0, 1]`; zero vectors count as maximally
/// diverse.
pub fn clamped_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !dot.is_finite() {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Probability that a newcomer with similarity `c_new` replaces a victim
/// scored `c_victim`. Two zero scores are a tie and resolve at 1/2.
pub fn gss_acceptance(c_victim: f64, c_new: f64) -> f64 {
    let total = c_victim + c_new;
    if total <= 0.0 {
        0.5
    } else {
        c_victim / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn sample(id: u64, label: usize) -> Sample {
        Sample::new(id, vec![id as f32], label, id as u32)
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(ReplayMemory::new(0).is_err());
    }

    #[test]
    fn fill_phase_stores_everything() {
        for policy in [
            MemoryPolicy::Reservoir,
            MemoryPolicy::Random,
            MemoryPolicy::Cbrs,
            MemoryPolicy::Gss,
        ] {
            let mut mem = ReplayMemory::new(5).unwrap();
            let mut rng = seeded(1);
            for i in 0..5 {
                assert!(mem.offer(policy, &sample(i, (i % 2) as usize), |_| vec![1.0], 3, &mut rng));
            }
            assert_eq!(mem.len(), 5);
            assert!(mem.scores().iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn reservoir_m1_second_item_half() {
        // Enumerate the rng: the second offer survives iff the draw in
        // 0..2 lands on 0.
        let mut hits = 0;
        let trials = 4000;
        for seed in 0..trials {
            let mut mem = ReplayMemory::new(1).unwrap();
            let mut rng = seeded(seed);
            mem.reservoir_insert(&sample(0, 0), &mut rng);
            mem.reservoir_insert(&sample(1, 0), &mut rng);
            hits += usize::from(mem.slots()[0].id == 1);
        }
        let p = hits as f64 / trials as f64;
        assert!((p - 0.5).abs() < 3.0 * (0.25 / trials as f64).sqrt() + 1e-9, "{p}");
    }

    #[test]
    fn random_acceptance_rate() {
        let mut mem = ReplayMemory::new(10).unwrap();
        let mut rng = seeded(8);
        for i in 0..10 {
            mem.random_insert(&sample(i, 0), &mut rng);
        }
        let accepted = (10..10_010)
            .filter(|&i| mem.random_insert(&sample(i, 0), &mut rng))
            .count();
        let rate = accepted as f64 / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn random_overwrites_each_slot_evenly() {
        let mut hits = [0usize; 2];
        for seed in 0..2000 {
            let mut mem = ReplayMemory::new(2).unwrap();
            let mut rng = seeded(seed);
            mem.random_insert(&sample(0, 0), &mut rng);
            mem.random_insert(&sample(1, 0), &mut rng);
            if mem.random_insert(&sample(2, 0), &mut rng) {
                let slot = mem.slots().iter().position(|s| s.id == 2).unwrap();
                hits[slot] += 1;
            }
        }
        let total = (hits[0] + hits[1]) as f64;
        let frac = hits[0] as f64 / total;
        assert!((frac - 0.5).abs() < 3.0 * (0.25 / total).sqrt(), "{hits:?}");
    }

    #[test]
    fn cbrs_keeps_minority() {
        // 3 classes, m = 9: class 2 only offered 3 times (= m / N_c).
        let mut mem = ReplayMemory::new(9).unwrap();
        let mut rng = seeded(5);
        let mut id = 0;
        let mut minority = Vec::new();
        for step in 0..300 {
            let label = if step % 100 == 50 { 2 } else { step % 2 };
            let s = sample(id, label);
            if label == 2 {
                minority.push(id);
            }
            mem.cbrs_insert(&s, &mut rng);
            id += 1;
            mem.check_invariants().unwrap();
        }
        for m in minority {
            assert!(mem.slots().iter().any(|s| s.id == m));
        }
    }

    #[test]
    fn gss_formula_limits() {
        assert_eq!(gss_acceptance(0.3, 0.0), 1.0);
        assert_eq!(gss_acceptance(0.0, 1.0), 0.0);
        assert_eq!(gss_acceptance(0.0, 0.0), 0.5);
        assert!((gss_acceptance(0.5, 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(clamped_cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert_eq!(clamped_cosine(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
        assert!((clamped_cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gss_identical_gradient_never_replaces_zero_scores() {
        let mut mem = ReplayMemory::new(4).unwrap();
        let mut rng = seeded(3);
        for i in 0..4 {
            mem.gss_insert(&sample(i, 0), |_| vec![1.0, 2.0], 2, &mut rng);
        }
        for i in 4..200 {
            assert!(!mem.gss_insert(&sample(i, 0), |_| vec![1.0, 2.0], 2, &mut rng));
        }
    }

    #[test]
    fn gss_orthogonal_newcomer_always_accepted() {
        let mut mem = ReplayMemory::new(3).unwrap();
        let mut rng = seeded(3);
        // fill, then give every slot a positive score through accepted inserts
        let grad = |s: &Sample| if s.label == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        for i in 0..3 {
            mem.gss_insert(&sample(i, 0), grad, 3, &mut rng);
        }
        mem.scores.iter_mut().for_each(|s| *s = 0.4);
        assert!(mem.gss_insert(&sample(10, 1), grad, 3, &mut rng));
        assert_eq!(mem.scores().iter().filter(|&&s| s == 0.0).count(), 1);
    }

    #[test]
    fn gss_is_deterministic() {
        let run = || {
            let mut mem = ReplayMemory::new(8).unwrap();
            let mut rng = seeded(42);
            let grad = |s: &Sample| vec![(s.id as f64).sin(), (s.id as f64 * 0.7).cos(), s.label as f64 - 1.0];
            let flags: Vec<bool> = (0..200)
                .map(|i| mem.gss_insert(&sample(i, (i % 3) as usize), grad, 4, &mut rng))
                .collect();
            (flags, mem.slots().iter().map(|s| s.id).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn draw_replay_cases() {
        let mut rng = seeded(0);
        let empty = ReplayMemory::new(3).unwrap();
        assert!(empty.draw_replay(5, false, &mut rng).is_empty());
        let mut mem = ReplayMemory::new(4).unwrap();
        for i in 0..4 {
            mem.reservoir_insert(&sample(i, 0), &mut rng);
        }
        let mut ids: Vec<u64> = mem.draw_replay(10, false, &mut rng).iter().map(|s| s.id).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(mem.draw_replay(10, true, &mut rng).len(), 10);
        assert_eq!(mem.draw_replay(0, false, &mut rng).len(), 0);
    }

    #[test]
    fn draw_replay_uniform() {
        let mut rng = seeded(77);
        let mut mem = ReplayMemory::new(10).unwrap();
        for i in 0..10 {
            mem.reservoir_insert(&sample(i, 0), &mut rng);
        }
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[mem.draw_replay(1, false, &mut rng)[0].id as usize] += 1;
        }
        let sd = (10_000.0 * 0.1 * 0.9f64).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn invariants_hold(labels in prop::collection::vec(0usize..5, 1..400), cap in 1usize..40, policy in 0u8..4, seed in any::<u64>()) {
            let policy = [MemoryPolicy::Reservoir, MemoryPolicy::Random, MemoryPolicy::Cbrs, MemoryPolicy::Gss][policy as usize];
            let mut mem = ReplayMemory::new(cap).unwrap();
            let mut rng = seeded(seed);
            let grad = |s: &Sample| vec![s.label as f64 - 2.0, (s.id % 7) as f64 - 3.0];
            for (i, &l) in labels.iter().enumerate() {
                mem.offer(policy, &sample(i as u64, l), grad, 3, &mut rng);
                prop_assert!(mem.check_invariants().is_ok(), "{:?}", mem.check_invariants());
            }
            prop_assert_eq!(mem.seen(), labels.len() as u64);
        }
    }
}
