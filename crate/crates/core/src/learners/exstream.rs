//! ExStream-style per-class prototype buffers.
//!
//! Each class keeps at most `capacity` weighted prototypes. When a buffer is
//! full, its two closest prototypes are merged into their weighted mean
//! before the new sample is inserted with weight one.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::learners::head::{weighted_ce_objective, Example, Head};
use crate::rng::StreamRng;
use crate::stream::Sample;

pub const DEFAULT_BUFFER_CAPACITY: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub center: Vec<f64>,
    pub weight: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBuffers {
    pub capacity: usize,
    pub dim: usize,
    pub buffers: Vec<Vec<Prototype>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Trained { steps: usize },
    /// Nothing to train on yet.
    NoData,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl PrototypeBuffers {
    pub fn new(n_classes: usize, dim: usize, capacity: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::invalid("prototype buffers need room for at least 2 entries"));
        }
        Ok(Self {
            capacity,
            dim,
            buffers: vec![Vec::new(); n_classes],
        })
    }

    pub fn total_weight(&self, class: usize) -> u64 {
        self.buffers[class].iter().map(|p| p.weight).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.iter().all(Vec::is_empty)
    }

    /// Absorbs one sample.
    pub fn insert(&mut self, label: usize, x: Vec<f64>) -> Result<()> {
        if label >= self.buffers.len() {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        if x.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let buf = &mut self.buffers[label];
        if buf.len() >= self.capacity {
            let (mut bi, mut bj, mut best) = (0, 1, f64::INFINITY);
            for i in 0..buf.len() {
                for j in i + 1..buf.len() {
                    let d = sq_dist(&buf[i].center, &buf[j].center);
                    if d < best {
                        (bi, bj, best) = (i, j, d);
                    }
                }
            }
            let b = buf.remove(bj);
            let a = &mut buf[bi];
            let (wa, wb) = (a.weight as f64, b.weight as f64);
            for (ca, cb) in a.center.iter_mut().zip(&b.center) {
                *ca = (wa * *ca + wb * cb) / (wa + wb);
            }
            a.weight += b.weight;
        }
        buf.push(Prototype { center: x, weight: 1 });
        Ok(())
    }

    /// Absorbs every sample of an experience, in order.
    pub fn update(&mut self, experience: &[Sample]) -> Result<()> {
        for s in experience {
            self.insert(s.label, s.features_f64())?;
        }
        Ok(())
    }
}

/// Shuffled passes of weighted cross-entropy SGD over all prototypes, in
/// minibatches of `batch_size`.
pub fn train_head_on_buffers(
    head: &mut Head,
    buffers: &PrototypeBuffers,
    passes: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut StreamRng,
) -> Result<TrainStatus> {
    if buffers.dim != head.dim() {
        return Err(Error::Shape {
            expected: head.dim(),
            actual: buffers.dim,
        });
    }
    let mut entries: Vec<(usize, &Prototype)> = buffers
        .buffers
        .iter()
        .enumerate()
        .flat_map(|(c, b)| b.iter().map(move |p| (c, p)))
        .collect();
    if entries.is_empty() {
        log::warn!("prototype buffers are empty; head left untouched");
        return Ok(TrainStatus::NoData);
    }
    let mut steps = 0;
    for _ in 0..passes {
        entries.shuffle(rng);
        for chunk in entries.chunks(batch_size.max(1)) {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|(c, p)| Example {
                    x: &p.center,
                    label: *c,
                    weight: p.weight as f64,
                })
                .collect();
            let (_, grad) = weighted_ce_objective(head, &batch);
            head.apply(&grad, lr);
            steps += 1;
        }
    }
    Ok(TrainStatus::Trained { steps })
}
