//! Versioned binary snapshots of learner state.
//!
//! ```text
//! magic "NDSL" | version u16 | kind_len u16 | kind utf8 | n_tensors u32
//! n_tensors x [ name_len u16 | name utf8 | rank u8 | rank x u64 dims | f64 values ]
//! ```
//!
//! Everything is little-endian; integers are stored as f64 values inside
//! tensors (exact below 2^53).

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::learners::{
    BaseInit, ExStreamLearner, Head, Learner, LinearHead, LwfLearner, LwfState, MlpHead, PrototypeBuffers, SgdLearner,
    SldaLearner, SldaState, TrainHyper,
};
use crate::learners::exstream::Prototype;
use crate::replay::{MemoryPolicy, ReplayMemory};
use crate::stream::Sample;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"NDSL";
pub const SNAPSHOT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Snapshot {
    pub kind: String,
    pub tensors: Vec<Tensor>,
}

fn snap_err(msg: impl Into<String>) -> Error {
    Error::Format {
        path: "<snapshot>".into(),
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| snap_err("snapshot truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| snap_err("name is not utf-8"))
    }
}

impl Snapshot {
    fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            tensors: Vec::new(),
        }
    }

    pub fn put(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.tensors.push(Tensor {
            name: name.into(),
            dims,
            values,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| snap_err(format!("missing tensor '{name}'")))
    }

    fn scalar(&self, name: &str, i: usize) -> Result<f64> {
        self.get(name)?
            .values
            .get(i)
            .copied()
            .ok_or_else(|| snap_err(format!("tensor '{name}' too short")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u16).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(snap_err("missing NDSL magic"));
        }
        let version = r.u16()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: "<snapshot>".into(),
                found: version,
                supported: SNAPSHOT_VERSION,
            });
        }
        let kind = r.string()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| snap_err(format!("tensor '{name}' is larger than the snapshot")))?;
            let raw = r.take(count * 8)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(snap_err("trailing bytes after last tensor"));
        }
        Ok(Self { kind, tensors })
    }
}

fn put_head(snap: &mut Snapshot, prefix: &str, head: &Head) {
    let shape = match head {
        Head::Linear(h) => vec![0.0, h.n_classes as f64, h.dim as f64, 0.0],
        Head::Mlp(h) => vec![1.0, h.n_classes as f64, h.dim as f64, h.hidden as f64],
    };
    snap.put(format!("{prefix}.shape"), vec![4], shape);
    snap.put(format!("{prefix}.params"), vec![head.params().len()], head.params().to_vec());
    snap.put(format!("{prefix}.steps"), vec![1], vec![head.steps() as f64]);
}

fn get_head(snap: &Snapshot, prefix: &str) -> Result<Head> {
    let shape = &snap.get(&format!("{prefix}.shape"))?.values;
    if shape.len() != 4 {
        return Err(snap_err("head shape must have 4 entries"));
    }
    let params = snap.get(&format!("{prefix}.params"))?.values.clone();
    let steps = snap.scalar(&format!("{prefix}.steps"), 0)? as u64;
    let (n_classes, dim, hidden) = (shape[1] as usize, shape[2] as usize, shape[3] as usize);
    let head = if shape[0] == 0.0 {
        Head::Linear(LinearHead { n_classes, dim, params, steps })
    } else {
        Head::Mlp(MlpHead { n_classes, dim, hidden, params, steps })
    };
    let expected = match &head {
        Head::Linear(_) => n_classes * dim + n_classes,
        Head::Mlp(_) => hidden * dim + hidden + n_classes * hidden + n_classes,
    };
    if head.params().len() != expected {
        return Err(snap_err("head parameter count does not match its shape"));
    }
    Ok(head)
}

fn put_hyper(snap: &mut Snapshot, h: &TrainHyper) {
    snap.put(
        "hyper",
        vec![9],
        vec![
            h.lr,
            h.replay_k as f64,
            f64::from(u8::from(h.replay_with_replacement)),
            h.temperature,
            h.lambda,
            h.teacher_refresh as f64,
            h.exstream_passes as f64,
            h.batch_size as f64,
            h.gss_candidates as f64,
        ],
    );
}

fn get_hyper(snap: &Snapshot) -> Result<TrainHyper> {
    let v = &snap.get("hyper")?.values;
    if v.len() != 9 {
        return Err(snap_err("hyper tensor must have 9 entries"));
    }
    Ok(TrainHyper {
        lr: v[0],
        replay_k: v[1] as usize,
        replay_with_replacement: v[2] != 0.0,
        temperature: v[3],
        lambda: v[4],
        teacher_refresh: v[5] as usize,
        exstream_passes: v[6] as usize,
        batch_size: v[7] as usize,
        gss_candidates: v[8] as usize,
    })
}

fn policy_code(p: MemoryPolicy) -> f64 {
    match p {
        MemoryPolicy::Reservoir => 0.0,
        MemoryPolicy::Random => 1.0,
        MemoryPolicy::Cbrs => 2.0,
        MemoryPolicy::Gss => 3.0,
    }
}

fn put_memory(snap: &mut Snapshot, mem: &ReplayMemory, policy: MemoryPolicy, dim: usize) {
    let n = mem.slots.len();
    snap.put("memory.meta", vec![3], vec![mem.capacity as f64, mem.seen as f64, policy_code(policy)]);
    snap.put(
        "memory.features",
        vec![n, dim],
        mem.slots.iter().flat_map(|s| s.features.iter().map(|&v| v as f64)).collect(),
    );
    snap.put(
        "memory.records",
        vec![n, 3],
        mem.slots.iter().flat_map(|s| [s.id as f64, s.label as f64, s.run_id as f64]).collect(),
    );
    snap.put("memory.scores", vec![n], mem.scores.clone());
    let k = mem.offered.len();
    snap.put("memory.offered", vec![k], mem.offered.iter().map(|&v| v as f64).collect());
    snap.put("memory.stored", vec![k], mem.stored.iter().map(|&v| v as f64).collect());
    snap.put("memory.full", vec![k], mem.full_classes.iter().map(|&b| f64::from(u8::from(b))).collect());
}

fn get_memory(snap: &Snapshot, dim: usize) -> Result<Option<(ReplayMemory, MemoryPolicy)>> {
    let Ok(meta) = snap.get("memory.meta") else {
        return Ok(None);
    };
    let policy = match meta.values.get(2).copied() {
        Some(0.0) => MemoryPolicy::Reservoir,
        Some(1.0) => MemoryPolicy::Random,
        Some(2.0) => MemoryPolicy::Cbrs,
        Some(3.0) => MemoryPolicy::Gss,
        _ => return Err(snap_err("unknown memory policy code")),
    };
    let feats = &snap.get("memory.features")?.values;
    let recs = &snap.get("memory.records")?.values;
    let n = recs.len() / 3;
    if feats.len() != n * dim {
        return Err(snap_err("memory feature tensor has the wrong size"));
    }
    let slots = (0..n)
        .map(|i| {
            Sample::new(
                recs[3 * i] as u64,
                feats[i * dim..(i + 1) * dim].iter().map(|&v| v as f32).collect(),
                recs[3 * i + 1] as usize,
                recs[3 * i + 2] as u32,
            )
        })
        .collect();
    let mem = ReplayMemory {
        capacity: meta.values[0] as usize,
        slots,
        scores: snap.get("memory.scores")?.values.clone(),
        seen: meta.values[1] as u64,
        offered: snap.get("memory.offered")?.values.iter().map(|&v| v as u64).collect(),
        stored: snap.get("memory.stored")?.values.iter().map(|&v| v as usize).collect(),
        full_classes: snap.get("memory.full")?.values.iter().map(|&v| v != 0.0).collect(),
    };
    mem.check_invariants().map_err(snap_err)?;
    Ok(Some((mem, policy)))
}

impl Learner {
    pub fn to_snapshot(&self) -> Snapshot {
        match self {
            Learner::Slda(l) => {
                let st = &l.state;
                let mut s = Snapshot::new("slda");
                s.put(
                    "slda.meta",
                    vec![7],
                    vec![
                        st.n_classes as f64,
                        st.dim as f64,
                        st.total as f64,
                        st.epsilon,
                        f64::from(u8::from(st.plastic)),
                        f64::from(u8::from(l.base_init == BaseInit::FirstExperience)),
                        f64::from(u8::from(l.base_done)),
                    ],
                );
                s.put(
                    "slda.means",
                    vec![st.n_classes, st.dim],
                    st.means.iter().flat_map(|m| m.iter().copied()).collect(),
                );
                s.put("slda.counts", vec![st.n_classes], st.counts.iter().map(|&c| c as f64).collect());
                // column-major, symmetric anyway
                s.put("slda.sigma", vec![st.dim, st.dim], st.sigma.as_slice().to_vec());
                s
            }
            Learner::ExStream(l) => {
                let mut s = Snapshot::new("exstream");
                put_head(&mut s, "head", &l.head);
                put_hyper(&mut s, &l.hyper);
                let b = &l.buffers;
                let entries: Vec<(usize, &Prototype)> = b
                    .buffers
                    .iter()
                    .enumerate()
                    .flat_map(|(c, v)| v.iter().map(move |p| (c, p)))
                    .collect();
                s.put(
                    "buffers.meta",
                    vec![3],
                    vec![b.capacity as f64, b.dim as f64, b.buffers.len() as f64],
                );
                s.put(
                    "buffers.centers",
                    vec![entries.len(), b.dim],
                    entries.iter().flat_map(|(_, p)| p.center.iter().copied()).collect(),
                );
                s.put(
                    "buffers.entries",
                    vec![entries.len(), 2],
                    entries.iter().flat_map(|(c, p)| [*c as f64, p.weight as f64]).collect(),
                );
                s
            }
            Learner::Sgd(l) => {
                let mut s = Snapshot::new("sgd");
                put_head(&mut s, "head", &l.head);
                put_hyper(&mut s, &l.hyper);
                if let Some((mem, policy)) = &l.memory {
                    put_memory(&mut s, mem, *policy, l.head.dim());
                }
                s
            }
            Learner::Lwf(l) => {
                let mut s = Snapshot::new("lwf");
                put_head(&mut s, "head", &l.head);
                put_head(&mut s, "teacher", &l.lwf.teacher);
                put_hyper(&mut s, &l.hyper);
                s.put("lwf.updates", vec![1], vec![l.lwf.updates as f64]);
                s
            }
        }
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Learner> {
        match snap.kind.as_str() {
            "slda" => {
                let meta = &snap.get("slda.meta")?.values;
                if meta.len() != 7 {
                    return Err(snap_err("slda.meta must have 7 entries"));
                }
                let (n_classes, dim) = (meta[0] as usize, meta[1] as usize);
                let mut st = SldaState::new(n_classes, dim, meta[3], meta[4] != 0.0)?;
                st.total = meta[2] as u64;
                let means = &snap.get("slda.means")?.values;
                let counts = &snap.get("slda.counts")?.values;
                let sigma = &snap.get("slda.sigma")?.values;
                if means.len() != n_classes * dim || counts.len() != n_classes || sigma.len() != dim * dim {
                    return Err(snap_err("slda tensors have inconsistent sizes"));
                }
                st.means = (0..n_classes)
                    .map(|c| DVector::from_column_slice(&means[c * dim..(c + 1) * dim]))
                    .collect();
                st.counts = counts.iter().map(|&v| v as u64).collect();
                st.sigma = DMatrix::from_column_slice(dim, dim, sigma);
                Ok(Learner::Slda(SldaLearner {
                    state: st,
                    base_init: if meta[5] != 0.0 { BaseInit::FirstExperience } else { BaseInit::None },
                    base_done: meta[6] != 0.0,
                }))
            }
            "exstream" => {
                let head = get_head(snap, "head")?;
                let meta = &snap.get("buffers.meta")?.values;
                if meta.len() != 3 {
                    return Err(snap_err("buffers.meta must have 3 entries"));
                }
                let (cap, dim, n_classes) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
                let mut buffers = PrototypeBuffers::new(n_classes, dim, cap)?;
                let centers = &snap.get("buffers.centers")?.values;
                let entries = &snap.get("buffers.entries")?.values;
                let n = entries.len() / 2;
                if centers.len() != n * dim {
                    return Err(snap_err("prototype tensors have inconsistent sizes"));
                }
                for i in 0..n {
                    let c = entries[2 * i] as usize;
                    if c >= n_classes {
                        return Err(snap_err("prototype class out of range"));
                    }
                    buffers.buffers[c].push(Prototype {
                        center: centers[i * dim..(i + 1) * dim].to_vec(),
                        weight: entries[2 * i + 1] as u64,
                    });
                }
                Ok(Learner::ExStream(ExStreamLearner {
                    buffers,
                    head,
                    hyper: get_hyper(snap)?,
                }))
            }
            "sgd" => {
                let head = get_head(snap, "head")?;
                let memory = get_memory(snap, head.dim())?;
                Ok(Learner::Sgd(SgdLearner {
                    head,
                    memory,
                    hyper: get_hyper(snap)?,
                }))
            }
            "lwf" => Ok(Learner::Lwf(LwfLearner {
                head: get_head(snap, "head")?,
                lwf: LwfState {
                    teacher: get_head(snap, "teacher")?,
                    updates: snap.scalar("lwf.updates", 0)? as u64,
                },
                hyper: get_hyper(snap)?,
            })),
            other => Err(snap_err(format!("unknown learner kind '{other}'"))),
        }
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_snapshot().to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_snapshot(path: &Path) -> Result<Learner> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Learner::from_snapshot(&Snapshot::from_bytes(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{LearnerConfig, LearnerKind};
    use crate::rng::seeded;
    use crate::stream::ExperienceBatch;

    fn data() -> Vec<Sample> {
        (0..40)
            .map(|i| {
                let c = (i / 5) % 3;
                let f = (0..4).map(|j| ((i * 4 + j) as f32 * 0.61).sin() + 2.0 * c as f32).collect();
                Sample::new(i as u64, f, c, (i / 5) as u32)
            })
            .collect()
    }

    fn trained(cfg: &LearnerConfig) -> Learner {
        let d = data();
        let mut rng = seeded(5);
        let mut l = Learner::build(cfg, 3, 4, &mut rng).unwrap();
        for (i, chunk) in d.chunks(10).enumerate() {
            l.observe(&ExperienceBatch::new(i, chunk), &mut rng).unwrap();
        }
        l
    }

    #[test]
    fn round_trip_every_learner() {
        let cfgs = [
            LearnerConfig { kind: LearnerKind::Slda, policy: None, ..Default::default() },
            LearnerConfig { kind: LearnerKind::Exstream, policy: None, exstream_capacity: 3, ..Default::default() },
            LearnerConfig { kind: LearnerKind::Sgd, policy: Some(MemoryPolicy::Cbrs), memory_capacity: 7, ..Default::default() },
            LearnerConfig { kind: LearnerKind::Sgd, policy: None, hidden: Some(5), ..Default::default() },
            LearnerConfig { kind: LearnerKind::Lwf, policy: None, ..Default::default() },
        ];
        let probe = data();
        for cfg in &cfgs {
            let l = trained(cfg);
            let bytes = l.to_snapshot().to_bytes();
            let back = Learner::from_snapshot(&Snapshot::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back.to_snapshot().to_bytes(), bytes, "{:?}", cfg.kind);
            assert_eq!(back.predict_experience(&probe).unwrap(), l.predict_experience(&probe).unwrap());
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Snapshot::from_bytes(b"NOPE").is_err());
        let mut bytes = trained(&LearnerConfig::default()).to_snapshot().to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Snapshot::from_bytes(&bytes).is_err());
        let mut bytes = Snapshot::new("x").to_bytes();
        bytes[4] = 7;
        assert!(matches!(Snapshot::from_bytes(&bytes), Err(Error::UnsupportedVersion { .. })));
    }
}
