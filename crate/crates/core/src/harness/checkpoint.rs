//! Versioned binary checkpoint container.
//!
//! Layout: magic `SCFD`, `u32` format version, then length-prefixed
//! sections `MANI` (flat config text), `TENS` (named tensors), `RNGS`
//! (generator states), `CNTR` (named counters) and `REPL` (replay snapshot).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::agent::{ActorCritic, Critic};
use crate::codec::{ByteReader, ByteWriter, CodecError};
use crate::numerics::{Adam, ParamSet, RngState, Tensor};
use crate::world_model::WorldModel;

use super::learner::Learner;

pub const MAGIC: &[u8; 4] = b"SCFD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (this build reads version {supported}); re-save it with a matching build")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint integrity: {0}")]
    Integrity(#[from] CodecError),
    #[error("checkpoint is missing section {0}")]
    MissingSection(String),
    #[error("component set mismatch: missing [{}], unexpected [{}]", missing.join(", "), unexpected.join(", "))]
    ComponentMismatch { missing: Vec<String>, unexpected: Vec<String> },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Everything needed to restore a run, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: String,
    pub tensors: Vec<(String, Tensor)>,
    pub rngs: Vec<(String, RngState)>,
    pub counters: Vec<(String, u64)>,
    pub replay: Vec<u8>,
}

fn section(w: &mut ByteWriter, tag: &[u8; 4], payload: Vec<u8>) {
    w.bytes_raw(tag);
    w.u64(payload.len() as u64);
    w.bytes_raw(&payload);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes_raw(MAGIC);
        w.u32(FORMAT_VERSION);

        let mut m = ByteWriter::new();
        m.str(&self.manifest);
        section(&mut w, b"MANI", m.into_bytes());

        let mut t = ByteWriter::new();
        t.u64(self.tensors.len() as u64);
        for (name, x) in &self.tensors {
            t.str(name);
            t.u64(x.rows as u64);
            t.u64(x.cols as u64);
            t.f64s(&x.data);
        }
        section(&mut w, b"TENS", t.into_bytes());

        let mut r = ByteWriter::new();
        r.u64(self.rngs.len() as u64);
        for (name, s) in &self.rngs {
            r.str(name);
            r.u64(s.seed);
            r.u64(s.stream);
            r.u128(s.counter);
        }
        section(&mut w, b"RNGS", r.into_bytes());

        let mut c = ByteWriter::new();
        c.u64(self.counters.len() as u64);
        for (name, v) in &self.counters {
            c.str(name);
            c.u64(*v);
        }
        section(&mut w, b"CNTR", c.into_bytes());

        let mut p = ByteWriter::new();
        p.bytes(&self.replay);
        section(&mut w, b"REPL", p.into_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader::new(data);
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let mut sections = BTreeMap::new();
        while !r.is_empty() {
            let tag = String::from_utf8_lossy(r.take(4)?).into_owned();
            let len = r.u64()? as usize;
            let body = r.take(len)?;
            sections.insert(tag, body);
        }
        let get = |tag: &str| sections.get(tag).copied().ok_or_else(|| CheckpointError::MissingSection(tag.into()));
        let mut out = Checkpoint::default();

        let mut m = ByteReader::new(get("MANI")?);
        out.manifest = m.str()?;

        let mut t = ByteReader::new(get("TENS")?);
        for _ in 0..t.len_prefix(24)? {
            let name = t.str()?;
            let rows = t.u64()? as usize;
            let cols = t.u64()? as usize;
            let vals = t.f64s()?;
            if vals.len() != rows * cols {
                return Err(CodecError::Invalid(format!("tensor `{name}` holds {} values for {rows}x{cols}", vals.len())).into());
            }
            out.tensors.push((name, Tensor::from_vec(rows, cols, vals)));
        }

        let mut g = ByteReader::new(get("RNGS")?);
        for _ in 0..g.len_prefix(40)? {
            let name = g.str()?;
            let seed = g.u64()?;
            let stream = g.u64()?;
            let counter = g.u128()?;
            out.rngs.push((name, RngState { seed, stream, counter }));
        }

        let mut c = ByteReader::new(get("CNTR")?);
        for _ in 0..c.len_prefix(16)? {
            let name = c.str()?;
            out.counters.push((name, c.u64()?));
        }

        let mut p = ByteReader::new(get("REPL")?);
        out.replay = p.bytes()?.to_vec();
        Ok(out)
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn rng(&self, name: &str) -> Option<RngState> {
        self.rngs.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Mutable view of every learnable tensor and optimizer slot in a stable order.
enum Slot<'a> {
    Tensor(&'a mut Tensor),
    Count(&'a mut u64),
    Scalar(&'a mut f64),
}

fn param_slots<'a>(prefix: &str, set: &'a mut ParamSet, out: &mut Vec<(String, Slot<'a>)>) {
    for t in set.iter_mut() {
        out.push((format!("{prefix}/{}", t.name), Slot::Tensor(&mut t.value)));
    }
}

fn adam_slots<'a>(prefix: &str, names: &[String], adam: &'a mut Adam, out: &mut Vec<(String, Slot<'a>)>) {
    for (name, m) in names.iter().zip(adam.first.iter_mut()) {
        out.push((format!("{prefix}/adam_m/{name}"), Slot::Tensor(m)));
    }
    for (name, v) in names.iter().zip(adam.second.iter_mut()) {
        out.push((format!("{prefix}/adam_v/{name}"), Slot::Tensor(v)));
    }
    out.push((format!("{prefix}/adam_steps"), Slot::Count(&mut adam.steps)));
}

fn names(set: &ParamSet) -> Vec<String> {
    set.iter().map(|t| t.name.clone()).collect()
}

fn wm_slots<'a>(prefix: &str, wm: &'a mut WorldModel, out: &mut Vec<(String, Slot<'a>)>) {
    let n = names(&wm.params);
    param_slots(prefix, &mut wm.params, out);
    adam_slots(prefix, &n, &mut wm.opt, out);
}

fn critic_slots<'a>(prefix: &str, critic: &'a mut Critic, out: &mut Vec<(String, Slot<'a>)>) {
    let n = names(&critic.params);
    param_slots(prefix, &mut critic.params, out);
    param_slots(&format!("{prefix}/slow"), &mut critic.slow, out);
    adam_slots(prefix, &n, &mut critic.opt, out);
}

fn ac_slots<'a>(prefix: &str, ac: &'a mut ActorCritic, out: &mut Vec<(String, Slot<'a>)>) {
    let n = names(&ac.policy.params);
    param_slots(&format!("{prefix}/policy"), &mut ac.policy.params, out);
    adam_slots(&format!("{prefix}/policy"), &n, &mut ac.policy.opt, out);
    critic_slots(&format!("{prefix}/critic"), &mut ac.critic, out);
    out.push((format!("{prefix}/return_scale"), Slot::Scalar(&mut ac.normalizer.scale)));
}

fn learner_slots(learner: &mut Learner) -> Vec<(String, Slot<'_>)> {
    let mut out = Vec::new();
    wm_slots("target_wm", &mut learner.target_wm, &mut out);
    if let Some(wm) = learner.scaffolded_wm.as_mut() {
        wm_slots("scaffolded_wm", wm, &mut out);
    }
    ac_slots("actor", &mut learner.actor, &mut out);
    if let Some(ac) = learner.explorer.as_mut() {
        ac_slots("explorer", ac, &mut out);
    }
    if let Some(ac) = learner.teacher.as_mut() {
        ac_slots("teacher", ac, &mut out);
    }
    if let Some(c) = learner.probe_critic.as_mut() {
        critic_slots("probe", c, &mut out);
    }
    out
}

/// Append the learner's state to a checkpoint.
pub fn export_learner(learner: &Learner, ckpt: &mut Checkpoint) {
    let mut copy = learner.clone();
    for (name, slot) in learner_slots(&mut copy) {
        match slot {
            Slot::Tensor(t) => ckpt.tensors.push((name, t.clone())),
            Slot::Count(c) => ckpt.counters.push((format!("learner/{name}"), *c)),
            Slot::Scalar(x) => ckpt.tensors.push((name, Tensor::from_vec(1, 1, vec![*x]))),
        }
    }
}

/// Overwrite the learner's state from a checkpoint; the component sets must match.
pub fn import_learner(learner: &mut Learner, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let tensors: BTreeMap<&str, &Tensor> = ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let counters: BTreeMap<&str, u64> = ckpt
        .counters
        .iter()
        .filter_map(|(n, v)| n.strip_prefix("learner/").map(|k| (k, *v)))
        .collect();
    let slots = learner_slots(learner);
    let expected: Vec<String> = slots.iter().map(|(n, _)| n.clone()).collect();
    let found: Vec<String> = tensors.keys().chain(counters.keys()).map(|s| s.to_string()).collect();
    let missing: Vec<String> = expected.iter().filter(|n| !found.contains(n)).cloned().collect();
    let unexpected: Vec<String> = found.iter().filter(|n| !expected.contains(n)).cloned().collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        let top = |v: Vec<String>| {
            let mut s: Vec<String> = v.into_iter().map(|n| n.split('/').next().unwrap_or("").to_string()).collect();
            s.dedup();
            s
        };
        return Err(CheckpointError::ComponentMismatch {
            missing: top(missing),
            unexpected: top(unexpected),
        });
    }
    for (name, slot) in slots {
        match slot {
            Slot::Tensor(t) => {
                let src = tensors[name.as_str()];
                if src.shape() != t.shape() {
                    return Err(CheckpointError::Shape {
                        name,
                        expected: t.shape(),
                        found: src.shape(),
                    });
                }
                *t = src.clone();
            }
            Slot::Count(c) => *c = counters[name.as_str()],
            Slot::Scalar(x) => {
                let src = tensors[name.as_str()];
                if src.shape() != (1, 1) {
                    return Err(CheckpointError::Shape {
                        name,
                        expected: (1, 1),
                        found: src.shape(),
                    });
                }
                *x = src.data[0];
            }
        }
    }
    Ok(())
}
