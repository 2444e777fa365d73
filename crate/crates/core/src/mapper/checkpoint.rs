//! Single-file prior archive: a magic line, a little-endian `u64` header
//! length, a JSON header and the raw little-endian `f64` tensor payload.
//!
//! Optimizer moments are stored alongside the parameters so that resumed
//! training continues exactly where it stopped.

use std::fs;
use std::path::Path;

use adadiff_tape::{Adam, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::config::MapperConfig;
use super::train::{Prior, TrainingMeta};
use super::{Discriminator, Generator};
use crate::error::{data, Result};
use crate::schedule::DiffusionSchedule;

pub const PRIOR_FORMAT: &str = "adadiff-prior-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    config: MapperConfig,
    schedule: DiffusionSchedule,
    meta: TrainingMeta,
    generator_steps: u64,
    discriminator_steps: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn sections(prior: &Prior) -> Vec<(String, &Tensor)> {
    let g = prior.generator.params();
    let d = Discriminator::params(&prior.discriminator);
    let (gm, gv) = prior.opt_g.moments();
    let (dm, dv) = prior.opt_d.moments();
    let groups: [(&str, &[String], &[Tensor]); 6] = [
        ("", g.names(), g.tensors()),
        ("", d.names(), d.tensors()),
        ("opt.m.", g.names(), gm),
        ("opt.v.", g.names(), gv),
        ("opt.m.", d.names(), dm),
        ("opt.v.", d.names(), dv),
    ];
    groups
        .into_iter()
        .flat_map(|(prefix, names, tensors)| names.iter().zip(tensors).map(move |(n, t)| (format!("{prefix}{n}"), t)))
        .collect()
}

impl Prior {
    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = sections(self);
        let header = Header {
            format: PRIOR_FORMAT.into(),
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            meta: self.meta.clone(),
            generator_steps: self.opt_g.steps_taken(),
            discriminator_steps: self.opt_d.steps_taken(),
            tensors: entries
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(PRIOR_FORMAT.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic = format!("{PRIOR_FORMAT}\n");
        let rest = bytes
            .strip_prefix(magic.as_bytes())
            .ok_or_else(|| data(format!("not a {PRIOR_FORMAT} archive")))?;
        if rest.len() < 8 {
            return Err(data("truncated prior archive"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let body = &rest[8..];
        if body.len() < len {
            return Err(data("truncated prior header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| data(format!("malformed prior header: {e}")))?;
        if header.format != PRIOR_FORMAT {
            return Err(data(format!("unsupported prior format {:?}", header.format)));
        }
        let mut payload = &body[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let count: usize = entry.shape.iter().product();
            if payload.len() < count * 8 {
                return Err(data(format!("payload ends inside tensor {}", entry.name)));
            }
            let values = payload[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[count * 8..];
            tensors.push((entry.name.as_str(), Tensor::from_vec(&entry.shape, values)));
        }
        if !payload.is_empty() {
            return Err(data("trailing bytes after prior payload"));
        }

        let mut prior = Prior::new(header.config, header.schedule, header.meta.mode, header.meta.seed)
            .map_err(|e| data(format!("archived config is invalid: {e}")))?;
        prior.meta = header.meta;
        let mut lookup: std::collections::HashMap<&str, Tensor> = tensors.into_iter().collect();
        let mut take = |name: String, like: &Tensor| -> Result<Tensor> {
            let t = lookup
                .remove(name.as_str())
                .ok_or_else(|| data(format!("archive lacks tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(data(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), like.shape())));
            }
            Ok(t)
        };
        let mut restore = |store: &mut ParamStore, steps: u64, opt: &Adam| -> Result<Adam> {
            let names = store.names().to_vec();
            let mut first = Vec::new();
            let mut second = Vec::new();
            for (name, slot) in names.iter().zip(store.tensors_mut()) {
                *slot = take(name.clone(), slot)?;
                first.push(take(format!("opt.m.{name}"), slot)?);
                second.push(take(format!("opt.v.{name}"), slot)?);
            }
            Ok(Adam::from_state(opt.learning_rate, opt.beta1, opt.beta2, steps, first, second))
        };
        let opt_g = restore(prior.generator.params_mut(), header.generator_steps, &prior.opt_g)?;
        let opt_d = restore(
            Discriminator::params_mut(&mut prior.discriminator),
            header.discriminator_steps,
            &prior.opt_d,
        )?;
        prior.opt_g = opt_g;
        prior.opt_d = opt_d;
        if let Some(extra) = lookup.keys().next() {
            return Err(data(format!("archive holds unexpected tensor {extra}")));
        }
        Ok(prior)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
