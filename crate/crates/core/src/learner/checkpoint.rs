//! `.dmckpt` checkpoints.
//!
//! ```text
//! "DMCK" | version u16 = 1 | C u32 | record count u32
//! | records: name (u16 len + utf8) | rank u8 | dims u32 * rank | f32 payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::model::ModelParams;
use super::optim::{OptimizerConfig, OptimizerState};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeMode;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

struct Record {
    dims: Vec<u32>,
    data: Vec<f32>,
}

fn write_record(w: &mut Writer, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    w.string(name)?;
    w.u8(dims.len() as u8);
    for &d in dims {
        w.u32(d as u32);
    }
    let vals: Vec<f32> = data.iter().map(|&v| v as f32).collect();
    w.f32s(&vals);
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut params = self.params.clone();
        let c = params.c;
        let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        let mlp = &params.mlp;
        let opt = &self.optimizer.config;
        for (name, v) in [
            ("meta.num_blocks", mlp.blocks.len() as f64),
            ("meta.use_attention", b(params.mode.use_attention)),
            ("meta.use_distance", b(params.mode.use_distance)),
            ("meta.shared_kv", b(params.attn.shared)),
            ("meta.leaky_slope", mlp.leaky_slope),
            ("meta.bn_momentum", mlp.bn_momentum),
            ("meta.bn_eps", mlp.bn_eps),
            ("optim.beta1", opt.beta1),
            ("optim.beta2", opt.beta2),
            ("optim.eps", opt.eps),
            ("optim.lr_attention_projection", opt.lr_attention_projection),
            ("optim.lr_mlp", opt.lr_mlp),
            ("optim.weight_decay_mlp", opt.weight_decay_mlp),
            ("optim.weight_decay_other", opt.weight_decay_other),
            ("optim.step", self.optimizer.step as f64),
        ] {
            records.push((name.into(), vec![], vec![v]));
        }
        let shapes = tensor_shapes(&params);
        let names: Vec<String> = params
            .trainable_mut()
            .iter()
            .map(|(n, _, _)| n.clone())
            .collect();
        for ((name, _, data), dims) in params.trainable_mut().into_iter().zip(&shapes) {
            records.push((name, dims.clone(), data.to_vec()));
        }
        for (name, data) in params.buffers_mut() {
            records.push((name, vec![data.len()], data.to_vec()));
        }
        for ((name, dims), (m, v)) in names
            .iter()
            .zip(&shapes)
            .zip(self.optimizer.m.iter().zip(&self.optimizer.v))
        {
            records.push((format!("optim.m.{name}"), dims.clone(), m.clone()));
            records.push((format!("optim.v.{name}"), dims.clone(), v.clone()));
        }

        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u32(c as u32);
        w.u32(records.len() as u32);
        for (name, dims, data) in &records {
            write_record(&mut w, name, dims, data)?;
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let c = r.u32()? as usize;
        if c == 0 {
            return Err(Error::format("checkpoint: zero channel count"));
        }
        let count = r.u32()? as usize;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut total: usize = 1;
            for _ in 0..rank {
                let d = r.u32()?;
                total = total
                    .checked_mul(d as usize)
                    .ok_or_else(|| Error::format("checkpoint: tensor size overflows"))?;
                dims.push(d);
            }
            let data = r.finite_f32s(total)?;
            if records
                .insert(name.clone(), Record { dims, data })
                .is_some()
            {
                return Err(Error::format(format!(
                    "checkpoint: duplicate record {name}"
                )));
            }
        }
        r.finish()?;

        let scalar = |name: &str| -> Result<f64> {
            let rec = records
                .get(name)
                .ok_or_else(|| Error::format(format!("checkpoint: missing record {name}")))?;
            if !rec.dims.is_empty() || rec.data.len() != 1 {
                return Err(Error::format(format!("checkpoint: {name} is not a scalar")));
            }
            Ok(rec.data[0] as f64)
        };
        let num_blocks = scalar("meta.num_blocks")?;
        if !(0.0..=64.0).contains(&num_blocks) || num_blocks.fract() != 0.0 {
            return Err(Error::format(format!(
                "checkpoint: bad block count {num_blocks}"
            )));
        }
        let mode = KnowledgeMode {
            use_attention: scalar("meta.use_attention")? != 0.0,
            use_distance: scalar("meta.use_distance")? != 0.0,
        };
        let shared = scalar("meta.shared_kv")? != 0.0;
        let stored: usize = records.values().map(|r| r.data.len()).sum();
        let d = c.saturating_mul(3);
        let needed = c
            .saturating_mul(c)
            .saturating_add(d.saturating_mul(d).saturating_mul(num_blocks as usize));
        if needed > stored {
            return Err(Error::format(format!(
                "checkpoint: header declares C = {c} with {num_blocks} blocks but holds only {stored} values"
            )));
        }
        let mut params = ModelParams::init(c, mode, num_blocks as usize, shared, 0);
        params.mlp.leaky_slope = scalar("meta.leaky_slope")?;
        params.mlp.bn_momentum = scalar("meta.bn_momentum")?;
        params.mlp.bn_eps = scalar("meta.bn_eps")?;
        let config = OptimizerConfig {
            beta1: scalar("optim.beta1")?,
            beta2: scalar("optim.beta2")?,
            eps: scalar("optim.eps")?,
            lr_attention_projection: scalar("optim.lr_attention_projection")?,
            lr_mlp: scalar("optim.lr_mlp")?,
            weight_decay_mlp: scalar("optim.weight_decay_mlp")?,
            weight_decay_other: scalar("optim.weight_decay_other")?,
        };
        let step = scalar("optim.step")?;
        if step < 0.0 || step.fract() != 0.0 {
            return Err(Error::format(format!(
                "checkpoint: bad step counter {step}"
            )));
        }

        let shapes = tensor_shapes(&params);
        let fill = |name: &str, dims: &[usize], dst: &mut [f64]| -> Result<()> {
            let rec = records
                .get(name)
                .ok_or_else(|| Error::format(format!("checkpoint: missing record {name}")))?;
            let want: Vec<u32> = dims.iter().map(|&d| d as u32).collect();
            if rec.dims != want {
                return Err(Error::format(format!(
                    "checkpoint: {name} has dims {:?}, expected {want:?}",
                    rec.dims
                )));
            }
            for (d, &s) in dst.iter_mut().zip(&rec.data) {
                *d = s as f64;
            }
            Ok(())
        };
        let mut names = Vec::new();
        for ((name, _, dst), dims) in params.trainable_mut().into_iter().zip(&shapes) {
            fill(&name, dims, dst)?;
            names.push((name, dims.clone()));
        }
        for (name, dst) in params.buffers_mut() {
            let len = dst.len();
            fill(&name, &[len], dst)?;
            if name.ends_with("running_var") && dst.iter().any(|&v| v < 0.0) {
                return Err(Error::format(format!(
                    "checkpoint: negative running variance in {name}"
                )));
            }
        }
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (name, dims) in &names {
            let n: usize = dims.iter().product();
            let mut mm = vec![0.0; n];
            let mut vv = vec![0.0; n];
            fill(&format!("optim.m.{name}"), dims, &mut mm)?;
            fill(&format!("optim.v.{name}"), dims, &mut vv)?;
            m.push(mm);
            v.push(vv);
        }
        Ok(Self {
            params,
            optimizer: OptimizerState {
                config,
                step: step as u64,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                what: "model checkpoint".into(),
            });
        }
        Self::decode(&read_file(path)?).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn tensor_shapes(params: &ModelParams) -> Vec<Vec<usize>> {
    let c = params.c;
    let d = 3 * c;
    let mut shapes = vec![
        vec![c, c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![c, c],
        vec![c],
    ];
    for _ in &params.mlp.blocks {
        shapes.extend([vec![d, d], vec![d], vec![d], vec![d]]);
    }
    shapes.push(vec![d]);
    shapes.push(vec![]);
    shapes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rounded(mut p: ModelParams) -> ModelParams {
        for (_, _, s) in p.trainable_mut() {
            s.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        p
    }

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let mut params = rounded(ModelParams::init(3, KnowledgeMode::default(), 2, false, 8));
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &mut params);
        opt.step = 17;
        opt.m[0][0] = 0.25;
        let ck = Checkpoint {
            params,
            optimizer: opt,
        };
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        // hyperparameters are stored at f32 precision, tensors are exact
        assert_eq!(back.encode().unwrap(), bytes);
        let (mut a, mut b) = (back.params.clone(), ck.params.clone());
        for ((_, _, x), (_, _, y)) in a.trainable_mut().into_iter().zip(b.trainable_mut()) {
            assert_eq!(x, y);
        }
        assert_eq!(back.optimizer.step, 17);
        assert_eq!(back.optimizer.m, ck.optimizer.m);
        assert_eq!(back.params.mode, ck.params.mode);
    }

    #[test]
    fn corrupted_checkpoints_are_format_errors() {
        let mut params = rounded(ModelParams::init(2, KnowledgeMode::default(), 1, false, 1));
        let opt = OptimizerState::new(OptimizerConfig::default(), &mut params);
        let bytes = Checkpoint {
            params,
            optimizer: opt,
        }
        .encode()
        .unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() / 2]),
            Err(Error::Format(_))
        ));
        let mut big_count = bytes.clone();
        big_count[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&big_count),
            Err(Error::Format(_))
        ));
    }
}
