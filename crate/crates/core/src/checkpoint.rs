//! Binary checkpoints of named parameter blocks with a JSON sidecar.
//!
//! Layout of the binary file (little endian):
//!
//! ```text
//! magic "AFFSEGCK" | u32 version | u8 dtype | u32 count
//! count × { u32 name_len | name | u32 rank | rank × u64 dim | values }
//! u8 has_velocity | [count × values] | u64 step | f64 current_lr
//! ```
//!
//! The sidecar next to it (same stem, `.json`) carries the epoch, both
//! configurations and the metric history.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::AffSegNet;
use crate::tensor::{cst, from_vec, DType, Element, Tensor};
use crate::train::{EpochRecord, OptimizerState, Trainer};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AFFSEGCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub metric_history: Vec<EpochRecord>,
    pub steps_per_epoch: Option<usize>,
    pub best_score: Option<(f64, usize)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Element> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
    /// Absent for parameter-only snapshots such as the best checkpoint.
    pub optimizer: Option<OptimizerState<T>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn meta_of<T: Element>(t: &Trainer<T>) -> CheckpointMeta {
    CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        epoch: t.epoch,
        model_config: t.model.config.clone(),
        train_config: t.train_config.clone(),
        metric_history: t.history.clone(),
        steps_per_epoch: t.steps_per_epoch,
        best_score: t.best_score,
    }
}

impl<T: Element> Checkpoint<T> {
    /// Full training state, resumable.
    pub fn from_trainer(t: &Trainer<T>) -> Self {
        Self {
            meta: meta_of(t),
            params: t.store.clone(),
            optimizer: Some(t.optimizer.clone()),
        }
    }

    /// Best parameters seen so far, without optimizer state.
    pub fn best_of(t: &Trainer<T>) -> Self {
        let mut meta = meta_of(t);
        if let Some((_, e)) = t.best_score {
            meta.epoch = e;
        }
        Self {
            meta,
            params: t.best_store().clone(),
            optimizer: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "json") {
            return Err(Error::Checkpoint(format!("{} would collide with its own sidecar", path.display())));
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_binary(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        let values = |w: &mut dyn Write, t: &Tensor<T>| -> std::io::Result<()> {
            for &v in t.iter() {
                match T::DTYPE {
                    DType::F32 => w.write_f32::<LittleEndian>(v.to_f64() as f32)?,
                    DType::F64 => w.write_f64::<LittleEndian>(v.to_f64())?,
                }
            }
            Ok(())
        };
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_FORMAT_VERSION)?;
        w.write_u8(T::DTYPE.tag())?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (_, name, t) in self.params.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            values(w, t)?;
        }
        match &self.optimizer {
            Some(opt) => {
                w.write_u8(1)?;
                for v in &opt.velocity {
                    values(w, v)?;
                }
                w.write_u64::<LittleEndian>(opt.step)?;
                w.write_f64::<LittleEndian>(opt.current_lr)?;
            }
            None => w.write_u8(0)?,
        }
        Ok(())
    }

    /// Reads a checkpoint of either stored precision into `T`.
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let corrupt = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let io = |e: std::io::Error| corrupt(format!("truncated or unreadable ({e})"));

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let dtype = DType::from_tag(r.read_u8().map_err(io)?).ok_or_else(|| corrupt("unknown dtype".into()))?;
        let read_values = |r: &mut BufReader<File>, n: usize| -> std::io::Result<Vec<T>> {
            (0..n)
                .map(|_| {
                    Ok(match dtype {
                        DType::F32 => cst::<T>(r.read_f32::<LittleEndian>()? as f64),
                        DType::F64 => cst::<T>(r.read_f64::<LittleEndian>()?),
                    })
                })
                .collect()
        };

        let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut params = ParamStore::new();
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("parameter name is not UTF-8".into()))?;
            let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let data = read_values(&mut r, shape.iter().product()).map_err(io)?;
            if params.id(&name).is_some() {
                return Err(corrupt(format!("duplicate parameter {name}")));
            }
            params.add(name, from_vec(&shape, data));
            shapes.push(shape);
        }
        let optimizer = match r.read_u8().map_err(io)? {
            0 => None,
            1 => {
                let mut velocity = Vec::with_capacity(count);
                for s in &shapes {
                    velocity.push(from_vec(s, read_values(&mut r, s.iter().product()).map_err(io)?));
                }
                let step = r.read_u64::<LittleEndian>().map_err(io)?;
                let current_lr = r.read_f64::<LittleEndian>().map_err(io)?;
                Some(OptimizerState {
                    velocity,
                    step,
                    current_lr,
                })
            }
            other => return Err(corrupt(format!("bad optimizer flag {other}"))),
        };

        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: side.clone(),
            msg: e.to_string(),
        })?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(corrupt(format!("sidecar format version {}", meta.format_version)));
        }
        Ok(Self { meta, params, optimizer })
    }

    /// Rebuilds the network and installs the stored parameters, checking
    /// that every name and shape matches the configuration.
    pub fn into_model(self) -> Result<(AffSegNet, ParamStore<T>, CheckpointMeta, Option<OptimizerState<T>>)> {
        let (model, mut store) = AffSegNet::build::<T>(&self.meta.model_config, 0)?;
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, configuration expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (_, name, value) in self.params.iter() {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            if store.get(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, configuration expects {:?}",
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, value.clone());
        }
        // velocity follows checkpoint order; reorder to the rebuilt store
        let optimizer = self.optimizer.map(|mut opt| {
            let mut velocity: Vec<Tensor<T>> = store.iter().map(|(_, _, v)| Tensor::zeros(v.raw_dim())).collect();
            for ((_, name, _), v) in self.params.iter().zip(opt.velocity.drain(..)) {
                velocity[store.id(name).expect("checked above").index()] = v;
            }
            OptimizerState { velocity, ..opt }
        });
        Ok((model, store, self.meta, optimizer))
    }
}

impl<T: Element> Trainer<T> {
    /// Resumes from a full checkpoint; fails on a parameter-only snapshot.
    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let (model, store, meta, optimizer) = ckpt.into_model()?;
        let optimizer = optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        meta.train_config.validate().into_result()?;
        Ok(Self {
            model,
            store,
            optimizer,
            train_config: meta.train_config,
            epoch: meta.epoch,
            history: meta.metric_history,
            best_score: meta.best_score,
            best_params: None,
            steps_per_epoch: meta.steps_per_epoch,
        })
    }
}
