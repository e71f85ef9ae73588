//! Model checkpoints.
//!
//! Layout (little-endian): magic `E2EC`, `u32` version, `u32`-prefixed UTF-8
//! `key=value` config block, `u32` symbol count followed by `u32`-prefixed
//! symbols, then records until end of file: `u32` name length, name, `u32`
//! rank, `rank` x `u32` dims, f32 data.

use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::features::{ByteReader, Normalizer};
use crate::model::{AsrModel, ModelConfig};
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 4] = b"E2EC";
const VERSION: u32 = 1;
const CMVN_MEAN: &str = "cmvn.mean";
const CMVN_STD: &str = "cmvn.std";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub vocabulary: Vec<String>,
    pub records: Vec<Record>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION as usize);
        let block: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_str(&mut buf, &block);
        put_u32(&mut buf, self.vocabulary.len());
        for s in &self.vocabulary {
            put_str(&mut buf, s);
        }
        for r in &self.records {
            put_str(&mut buf, &r.name);
            put_u32(&mut buf, r.dims.len());
            for &d in &r.dims {
                put_u32(&mut buf, d);
            }
            for v in &r.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(path, bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let string = |r: &mut ByteReader| -> Result<String> {
            let n = r.u32()? as usize;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format(path, "invalid UTF-8"))
        };
        let block = string(&mut r)?;
        let mut config = Vec::new();
        for line in block.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("config line without `=`: {line}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let n_symbols = r.u32()? as usize;
        let vocabulary = (0..n_symbols)
            .map(|_| string(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut records = Vec::new();
        while !r.at_end() {
            let name = string(&mut r)?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(path, "record size overflow"))?;
            let data = r.f32s(len)?;
            records.push(Record { name, dims, data });
        }
        Ok(Self {
            config,
            vocabulary,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn epoch(&self) -> usize {
        self.get("epoch").and_then(|e| e.parse().ok()).unwrap_or(0)
    }

    /// Snapshot of a model; `extra` settings are stored after the model config.
    pub fn from_model(model: &AsrModel, epoch: usize, extra: &[(String, String)]) -> Self {
        let mut config = model.config.to_pairs();
        config.push(("epoch".into(), epoch.to_string()));
        config.extend(extra.iter().cloned());
        let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut records: Vec<Record> = model
            .store
            .iter()
            .map(|(name, p)| Record {
                name: name.to_string(),
                dims: p.value.shape().to_vec(),
                data: to_f32(p.value.data()),
            })
            .collect();
        for (name, v) in [
            (CMVN_MEAN, &model.normalizer.mean),
            (CMVN_STD, &model.normalizer.std),
        ] {
            records.push(Record {
                name: name.into(),
                dims: vec![v.len()],
                data: to_f32(v),
            });
        }
        Self {
            config,
            vocabulary: Vocabulary::standard().symbols().to_vec(),
            records,
        }
    }

    /// Rebuilds the model. Every parameter must be present with its exact shape.
    pub fn to_model(&self) -> Result<AsrModel> {
        Vocabulary::from_symbols(self.vocabulary.clone())?;
        let mut config = ModelConfig::full(Default::default(), Default::default());
        for (k, v) in &self.config {
            config.set(k, v)?;
        }
        let mut model = AsrModel::new(config, 0)?;
        let mut mean = None;
        let mut std = None;
        let mut seen = 0;
        for r in &self.records {
            let values: Vec<f64> = r.data.iter().map(|&v| f64::from(v)).collect();
            match r.name.as_str() {
                CMVN_MEAN => mean = Some(values),
                CMVN_STD => std = Some(values),
                name => {
                    let target = model.store.value_mut(name)?;
                    if target.shape() != r.dims.as_slice() {
                        return Err(Error::Validation(format!(
                            "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                            r.dims,
                            target.shape()
                        )));
                    }
                    *target = Tensor::new(r.dims.clone(), values)?;
                    seen += 1;
                }
            }
        }
        if seen != model.store.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {seen} of {} model parameters",
                model.store.len()
            )));
        }
        if let (Some(mean), Some(std)) = (mean, std) {
            model.normalizer = Normalizer { mean, std };
        }
        Ok(model)
    }
}

pub fn save_model(model: &AsrModel, epoch: usize, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, epoch, &[]).write(path)
}

pub fn load_model(path: &Path) -> Result<(AsrModel, usize)> {
    let ckpt = Checkpoint::read(path)?;
    Ok((ckpt.to_model()?, ckpt.epoch()))
}
