//! Single-file binary checkpoints.
//!
//! Layout (little-endian): format version byte, magic `AVASRCKP`, scalar
//! width byte (4 or 8), then length-prefixed UTF-8 sections for the model
//! config, training config, character vocabulary and BPE model, the training
//! progress, every named parameter (name, rank, dims, payload) and finally the
//! optional Adam moments.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AvAsrModel, ModelConfig};
use crate::tensor::{ParamSet, Real, Tensor};
use crate::tokenizer::{BpeModel, CharVocab, Resolution, Tokenizers};
use crate::train::{AdamState, Progress, TrainConfig};

pub const FORMAT_VERSION: u8 = 1;
const MAGIC: &[u8; 8] = b"AVASRCKP";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub tokenizers: Tokenizers,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
    pub progress: Progress,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn payload(&mut self, t: &Tensor) {
        for &x in t.data() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Version("checkpoint is truncated".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Version("checkpoint string is not UTF-8".into()))
    }
    fn payload(&mut self, shape: Vec<usize>, width: u8) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * width as usize)?;
        let data = if width == 8 {
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect()
        } else {
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect()
        };
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.u8(FORMAT_VERSION);
        w.0.extend_from_slice(MAGIC);
        w.u8(std::mem::size_of::<Real>() as u8);
        w.str(&self.model_config.to_kv());
        w.str(&self.train_config.to_kv());
        w.str(&self.tokenizers.chars.to_file_string());
        w.str(&self.tokenizers.subwords.to_file_string());
        let p = &self.progress;
        w.u64(p.step);
        w.u64(p.epoch as u64);
        w.u64(p.cursor as u64);
        for s in p.epoch_sums {
            w.f64(s as f64);
        }
        w.f64(p.best_dev as f64);
        w.u64(p.best_epoch as u64);
        w.u64(p.bad_epochs as u64);
        w.u64(p.skipped_steps);
        w.u32(self.params.len());
        for param in self.params.iter() {
            w.str(&param.name);
            w.u32(param.value.ndim());
            for &d in param.value.shape() {
                w.u32(d);
            }
            w.payload(&param.value);
        }
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.step);
                for t in a.m.iter().chain(&a.v) {
                    w.payload(t);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Version("not a checkpoint file".into()));
        }
        let width = r.u8()?;
        if width != 4 && width != 8 {
            return Err(Error::Version(format!("unsupported scalar width {width}")));
        }
        let model_config = ModelConfig::from_kv(r.str()?, "checkpoint model config")?;
        let train_config = TrainConfig::from_kv(r.str()?, "checkpoint training config")?;
        let chars = CharVocab::from_file_string(r.str()?, "checkpoint character vocabulary")?;
        let subwords = BpeModel::from_file_string(r.str()?, "checkpoint BPE model")?;
        let mut progress = Progress {
            step: r.u64()?,
            epoch: r.u64()? as usize,
            cursor: r.u64()? as usize,
            ..Progress::default()
        };
        for s in &mut progress.epoch_sums {
            *s = r.f64()? as Real;
        }
        progress.best_dev = r.f64()? as Real;
        progress.best_epoch = r.u64()? as usize;
        progress.bad_epochs = r.u64()? as usize;
        progress.skipped_steps = r.u64()?;
        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.str()?.to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let value = r.payload(shape, width)?;
            if params.id_of(&name).is_some() {
                return Err(Error::Version(format!("duplicate parameter '{name}' in checkpoint")));
            }
            params.add(name, value);
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut read_all = || -> Result<Vec<Tensor>> {
                    params
                        .iter()
                        .map(|p| r.payload(p.value.shape().to_vec(), width))
                        .collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(AdamState { step, m, v })
            }
            f => return Err(Error::Version(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Version("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            model_config,
            train_config,
            tokenizers: Tokenizers { chars, subwords },
            params,
            adam,
            progress,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::File::create(&tmp)
            .and_then(|mut f| {
                f.write_all(&self.to_bytes())?;
                f.sync_all()
            })
            .map_err(|e| Error::file(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and installs the stored weights. Every parameter
    /// name and shape must match the architecture the config describes.
    pub fn build_model(&self) -> Result<AvAsrModel> {
        let mut model = AvAsrModel::new(self.model_config.clone(), 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} parameters, config describes {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (dst, src) in model.params.iter_mut().zip(self.params.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Version(format!(
                    "checkpoint parameter '{}' {:?} does not match '{}' {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(model)
    }

    /// Loads a checkpoint's weights into a model and checks its vocabularies.
    pub fn model_and_tokenizers(self) -> Result<(AvAsrModel, Tokenizers)> {
        let model = self.build_model()?;
        for r in [Resolution::Character, Resolution::Subword] {
            if self.tokenizers.vocab_size(r) != model.vocab_size(r) {
                return Err(Error::Version(format!(
                    "{r} vocabulary has {} ids, model expects {}",
                    self.tokenizers.vocab_size(r),
                    model.vocab_size(r)
                )));
            }
        }
        Ok((model, self.tokenizers))
    }
}
