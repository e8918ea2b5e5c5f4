//! Binary checkpoint container.
//!
//! All integers little-endian.
//!
//! ```text
//! magic            8 bytes  "PADMECKP"
//! format version   u16 major, u16 minor, u16 patch
//! featurizer ver.  u32
//! signature        str      featurization stamp of the model config
//! model config     str      TOML
//! run config       str      TOML snapshot of the run, may be empty
//! targets          u32 count, then str each   (compound-only output columns)
//! params           u32 count, then per tensor:
//!                    str name, u8 ndim, u64 × ndim dims, f64 × len data
//! batchnorm        u32 count, then per layer: u32 width, f64 × width mean, f64 × width var
//! adam             u8 present; if 1: f64 lr, f64 beta1, f64 beta2, f64 eps, u64 step,
//!                    then first moments and second moments as f64 data in param order
//! ```
//! where `str` is a u32 byte length followed by UTF-8 bytes.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, PadmeModel, RunningStats};
use crate::tensor::{Adam, AdamConfig, Tensor};

pub const MAGIC: &[u8; 8] = b"PADMECKP";
pub const FORMAT_VERSION: (u16, u16, u16) = (1, 0, 0);
/// Bumped whenever fingerprint hashing, atom features or the protein
/// descriptor layout change meaning.
pub const FEATURIZER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format {0}.{1}.{2} is not readable by {3}.{4}.{5}")]
    IncompatibleFormat(u16, u16, u16, u16, u16, u16),
    #[error("checkpoint featurizer version {found}, this build uses {expected}")]
    FeaturizerVersion { found: u32, expected: u32 },
    #[error("featurization signature '{found}' does not match config '{expected}'")]
    Signature { found: String, expected: String },
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PadmeModel,
    pub adam: Option<Adam>,
    pub run_config: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend(v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Corrupt(format!(
                "needed {n} more bytes, {} left",
                self.0.len()
            )));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| CheckpointError::Corrupt("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut w = Writer(Vec::new());
        w.0.extend(MAGIC);
        w.u16(FORMAT_VERSION.0);
        w.u16(FORMAT_VERSION.1);
        w.u16(FORMAT_VERSION.2);
        w.u32(FEATURIZER_VERSION);
        let cfg = self.model.config();
        w.str(&cfg.feature_signature());
        w.str(&toml::to_string(cfg).map_err(|e| CheckpointError::Config(e.to_string()))?);
        w.str(&self.run_config);
        w.u32(self.model.target_proteins().len() as u32);
        for t in self.model.target_proteins() {
            w.str(t);
        }
        let params = self.model.params();
        w.u32(params.len() as u32);
        for (name, t) in params.iter() {
            w.str(name);
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.u32(self.model.running_stats().len() as u32);
        for s in self.model.running_stats() {
            w.u32(s.mean.len() as u32);
            w.f64s(&s.mean);
            w.f64s(&s.var);
        }
        match &self.adam {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                let c = adam.config;
                w.f64s(&[c.learning_rate, c.beta1, c.beta2, c.epsilon]);
                w.u64(adam.step_count());
                for m in adam.first_moments().iter().chain(adam.second_moments()) {
                    w.f64s(m.data());
                }
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader(bytes);
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(CheckpointError::BadMagic);
        }
        let version = (r.u16()?, r.u16()?, r.u16()?);
        if version.0 != FORMAT_VERSION.0 || version.1 > FORMAT_VERSION.1 {
            let (a, b, c) = version;
            let (x, y, z) = FORMAT_VERSION;
            return Err(CheckpointError::IncompatibleFormat(a, b, c, x, y, z));
        }
        let featurizer = r.u32()?;
        if featurizer != FEATURIZER_VERSION {
            return Err(CheckpointError::FeaturizerVersion {
                found: featurizer,
                expected: FEATURIZER_VERSION,
            });
        }
        let signature = r.str()?;
        let config: ModelConfig = toml::from_str(&r.str()?).map_err(|e| CheckpointError::Config(e.to_string()))?;
        if signature != config.feature_signature() {
            return Err(CheckpointError::Signature {
                found: signature,
                expected: config.feature_signature(),
            });
        }
        let run_config = r.str()?;
        let n_targets = r.u32()?;
        let targets = (0..n_targets).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
        let n_params = r.u32()?;
        let mut params = Vec::new();
        for _ in 0..n_params {
            let name = r.str()?;
            let ndim = r.u8()?;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| CheckpointError::Corrupt("shape overflow".into()))?;
            let data = r.f64s(len)?;
            params.push((name, Tensor::new(shape, data).expect("length from shape")));
        }
        let n_bn = r.u32()?;
        let mut running = Vec::new();
        for _ in 0..n_bn {
            let w = r.u32()? as usize;
            running.push(RunningStats {
                mean: r.f64s(w)?,
                var: r.f64s(w)?,
            });
        }
        let shapes: Vec<Vec<usize>> = params.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let c = r.f64s(4)?;
                let config = AdamConfig {
                    learning_rate: c[0],
                    beta1: c[1],
                    beta2: c[2],
                    epsilon: c[3],
                };
                let step = r.u64()?;
                let mut moments = || -> Result<Vec<Tensor>, CheckpointError> {
                    shapes
                        .iter()
                        .map(|s| {
                            let data = r.f64s(s.iter().product())?;
                            Ok(Tensor::new(s.clone(), data).expect("length from shape"))
                        })
                        .collect()
                };
                let first = moments()?;
                let second = moments()?;
                Some(Adam::from_state(config, step, first, second))
            }
            b => return Err(CheckpointError::Corrupt(format!("bad optimizer flag {b}"))),
        };
        if !r.0.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.0.len())));
        }
        let model = PadmeModel::restore(config, targets, params, running).map_err(CheckpointError::Corrupt)?;
        Ok(Checkpoint {
            model,
            adam,
            run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(io)?
            .read_to_end(&mut bytes)
            .map_err(io)?;
        Checkpoint::from_bytes(&bytes)
    }
}
