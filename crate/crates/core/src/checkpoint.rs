//! Binary checkpoint format: a versioned container holding the experiment
//! config snapshot, the schedule as JSON, every parameter tensor, the
//! training RNG state, and the epoch counter. Writing is deterministic, so
//! load-save round trips are byte-identical.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::conditioner::InjectionMode;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::schedule::Schedule;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSECKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    injection: InjectionMode,
    use_conditioner: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    /// Snapshot of the resolved experiment config (JSON).
    pub config_json: String,
    pub schedule: Schedule,
    pub model: Model,
    pub rng_state: (u64, u64, u64),
    pub epoch: u64,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = get_u64(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn get_string(r: &mut impl Read) -> Result<String> {
    String::from_utf8(get_bytes(r)?)
        .map_err(|e| Error::CheckpointFormat(format!("invalid utf-8: {e}")))
}

impl Checkpoint {
    pub fn new(
        config_json: String,
        schedule: Schedule,
        model: Model,
        rng_state: (u64, u64, u64),
        epoch: u64,
    ) -> Checkpoint {
        Checkpoint { version: VERSION, config_json, schedule, model, rng_state, epoch }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_bytes(&mut out, self.config_json.as_bytes());
        put_bytes(&mut out, self.schedule.to_json().as_bytes());
        let header = ModelHeader {
            config: self.model.config.clone(),
            injection: self.model.injection,
            use_conditioner: self.model.use_conditioner,
        };
        put_bytes(&mut out, serde_json::to_string(&header)?.as_bytes());

        let tensors = self.model.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng_state.0.to_le_bytes());
        out.extend_from_slice(&self.rng_state.1.to_le_bytes());
        out.extend_from_slice(&self.rng_state.2.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CheckpointFormat("bad magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let config_json = get_string(&mut r)?;
        let schedule = Schedule::from_json(&get_string(&mut r)?)?;
        let header: ModelHeader = serde_json::from_str(&get_string(&mut r)?)?;

        // rebuild the model skeleton, then overwrite every tensor from the file
        let mut model = Model::init(
            &header.config,
            header.injection,
            header.use_conditioner,
            &schedule,
            &crate::rng::Rng::new(0),
        );
        let n_tensors = get_u32(&mut r)? as usize;
        let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = get_string(&mut r)?;
            let rank = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(get_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            loaded.push((name, Tensor::from_vec(shape, data)));
        }
        let mut idx = 0usize;
        let mut mismatch: Option<String> = None;
        model.for_each_tensor_mut(&mut |name, t| {
            if mismatch.is_some() {
                return;
            }
            match loaded.get(idx) {
                Some((lname, lt)) if *lname == name && lt.shape() == t.shape() => {
                    *t = lt.clone();
                }
                _ => mismatch = Some(name),
            }
            idx += 1;
        });
        if let Some(name) = mismatch {
            return Err(Error::CheckpointFormat(format!(
                "parameter layout mismatch at {name}"
            )));
        }
        if idx != n_tensors {
            return Err(Error::CheckpointFormat(format!(
                "expected {idx} tensors, file has {n_tensors}"
            )));
        }

        let rng_state = (get_u64(&mut r)?, get_u64(&mut r)?, get_u64(&mut r)?);
        let epoch = get_u64(&mut r)?;
        Ok(Checkpoint { version, config_json, schedule, model, rng_state, epoch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::schedule::default_schedule;

    fn sample_checkpoint() -> Checkpoint {
        let model = Model::init(
            &ModelConfig {
                signal_len: 64,
                frame: 16,
                hop: 8,
                encoder_frame: 16,
                encoder_hop: 8,
                denoiser_hidden: 12,
                denoiser_inner: 8,
                denoiser_blocks: 2,
                encoder_width: 8,
                encoder_blocks: 1,
                emb_dim: 6,
                n_classes: 4,
                attn_dim: 4,
                max_step: 50,
            },
            InjectionMode::Concat,
            true,
            &default_schedule().unwrap(),
            &Rng::new(3),
        );
        Checkpoint::new(
            "{\"seed\":42}".into(),
            default_schedule().unwrap(),
            model,
            (42, 7, 99),
            12,
        )
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        let again = loaded.to_bytes().unwrap();
        assert_eq!(bytes, again);
        assert_eq!(loaded.epoch, 12);
        assert_eq!(loaded.rng_state, (42, 7, 99));
        assert_eq!(loaded.model.injection, InjectionMode::Concat);
    }

    #[test]
    fn version_mismatch_rejected() {
        let ckpt = sample_checkpoint();
        let mut bytes = ckpt.to_bytes().unwrap();
        bytes[8] = 99; // corrupt the version field
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let err = Checkpoint::from_bytes(b"NOTACKPT0000").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
