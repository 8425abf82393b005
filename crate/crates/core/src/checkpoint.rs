//! Single-file checkpoint archive.
//!
//! Layout: the magic bytes, then a sequence of entries (`u32` name length,
//! name, `u64` payload length, payload), then a SHA-256 digest of everything
//! before it. The first entry is `manifest`, a `key=value` text block; every
//! other entry is one tensor stored as `u64` rank, `u64` extents and
//! little-endian `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::condition::init_encoder;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::trainer::{ModelParams, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EXEDITCK";
const MANIFEST: &str = "manifest";

fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.rank()) + 4 * t.len());
    out.extend((t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend((v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_tensor(name: &str, payload: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let rank = r.u64(name)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor {name} has rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|_| r.u64(name).map(|d| d as usize)).collect::<Result<_>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
    let raw = r.take(n.saturating_mul(4), name)?;
    if !r.done() {
        return Err(Error::Format(format!("trailing bytes after tensor {name}")));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Every stored tensor under its archive name.
fn collect_tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = state.params.named();
    out.extend(state.ema.named().into_iter().map(|(n, t)| (format!("ema/{n}"), t)));
    out.extend(state.encoder.params.iter().map(|(n, t)| (format!("encoder/{n}"), t)));
    for (i, (m, v)) in state.optimizer.first_moment.iter().zip(&state.optimizer.second_moment).enumerate() {
        out.push((format!("optim/m/{i}"), m));
        out.push((format!("optim/v/{i}"), v));
    }
    out
}

fn manifest(state: &TrainState) -> String {
    let config = serde_json::to_string(&state.config).expect("config serializes");
    let schedule = serde_json::to_string(&state.schedule.config()).expect("schedule serializes");
    format!(
        "format_version={FORMAT_VERSION}\nstep={}\noptimizer_step={}\nschedule={schedule}\nconfig={config}\n",
        state.step, state.optimizer.step
    )
}

/// Serializes `state` into archive bytes.
pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut entry = |name: &str, payload: &[u8]| {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend((payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    };
    entry(MANIFEST, manifest(state).as_bytes());
    for (name, t) in collect_tensors(state) {
        entry(&name, &encode_tensor(t));
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Short content hash used as a model identifier.
pub fn model_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..6].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, checkpoint_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad manifest line {l:?}")))
        })
        .collect()
}

fn field<'m>(m: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("manifest has no {key}")))
}

fn fill(set: &mut ParamSet, prefix: &str, tensors: &mut BTreeMap<String, Tensor>) -> Result<()> {
    let names: Vec<String> = set.names().to_vec();
    for name in names {
        let key = format!("{prefix}{name}");
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
        let slot = set.get_mut(&name).unwrap();
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "{key} has shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

fn fill_model(p: &mut ModelParams, prefix: &str, tensors: &mut BTreeMap<String, Tensor>) -> Result<()> {
    fill(&mut p.denoiser.params, &format!("{prefix}denoiser/"), tensors)?;
    fill(&mut p.adapter.params, &format!("{prefix}adapter/"), tensors)?;
    let key = format!("{prefix}null/v");
    let v = tensors
        .remove(&key)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
    if v.shape() != p.null.v.shape() {
        return Err(Error::Format(format!("{key} has shape {:?}", v.shape())));
    }
    p.null.v = v;
    Ok(())
}

/// Inverse of [`checkpoint_bytes`].
pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic or truncated)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let mut entries = Vec::new();
    while !r.done() {
        let len = r.u32("entry name")? as usize;
        let name = std::str::from_utf8(r.take(len, "entry name")?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let size = r.u64(&name)? as usize;
        let payload = r.take(size, &name)?;
        entries.push((name, payload));
    }
    let (first, payload) = entries
        .first()
        .ok_or_else(|| Error::Format("checkpoint has no entries".into()))?;
    if first != MANIFEST {
        return Err(Error::Format("checkpoint does not start with a manifest".into()));
    }
    let text = std::str::from_utf8(payload).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let m = parse_manifest(text)?;
    let found: u32 = field(&m, "format_version")?
        .parse()
        .map_err(|_| Error::Format("format_version is not an integer".into()))?;
    if found != FORMAT_VERSION {
        return Err(Error::Incompatible {
            found,
            expected: FORMAT_VERSION,
        });
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch (file corrupt or truncated)".into()));
    }
    let config: TrainConfig =
        serde_json::from_str(field(&m, "config")?).map_err(|e| Error::Format(format!("config: {e}")))?;
    let schedule: ScheduleConfig =
        serde_json::from_str(field(&m, "schedule")?).map_err(|e| Error::Format(format!("schedule: {e}")))?;
    if schedule != config.schedule {
        return Err(Error::Format("schedule disagrees with config".into()));
    }
    let int = |key: &str| -> Result<u64> {
        field(&m, key)?
            .parse()
            .map_err(|_| Error::Format(format!("{key} is not an integer")))
    };
    let (step, opt_step) = (int("step")?, int("optimizer_step")?);

    let mut tensors = BTreeMap::new();
    for (name, payload) in &entries[1..] {
        if tensors.insert(name.clone(), decode_tensor(name, payload)?).is_some() {
            return Err(Error::Format(format!("duplicate entry {name}")));
        }
    }

    // Build the layout from the config, then overwrite every tensor.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = init_encoder(config.encoder, &mut rng).map_err(|e| Error::Format(e.to_string()))?;
    let mut state = TrainState::new(config, encoder).map_err(|e| Error::Format(e.to_string()))?;
    fill_model(&mut state.params, "", &mut tensors)?;
    fill_model(&mut state.ema, "ema/", &mut tensors)?;
    fill(&mut state.encoder.params, "encoder/", &mut tensors)?;
    let opt = &mut state.optimizer;
    for i in 0..opt.first_moment.len() {
        for (kind, slot) in [("m", &mut opt.first_moment[i]), ("v", &mut opt.second_moment[i])] {
            let key = format!("optim/{kind}/{i}");
            let t = tensors
                .remove(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("{key} has shape {:?}", t.shape())));
            }
            *slot = t;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected entry {extra}")));
    }
    opt.step = opt_step;
    state.step = step;
    Ok(state)
}
