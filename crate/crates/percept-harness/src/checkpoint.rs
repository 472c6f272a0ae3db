//! Binary checkpoints: model config, tokenizer, named parameters, optimizer
//! moments, random-stream positions, and the loss history. The format is
//! little-endian, versioned, and length-prefixed throughout, so a truncated
//! or foreign file fails cleanly before any state is touched.

use percept_autograd::{ParamStore, Tensor};
use percept_model::{ModelConfig, Tokenizer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: [u8; 4] = *b"PCHK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint is truncated or corrupt (unexpected end of file)")]
    Truncated,
    #[error("not a checkpoint file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint version {got} is not supported (expected {VERSION})")]
    Version { got: u32 },
    #[error("checkpoint metadata does not parse: {0}")]
    Json(String),
    #[error("checkpoint parameter {name:?} does not exist in the model")]
    UnknownParam { name: String },
    #[error("parameter {name:?} has shape {got:?} in the checkpoint but {expected:?} in the model")]
    ShapeMismatch { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error("optimizer state does not align with the parameter list")]
    AdamMisaligned,
    #[error("checkpoint lacks the {0} required to resume")]
    MissingState(&'static str),
    #[error("unreasonable length field ({0}); refusing to allocate")]
    LengthSanity(u64),
}

/// Snapshot of one ChaCha stream: its seed and exact word position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// The three named random streams of a training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStreams {
    /// Data-mix source draws.
    pub sampler: RngSnapshot,
    /// Image/caption/expression picks and per-sample curation seeds.
    pub data: RngSnapshot,
    /// Denoising-query noise.
    pub noise: RngSnapshot,
}

/// Optimizer moments, aligned index-for-index with the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

/// Everything a run needs to continue exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub model_config: ModelConfig,
    pub tokenizer: Tokenizer,
    /// `(name, value)` in parameter-store registration order.
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamSnapshot>,
    pub rngs: Option<RngStreams>,
    /// Per-step training losses so far (the metric history).
    pub losses: Vec<f64>,
}

impl Checkpoint {
    /// Captures the parameter store by name in registration order.
    pub fn snapshot_params(store: &ParamStore) -> Vec<(String, Tensor)> {
        store.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w_u32(&mut w, VERSION)?;
        w.write_all(&[self.stage])?;
        w_u64(&mut w, self.step)?;
        let config = serde_json::to_vec(&self.model_config).map_err(|e| CheckpointError::Json(e.to_string()))?;
        w_bytes(&mut w, &config)?;
        let tok = serde_json::to_vec(&self.tokenizer).map_err(|e| CheckpointError::Json(e.to_string()))?;
        w_bytes(&mut w, &tok)?;
        w_u32(&mut w, self.params.len() as u32)?;
        for (name, t) in &self.params {
            w_name(&mut w, name)?;
            w_tensor(&mut w, t)?;
        }
        match &self.adam {
            None => w.write_all(&[0])?,
            Some(a) => {
                if a.m.len() != self.params.len() || a.v.len() != self.params.len() {
                    return Err(CheckpointError::AdamMisaligned);
                }
                w.write_all(&[1])?;
                w_u64(&mut w, a.t)?;
                for t in a.m.iter().chain(a.v.iter()) {
                    w_tensor(&mut w, t)?;
                }
            }
        }
        match &self.rngs {
            None => w.write_all(&[0])?,
            Some(r) => {
                w.write_all(&[1])?;
                for s in [&r.sampler, &r.data, &r.noise] {
                    w.write_all(&s.seed)?;
                    w_u64(&mut w, (s.word_pos >> 64) as u64)?;
                    w_u64(&mut w, s.word_pos as u64)?;
                }
            }
        }
        w_u64(&mut w, self.losses.len() as u64)?;
        for &l in &self.losses {
            w.write_all(&l.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version { got: version });
        }
        let stage = r_u8(&mut r)?;
        let step = r_u64(&mut r)?;
        let config: ModelConfig = serde_json::from_slice(&r_bytes(&mut r)?)
            .map_err(|e| CheckpointError::Json(e.to_string()))?;
        let mut tokenizer: Tokenizer = serde_json::from_slice(&r_bytes(&mut r)?)
            .map_err(|e| CheckpointError::Json(e.to_string()))?;
        tokenizer.rebuild_index();
        let count = r_u32(&mut r)? as usize;
        sane(count as u64)?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r_name(&mut r)?;
            let t = r_tensor(&mut r)?;
            params.push((name, t));
        }
        let adam = match r_u8(&mut r)? {
            0 => None,
            _ => {
                let t = r_u64(&mut r)?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for _ in 0..count {
                    m.push(r_tensor(&mut r)?);
                }
                for _ in 0..count {
                    v.push(r_tensor(&mut r)?);
                }
                Some(AdamSnapshot { m, v, t })
            }
        };
        let rngs = match r_u8(&mut r)? {
            0 => None,
            _ => {
                let mut snaps = Vec::with_capacity(3);
                for _ in 0..3 {
                    let mut seed = [0u8; 32];
                    read_exact(&mut r, &mut seed)?;
                    let hi = r_u64(&mut r)? as u128;
                    let lo = r_u64(&mut r)? as u128;
                    snaps.push(RngSnapshot { seed, word_pos: (hi << 64) | lo });
                }
                let noise = snaps.pop().expect("three snapshots");
                let data = snaps.pop().expect("three snapshots");
                let sampler = snaps.pop().expect("three snapshots");
                Some(RngStreams { sampler, data, noise })
            }
        };
        let losses_len = r_u64(&mut r)? as usize;
        sane(losses_len as u64)?;
        let mut losses = Vec::with_capacity(losses_len);
        for _ in 0..losses_len {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            losses.push(f64::from_le_bytes(b));
        }
        Ok(Self { stage, step, model_config: config, tokenizer, params, adam, rngs, losses })
    }

    /// Whether the checkpoint's parameter names, order, and shapes exactly
    /// match a store (required before restoring optimizer moments, which are
    /// aligned by index).
    pub fn aligns_with(&self, store: &ParamStore) -> bool {
        store.len() == self.params.len()
            && store
                .iter()
                .zip(&self.params)
                .all(|((_, name, t), (cname, ct))| name == cname && t.shape() == ct.shape())
    }
}

/// Copies checkpoint parameters into a store by name, restricted to names
/// accepted by `filter`; returns how many were applied. Ignoring a parameter
/// present in the store but absent from the filter leaves it at its current
/// (e.g. freshly initialized) value — this is how a stage-1 checkpoint
/// initializes stage 2 with a fresh decoder.
pub fn load_params_into(
    store: &mut ParamStore,
    params: &[(String, Tensor)],
    mut filter: impl FnMut(&str) -> bool,
) -> Result<usize, CheckpointError> {
    let mut applied = 0;
    for (name, tensor) in params {
        if !filter(name) {
            continue;
        }
        let id = store
            .id_of(name)
            .map_err(|_| CheckpointError::UnknownParam { name: name.clone() })?;
        let current = store.get(id);
        if current.shape() != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: current.shape(),
                got: tensor.shape(),
            });
        }
        *store.get_mut(id) = tensor.clone();
        applied += 1;
    }
    Ok(applied)
}

/// Name filter for initializing stage 2 from a stage-1 checkpoint: carry the
/// (frozen) encoder, the trained connector, and the language model; leave
/// the decoder stack — queries, decoder layers, output heads, denoising
/// embeddings — at its fresh initialization.
pub fn stage_transfer_filter(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("conn.") || name.starts_with("lm.")
}

fn sane(len: u64) -> Result<(), CheckpointError> {
    // A desk checkpoint holds well under a billion scalars; anything larger
    // is a corrupt length field, not data.
    if len > 1 << 30 {
        return Err(CheckpointError::LengthSanity(len));
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn w_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_bytes<W: Write>(w: &mut W, b: &[u8]) -> io::Result<()> {
    w_u32(w, b.len() as u32)?;
    w.write_all(b)
}

fn w_name<W: Write>(w: &mut W, name: &str) -> io::Result<()> {
    let b = name.as_bytes();
    w.write_all(&(b.len() as u16).to_le_bytes())?;
    w.write_all(b)
}

fn w_tensor<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    w_u32(w, t.rows() as u32)?;
    w_u32(w, t.cols() as u32)?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn r_u8<R: Read>(r: &mut R) -> Result<u8, CheckpointError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn r_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, CheckpointError> {
    let len = r_u32(r)? as usize;
    sane(len as u64)?;
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn r_name<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let mut lb = [0u8; 2];
    read_exact(r, &mut lb)?;
    let mut b = vec![0u8; u16::from_le_bytes(lb) as usize];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|e| CheckpointError::Json(e.to_string()))
}

fn r_tensor<R: Read>(r: &mut R) -> Result<Tensor, CheckpointError> {
    let rows = r_u32(r)? as usize;
    let cols = r_u32(r)? as usize;
    sane((rows as u64).saturating_mul(cols as u64))?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let mut b = [0u8; 8];
        read_exact(r, &mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Tensor::from_vec(rows, cols, data))
}
