//! Binary checkpoints for [`Trainer`](crate::train::Trainer).
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then little-endian `f64` arrays (parameters, EMA parameters, Adam
//! first and second moments, loss curve). Resuming from a checkpoint
//! reproduces the uninterrupted run bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::mlp::{Adam, Mlp, MlpSpec};
use crate::rng::StreamRng;
use crate::schedule::ScheduleSpec;
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"LIPDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed_hex: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    data: GaussianMixture,
    schedule: ScheduleSpec,
    mlp: MlpSpec,
    train: TrainConfig,
    step: usize,
    adam: Adam,
    rng: RngState,
    initial_loss: Option<f64>,
    over_count: usize,
    n_params: usize,
    n_losses: usize,
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint(format!("bad rng seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Serialises the full trainer state.
pub fn write_checkpoint(trainer: &Trainer, w: &mut impl Write) -> Result<()> {
    let header = Header {
        data: trainer.data.clone(),
        schedule: trainer.schedule,
        mlp: trainer.mlp.spec().clone(),
        train: trainer.config.clone(),
        step: trainer.step,
        adam: trainer.adam.clone(),
        rng: RngState {
            seed_hex: to_hex(&trainer.rng.get_seed()),
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos().to_string(),
        },
        initial_loss: trainer.initial_loss,
        over_count: trainer.over_count,
        n_params: trainer.mlp.params().len(),
        n_losses: trainer.losses.len(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    write_f64s(w, trainer.mlp.params())?;
    write_f64s(w, &trainer.ema)?;
    write_f64s(w, &trainer.adam.m)?;
    write_f64s(w, &trainer.adam.v)?;
    write_f64s(w, &trainer.losses)?;
    Ok(())
}

/// Restores a trainer written by [`write_checkpoint`].
pub fn read_checkpoint(r: &mut impl Read) -> Result<Trainer> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a lipdiff checkpoint".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let h: Header = serde_json::from_slice(&json)?;

    let params = read_f64s(r, h.n_params)?;
    let ema = read_f64s(r, h.n_params)?;
    let mut adam = h.adam;
    adam.m = read_f64s(r, h.n_params)?;
    adam.v = read_f64s(r, h.n_params)?;
    let losses = read_f64s(r, h.n_losses)?;

    let mut rng = StreamRng::from_seed(from_hex(&h.rng.seed_hex)?);
    rng.set_stream(h.rng.stream);
    let word_pos: u128 = h
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad word position {:?}", h.rng.word_pos)))?;
    rng.set_word_pos(word_pos);

    let mlp = Mlp::from_params(h.mlp, params)?;
    let mut t = Trainer::assemble(h.data, h.schedule, h.train, mlp, ema, adam, rng)?;
    t.step = h.step;
    t.losses = losses;
    t.initial_loss = h.initial_loss;
    t.over_count = h.over_count;
    Ok(t)
}

impl Trainer {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_checkpoint(&mut BufReader::new(File::open(path)?))
    }
}
