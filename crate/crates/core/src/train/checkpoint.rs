//! Checkpoint file.
//!
//! ```text
//! magic "TAMK" | version u32
//! config text   u32 length + utf-8 `key=value` lines (stage first)
//! step          u64
//! blocks        u32 count, then per block:
//!               u16 name length | name | u32 rows | u32 cols | rows×cols f64
//! ```
//! Blocks hold every model tensor (`cia.w1`, `point.b3`, ...), the Adam
//! moments of the stage's trainable tensors (`adam.m.<name>`,
//! `adam.v.<name>`) and the running epoch sums (`progress.epoch`).

use std::fs;
use std::path::Path;

use crate::datagen::Reader;
use crate::error::{Result, TammError};
use crate::numkit::Matrix;

use super::model::{Module, TammModel};
use super::optim::OptimState;
use super::{ModelDims, Stage, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TAMK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub model: TammModel,
    pub optim: OptimState,
    /// Loss sums and batch count of the epoch in progress.
    pub epoch_sums: [f64; 4],
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optim.step
    }
}

fn push_block(buf: &mut Vec<u8>, name: &str, m: &Matrix) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| TammError::config("block name too long"))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    for dim in [m.rows(), m.cols()] {
        let v = u32::try_from(dim).map_err(|_| TammError::config("tensor too large"))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut text = format!("stage={}\n", ck.stage.name());
    for (k, v) in ck.config.to_pairs() {
        text.push_str(&format!("{k}={v}\n"));
    }
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&ck.optim.step.to_le_bytes());

    let tensors = ck.model.tensors(&Module::ALL);
    let trainable = ck.model.tensors(ck.stage.trainable());
    if trainable.len() != ck.optim.first.len() {
        return Err(TammError::shape(format!(
            "stage {} has {} trainable tensors but the optimizer tracks {}",
            ck.stage.name(),
            trainable.len(),
            ck.optim.first.len()
        )));
    }
    let count = tensors.len() + 2 * trainable.len() + 1;
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in &tensors {
        push_block(&mut buf, name, t)?;
    }
    for (k, (name, _)) in trainable.iter().enumerate() {
        push_block(&mut buf, &format!("adam.m.{name}"), &ck.optim.first[k])?;
        push_block(&mut buf, &format!("adam.v.{name}"), &ck.optim.second[k])?;
    }
    push_block(&mut buf, "progress.epoch", &Matrix::row_vector(&ck.epoch_sums))?;
    Ok(buf)
}

fn take_block(blocks: &mut Vec<(String, Matrix)>, name: &str, shape: (usize, usize)) -> Result<Matrix> {
    let pos = blocks
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| TammError::format(0, format!("checkpoint has no block {name:?}")))?;
    let (_, m) = blocks.remove(pos);
    if m.shape() != shape {
        return Err(TammError::shape(format!(
            "block {name:?} is {:?}, expected {shape:?}",
            m.shape()
        )));
    }
    Ok(m)
}

fn shape_of(blocks: &[(String, Matrix)], name: &str) -> Result<(usize, usize)> {
    blocks
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m.shape())
        .ok_or_else(|| TammError::format(0, format!("checkpoint has no block {name:?}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TammError::format(0, format!("bad magic {magic:?}, expected \"TAMK\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TammError::UnsupportedVersion {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let text_at = r.offset();
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| TammError::format(text_at, "config text is not utf-8"))?;
    let mut stage = None;
    let mut config = TrainConfig::default();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TammError::format(text_at, format!("bad config line {line:?}")))?;
        if k == "stage" {
            stage = Some(Stage::parse(v)?);
        } else if !config.set(k, v)? {
            return Err(TammError::format(text_at, format!("unknown config key {k:?}")));
        }
    }
    let stage = stage.ok_or_else(|| TammError::format(text_at, "config text lacks the stage"))?;
    let step = r.u64("step")?;

    let count = r.u32("block count")?;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let name_at = r.offset();
        let n = u16::from_le_bytes(r.take(2, "block name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(n, "block name")?)
            .map_err(|_| TammError::format(name_at, "block name is not utf-8"))?
            .to_string();
        let rows = r.u32("block rows")? as usize;
        let cols = r.u32("block cols")? as usize;
        let data = r.f64s(rows.saturating_mul(cols), &name)?;
        blocks.push((name, Matrix::new(rows, cols, data)?));
    }
    r.finish()?;

    let (d, h) = shape_of(&blocks, "cia.w1")?;
    let (_, ph) = shape_of(&blocks, "point.w1")?;
    let dims = ModelDims {
        feature_dim: d,
        adapter_hidden: h,
        point_hidden: ph,
    };
    let mut model = TammModel::init(dims, 0)?;
    for (name, t) in model.tensors_mut(&Module::ALL) {
        *t = take_block(&mut blocks, &name, t.shape())?;
    }
    let trainable = model.tensors(stage.trainable());
    let mut optim = OptimState::new(&trainable.iter().map(|(_, t)| *t).collect::<Vec<_>>());
    optim.step = step;
    for (k, (name, t)) in trainable.iter().enumerate() {
        optim.first[k] = take_block(&mut blocks, &format!("adam.m.{name}"), t.shape())?;
        optim.second[k] = take_block(&mut blocks, &format!("adam.v.{name}"), t.shape())?;
    }
    let sums = take_block(&mut blocks, "progress.epoch", (1, 4))?;
    if let Some((extra, _)) = blocks.first() {
        return Err(TammError::format(0, format!("unexpected block {extra:?}")));
    }
    Ok(Checkpoint {
        stage,
        config,
        model,
        optim,
        epoch_sums: sums.as_slice().try_into().unwrap(),
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
