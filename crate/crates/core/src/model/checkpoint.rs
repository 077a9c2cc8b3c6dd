//! Checkpoint files: a text manifest terminated by `end`, then the raw
//! little-endian `f32` payload.
//!
//! ```text
//! drnet-checkpoint 1
//! mode fused:denoise
//! digest 3f0c...
//! config 11
//! in_channels = 3
//! ...
//! payload-sha256 9a1b...
//! tensors 214
//! shallow.kernel 4 8 3 3 3 0 216
//! ...
//! end
//! ```
//!
//! Tensor records are `name rank extents... offset count`, offsets in
//! elements from the start of the payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::DRNetConfig;
use super::network::Network;
use super::{named, DRNet, FusedDRNet};
use crate::drmlp::FusedMlp;
use crate::error::{Error, Result};
use crate::layers::{Affine, ParamTree};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "drnet-checkpoint";

/// Either form of a stored model.
#[derive(Debug)]
pub enum Checkpoint {
    Train(DRNet),
    Fused(FusedDRNet),
}

impl Checkpoint {
    pub fn config(&self) -> &DRNetConfig {
        match self {
            Checkpoint::Train(m) => m.config(),
            Checkpoint::Fused(m) => m.config(),
        }
    }
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn encode(mode: &str, cfg: &DRNetConfig, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut records = String::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        let extents: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
        records.push_str(&format!(
            "{name} {} {} {offset} {}\n",
            t.rank(),
            extents.join(" "),
            t.numel()
        ));
        offset += t.numel();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cfg_text = cfg.to_text();
    let mut header = format!("{MAGIC} {FORMAT_VERSION}\nmode {mode}\ndigest {}\n", cfg.digest());
    header.push_str(&format!("config {}\n{cfg_text}", cfg_text.lines().count()));
    if !cfg_text.ends_with('\n') {
        header.push('\n');
    }
    header.push_str(&format!("payload-sha256 {:x}\n", Sha256::digest(&payload)));
    header.push_str(&format!("tensors {}\n{records}end\n", tensors.len()));
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    bytes
}

pub fn save(m: &DRNet, path: &Path) -> Result<()> {
    fs::write(path, encode("train", m.config(), &named(&m.params)))?;
    Ok(())
}

pub fn save_fused(m: &FusedDRNet, path: &Path) -> Result<()> {
    let mode = format!("fused:{}", m.task());
    fs::write(path, encode(&mode, m.config(), &m.named_tensors()))?;
    Ok(())
}

struct Decoded {
    mode: String,
    cfg: DRNetConfig,
    tensors: HashMap<String, Tensor>,
}

/// Splits off one `\n`-terminated header line.
fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let Some(end) = rest.iter().position(|&b| b == b'\n') else {
        return fmt_err("truncated manifest");
    };
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).or_else(|_| fmt_err("manifest is not UTF-8"))
}

fn keyed<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    match line.split_once(' ') {
        Some((k, v)) if k == key => Ok(v),
        _ => fmt_err(format!("expected `{key}` line, found {line:?}")),
    }
}

fn parse_num(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .or_else(|_| fmt_err(format!("bad {what}: {s:?}")))
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut pos = 0;
    let first = next_line(bytes, &mut pos)?;
    let version = keyed(first, MAGIC).or_else(|_| fmt_err("not a checkpoint file"))?;
    if version != FORMAT_VERSION.to_string() {
        return fmt_err(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        ));
    }
    let mode = keyed(next_line(bytes, &mut pos)?, "mode")?.to_string();
    let digest = keyed(next_line(bytes, &mut pos)?, "digest")?.to_string();
    let n_cfg = parse_num(keyed(next_line(bytes, &mut pos)?, "config")?, "config line count")?;
    let mut cfg_text = String::new();
    for _ in 0..n_cfg {
        cfg_text.push_str(next_line(bytes, &mut pos)?);
        cfg_text.push('\n');
    }
    let cfg = DRNetConfig::from_text(&cfg_text)
        .map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    if cfg.digest() != digest {
        return fmt_err("config digest mismatch");
    }
    let checksum = keyed(next_line(bytes, &mut pos)?, "payload-sha256")?.to_string();
    let n = parse_num(keyed(next_line(bytes, &mut pos)?, "tensors")?, "tensor count")?;

    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let line = next_line(bytes, &mut pos)?;
        let fields: Vec<&str> = line.split(' ').collect();
        let bad = || Error::Format(format!("bad tensor record {line:?}"));
        let rank = parse_num(fields.get(1).ok_or_else(bad)?, "rank")?;
        if fields.len() != rank + 4 {
            return Err(bad());
        }
        let shape = fields[2..2 + rank]
            .iter()
            .map(|s| parse_num(s, "extent"))
            .collect::<Result<Vec<_>>>()?;
        let offset = parse_num(fields[2 + rank], "offset")?;
        let count = parse_num(fields[3 + rank], "count")?;
        if shape.iter().product::<usize>() != count {
            return Err(bad());
        }
        records.push((fields[0].to_string(), shape, offset, count));
    }
    if next_line(bytes, &mut pos)? != "end" {
        return fmt_err("manifest not terminated by `end`");
    }

    let payload = &bytes[pos..];
    let expected: usize = records.iter().map(|r| r.3).sum::<usize>() * 4;
    if payload.len() != expected {
        return fmt_err(format!(
            "payload holds {} bytes, manifest describes {expected}",
            payload.len()
        ));
    }
    if format!("{:x}", Sha256::digest(payload)) != checksum {
        return fmt_err("payload checksum mismatch");
    }
    let mut tensors = HashMap::with_capacity(n);
    for (name, shape, offset, count) in records {
        let Some(raw) = payload.get(offset * 4..(offset + count) * 4) else {
            return fmt_err(format!("{name}: record points outside the payload"));
        };
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return fmt_err(format!("duplicate tensor {name}"));
        }
    }
    Ok(Decoded { mode, cfg, tensors })
}

/// Moves decoded tensors into a skeleton, requiring an exact name and shape
/// match in both directions.
fn fill<T: ParamTree<Tensor>>(skeleton: &mut T, mut tensors: HashMap<String, Tensor>) -> Result<()> {
    let mut problem = None;
    skeleton.visit_mut("", &mut |name, slot| {
        if problem.is_some() {
            return;
        }
        match tensors.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                problem = Some(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                ))
            }
            None => problem = Some(format!("missing tensor {name}")),
        }
    });
    if let Some(p) = problem {
        return fmt_err(p);
    }
    if let Some(extra) = tensors.keys().next() {
        return fmt_err(format!("unexpected tensor {extra}"));
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let Decoded { mode, cfg, tensors } = decode(&fs::read(path)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut skeleton = Network::init(&cfg, &mut rng);
    if mode == "train" {
        fill(&mut skeleton, tensors)?;
        return Ok(Checkpoint::Train(DRNet::from_parts(cfg, skeleton)));
    }
    let Some(task) = mode.strip_prefix("fused:") else {
        return fmt_err(format!("unknown mode {mode:?}"));
    };
    let mut fused = skeleton.map_mlp(|m| {
        let (c, hidden) = (m.bank1.branches[0].d_in(), m.bank1.branches[0].d_out());
        Ok(FusedMlp {
            fc1: Affine::zeros(c, hidden),
            fc2: Affine::zeros(hidden, c),
        })
    })?;
    fill(&mut fused, tensors)?;
    Ok(Checkpoint::Fused(FusedDRNet::from_parts(cfg, task.to_string(), fused)))
}

pub fn load_train(path: &Path) -> Result<DRNet> {
    match load(path)? {
        Checkpoint::Train(m) => Ok(m),
        Checkpoint::Fused(m) => fmt_err(format!(
            "checkpoint holds a model fused for {:?}; fusion is irreversible and cannot be loaded for training",
            m.task()
        )),
    }
}

pub fn load_fused(path: &Path) -> Result<FusedDRNet> {
    match load(path)? {
        Checkpoint::Fused(m) => Ok(m),
        Checkpoint::Train(_) => fmt_err("checkpoint holds a train-mode model; fuse it first"),
    }
}
