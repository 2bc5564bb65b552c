//! Binary model checkpoints.
//!
//! A text header (magic and version, phase, architecture, tensor manifest,
//! `end`) followed by every parameter as little-endian `f64` in manifest
//! order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use difftt_core::model::{MacroPooling, ModelConfig, ModelState, Phase};

use crate::error::{Error, Result};

pub const MAGIC: &str = "difftt-checkpoint";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(state: &ModelState) -> Vec<u8> {
    let c = &state.config;
    let mut head = String::new();
    writeln!(head, "{MAGIC} {VERSION}").unwrap();
    writeln!(head, "phase = {}", state.phase.name()).unwrap();
    writeln!(head, "num_users = {}", c.num_users).unwrap();
    writeln!(head, "dim = {}", c.dim).unwrap();
    writeln!(head, "gcn_layers = {}", c.gcn_layers).unwrap();
    writeln!(head, "hgnn_layers = {}", c.hgnn_layers).unwrap();
    writeln!(head, "separate_init = {}", c.separate_init).unwrap();
    writeln!(head, "init_std = {:?}", c.init_std).unwrap();
    let pooling = match c.macro_pooling {
        MacroPooling::Last => "last",
        MacroPooling::Mean => "mean",
    };
    writeln!(head, "macro_pooling = {pooling}").unwrap();
    writeln!(head, "mask_seen = {}", c.mask_seen).unwrap();
    let mut offset = 0usize;
    let mut data = Vec::new();
    state.visit_named(&mut |name, t| {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(head, "tensor {name} {} {offset}", shape.join("x")).unwrap();
        offset += t.data().len();
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    });
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&data);
    out
}

fn field<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    let line = lines.next().ok_or_else(|| bad(format!("header ends before `{key}`")))?;
    match line.split_once('=') {
        Some((k, v)) if k.trim() == key => Ok(v.trim()),
        _ => Err(bad(format!("expected `{key} = ...`, found `{line}`"))),
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(format!("bad value `{v}` for `{key}`")))
}

pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| {
            if bytes.starts_with(MAGIC.as_bytes()) {
                bad("truncated header")
            } else {
                bad("not a checkpoint file")
            }
        })?;
    let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let body = &bytes[end + 5..];
    let mut lines = head.lines();
    let first = lines.next().unwrap_or_default();
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad("not a checkpoint file"))?;
    if version != VERSION.to_string() {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            expected: VERSION,
        });
    }
    let phase = Phase::parse(field(&mut lines, "phase")?)?;
    let config = ModelConfig {
        num_users: parse("num_users", field(&mut lines, "num_users")?)?,
        dim: parse("dim", field(&mut lines, "dim")?)?,
        gcn_layers: parse("gcn_layers", field(&mut lines, "gcn_layers")?)?,
        hgnn_layers: parse("hgnn_layers", field(&mut lines, "hgnn_layers")?)?,
        separate_init: parse("separate_init", field(&mut lines, "separate_init")?)?,
        init_std: parse("init_std", field(&mut lines, "init_std")?)?,
        macro_pooling: match field(&mut lines, "macro_pooling")? {
            "last" => MacroPooling::Last,
            "mean" => MacroPooling::Mean,
            v => return Err(bad(format!("bad value `{v}` for `macro_pooling`"))),
        },
        mask_seen: parse("mask_seen", field(&mut lines, "mask_seen")?)?,
    };
    let mut state = ModelState::new(config, 0)?;
    state.enter_phase(phase);
    let expected = state.manifest();
    let mut total = 0usize;
    let mut entries = Vec::with_capacity(expected.len());
    for line in lines {
        let parts: Vec<&str> = line.split(' ').collect();
        let [tag, name, shape, offset] = parts[..] else {
            return Err(bad(format!("bad manifest line `{line}`")));
        };
        if tag != "tensor" {
            return Err(bad(format!("bad manifest line `{line}`")));
        }
        let shape: Vec<usize> = shape
            .split('x')
            .filter(|s| !s.is_empty())
            .map(|s| parse("shape", s))
            .collect::<Result<_>>()?;
        let offset: usize = parse("offset", offset)?;
        entries.push((name.to_string(), shape, offset));
    }
    if entries.len() != expected.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, architecture has {}",
            entries.len(),
            expected.len()
        )));
    }
    for ((name, shape, offset), (want_name, want_shape)) in entries.iter().zip(&expected) {
        if name != want_name || shape != want_shape {
            return Err(bad(format!(
                "tensor `{name}` {shape:?} does not match architecture `{want_name}` {want_shape:?}"
            )));
        }
        if *offset != total {
            return Err(bad(format!("tensor `{name}` has offset {offset}, expected {total}")));
        }
        total += shape.iter().product::<usize>();
    }
    let want = total * 8;
    if body.len() < want {
        return Err(bad(format!("truncated: {} data bytes, expected {want}", body.len())));
    }
    if body.len() > want {
        return Err(bad(format!("{} trailing bytes after tensor data", body.len() - want)));
    }
    let mut chunks = body.chunks_exact(8);
    for t in state.all_tensors_mut() {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
        }
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    crate::io::write_bytes(path, &encode(state))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
