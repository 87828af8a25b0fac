//! Single-file model checkpoints: a short text header followed by the flat
//! hypernetwork weights as little-endian float32.
//!
//! ```text
//! elastireg-hypernet 1
//! hyper_layers=2x32,32x1218
//! hyper_activations=tanh,identity
//! target_layers=2x32,32x32,32x2
//! target_activations=tanh,tanh,identity
//! max_displacement=5
//! seed=42
//! dtype=float32
//! endian=little
//! weights=40290
//! payload
//! <weights × 4 bytes>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::mlp::{Activation, MlpModel};
use super::HyperNet;
use crate::error::{Error, Result};

pub const MAGIC: &str = "elastireg-hypernet 1";

fn shapes_tag(shapes: &[(usize, usize)]) -> String {
    shapes
        .iter()
        .map(|(i, o)| format!("{i}x{o}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn acts_tag(acts: &[Activation]) -> String {
    acts.iter().map(|a| a.tag()).collect::<Vec<_>>().join(",")
}

/// Serialize `hyper` to bytes.
pub fn to_bytes(hyper: &HyperNet) -> Vec<u8> {
    let net = hyper.net();
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("hyper_layers={}\n", shapes_tag(net.shapes())));
    out.push_str(&format!(
        "hyper_activations={}\n",
        acts_tag(net.activations())
    ));
    out.push_str(&format!(
        "target_layers={}\n",
        shapes_tag(hyper.target_shapes())
    ));
    out.push_str(&format!(
        "target_activations={}\n",
        acts_tag(hyper.target_activations())
    ));
    out.push_str(&format!("max_displacement={}\n", hyper.max_displacement()));
    out.push_str(&format!("seed={}\n", hyper.seed()));
    out.push_str("dtype=float32\nendian=little\n");
    out.push_str(&format!("weights={}\n", net.weights().len()));
    out.push_str("payload\n");
    let mut bytes = out.into_bytes();
    for &w in net.weights() {
        bytes.extend_from_slice(&(w as f32).to_le_bytes());
    }
    bytes
}

pub fn save(hyper: &HyperNet, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(hyper))
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<HyperNet> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(BufReader::new(f), path)
}

/// Parse a checkpoint; `path` only labels errors.
pub fn read_from<R: BufRead>(mut reader: R, path: &Path) -> Result<HyperNet> {
    let bad = |msg: String| Error::format(path, msg);
    let mut line = String::new();
    let mut next_line = |reader: &mut R| -> Result<Option<String>> {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path, e))?;
        Ok((n > 0).then(|| line.trim_end_matches(['\n', '\r']).to_string()))
    };

    match next_line(&mut reader)? {
        Some(m) if m == MAGIC => {}
        other => return Err(bad(format!("expected `{MAGIC}`, found {other:?}"))),
    }
    let mut header = BTreeMap::new();
    loop {
        let l = next_line(&mut reader)?
            .ok_or_else(|| bad("header ended before the `payload` line".into()))?;
        if l == "payload" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header line `{l}`")))?;
        header.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        header
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(path, format!("missing header key `{k}`")))
    };
    if get("dtype")? != "float32" || get("endian")? != "little" {
        return Err(bad(
            "only little-endian float32 payloads are supported".into()
        ));
    }
    let hyper_shapes = parse_shapes(get("hyper_layers")?).map_err(&bad)?;
    let hyper_acts = parse_acts(get("hyper_activations")?).map_err(&bad)?;
    let target_shapes = parse_shapes(get("target_layers")?).map_err(&bad)?;
    let target_acts = parse_acts(get("target_activations")?).map_err(&bad)?;
    let max_disp: f64 = get("max_displacement")?
        .parse()
        .map_err(|_| bad("max_displacement is not a number".into()))?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| bad("seed is not an unsigned integer".into()))?;
    let count: usize = get("weights")?
        .parse()
        .map_err(|_| bad("weights is not a count".into()))?;
    let expected = MlpModel::weight_count(&hyper_shapes);
    if count != expected {
        return Err(bad(format!(
            "header declares {count} weights, hyper_layers need {expected}"
        )));
    }

    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() != 4 * count {
        return Err(bad(format!(
            "payload holds {} bytes, expected {} ({count} float32 values)",
            payload.len(),
            4 * count
        )));
    }
    let weights = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let net = MlpModel::new(hyper_shapes, hyper_acts, weights)?;
    HyperNet::from_parts(net, target_shapes, target_acts, max_disp, seed)
}

fn parse_shapes(s: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    s.split(',')
        .map(|part| {
            let (i, o) = part
                .split_once('x')
                .ok_or_else(|| format!("bad layer shape `{part}`"))?;
            let i = i
                .trim()
                .parse()
                .map_err(|_| format!("bad layer shape `{part}`"))?;
            let o = o
                .trim()
                .parse()
                .map_err(|_| format!("bad layer shape `{part}`"))?;
            Ok((i, o))
        })
        .collect()
}

fn parse_acts(s: &str) -> std::result::Result<Vec<Activation>, String> {
    s.split(',')
        .map(|t| Activation::from_tag(t.trim()).ok_or_else(|| format!("unknown activation `{t}`")))
        .collect()
}
