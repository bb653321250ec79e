//! Checkpoint files: one line of JSON manifest (configuration plus the name,
//! shape and byte offset of every tensor), then the parameter values as
//! little-endian f32, concatenated in manifest order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use phnet_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use super::config::PhnetConfig;
use super::net::PhNet;
use crate::error::{format_err, io_err, Result};

const FORMAT: &str = "phnet-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: PhnetConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    /// Free-form training metadata (step, validation score, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<T: Element>(path: &Path, net: &PhNet<T>, meta: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(net.count_params() * 4);
    for p in net.params.iter() {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset: payload.len() });
        for v in p.value.data().iter() {
            payload.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: net.cfg.clone(),
        tensors,
        payload_bytes: payload.len(),
        meta,
    };
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let mut header = serde_json::to_vec(&manifest)?;
    header.push(b'\n');
    file.write_all(&header).map_err(io_err(path))?;
    file.write_all(&payload).map_err(io_err(path))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut line = String::new();
    BufReader::new(file).read_line(&mut line).map_err(io_err(path))?;
    parse_manifest(&line)
}

fn parse_manifest(line: &str) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(line.trim_end()).map_err(|e| format_err("manifest", e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(format_err("format", format!("expected {FORMAT:?}, found {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(format_err("version", format!("unsupported version {}", manifest.version)));
    }
    Ok(manifest)
}

/// Rebuilds the network described by the manifest and loads its values,
/// validating every name, shape and offset.
pub fn load_checkpoint(path: &Path) -> Result<(PhNet<f32>, Manifest)> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(io_err(path))?;
    let manifest = parse_manifest(&line)?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io_err(path))?;
    if payload.len() != manifest.payload_bytes {
        return Err(format_err("payload_bytes", format!("manifest says {}, file holds {}", manifest.payload_bytes, payload.len())));
    }
    let mut net = PhNet::<f32>::build(&manifest.config, 0)?;
    if net.params.len() != manifest.tensors.len() {
        return Err(format_err(
            "tensors",
            format!("configuration has {} tensors, manifest lists {}", net.params.len(), manifest.tensors.len()),
        ));
    }
    let ids: Vec<_> = net.params.ids().collect();
    for (id, entry) in ids.into_iter().zip(&manifest.tensors) {
        let expected = net.params.get(id);
        if expected.name != entry.name || expected.value.shape() != entry.shape.as_slice() {
            return Err(format_err(
                "tensors",
                format!("{} {:?} does not match {} {:?}", entry.name, entry.shape, expected.name, expected.value.shape()),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        if end > payload.len() {
            return Err(format_err("tensors", format!("{} extends past the payload", entry.name)));
        }
        let values = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        net.params.set_value(id, Tensor::from_vec(&entry.shape, values)?)?;
    }
    Ok((net, manifest))
}
