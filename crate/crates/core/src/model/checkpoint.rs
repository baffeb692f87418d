//! Checkpoint file: a magic line, a one-line JSON header, then the raw
//! little-endian parameter payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use layoutlab_autodiff::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, Normalizer, Precision};
use crate::data::ItemVocab;
use crate::error::{LabError, Result};
use crate::layout::LayoutSpec;

const MAGIC: &str = "LAYOUTLAB-CHECKPOINT";
const VERSION: u32 = 1;

/// Run metadata stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: Checkpoint,
    config: ModelConfig,
    layout: String,
    normalizer: Normalizer,
    vocab: Vec<u64>,
    precision: Precision,
    params: Vec<ParamEntry>,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, meta: &Checkpoint) -> Result<()> {
    let mut payload = Vec::with_capacity(model.params.numel() * T::BYTES);
    for (_, t) in model.params.iter() {
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        version: VERSION,
        meta: meta.clone(),
        config: model.config.clone(),
        layout: model.spec.to_text(),
        normalizer: model.normalizer.clone(),
        vocab: model.vocab.raw_ids().to_vec(),
        precision: if T::BYTES == 8 { Precision::F64 } else { Precision::F32 },
        params: model
            .params
            .iter()
            .map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape().to_vec() })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let mut out = Vec::with_capacity(payload.len() + 4096);
    writeln!(out, "{MAGIC} {VERSION}").expect("write to vec");
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(|e| LabError::io(path, e))
}

fn read_params<S: Scalar>(entries: &[ParamEntry], payload: &[u8]) -> Result<ParamStore<S>> {
    let mut store = ParamStore::new();
    let mut off = 0;
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = off + n * S::BYTES;
        let bytes = payload
            .get(off..end)
            .ok_or_else(|| LabError::Checkpoint(format!("payload truncated inside `{}`", e.name)))?;
        let data = bytes.chunks_exact(S::BYTES).map(S::read_le).collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        off = end;
    }
    if off != payload.len() {
        return Err(LabError::Checkpoint(format!("{} trailing payload bytes", payload.len() - off)));
    }
    Ok(store)
}

/// Loads a checkpoint into precision `T`, converting if it was saved in the
/// other one.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, Checkpoint)> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = String::new();
    reader.read_line(&mut magic).map_err(|e| LabError::io(path, e))?;
    if magic.trim_end() != format!("{MAGIC} {VERSION}") {
        return Err(LabError::Checkpoint(format!("{} is not a version {VERSION} checkpoint", path.display())));
    }
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| LabError::io(path, e))?;
    let header: Header = serde_json::from_str(&line)?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| LabError::io(path, e))?;
    if hex(&Sha256::digest(&payload)) != header.payload_sha256 {
        return Err(LabError::Checkpoint("payload hash does not match header".into()));
    }
    let spec = LayoutSpec::parse(&header.layout)?;
    let vocab = ItemVocab::new(header.vocab);
    let mut config = header.config;
    let params: ParamStore<T> = match header.precision {
        Precision::F32 => read_params::<f32>(&header.params, &payload)?.cast(),
        Precision::F64 => read_params::<f64>(&header.params, &payload)?.cast(),
    };
    config.precision = if T::BYTES == 8 { Precision::F64 } else { Precision::F32 };
    let model = Model::from_params(config, spec, vocab, header.normalizer, params)?;
    Ok((model, header.meta))
}
