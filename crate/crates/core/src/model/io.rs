// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary model files: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every parameter as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ModelConfig, PlantedSpec, VlmModel};

pub const MODEL_MAGIC: &[u8; 8] = b"NBMODEL1";
pub const MODEL_SCHEMA: &str = "notice-bench/model/v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: String,
    config: ModelConfig,
    planted: Option<PlantedSpec>,
    n_params: usize,
}

pub fn write_model(model: &VlmModel, mut w: impl Write) -> Result<()> {
    let params = model.params();
    let header = Header {
        schema_version: MODEL_SCHEMA.to_string(),
        config: model.config.clone(),
        planted: model.planted.clone(),
        n_params: params.iter().map(|b| b.len()).sum(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + header.n_params * 8);
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in params.into_iter().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
        .map_err(|e| Error::io("<model stream>", e))
}

pub fn read_model(mut r: impl Read) -> Result<VlmModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<model stream>", e))?;
    let bad = |m: &str| Error::Data(format!("model file: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..len])?;
    if header.schema_version != MODEL_SCHEMA {
        return Err(bad(&format!(
            "unsupported schema `{}`",
            header.schema_version
        )));
    }
    let mut model = VlmModel::zeros(&header.config)?;
    model.planted = header.planted;
    let blob = &body[len..];
    let expected: usize = model.params().iter().map(|b| b.len()).sum();
    if header.n_params != expected || blob.len() != expected * 8 {
        return Err(bad(&format!(
            "expected {expected} parameters, header says {}, blob holds {} bytes",
            header.n_params,
            blob.len()
        )));
    }
    let mut chunks = blob.chunks_exact(8);
    for block in model.params_mut() {
        for v in block.iter_mut() {
            *v = f64::from_le_bytes(
                chunks
                    .next()
                    .expect("length checked")
                    .try_into()
                    .expect("8 bytes"),
            );
        }
    }
    if !model.is_finite() {
        return Err(bad("non-finite weight"));
    }
    Ok(model)
}

pub fn save_model(model: &VlmModel, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_model(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<VlmModel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_planted_model;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_is_byte_exact() {
        let planted =
            build_planted_model(&ModelConfig::default(), &PlantedSpec::default()).unwrap();
        let random =
            VlmModel::random(&ModelConfig::early_fusion(), &mut Rng::new(2), 0.02).unwrap();
        for m in [planted, random] {
            let mut a = Vec::new();
            write_model(&m, &mut a).unwrap();
            let back = read_model(&a[..]).unwrap();
            assert_eq!(back, m);
            let mut b = Vec::new();
            write_model(&back, &mut b).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let m = VlmModel::zeros(&ModelConfig::default()).unwrap();
        let mut a = Vec::new();
        write_model(&m, &mut a).unwrap();
        assert!(read_model(&a[..a.len() - 8]).is_err());
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(read_model(&bad[..]).is_err());
    }
}
