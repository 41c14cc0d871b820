//! Model files: a JSON envelope with a format tag, a version, a SHA-256
//! checksum of the serialized network, and the network itself. Floats are
//! written in shortest round-trip form, so loading reproduces parameters
//! bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use super::network::Network;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "racnet-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    format: &'a str,
    version: u32,
    checksum: String,
    network: &'a RawValue,
}

#[derive(Deserialize)]
struct EnvelopeIn<'a> {
    format: String,
    version: u32,
    checksum: String,
    #[serde(borrow)]
    network: &'a RawValue,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn model_to_bytes(net: &Network) -> Result<Vec<u8>> {
    if net.layers().is_empty() {
        return Err(Error::InvalidNetwork("refusing to save a network without layers".into()));
    }
    let body = serde_json::to_string(net)?;
    let raw = RawValue::from_string(body)?;
    let env = EnvelopeOut {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        checksum: sha256_hex(raw.get().as_bytes()),
        network: &raw,
    };
    Ok(serde_json::to_vec(&env)?)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network> {
    let env: EnvelopeIn =
        serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(format!("model envelope: {e}")))?;
    if env.format != MODEL_FORMAT {
        return Err(Error::Corrupt(format!("not a model file (format tag {:?})", env.format)));
    }
    if env.version != MODEL_VERSION {
        return Err(Error::Version {
            found: env.version,
            expected: MODEL_VERSION,
        });
    }
    if sha256_hex(env.network.get().as_bytes()) != env.checksum {
        return Err(Error::Corrupt("model checksum mismatch".into()));
    }
    serde_json::from_str(env.network.get()).map_err(|e| Error::Corrupt(format!("model body: {e}")))
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(net)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network> {
    model_from_bytes(&fs::read(path)?)
}

/// Content hash used for provenance of downstream artifacts.
pub fn model_hash(net: &Network) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(net)?.as_bytes()))
}
