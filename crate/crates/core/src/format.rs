//! TARMASK v1 mask files.
//!
//! ```text
//! {"version": 1,
//!  "provenance": {"criterion": .., "sparsity": .., "seed": .., "revival": null | {..}},
//!  "layers": [{"name": .., "kind": "matrix"|"vector", "shape": [n_out, n_in]|[n],
//!              "kept": K, "bits": base64(packed)}]}
//! ```
//!
//! Matrix bits are flattened row-major, packed eight per byte with the least
//! significant bit first, and the last byte is zero-padded. `bits` uses the
//! standard base64 alphabet with padding.
//!
//! Errors in the JSON layer report a byte offset into the document. Errors
//! in a layer payload report the offset into that layer's decoded payload.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::{DecodeError, Engine};
use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LayerMask, NetworkMask, Provenance};
use crate::network::{json_format_error, LayerSpec};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    version: u64,
    provenance: Provenance,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    #[serde(flatten)]
    spec: LayerSpec,
    kept: usize,
    bits: String,
}

pub fn write_mask(mask: &NetworkMask) -> Vec<u8> {
    let file = MaskFile {
        version: FORMAT_VERSION,
        provenance: mask.provenance.clone(),
        layers: mask
            .masks
            .iter()
            .map(|m| LayerEntry {
                spec: m.spec.clone(),
                kept: m.kept(),
                bits: STANDARD.encode(m.packed()),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("mask serializes");
    out.push(b'\n');
    out
}

pub fn read_mask(bytes: &[u8]) -> Result<NetworkMask> {
    let probe: VersionProbe =
        serde_json::from_slice(bytes).map_err(|e| json_format_error(bytes, &e))?;
    match probe.version {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Version(v)),
        None => {
            return Err(Error::Format {
                offset: 0,
                reason: "missing `version`".into(),
            })
        }
    }
    let file: MaskFile =
        serde_json::from_slice(bytes).map_err(|e| json_format_error(bytes, &e))?;
    let masks = file
        .layers
        .into_iter()
        .map(decode_layer)
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkMask {
        masks,
        provenance: file.provenance,
    })
}

fn decode_layer(entry: LayerEntry) -> Result<LayerMask> {
    let name = entry.spec.name.clone();
    let fail = |offset: usize, reason: String| Error::Format {
        offset,
        reason: format!("layer `{name}` payload: {reason}"),
    };
    if entry.spec.is_empty() {
        return Err(fail(0, "zero-sized layer".into()));
    }
    let payload = STANDARD.decode(entry.bits.as_bytes()).map_err(|e| match e {
        DecodeError::InvalidByte(at, byte) => {
            fail(at / 4 * 3, format!("invalid base64 byte 0x{byte:02X}"))
        }
        DecodeError::InvalidLastSymbol(at, _) => fail(at / 4 * 3, "invalid base64 tail".into()),
        other => fail(entry.bits.len() / 4 * 3, other.to_string()),
    })?;

    let d = entry.spec.len();
    let expected = d.div_ceil(8);
    if payload.len() < expected {
        return Err(fail(
            payload.len(),
            format!("truncated: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(fail(
            expected,
            format!("trailing data: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let mut bits: BitVec<u8, Lsb0> = BitVec::from_vec(payload);
    if bits[d..].any() {
        return Err(fail(expected - 1, "non-zero padding bits".into()));
    }
    bits.truncate(d);
    let mask = LayerMask::from_bits(entry.spec, bits)?;
    if mask.kept() != entry.kept {
        return Err(fail(
            0,
            format!("declares {} kept bits, payload has {}", entry.kept, mask.kept()),
        ));
    }
    Ok(mask)
}

pub fn save_mask(mask: &NetworkMask, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_mask(mask))?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<NetworkMask> {
    read_mask(&std::fs::read(path)?)
}
