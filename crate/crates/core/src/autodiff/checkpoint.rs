//! Parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of JSON
//! header, then the raw little-endian `f64` payload. Header offsets are byte
//! offsets into the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamSet, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

const FORMAT: &str = "infocascade-f64-le/1";

pub fn write_checkpoint(params: &ParamSet, writer: &mut impl Write) -> Result<(), AutodiffError> {
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let length = t.numel() * 8;
            let entry = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length,
            };
            offset += length;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format: FORMAT.to_string(),
        tensors,
    })
    .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    writer.write_all(&(header.len() as u64).to_le_bytes())?;
    writer.write_all(&header)?;
    for t in params.tensors() {
        for v in t.data() {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(reader: &mut impl Read) -> Result<ParamSet, AutodiffError> {
    let mut len = [0u8; 8];
    reader.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(AutodiffError::Checkpoint(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len];
    reader.read_exact(&mut header)?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    if header.format != FORMAT {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported checkpoint format {:?}",
            header.format
        )));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let mut params = ParamSet::new();
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.length != numel * 8 || e.offset + e.length > payload.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "tensor {:?} exceeds payload or disagrees with its shape",
                e.name
            )));
        }
        let data = payload[e.offset..e.offset + e.length]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<(), AutodiffError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, AutodiffError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
