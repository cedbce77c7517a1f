//! Checkpoint file: little-endian `u64` header length, a JSON header with the
//! model config (and optionally the vocabulary), then the flat parameter
//! vector as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ModelConfig, ModelParams};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub params: ModelParams<S>,
    pub vocab: Option<Vocab>,
}

pub fn write_checkpoint<S: Scalar, W: Write>(params: &ModelParams<S>, vocab: Option<&Vocab>, mut out: W) -> Result<()> {
    let header = serde_json::to_vec(&Header { config: params.config.clone(), vocab: vocab.map(|v| v.tokens().to_vec()) })?;
    let io = |e| Error::io("<checkpoint>", e);
    out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    for v in &params.flat {
        out.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut input: R) -> Result<Checkpoint<S>> {
    let bad = |m: &str| Error::Validation(format!("malformed checkpoint: {m}"));
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| bad("missing header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(bad("header too large"));
    }
    let mut header = vec![0u8; len];
    input.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut params = ModelParams::<S>::zeros(&header.config)?;
    let mut buf = [0u8; 4];
    for v in params.flat.iter_mut() {
        input.read_exact(&mut buf).map_err(|_| bad("truncated parameter block"))?;
        *v = S::of(f32::from_le_bytes(buf) as f64);
    }
    if input.read(&mut buf).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
        return Err(bad("trailing bytes"));
    }
    let vocab = header.vocab.map(Vocab::from_tokens).transpose()?;
    Ok(Checkpoint { params, vocab })
}

pub fn save_checkpoint<S: Scalar>(path: &Path, params: &ModelParams<S>, vocab: Option<&Vocab>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, vocab, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn roundtrip_through_f32() {
        let cfg = ModelConfig { vocab_size: 12, num_labels: 2, d_model: 4, num_layers: 1, num_heads: 2, d_ffn: 4, max_seq_len: 6 };
        let p = init_params::<f32>(&cfg, 9).unwrap();
        let vocab = Vocab::from_tokens(
            ["[MASK]", "[PAD]", "[UNK]", "[CLS]", "a", "b"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, Some(&vocab), &mut buf).unwrap();
        let header_len = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
        assert_eq!(buf.len(), 8 + header_len + 4 * p.len());
        let back: Checkpoint<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.vocab.unwrap(), vocab);
        assert!(read_checkpoint::<f32, _>(&buf[..buf.len() - 1]).is_err());
    }
}
