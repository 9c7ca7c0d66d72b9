//! Flat binary weight snapshots.
//!
//! Layout: `b"DITW"`, a little-endian `u32` header length, the config as
//! JSON, then every tensor's values as little-endian `f32` in declaration
//! order (per block, then head and head bias).

use std::io::{Read, Write};
use std::path::Path;

use super::{BlockWeights, DiT, DiTConfig, LayerNormWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DITW";

pub fn write_snapshot(model: &DiT, out: &mut impl Write) -> Result<()> {
    let header = serde_json::to_vec(model.config())?;
    let io = |e| Error::io("<snapshot>", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(header.len() as u32).to_le_bytes())
        .map_err(io)?;
    out.write_all(&header).map_err(io)?;
    for t in model.tensors() {
        out.write_all(&t.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn read_snapshot(input: &mut impl Read) -> Result<DiT> {
    let io = |e| Error::io("<snapshot>", e);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Input("not a weight snapshot".into()));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut header).map_err(io)?;
    let config: DiTConfig = serde_json::from_slice(&header)?;
    config.validate()?;

    let mut next = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        input.read_exact(&mut buf).map_err(io)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape.to_vec(), data)
    };
    let d = config.model_dim;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for _ in 0..config.num_blocks {
        let norm_self = LayerNormWeights {
            gamma: next(&[d])?,
            beta: next(&[d])?,
        };
        let self_qkv = next(&[d, 3 * d])?;
        let self_out = next(&[d, d])?;
        let norm_cross = LayerNormWeights {
            gamma: next(&[d])?,
            beta: next(&[d])?,
        };
        let cross_q = next(&[d, d])?;
        let cross_kv = next(&[config.cond_dim, 2 * d])?;
        let cross_out = next(&[d, d])?;
        let norm_ffn = LayerNormWeights {
            gamma: next(&[d])?,
            beta: next(&[d])?,
        };
        let ffn_up = next(&[d, 4 * d])?;
        let ffn_down = next(&[4 * d, d])?;
        let modulation = next(&[6, d])?;
        let modulation_time = next(&[6, d])?;
        blocks.push(BlockWeights {
            norm_self,
            self_qkv,
            self_out,
            norm_cross,
            cross_q,
            cross_kv,
            cross_out,
            norm_ffn,
            ffn_up,
            ffn_down,
            modulation,
            modulation_time,
        });
    }
    let head = next(&[d, d])?;
    let head_bias = next(&[d])?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::Input(format!(
            "{} trailing bytes after snapshot",
            rest.len()
        )));
    }
    DiT::from_parts(config, blocks, head, head_bias)
}

pub fn save_snapshot(model: &DiT, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_snapshot(model, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<DiT> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_is_exact() {
        let cfg = DiTConfig {
            num_blocks: 2,
            model_dim: 8,
            num_heads: 2,
            tokens_per_frame: 2,
            frames: 2,
            cond_dim: 3,
            cond_tokens: 1,
            timesteps: 5,
            seed: 9,
        };
        let m = init_model(&cfg).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&m, &mut buf).unwrap();
        let back = read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.weight_checksum(), m.weight_checksum());
    }

    #[test]
    fn truncated_snapshot_fails() {
        let m = init_model(&DiTConfig {
            num_blocks: 1,
            model_dim: 4,
            num_heads: 1,
            tokens_per_frame: 1,
            frames: 1,
            cond_dim: 2,
            cond_tokens: 1,
            timesteps: 2,
            seed: 1,
        })
        .unwrap();
        let mut buf = Vec::new();
        write_snapshot(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_snapshot(&mut buf.as_slice()).is_err());
        assert!(read_snapshot(&mut &b"XXXX"[..]).is_err());
    }
}
