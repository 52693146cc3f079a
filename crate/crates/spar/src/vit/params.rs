//! Parameter initialization and the binary checkpoint format.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BlockParams, ModelParams, Param, ViTConfig};
use crate::{Result, SparError};

const MAGIC: &[u8; 8] = b"SPARVIT1";
const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Zero-valued parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ViTConfig) -> Self {
        let d = cfg.channels;
        let hidden = cfg.hidden_dim();
        let k = cfg.grid_side();
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams {
                ln1_gamma: Param::zeros(&[d]),
                ln1_beta: Param::zeros(&[d]),
                qkv_weight: Param::zeros(&[3 * d, d]),
                qkv_bias: Param::zeros(&[3 * d]),
                attn_out_weight: Param::zeros(&[d, d]),
                attn_out_bias: Param::zeros(&[d]),
                ln2_gamma: Param::zeros(&[d]),
                ln2_beta: Param::zeros(&[d]),
                fc1_weight: Param::zeros(&[hidden, d]),
                fc1_bias: Param::zeros(&[hidden]),
                fc2_weight: Param::zeros(&[d, hidden]),
                fc2_bias: Param::zeros(&[d]),
            })
            .collect();
        ModelParams {
            patch_weight: Param::zeros(&[d, cfg.patch_dim()]),
            patch_bias: Param::zeros(&[d]),
            pos_encodings: Param::zeros(&[k, k, d]),
            blocks,
            trainable: BTreeSet::new(),
        }
    }
}

/// Deterministic initialization: weights and the positional grid drawn
/// from Gaussian(0, 0.02) in canonical tensor order, layernorm gains 1,
/// shifts and biases 0. The same seed reproduces identical bytes.
pub fn init_params(cfg: &ViTConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid stddev");
    let mut params = ModelParams::zeros(cfg);
    for (name, tensor) in params.tensors_mut() {
        if name.ends_with(".gamma") {
            tensor.data.fill(1.0);
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            // already zero
        } else {
            for v in tensor.data.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(params)
}

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| SparError::io(format!("writing {}", path.display()), e))
}

fn write_f64(w: &mut impl Write, v: f64, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| SparError::io(format!("writing {}", path.display()), e))
}

/// Writes config and tensors in canonical order to the binary
/// checkpoint format (magic `SPARVIT1`, little-endian payloads).
pub fn save_checkpoint(path: &Path, cfg: &ViTConfig, params: &ModelParams) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| SparError::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)
        .map_err(|e| SparError::io(format!("writing {}", path.display()), e))?;
    write_u32(&mut w, cfg.patch_size as u32, path)?;
    write_u32(&mut w, cfg.native_side as u32, path)?;
    write_u32(&mut w, cfg.channels as u32, path)?;
    write_u32(&mut w, cfg.num_blocks as u32, path)?;
    write_u32(&mut w, cfg.num_heads as u32, path)?;
    write_f64(&mut w, cfg.mlp_ratio, path)?;
    write_u32(&mut w, cfg.last_attention_identity as u32, path)?;
    for (name, tensor) in params.tensors() {
        write_u32(&mut w, name.len() as u32, path)?;
        w.write_all(name.as_bytes())
            .map_err(|e| SparError::io(format!("writing {}", path.display()), e))?;
        write_u32(&mut w, tensor.dims.len() as u32, path)?;
        for &dim in &tensor.dims {
            write_u32(&mut w, dim as u32, path)?;
        }
        for &v in &tensor.data {
            write_f64(&mut w, v, path)?;
        }
    }
    w.flush()
        .map_err(|e| SparError::io(format!("writing {}", path.display()), e))
}

struct CheckpointReader<'p> {
    r: BufReader<File>,
    path: &'p Path,
}

impl<'p> CheckpointReader<'p> {
    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.r
            .read_exact(buf)
            .map_err(|e| SparError::io(format!("reading {}", self.path.display()), e))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`]; the trainable mask
/// is not persisted and comes back empty.
pub fn load_checkpoint(path: &Path) -> Result<(ViTConfig, ModelParams)> {
    let file =
        File::open(path).map_err(|e| SparError::io(format!("opening {}", path.display()), e))?;
    let mut r = CheckpointReader {
        r: BufReader::new(file),
        path,
    };
    let mut magic = [0u8; 8];
    r.bytes(&mut magic)?;
    if &magic != MAGIC {
        return Err(SparError::Format {
            format: "checkpoint",
            detail: format!("bad magic {:?} in {}", magic, path.display()),
        });
    }
    let cfg = ViTConfig {
        patch_size: r.u32()? as usize,
        native_side: r.u32()? as usize,
        channels: r.u32()? as usize,
        num_blocks: r.u32()? as usize,
        num_heads: r.u32()? as usize,
        mlp_ratio: r.f64()?,
        last_attention_identity: r.u32()? != 0,
    };
    cfg.validate()?;
    let mut params = ModelParams::zeros(&cfg);
    for (expected_name, tensor) in params.tensors_mut() {
        let name_len = r.u32()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.bytes(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| SparError::Format {
            format: "checkpoint",
            detail: "tensor name is not valid UTF-8".into(),
        })?;
        if name != expected_name {
            return Err(SparError::Format {
                format: "checkpoint",
                detail: format!("expected tensor `{expected_name}`, found `{name}`"),
            });
        }
        let rank = r.u32()? as usize;
        if rank != tensor.dims.len() {
            return Err(SparError::Format {
                format: "checkpoint",
                detail: format!("tensor `{name}` has rank {rank}, expected {}", tensor.dims.len()),
            });
        }
        for &expected_dim in tensor.dims.iter() {
            let dim = r.u32()? as usize;
            if dim != expected_dim {
                return Err(SparError::Format {
                    format: "checkpoint",
                    detail: format!("tensor `{name}` dim {dim} does not match {expected_dim}"),
                });
            }
        }
        for v in tensor.data.iter_mut() {
            *v = r.f64()?;
        }
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            patch_size: 16,
            native_side: 32,
            channels: 8,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 4.0,
            last_attention_identity: false,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_layernorm_gains_are_one() {
        let params = init_params(&tiny_cfg(), 7).unwrap();
        for (name, t) in params.tensors() {
            if name.ends_with(".gamma") {
                assert!(t.data.iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".beta") || name.ends_with(".bias") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg, 1).unwrap();
        let b = init_params(&cfg, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 9).unwrap();
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);

        save_checkpoint(&path, &cfg2, &params2).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        save_checkpoint(&path, &cfg, &params).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTAVITXtrailing").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(SparError::Format { .. })
        ));
    }
}
