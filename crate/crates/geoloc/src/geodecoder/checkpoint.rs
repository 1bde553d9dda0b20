//! Binary model checkpoints.
//!
//! A checkpoint is self-describing: it embeds the model config (JSON), the
//! SHA-256 of the partition file the classifier heads were built against,
//! the resolved run-config hash, optional training state (epoch, step,
//! momentum buffers), and every parameter by name. Loading reconstructs the
//! model from the embedded config and overwrites its weights, so a
//! checkpoint from one partition can never silently drive another.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use super::{GeoDecoder, ModelConfig};

const MAGIC: &[u8; 12] = b"geoloc-ckpt1";

/// Optimizer and progress state carried across resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs fully completed.
    pub epoch: usize,
    /// Optimizer steps taken overall.
    pub step: usize,
    /// Momentum buffers, sorted by parameter name.
    pub buffers: Vec<(String, Vec<f64>)>,
}

/// Everything in a checkpoint besides the weights themselves.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub partition_hash: String,
    pub config_hash: String,
    pub train_state: Option<TrainState>,
}

fn wr_u64(w: &mut impl Write, v: u64, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn wr_bytes(w: &mut impl Write, b: &[u8], path: &Path) -> Result<()> {
    wr_u64(w, b.len() as u64, path)?;
    w.write_all(b).map_err(|e| Error::io(path, e))
}

fn wr_f64s(w: &mut impl Write, v: &[f64], path: &Path) -> Result<()> {
    wr_u64(w, v.len() as u64, path)?;
    for x in v {
        w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn rd_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

fn rd_bytes(r: &mut impl Read, path: &Path, cap: u64) -> Result<Vec<u8>> {
    let len = rd_u64(r, path)?;
    if len > cap {
        return Err(Error::data(format!(
            "{}: unreasonable field length {len}",
            path.display()
        )));
    }
    let mut b = vec![0u8; len as usize];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(b)
}

fn rd_string(r: &mut impl Read, path: &Path) -> Result<String> {
    let b = rd_bytes(r, path, 1 << 20)?;
    String::from_utf8(b).map_err(|_| Error::data(format!("{}: non-UTF8 string", path.display())))
}

fn rd_f64s(r: &mut impl Read, path: &Path) -> Result<Vec<f64>> {
    let len = rd_u64(r, path)?;
    if len > 1 << 32 {
        return Err(Error::data(format!(
            "{}: unreasonable tensor length {len}",
            path.display()
        )));
    }
    let mut out = Vec::with_capacity(len as usize);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &GeoDecoder,
    partition_hash: &str,
    config_hash: &str,
    train_state: Option<&TrainState>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    let config_json = serde_json::to_vec(model.config())
        .map_err(|e| Error::internal(format!("config serialization: {e}")))?;
    wr_bytes(&mut w, &config_json, path)?;
    wr_bytes(&mut w, partition_hash.as_bytes(), path)?;
    wr_bytes(&mut w, config_hash.as_bytes(), path)?;
    match train_state {
        Some(ts) => {
            w.write_all(&[1]).map_err(|e| Error::io(path, e))?;
            wr_u64(&mut w, ts.epoch as u64, path)?;
            wr_u64(&mut w, ts.step as u64, path)?;
            wr_u64(&mut w, ts.buffers.len() as u64, path)?;
            for (name, buf) in &ts.buffers {
                wr_bytes(&mut w, name.as_bytes(), path)?;
                wr_f64s(&mut w, buf, path)?;
            }
        }
        None => w.write_all(&[0]).map_err(|e| Error::io(path, e))?,
    }
    let params = model.parameters();
    wr_u64(&mut w, params.len() as u64, path)?;
    for p in params {
        wr_bytes(&mut w, p.name().as_bytes(), path)?;
        let shape = p.value().shape();
        wr_u64(&mut w, shape.len() as u64, path)?;
        for &d in shape {
            wr_u64(&mut w, d as u64, path)?;
        }
        wr_f64s(&mut w, p.value().data(), path)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(GeoDecoder, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 12];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let config_json = rd_bytes(&mut r, path, 1 << 20)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| Error::data(format!("{}: bad embedded config: {e}", path.display())))?;
    let partition_hash = rd_string(&mut r, path)?;
    let config_hash = rd_string(&mut r, path)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(|e| Error::io(path, e))?;
    let train_state = if flag[0] == 1 {
        let epoch = rd_u64(&mut r, path)? as usize;
        let step = rd_u64(&mut r, path)? as usize;
        let n = rd_u64(&mut r, path)?;
        let mut buffers = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = rd_string(&mut r, path)?;
            let buf = rd_f64s(&mut r, path)?;
            buffers.push((name, buf));
        }
        Some(TrainState {
            epoch,
            step,
            buffers,
        })
    } else {
        None
    };

    // Seed is irrelevant here; every weight is overwritten below.
    let mut model = GeoDecoder::new(config.clone(), 0)?;
    let n_params = rd_u64(&mut r, path)? as usize;
    let mut stored: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = rd_string(&mut r, path)?;
        let ndim = rd_u64(&mut r, path)? as usize;
        if ndim > 8 {
            return Err(Error::data(format!(
                "{}: parameter {name} claims {ndim} dimensions",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd_u64(&mut r, path)? as usize);
        }
        let data = rd_f64s(&mut r, path)?;
        stored.push((name, shape, data));
    }
    {
        let mut live = model.parameters_mut();
        if live.len() != stored.len() {
            return Err(Error::data(format!(
                "{}: checkpoint has {} parameters, model expects {}",
                path.display(),
                stored.len(),
                live.len()
            )));
        }
        for p in live.iter_mut() {
            let (name, shape, data) = stored
                .iter()
                .find(|(n, _, _)| n == p.name())
                .ok_or_else(|| {
                    Error::data(format!(
                        "{}: checkpoint is missing parameter {}",
                        path.display(),
                        p.name()
                    ))
                })?;
            if shape != p.value().shape() {
                return Err(Error::data(format!(
                    "{}: parameter {name} has shape {shape:?}, model expects {:?}",
                    path.display(),
                    p.value().shape()
                )));
            }
            p.set_data(data.clone())?;
        }
    }
    Ok((
        model,
        CheckpointMeta {
            config,
            partition_hash,
            config_hash,
            train_state,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodecoder::{EncoderConfig, ModelInput};
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            hierarchies: 2,
            scenes: 2,
            dim: 8,
            heads: 2,
            independent_layers: 1,
            dependent_layers: 1,
            ffn_hidden: 16,
            classes_per_hierarchy: vec![3, 4],
            encoder: EncoderConfig::Precomputed { input_dim: 4 },
            values_from_keys: false,
            zero_init_heads: false,
        }
    }

    #[test]
    fn round_trip_restores_weights_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = GeoDecoder::new(config(), 77).unwrap();
        let state = TrainState {
            epoch: 3,
            step: 120,
            buffers: vec![("queries".to_string(), vec![0.5; 32])],
        };
        save_checkpoint(&path, &model, "abc123", "cfg456", Some(&state)).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.partition_hash, "abc123");
        assert_eq!(meta.config_hash, "cfg456");
        assert_eq!(meta.config, *model.config());
        assert_eq!(meta.train_state.as_ref(), Some(&state));
        for (a, b) in model.parameters().iter().zip(loaded.parameters()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.value().data(), b.value().data());
        }
        // Same forward outputs bit for bit.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let oa = model.forward(&ModelInput::Tokens(tokens.clone())).unwrap();
        let ob = loaded.forward(&ModelInput::Tokens(tokens)).unwrap();
        for (x, y) in oa.geo_logits.iter().zip(&ob.geo_logits) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn no_train_state_round_trips_as_none() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = GeoDecoder::new(config(), 7).unwrap();
        save_checkpoint(&path, &model, "h", "c", None).unwrap();
        let (_, meta) = load_checkpoint(&path).unwrap();
        assert!(meta.train_state.is_none());
    }

    #[test]
    fn garbage_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());

        let good = dir.path().join("model.ckpt");
        let model = GeoDecoder::new(config(), 7).unwrap();
        save_checkpoint(&good, &model, "h", "c", None).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let truncated = &bytes[..bytes.len() / 2];
        std::fs::write(&path, truncated).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
