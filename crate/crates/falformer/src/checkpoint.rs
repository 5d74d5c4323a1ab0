//! Checkpoint file: magic, version, a human-readable config block, then all
//! parameter tensors as little-endian f64 in the canonical tensor order
//! (see `ModelParams`), optionally followed by the optimizer state.
//! Round trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionMode, Pinv};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Matrix;
use crate::training::{OptimizerState, RadamHyper};

pub const CKPT_MAGIC: [u8; 4] = *b"FALC";
pub const CKPT_VERSION: u8 = 1;

fn config_block(config: &ModelConfig) -> String {
    let (pinv_mode, pinv_iters) = match config.pinv {
        Pinv::Iterative { iters } => ("iterative", iters),
        Pinv::Oracle => ("oracle", 0),
    };
    format!(
        "d_f = {}\nd_model = {}\nlayers = {}\nsegments = {}\nheads = {}\nclasses = {}\nmode = {}\npinv_mode = {}\npinv_iters = {}\nkmeans_seed = {}\nkmeans_iters = {}\nrecluster_per_layer = {}\ncluster_raw_features = {}\n",
        config.d_f,
        config.d_model,
        config.layers,
        config.n_segments,
        config.heads,
        config.n_classes,
        config.attention_mode.as_str(),
        pinv_mode,
        pinv_iters,
        config.kmeans_seed,
        config.kmeans_iters,
        config.recluster_per_layer,
        config.cluster_raw_features,
    )
}

fn parse_config_block(text: &str, path: &Path) -> Result<ModelConfig> {
    let mut kv = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("bad config line {line:?}"),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<String> {
        kv.get(key).cloned().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("missing config key {key:?}"),
        })
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("bad value for {key}: {e}"),
        })
    };
    let pinv = match get("pinv_mode")?.as_str() {
        "iterative" => Pinv::Iterative {
            iters: parse_usize("pinv_iters")?,
        },
        "oracle" => Pinv::Oracle,
        other => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: format!("unknown pinv_mode {other:?}"),
            })
        }
    };
    Ok(ModelConfig {
        d_f: parse_usize("d_f")?,
        d_model: parse_usize("d_model")?,
        layers: parse_usize("layers")?,
        n_segments: parse_usize("segments")?,
        heads: parse_usize("heads")?,
        n_classes: parse_usize("classes")?,
        attention_mode: AttentionMode::parse(&get("mode")?)?,
        pinv,
        kmeans_seed: get("kmeans_seed")?.parse().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("bad value for kmeans_seed: {e}"),
        })?,
        kmeans_iters: parse_usize("kmeans_iters")?,
        recluster_per_layer: get("recluster_per_layer")? == "true",
        cluster_raw_features: get("cluster_raw_features")? == "true",
    })
}

fn push_tensor(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    params: &ModelParams,
    config: &ModelConfig,
    opt_state: Option<&OptimizerState>,
    path: &Path,
) -> Result<()> {
    params.validate(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.push(CKPT_VERSION);
    let block = config_block(config);
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    let tensors = params.tensor_list();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        push_tensor(&mut out, t);
    }
    match opt_state {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for v in [
                state.hyper.lr,
                state.hyper.beta1,
                state.hyper.beta2,
                state.hyper.eps,
                state.hyper.weight_decay,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for t in state.m.iter().chain(&state.v) {
                push_tensor(&mut out, t);
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.display().to_string(),
                context,
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64> {
        let b = self.take(8, context)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64> {
        let b = self.take(8, context)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn tensor(&mut self, context: &'static str) -> Result<Matrix> {
        let rows = self.u32(context)? as usize;
        let cols = self.u32(context)? as usize;
        let payload = self.take(rows * cols * 8, context)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

fn params_from_tensors(config: &ModelConfig, tensors: Vec<Matrix>) -> Result<ModelParams> {
    let expected = 3 + config.layers * (3 + 3 * config.heads) + 4;
    if tensors.len() != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {} tensors, config implies {expected}",
            tensors.len()
        )));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("count checked above");
    let input_w = next();
    let input_b = next();
    let cls = next();
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let ln_gamma = next();
        let ln_beta = next();
        let mut wq = Vec::with_capacity(config.heads);
        let mut wk = Vec::with_capacity(config.heads);
        let mut wv = Vec::with_capacity(config.heads);
        for _ in 0..config.heads {
            wq.push(next());
            wk.push(next());
            wv.push(next());
        }
        let wo = next();
        layers.push(crate::model::LayerParams {
            ln_gamma,
            ln_beta,
            attn: crate::attention::AttentionParams { wq, wk, wv, wo },
        });
    }
    let final_gamma = next();
    let final_beta = next();
    let cls_w = next();
    let cls_b = next();
    let params = ModelParams {
        input_w,
        input_b,
        cls,
        layers,
        final_gamma,
        final_beta,
        cls_w,
        cls_b,
    };
    params.validate(config)?;
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig, Option<OptimizerState>)> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: CKPT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.take(1, "version")?[0];
    if version != CKPT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.display().to_string(),
            found: version,
        });
    }
    let block_len = r.u32("config block length")? as usize;
    let block = std::str::from_utf8(r.take(block_len, "config block")?).map_err(|_| {
        Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "config block is not UTF-8".into(),
        }
    })?;
    let config = parse_config_block(block, path)?;
    let n_tensors = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        tensors.push(r.tensor("parameter tensor")?);
    }
    let params = params_from_tensors(&config, tensors)?;
    let opt_state = match r.take(1, "optimizer flag")?[0] {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let hyper = RadamHyper {
                lr: r.f64("lr")?,
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                eps: r.f64("eps")?,
                weight_decay: r.f64("weight_decay")?,
            };
            let n = params.tensor_list().len();
            let mut m = Vec::with_capacity(n);
            for _ in 0..n {
                m.push(r.tensor("first moment")?);
            }
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.tensor("second moment")?);
            }
            Some(OptimizerState { step, hyper, m, v })
        }
        other => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: format!("bad optimizer flag {other}"),
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((params, config, opt_state))
}
