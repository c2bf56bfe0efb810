//! Self-describing checkpoint container.
//!
//! Layout: a `ckpt-v1 <family>` header line, the config as sorted
//! `cfg <key> <json>` lines, then named parameter arrays (a text header line
//! followed by raw little-endian values), an optional Adam state section,
//! and a closing `end` line. Writing is fully deterministic; loading fails
//! loudly on family, config, dtype, or shape mismatch.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::{
    attach_head, BaseLm, ClassifierHead, HeadKind, LstmLm, LstmLmConfig, ModelError, Pooling,
    SiameseConfig, SiameseNet, TextClassifier, TransformerLm, TransformerLmConfig,
};

const MAGIC: &str = "ckpt-v1";

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct OptimizerSnapshot {
    pub step: u64,
    /// Per-parameter first/second moment arrays, keyed by parameter name.
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub family: String,
    pub config: BTreeMap<String, serde_json::Value>,
    pub arrays: Vec<NamedArray>,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn fmt_err(detail: impl Into<String>) -> ModelError {
    ModelError::CheckpointFormat(detail.into())
}

fn config_to_map(config: &serde_json::Value) -> Result<BTreeMap<String, serde_json::Value>, ModelError> {
    match config {
        serde_json::Value::Object(map) => Ok(map.clone().into_iter().collect()),
        _ => Err(fmt_err("config must serialize to a JSON object")),
    }
}

/// Write a checkpoint. Arrays are stored in the given order with the dtype
/// of `F`; optimizer moments are stored as f64.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    family: &str,
    config: &serde_json::Value,
    arrays: &[(String, Tensor<F>)],
    optimizer: Option<&OptimizerSnapshot>,
) -> Result<(), ModelError> {
    let config_map = config_to_map(config)?;
    let mut out: Vec<u8> = Vec::new();
    writeln!(out, "{MAGIC} {family}").unwrap();
    for (key, value) in &config_map {
        writeln!(out, "cfg {key} {value}").unwrap();
    }
    for (name, tensor) in arrays {
        write!(out, "tensor {name} {} {}", F::DTYPE, tensor.shape().len()).unwrap();
        for d in tensor.shape() {
            write!(out, " {d}").unwrap();
        }
        out.push(b'\n');
        for &v in tensor.values().iter() {
            v.write_le(&mut out);
        }
        out.push(b'\n');
    }
    if let Some(opt) = optimizer {
        writeln!(out, "optimizer adam {}", opt.step).unwrap();
        for (name, m, v) in &opt.moments {
            writeln!(out, "moment {name} {}", m.len()).unwrap();
            for &x in m {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.push(b'\n');
            for &x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.push(b'\n');
        }
    }
    out.extend_from_slice(b"end\n");
    fs::write(path, out).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str, ModelError> {
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
            self.pos += 1;
        }
        if self.pos >= self.buf.len() {
            return Err(fmt_err("unexpected end of file"));
        }
        let line = std::str::from_utf8(&self.buf[start..self.pos])
            .map_err(|_| fmt_err("non-UTF-8 header line"))?;
        self.pos += 1;
        Ok(line)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err("truncated array data"));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn expect_newline(&mut self) -> Result<(), ModelError> {
        if self.bytes(1)? != b"\n" {
            return Err(fmt_err("missing newline after array data"));
        }
        Ok(())
    }
}

fn dtype_bytes(dtype: &str) -> Result<usize, ModelError> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(fmt_err(format!("unknown dtype '{other}'"))),
    }
}

fn decode_values(raw: &[u8], dtype: &str) -> Vec<f64> {
    match dtype {
        "f32" => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let buf = fs::read(path).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let header = cur.line()?;
    let (magic, family) = header
        .split_once(' ')
        .ok_or_else(|| fmt_err("bad header line"))?;
    if magic != MAGIC {
        return Err(fmt_err(format!("unsupported format '{magic}'")));
    }

    let mut config = BTreeMap::new();
    let mut arrays = Vec::new();
    let mut optimizer = None;
    loop {
        let line = cur.line()?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("cfg ") {
            let (key, raw) = rest
                .split_once(' ')
                .ok_or_else(|| fmt_err(format!("bad cfg line '{line}'")))?;
            let value = serde_json::from_str(raw)
                .map_err(|e| fmt_err(format!("cfg '{key}' is not valid JSON: {e}")))?;
            config.insert(key.to_string(), value);
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split(' ');
            let name = parts.next().ok_or_else(|| fmt_err("tensor line lacks name"))?.to_string();
            let dtype = parts.next().ok_or_else(|| fmt_err("tensor line lacks dtype"))?.to_string();
            let rank: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fmt_err("tensor line lacks rank"))?;
            let shape: Vec<usize> = parts
                .map(|s| s.parse().map_err(|_| fmt_err(format!("bad dimension '{s}'"))))
                .collect::<Result<_, _>>()?;
            if shape.len() != rank {
                return Err(fmt_err(format!("tensor '{name}': rank {rank} but {} dims", shape.len())));
            }
            let count: usize = shape.iter().product();
            let raw = cur.bytes(count * dtype_bytes(&dtype)?)?;
            let data = decode_values(raw, &dtype);
            cur.expect_newline()?;
            arrays.push(NamedArray {
                name,
                dtype,
                shape,
                data,
            });
        } else if let Some(rest) = line.strip_prefix("optimizer adam ") {
            let step: u64 = rest
                .parse()
                .map_err(|_| fmt_err(format!("bad optimizer step '{rest}'")))?;
            optimizer = Some(OptimizerSnapshot {
                step,
                moments: Vec::new(),
            });
        } else if let Some(rest) = line.strip_prefix("moment ") {
            let opt = optimizer
                .as_mut()
                .ok_or_else(|| fmt_err("moment entry before optimizer header"))?;
            let (name, count_raw) = rest
                .rsplit_once(' ')
                .ok_or_else(|| fmt_err("bad moment line"))?;
            let count: usize = count_raw
                .parse()
                .map_err(|_| fmt_err(format!("bad moment count '{count_raw}'")))?;
            let m = decode_values(cur.bytes(count * 8)?, "f64");
            cur.expect_newline()?;
            let v = decode_values(cur.bytes(count * 8)?, "f64");
            cur.expect_newline()?;
            opt.moments.push((name.to_string(), m, v));
        } else {
            return Err(fmt_err(format!("unrecognized line '{line}'")));
        }
    }

    Ok(Checkpoint {
        family: family.to_string(),
        config,
        arrays,
        optimizer,
    })
}

impl Checkpoint {
    pub fn config_value(&self) -> serde_json::Value {
        serde_json::Value::Object(self.config.clone().into_iter().collect())
    }

    /// Copy stored arrays into model tensors. Every target must be present
    /// with matching dtype and shape, and no stored array may go unused.
    pub fn apply_to<F: Scalar>(&self, targets: &[(String, Tensor<F>)]) -> Result<(), ModelError> {
        let stored: BTreeMap<&str, &NamedArray> =
            self.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        if stored.len() != self.arrays.len() {
            return Err(fmt_err("duplicate array names in checkpoint"));
        }
        if targets.len() != self.arrays.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "model has {} arrays, checkpoint has {}",
                targets.len(),
                self.arrays.len()
            )));
        }
        for (name, tensor) in targets {
            let array = stored.get(name.as_str()).ok_or_else(|| {
                ModelError::ConfigMismatch(format!("checkpoint missing array '{name}'"))
            })?;
            if array.dtype != F::DTYPE {
                return Err(ModelError::ConfigMismatch(format!(
                    "array '{name}' stored as {}, model needs {}",
                    array.dtype,
                    F::DTYPE
                )));
            }
            if array.shape != tensor.shape() {
                return Err(ModelError::ConfigMismatch(format!(
                    "array '{name}' stored with shape {:?}, model needs {:?}",
                    array.shape,
                    tensor.shape()
                )));
            }
            let mut values = tensor.values_mut();
            for (slot, &v) in values.iter_mut().zip(&array.data) {
                *slot = F::from_f64(v);
            }
        }
        Ok(())
    }
}

fn parse_config<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint) -> Result<T, ModelError> {
    serde_json::from_value(ckpt.config_value())
        .map_err(|e| ModelError::ConfigMismatch(format!("config does not parse: {e}")))
}

fn expect_family(ckpt: &Checkpoint, family: &str) -> Result<(), ModelError> {
    if ckpt.family != family {
        return Err(ModelError::ConfigMismatch(format!(
            "checkpoint family '{}', expected '{family}'",
            ckpt.family
        )));
    }
    Ok(())
}

impl<F: Scalar> TransformerLm<F> {
    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerSnapshot>) -> Result<(), ModelError> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        save_checkpoint(path, "transformer_lm", &config, &self.parameters(), optimizer)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        expect_family(ckpt, "transformer_lm")?;
        let config: TransformerLmConfig = parse_config(ckpt)?;
        let model = Self::new(config, &mut RngStream::new(0))?;
        ckpt.apply_to(&model.parameters())?;
        Ok(model)
    }
}

impl<F: Scalar> LstmLm<F> {
    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerSnapshot>) -> Result<(), ModelError> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        save_checkpoint(path, "lstm_lm", &config, &self.parameters(), optimizer)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        expect_family(ckpt, "lstm_lm")?;
        let config: LstmLmConfig = parse_config(ckpt)?;
        let model = Self::new(config, &mut RngStream::new(0))?;
        ckpt.apply_to(&model.parameters())?;
        Ok(model)
    }
}

impl<F: Scalar> SiameseNet<F> {
    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerSnapshot>) -> Result<(), ModelError> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        save_checkpoint(path, "siamese", &config, &self.parameters(), optimizer)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        expect_family(ckpt, "siamese")?;
        let config: SiameseConfig = parse_config(ckpt)?;
        let model = Self::new(config, &mut RngStream::new(0))?;
        ckpt.apply_to(&model.parameters())?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierRepr {
    base_family: String,
    base: serde_json::Value,
    head_kind: HeadKind,
    head_hidden: usize,
    num_classes: usize,
    pooling: Pooling,
}

impl<F: Scalar> TextClassifier<F> {
    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerSnapshot>) -> Result<(), ModelError> {
        let base = match &self.base {
            BaseLm::Transformer(m) => serde_json::to_value(&m.config).unwrap(),
            BaseLm::Lstm(m) => serde_json::to_value(&m.config).unwrap(),
        };
        let repr = ClassifierRepr {
            base_family: self.base.family().to_string(),
            base,
            head_kind: self.head.kind,
            head_hidden: self.head.hidden_dim,
            num_classes: self.head.num_classes,
            pooling: self.pooling,
        };
        let config = serde_json::to_value(&repr).expect("config serializes");
        save_checkpoint(path, "classifier", &config, &self.named_arrays(), optimizer)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        expect_family(ckpt, "classifier")?;
        let repr: ClassifierRepr = parse_config(ckpt)?;
        let mut rng = RngStream::new(0);
        let base = match repr.base_family.as_str() {
            "transformer_lm" => {
                let config: TransformerLmConfig = serde_json::from_value(repr.base.clone())
                    .map_err(|e| ModelError::ConfigMismatch(format!("base config: {e}")))?;
                BaseLm::Transformer(TransformerLm::new(config, &mut rng)?)
            }
            "lstm_lm" => {
                let config: LstmLmConfig = serde_json::from_value(repr.base.clone())
                    .map_err(|e| ModelError::ConfigMismatch(format!("base config: {e}")))?;
                BaseLm::Lstm(LstmLm::new(config, &mut rng)?)
            }
            other => {
                return Err(ModelError::ConfigMismatch(format!("unknown base family '{other}'")))
            }
        };
        let head = ClassifierHead::new(
            repr.head_kind,
            base.hidden_width(),
            repr.num_classes,
            repr.head_hidden,
            &mut rng,
        )?;
        let classifier = attach_head(base, head, repr.pooling)?;
        ckpt.apply_to(&classifier.named_arrays())?;
        Ok(classifier)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn toy_transformer(seed: u64) -> TransformerLm<f32> {
        let config = TransformerLmConfig {
            vocab_size: 11,
            embedding_dim: 8,
            ffn_inner_dim: 12,
            num_heads: 2,
            num_blocks: 2,
            max_seq_len: 6,
            dropout: 0.0,
            init_std: 0.1,
            causal: true,
            head_mask: None,
        };
        TransformerLm::new(config, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn transformer_round_trip_preserves_values_and_config() {
        let model = toy_transformer(9);
        let path = tmp("transformer.ckpt");
        model.save(&path, None).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.family, "transformer_lm");
        let restored = TransformerLm::<f32>::from_checkpoint(&ckpt).unwrap();
        assert_eq!(restored.config, model.config);
        for ((_, a), (_, b)) in model.parameters().iter().zip(restored.parameters().iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn shape_mismatch_fails_loudly() {
        let model = toy_transformer(9);
        let path = tmp("transformer_shape.ckpt");
        model.save(&path, None).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let mut other_cfg = model.config.clone();
        other_cfg.ffn_inner_dim = 16;
        let other = TransformerLm::<f32>::new(other_cfg, &mut RngStream::new(1)).unwrap();
        let err = ckpt.apply_to(&other.parameters()).unwrap_err();
        assert!(matches!(err, ModelError::ConfigMismatch(_)), "{err}");
    }

    #[test]
    fn dtype_mismatch_fails_loudly() {
        let model = toy_transformer(9);
        let path = tmp("transformer_dtype.ckpt");
        model.save(&path, None).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert!(TransformerLm::<f64>::from_checkpoint(&ckpt).is_err());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let model = toy_transformer(3);
        let snapshot = OptimizerSnapshot {
            step: 42,
            moments: vec![("token_embedding".into(), vec![0.5; 88], vec![0.25; 88])],
        };
        let path = tmp("with_opt.ckpt");
        model.save(&path, Some(&snapshot)).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let opt = ckpt.optimizer.unwrap();
        assert_eq!(opt.step, 42);
        assert_eq!(opt.moments.len(), 1);
        assert_eq!(opt.moments[0].1, vec![0.5; 88]);
        assert_eq!(opt.moments[0].2, vec![0.25; 88]);
    }

    #[test]
    fn saving_is_deterministic() {
        let a = toy_transformer(5);
        let b = toy_transformer(5);
        let pa = tmp("det_a.ckpt");
        let pb = tmp("det_b.ckpt");
        a.save(&pa, None).unwrap();
        b.save(&pb, None).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    }

    #[test]
    fn classifier_round_trip_with_compound_head() {
        let mut rng = RngStream::new(7);
        let lm_config = LstmLmConfig {
            vocab_size: 9,
            layers: 2,
            embedding_dim: 4,
            hidden_dim: 6,
            dropouts: DropoutRates {
                embedding: 0.0,
                input: 0.0,
                hidden: 0.0,
                output: 0.0,
            },
            recurrent_weight_drop: 0.0,
            tie_embeddings: true,
        };
        let base = BaseLm::Lstm(LstmLm::<f32>::new(lm_config, &mut rng).unwrap());
        let head = ClassifierHead::new(HeadKind::Compound, base.hidden_width(), 2, 8, &mut rng).unwrap();
        let clf = attach_head(base, head, Pooling::LastToken).unwrap();
        let path = tmp("classifier.ckpt");
        clf.save(&path, None).unwrap();
        let restored = TextClassifier::<f32>::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
        for ((na, a), (nb, b)) in clf.named_arrays().iter().zip(restored.named_arrays().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.to_vec(), b.to_vec(), "array {na}");
        }
    }

    use super::super::DropoutRates;
}
