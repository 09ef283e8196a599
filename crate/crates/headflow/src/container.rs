//! The `HATW1` tensor container: one format for weights, task sets, and
//! calibration baselines.
//!
//! Layout, designed to be parseable from any language in a few lines:
//!
//! ```text
//! bytes 0..5   magic "HATW1"
//! bytes 5..9   u32 little-endian header length L
//! bytes 9..9+L JSON header { kind, config, ..., tensors: [{name, shape, offset}] }
//! rest         contiguous little-endian f32 payload
//! ```
//!
//! `offset` is a byte offset into the payload; shapes are row-major.
//! Integer data (task tokens) is stored as exact small floats. Round-trips
//! are bit-exact, including NaN payloads and signed zeros — files are
//! therefore stable inputs for byte-reproducible runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::intervention::BaselineKV;
use crate::model::{HeadWeights, LayerWeights, ModelConfig, MultimodalSequence, WeightSet};
use crate::numerics::Matrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"HATW1";

pub const KIND_WEIGHTS: &str = "weights";
pub const KIND_TASKS: &str = "tasks";
pub const KIND_BASELINE: &str = "baseline";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_sequences: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    count: Option<usize>,
    tensors: Vec<TensorEntry>,
}

// ---------------------------------------------------------------------------
// Building and parsing the envelope
// ---------------------------------------------------------------------------

struct Builder {
    tensors: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Builder {
    fn new() -> Self {
        Builder { tensors: Vec::new(), payload: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(TensorEntry {
            name: name.into(),
            shape,
            offset: self.payload.len(),
        });
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(self, path: &Path, mut header: Header) -> Result<()> {
        header.tensors = self.tensors;
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::format(format!("header encode: {e}")))?;
        let len = u32::try_from(header_bytes.len())
            .map_err(|_| Error::format("header exceeds u32 length".to_string()))?;
        let mut out =
            Vec::with_capacity(MAGIC.len() + 4 + header_bytes.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&self.payload);
        std::fs::write(path, out)?;
        Ok(())
    }
}

struct Parsed {
    header: Header,
    payload: Vec<u8>,
}

impl Parsed {
    fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(format!(
                "{} is not a HATW1 container (bad magic)",
                path.display()
            )));
        }
        let len =
            u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 9 + len {
            return Err(Error::format(format!(
                "{}: header length {len} exceeds file size",
                path.display()
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[9..9 + len])
            .map_err(|e| Error::format(format!("{}: header decode: {e}", path.display())))?;
        let payload = bytes[9 + len..].to_vec();
        if payload.len() % 4 != 0 {
            return Err(Error::format(format!(
                "{}: payload is not a whole number of f32s",
                path.display()
            )));
        }
        Ok(Parsed { header, payload })
    }

    fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::format(format!(
                "{}: container holds \"{}\", expected \"{kind}\"",
                path.display(),
                self.header.kind
            )));
        }
        Ok(())
    }

    /// Tensor data by name with an exact-shape check.
    fn tensor(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(format!("tensor \"{name}\" missing")))?;
        if entry.shape != shape {
            return Err(Error::format(format!(
                "tensor \"{name}\" has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let end = entry
            .offset
            .checked_add(n * 4)
            .filter(|&e| e <= self.payload.len())
            .ok_or_else(|| {
                Error::format(format!("tensor \"{name}\" extends past the payload"))
            })?;
        Ok(self.payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.tensor(name, &[rows, cols])?)
    }
}

/// Container kind without decoding the tensors — for friendly diagnostics.
pub fn peek_kind(path: &Path) -> Result<String> {
    Ok(Parsed::open(path)?.header.kind)
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

pub fn write_weights(path: &Path, cfg: &ModelConfig, w: &WeightSet) -> Result<()> {
    w.validate(cfg)?;
    let mut b = Builder::new();
    b.push("embed.token", vec![cfg.vocab_size, cfg.d_model], w.token_embedding.as_slice());
    b.push("embed.pos", vec![cfg.max_seq(), cfg.d_model], w.pos_embedding.as_slice());
    for (l, layer) in w.layers.iter().enumerate() {
        b.push(format!("layers.{l}.attn_norm"), vec![cfg.d_model], &layer.attn_norm);
        for (h, head) in layer.heads.iter().enumerate() {
            let base = format!("layers.{l}.heads.{h}");
            b.push(format!("{base}.wq"), vec![cfg.d_model, cfg.d_head], head.wq.as_slice());
            b.push(format!("{base}.wk"), vec![cfg.d_model, cfg.d_head], head.wk.as_slice());
            b.push(format!("{base}.wv"), vec![cfg.d_model, cfg.d_head], head.wv.as_slice());
            b.push(format!("{base}.wo"), vec![cfg.d_head, cfg.d_model], head.wo.as_slice());
        }
        b.push(format!("layers.{l}.ffn_norm"), vec![cfg.d_model], &layer.ffn_norm);
        b.push(format!("layers.{l}.ffn.w1"), vec![cfg.d_model, cfg.d_ff()], layer.ffn_w1.as_slice());
        b.push(format!("layers.{l}.ffn.w2"), vec![cfg.d_ff(), cfg.d_model], layer.ffn_w2.as_slice());
    }
    b.push("final_norm", vec![cfg.d_model], &w.final_norm);
    b.push("unembed", vec![cfg.d_model, cfg.vocab_size], w.unembedding.as_slice());
    b.finish(
        path,
        Header {
            kind: KIND_WEIGHTS.to_string(),
            config: *cfg,
            provenance: None,
            n_sequences: None,
            count: None,
            tensors: Vec::new(),
        },
    )
}

pub fn read_weights(path: &Path) -> Result<(ModelConfig, WeightSet)> {
    let p = Parsed::open(path)?;
    p.expect_kind(KIND_WEIGHTS, path)?;
    let cfg = p.header.config;
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let base = format!("layers.{l}.heads.{h}");
            heads.push(HeadWeights {
                wq: p.matrix(&format!("{base}.wq"), cfg.d_model, cfg.d_head)?,
                wk: p.matrix(&format!("{base}.wk"), cfg.d_model, cfg.d_head)?,
                wv: p.matrix(&format!("{base}.wv"), cfg.d_model, cfg.d_head)?,
                wo: p.matrix(&format!("{base}.wo"), cfg.d_head, cfg.d_model)?,
            });
        }
        layers.push(LayerWeights {
            attn_norm: p.tensor(&format!("layers.{l}.attn_norm"), &[cfg.d_model])?,
            heads,
            ffn_norm: p.tensor(&format!("layers.{l}.ffn_norm"), &[cfg.d_model])?,
            ffn_w1: p.matrix(&format!("layers.{l}.ffn.w1"), cfg.d_model, cfg.d_ff())?,
            ffn_w2: p.matrix(&format!("layers.{l}.ffn.w2"), cfg.d_ff(), cfg.d_model)?,
        });
    }
    let w = WeightSet {
        token_embedding: p.matrix("embed.token", cfg.vocab_size, cfg.d_model)?,
        pos_embedding: p.matrix("embed.pos", cfg.max_seq(), cfg.d_model)?,
        layers,
        final_norm: p.tensor("final_norm", &[cfg.d_model])?,
        unembedding: p.matrix("unembed", cfg.d_model, cfg.vocab_size)?,
    };
    w.validate(&cfg)?;
    Ok((cfg, w))
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

fn f32_to_token(v: f32, what: &str) -> Result<u32> {
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f32 {
        return Err(Error::format(format!("{what} value {v} is not a token id")));
    }
    Ok(v as u32)
}

pub fn write_tasks(path: &Path, cfg: &ModelConfig, tasks: &[MultimodalSequence]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::invalid("refusing to write an empty task set".to_string()));
    }
    let mut b = Builder::new();
    for (i, t) in tasks.iter().enumerate() {
        t.validate(cfg)?;
        b.push(format!("tasks.{i}.image"), vec![cfg.n_image, cfg.d_model], t.image.as_slice());
        let text: Vec<f32> = t.text_tokens.iter().map(|&v| v as f32).collect();
        b.push(format!("tasks.{i}.text"), vec![text.len()], &text);
        b.push(format!("tasks.{i}.target"), vec![1], &[t.target_token as f32]);
    }
    b.finish(
        path,
        Header {
            kind: KIND_TASKS.to_string(),
            config: *cfg,
            provenance: None,
            n_sequences: None,
            count: Some(tasks.len()),
            tensors: Vec::new(),
        },
    )
}

pub fn read_tasks(path: &Path) -> Result<(ModelConfig, Vec<MultimodalSequence>)> {
    let p = Parsed::open(path)?;
    p.expect_kind(KIND_TASKS, path)?;
    let cfg = p.header.config;
    cfg.validate()?;
    let count = p
        .header
        .count
        .ok_or_else(|| Error::format("task container lacks a count".to_string()))?;
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let image = p.matrix(&format!("tasks.{i}.image"), cfg.n_image, cfg.d_model)?;
        let text_name = format!("tasks.{i}.text");
        let text_len = p
            .header
            .tensors
            .iter()
            .find(|t| t.name == text_name)
            .map(|t| t.shape.clone())
            .ok_or_else(|| Error::format(format!("tensor \"{text_name}\" missing")))?;
        if text_len.len() != 1 {
            return Err(Error::format(format!("tensor \"{text_name}\" is not a vector")));
        }
        let text_tokens = p
            .tensor(&text_name, &text_len)?
            .into_iter()
            .map(|v| f32_to_token(v, &text_name))
            .collect::<Result<Vec<u32>>>()?;
        let target =
            f32_to_token(p.tensor(&format!("tasks.{i}.target"), &[1])?[0], "target")?;
        let seq = MultimodalSequence { image, text_tokens, target_token: target };
        seq.validate(&cfg)?;
        tasks.push(seq);
    }
    Ok((cfg, tasks))
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

pub fn write_baseline(path: &Path, cfg: &ModelConfig, baseline: &BaselineKV) -> Result<()> {
    baseline.validate(cfg)?;
    let mut b = Builder::new();
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            let n = cfg.head_index(l, h);
            b.push(
                format!("baseline.k.{l}.{h}"),
                vec![cfg.n_image, cfg.d_head],
                baseline.k[n].as_slice(),
            );
            b.push(
                format!("baseline.v.{l}.{h}"),
                vec![cfg.n_image, cfg.d_head],
                baseline.v[n].as_slice(),
            );
        }
    }
    b.finish(
        path,
        Header {
            kind: KIND_BASELINE.to_string(),
            config: *cfg,
            provenance: Some(baseline.provenance.clone()),
            n_sequences: Some(baseline.n_sequences),
            count: None,
            tensors: Vec::new(),
        },
    )
}

pub fn read_baseline(path: &Path) -> Result<(ModelConfig, BaselineKV)> {
    let p = Parsed::open(path)?;
    p.expect_kind(KIND_BASELINE, path)?;
    let cfg = p.header.config;
    cfg.validate()?;
    let mut k = Vec::with_capacity(cfg.n_total_heads());
    let mut v = Vec::with_capacity(cfg.n_total_heads());
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            k.push(p.matrix(&format!("baseline.k.{l}.{h}"), cfg.n_image, cfg.d_head)?);
            v.push(p.matrix(&format!("baseline.v.{l}.{h}"), cfg.n_image, cfg.d_head)?);
        }
    }
    let baseline = BaselineKV {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        n_image: cfg.n_image,
        d_head: cfg.d_head,
        k,
        v,
        provenance: p.header.provenance.clone().unwrap_or_default(),
        n_sequences: p.header.n_sequences.unwrap_or(0),
    };
    baseline.validate(&cfg)?;
    Ok((cfg, baseline))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::compute_baseline_kv;
    use crate::model::test_support as ts;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bits_of(m: &Matrix) -> Vec<u32> {
        m.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn weights_round_trip_is_bit_exact() {
        let cfg = ts::tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let mut w = ts::random_weights(&cfg, &mut rng);
        // Awkward bit patterns must survive: NaN with set payload bits,
        // negative zero, subnormal.
        let wv = &mut w.layers[0].heads[1].wv;
        wv.set(0, 0, f32::from_bits(0x7fc0_1234));
        wv.set(0, 1, -0.0);
        wv.set(0, 2, f32::from_bits(1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hatw");
        write_weights(&path, &cfg, &w).unwrap();
        let (cfg2, w2) = read_weights(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(bits_of(&w.token_embedding), bits_of(&w2.token_embedding));
        assert_eq!(bits_of(&w.pos_embedding), bits_of(&w2.pos_embedding));
        assert_eq!(bits_of(&w.unembedding), bits_of(&w2.unembedding));
        for (a, b) in w.layers.iter().zip(&w2.layers) {
            for (x, y) in a.heads.iter().zip(&b.heads) {
                assert_eq!(bits_of(&x.wq), bits_of(&y.wq));
                assert_eq!(bits_of(&x.wk), bits_of(&y.wk));
                assert_eq!(bits_of(&x.wv), bits_of(&y.wv));
                assert_eq!(bits_of(&x.wo), bits_of(&y.wo));
            }
            assert_eq!(a.ffn_w1.as_slice(), b.ffn_w1.as_slice());
            assert_eq!(a.ffn_w2.as_slice(), b.ffn_w2.as_slice());
            assert_eq!(a.attn_norm, b.attn_norm);
            assert_eq!(a.ffn_norm, b.ffn_norm);
        }
        assert_eq!(w.final_norm, w2.final_norm);
        assert_eq!(peek_kind(&path).unwrap(), "weights");
    }

    #[test]
    fn identical_inputs_produce_identical_files() {
        let cfg = ts::tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let w = ts::random_weights(&cfg, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        write_weights(&p1, &cfg, &w).unwrap();
        write_weights(&p2, &cfg, &w).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn tasks_round_trip_preserves_tokens() {
        let cfg = ts::tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let tasks: Vec<MultimodalSequence> =
            (0..3).map(|i| ts::random_sequence(&cfg, &mut rng, 2 + i % 2)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hatw");
        write_tasks(&path, &cfg, &tasks).unwrap();
        let (cfg2, tasks2) = read_tasks(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(tasks.len(), tasks2.len());
        for (a, b) in tasks.iter().zip(&tasks2) {
            assert_eq!(bits_of(&a.image), bits_of(&b.image));
            assert_eq!(a.text_tokens, b.text_tokens);
            assert_eq!(a.target_token, b.target_token);
        }
    }

    #[test]
    fn baseline_round_trip_keeps_provenance() {
        let cfg = ts::tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let w = ts::random_weights(&cfg, &mut rng);
        let pool: Vec<MultimodalSequence> =
            (0..4).map(|_| ts::random_sequence(&cfg, &mut rng, 3)).collect();
        let baseline = compute_baseline_kv(&cfg, &w, &pool, "pool-83").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.hatw");
        write_baseline(&path, &cfg, &baseline).unwrap();
        let (_, b2) = read_baseline(&path).unwrap();
        assert_eq!(b2.provenance, "pool-83");
        assert_eq!(b2.n_sequences, 4);
        for (a, b) in baseline.k.iter().zip(&b2.k) {
            assert_eq!(bits_of(a), bits_of(b));
        }
        for (a, b) in baseline.v.iter().zip(&b2.v) {
            assert_eq!(bits_of(a), bits_of(b));
        }
    }

    #[test]
    fn malformed_files_are_rejected_with_format_errors() {
        let cfg = ts::tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let w = ts::random_weights(&cfg, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hatw");
        write_weights(&path, &cfg, &w).unwrap();

        // Wrong kind.
        let err = read_tasks(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");

        // Bad magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(read_weights(&bad).unwrap_err(), Error::Format(_)));

        // Truncated payload.
        let whole = std::fs::read(&path).unwrap();
        std::fs::write(&bad, &whole[..whole.len() - 10]).unwrap();
        assert!(matches!(read_weights(&bad).unwrap_err(), Error::Format(_)));

        // Missing file surfaces as I/O.
        assert!(matches!(
            read_weights(&dir.path().join("absent")).unwrap_err(),
            Error::Io(_)
        ));
    }

    #[test]
    fn header_is_plain_json_after_fixed_prefix() {
        let cfg = ts::tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let w = ts::random_weights(&cfg, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hatw");
        write_weights(&path, &cfg, &w).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"HATW1");
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        assert_eq!(v["kind"], "weights");
        assert_eq!(v["config"]["d_model"], 8);
        assert!(v["tensors"].as_array().unwrap().len() > 4);
        assert_eq!(v["tensors"][0]["offset"], 0);
    }
}
