//! Pre-norm causal transformer backbone.
//!
//! Token and learned absolute position embeddings feed `n_layers` blocks of
//! `x + drop(attn(ln1(x)))` then `x + drop(mlp(ln2(x)))`, a final layer norm,
//! and an untied output projection. Dropout sits on the attention weights and
//! on both residual branches.

use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::tensor::{Real, Tape, Tensor, Var, IGNORE_TARGET};
use crate::vocab::TokenId;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 8] = b"PGCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub seq_len: usize,
    pub vocab_size: usize,
}

impl BackboneConfig {
    /// 4 layers, width 128, 4 heads, MLP ratio 4, dropout 0.1.
    pub fn full() -> Self {
        BackboneConfig {
            n_layers: 4,
            width: 128,
            n_heads: 4,
            mlp_ratio: 4,
            dropout: 0.1,
            seq_len: crate::data::SEQ_LEN,
            vocab_size: crate::vocab::VOCAB_SIZE,
        }
    }

    /// Reduced backbone for desk-scale runs: 2 layers, width 64.
    pub fn smoke() -> Self {
        BackboneConfig {
            n_layers: 2,
            width: 64,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("width", self.width),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be positive")));
        }
        if !self.width.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.width;
        let r = self.mlp_ratio;
        let per_layer = (4 + 2 * r) * c * c + (9 + r) * c;
        self.vocab_size * c + self.seq_len * c + self.n_layers * per_layer + 2 * c + c * self.vocab_size + self.vocab_size
    }
}

/// Role of a parameter tensor; decides weight-decay eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Matrix,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Matrix
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub attn_qkv: Tensor<T>,
    pub attn_qkv_bias: Tensor<T>,
    pub attn_out: Tensor<T>,
    pub attn_out_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub mlp_in: Tensor<T>,
    pub mlp_in_bias: Tensor<T>,
    pub mlp_out: Tensor<T>,
    pub mlp_out_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub config: BackboneConfig,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    pub head: Tensor<T>,
    pub head_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

impl<T: Real> LayerParams<T> {
    fn specs(prefix: &str, c: usize, r: usize) -> Vec<ParamSpec> {
        use ParamKind::*;
        let p = |n: &str, kind, shape: Vec<usize>| ParamSpec {
            name: format!("{prefix}.{n}"),
            kind,
            shape,
        };
        vec![
            p("ln1.gain", Norm, vec![c]),
            p("ln1.bias", Norm, vec![c]),
            p("attn.qkv", Matrix, vec![c, 3 * c]),
            p("attn.qkv_bias", Bias, vec![3 * c]),
            p("attn.out", Matrix, vec![c, c]),
            p("attn.out_bias", Bias, vec![c]),
            p("ln2.gain", Norm, vec![c]),
            p("ln2.bias", Norm, vec![c]),
            p("mlp.in", Matrix, vec![c, r * c]),
            p("mlp.in_bias", Bias, vec![r * c]),
            p("mlp.out", Matrix, vec![r * c, c]),
            p("mlp.out_bias", Bias, vec![c]),
        ]
    }

    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.attn_qkv,
            &self.attn_qkv_bias,
            &self.attn_out,
            &self.attn_out_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_in,
            &self.mlp_in_bias,
            &self.mlp_out,
            &self.mlp_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.attn_qkv,
            &mut self.attn_qkv_bias,
            &mut self.attn_out,
            &mut self.attn_out_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_in,
            &mut self.mlp_in_bias,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ]
    }
}

/// Parameter layout in checkpoint order: token embedding, position
/// embedding, each layer's twelve tensors, final norm, output head.
pub fn param_specs(config: &BackboneConfig) -> Vec<ParamSpec> {
    let c = config.width;
    let mut specs = vec![
        ParamSpec {
            name: "token_embedding".into(),
            kind: ParamKind::Embedding,
            shape: vec![config.vocab_size, c],
        },
        ParamSpec {
            name: "position_embedding".into(),
            kind: ParamKind::Embedding,
            shape: vec![config.seq_len, c],
        },
    ];
    for l in 0..config.n_layers {
        specs.extend(LayerParams::<f32>::specs(&format!("layer{l}"), c, config.mlp_ratio));
    }
    specs.extend([
        ParamSpec {
            name: "final.gain".into(),
            kind: ParamKind::Norm,
            shape: vec![c],
        },
        ParamSpec {
            name: "final.bias".into(),
            kind: ParamKind::Norm,
            shape: vec![c],
        },
        ParamSpec {
            name: "head".into(),
            kind: ParamKind::Matrix,
            shape: vec![c, config.vocab_size],
        },
        ParamSpec {
            name: "head.bias".into(),
            kind: ParamKind::Bias,
            shape: vec![config.vocab_size],
        },
    ]);
    specs
}

impl<T: Real> BackboneParams<T> {
    /// Builds parameters from tensors listed in [`param_specs`] order.
    pub fn from_tensors(config: BackboneConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::shape("backbone", format!("{} tensors for {} slots", tensors.len(), specs.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::shape("backbone", format!("{} expects {:?}, got {:?}", s.name, s.shape, t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: next(),
                ln1_bias: next(),
                attn_qkv: next(),
                attn_qkv_bias: next(),
                attn_out: next(),
                attn_out_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                mlp_in: next(),
                mlp_in_bias: next(),
                mlp_out: next(),
                mlp_out_bias: next(),
            })
            .collect();
        Ok(BackboneParams {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gain: next(),
            final_bias: next(),
            head: next(),
            head_bias: next(),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head, &self.head_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.head, &mut self.head_bias]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> BackboneParams<U> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        BackboneParams::from_tensors(self.config.clone(), tensors).expect("same layout")
    }

    /// SHA-256 over the checkpoint encoding.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_checkpoint_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checkpoint layout: magic `PGCKPT01`, u32 LE header length, header JSON
    /// (config and tensor specs), then every tensor as little-endian `f32` in
    /// [`param_specs`] order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            tensors: param_specs(&self.config),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(12 + json.len() + 4 * self.param_count());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self.tensors() {
            for x in t.data() {
                buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Malformed {
            what: "checkpoint",
            detail: detail.into(),
        };
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        if header.tensors != param_specs(&header.config) {
            return Err(bad("tensor layout does not match config"));
        }
        let mut body = bytes[12 + hlen..].chunks_exact(4);
        if body.len() != header.config.param_count() || !body.remainder().is_empty() {
            return Err(bad("weight count does not match config"));
        }
        let tensors = header
            .tensors
            .iter()
            .map(|s| {
                let n = s.shape.iter().product();
                let data = (&mut body)
                    .take(n)
                    .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect();
                Tensor::new(s.shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(header.config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: BackboneConfig,
    tensors: Vec<ParamSpec>,
}

/// Normal(0, 0.02) weights and embeddings, zero biases, identity norms.
pub fn init_backbone<T: Real>(config: &BackboneConfig, seed: u64) -> Result<BackboneParams<T>> {
    config.validate()?;
    let mut rng = StreamKey::root(seed).child("backbone-init").rng();
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = param_specs(config)
        .into_iter()
        .map(|s| match s.kind {
            ParamKind::Matrix | ParamKind::Embedding => Tensor::from_fn(s.shape, |_| T::lit(normal.sample(&mut rng))),
            ParamKind::Bias => Tensor::zeros(s.shape),
            ParamKind::Norm if s.name.ends_with("gain") => Tensor::from_fn(s.shape, |_| T::one()),
            ParamKind::Norm => Tensor::zeros(s.shape),
        })
        .collect();
    BackboneParams::from_tensors(config.clone(), tensors)
}

/// Dropout state for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Eval,
    /// Training; every dropout site draws from a child of this stream.
    Train(&'a StreamKey),
}

pub struct TapeForward {
    /// Parameter leaves in [`param_specs`] order.
    pub params: Vec<Var>,
    /// Final-norm output, `[batch * seq, width]`.
    pub hidden: Var,
    /// `[batch * seq, vocab]`, absent when only features were requested.
    pub logits: Option<Var>,
}

fn flatten_batch<S: AsRef<[TokenId]>>(config: &BackboneConfig, batch: &[S]) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(batch.len() * config.seq_len);
    for seq in batch {
        let seq = seq.as_ref();
        if seq.len() != config.seq_len {
            return Err(Error::shape("forward", format!("sequence of length {}, expected {}", seq.len(), config.seq_len)));
        }
        for &t in seq {
            if t as usize >= config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t as usize,
                    vocab: config.vocab_size,
                });
            }
            ids.push(t as usize);
        }
    }
    Ok(ids)
}

/// Records the forward pass on `tape` with parameters as trainable leaves.
pub fn forward_tape<T: Real, S: AsRef<[TokenId]>>(
    tape: &mut Tape<T>,
    params: &BackboneParams<T>,
    batch: &[S],
    mode: Mode<'_>,
    with_logits: bool,
) -> Result<TapeForward> {
    let vars: Vec<Var> = params.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
    let (hidden, logits) = forward_with_vars(tape, &params.config, &vars, batch, mode, with_logits)?;
    Ok(TapeForward {
        params: vars,
        hidden,
        logits,
    })
}

/// Forward pass over externally supplied parameter leaves (in
/// [`param_specs`] order). Used by gradient checks.
pub fn forward_with_vars<T: Real, S: AsRef<[TokenId]>>(
    tape: &mut Tape<T>,
    config: &BackboneConfig,
    vars: &[Var],
    batch: &[S],
    mode: Mode<'_>,
    with_logits: bool,
) -> Result<(Var, Option<Var>)> {
    config.validate()?;
    let ids = flatten_batch(config, batch)?;
    let n = batch.len();
    let seq = config.seq_len;
    let (train, key) = match mode {
        Mode::Eval => (false, None),
        Mode::Train(k) => (true, Some(k)),
    };
    let site = |layer: usize, name: &str| match key {
        Some(k) => k.child(layer).child(name).rng(),
        None => StreamKey::root(0).rng(),
    };
    let positions: Vec<usize> = (0..n).flat_map(|_| 0..seq).collect();
    let tok = tape.embedding(vars[0], &ids)?;
    let pos = tape.embedding(vars[1], &positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..config.n_layers {
        let p = &vars[2 + 12 * l..2 + 12 * (l + 1)];
        let h = tape.layer_norm(x, p[0], p[1])?;
        let qkv = tape.matmul(h, p[2])?;
        let qkv = tape.add_row(qkv, p[3])?;
        let a = tape.causal_attention(qkv, n, seq, config.n_heads, config.dropout, train, &mut site(l, "attn"))?;
        let a = tape.matmul(a, p[4])?;
        let a = tape.add_row(a, p[5])?;
        let a = tape.dropout(a, config.dropout, train, &mut site(l, "attn-resid"))?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, p[6], p[7])?;
        let f = tape.matmul(h, p[8])?;
        let f = tape.add_row(f, p[9])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, p[10])?;
        let f = tape.add_row(f, p[11])?;
        let f = tape.dropout(f, config.dropout, train, &mut site(l, "mlp-resid"))?;
        x = tape.add(x, f)?;
    }
    let tail = 2 + 12 * config.n_layers;
    let hidden = tape.layer_norm(x, vars[tail], vars[tail + 1])?;
    let logits = if with_logits {
        let z = tape.matmul(hidden, vars[tail + 2])?;
        Some(tape.add_row(z, vars[tail + 3])?)
    } else {
        None
    };
    Ok((hidden, logits))
}

/// Logits `[batch * seq, vocab]` and final hidden states `[batch * seq, width]`.
pub fn forward<T: Real, S: AsRef<[TokenId]>>(
    params: &BackboneParams<T>,
    batch: &[S],
    mode: Mode<'_>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let out = forward_tape(&mut tape, params, batch, mode, true)?;
    let logits = tape.value(out.logits.expect("requested")).clone();
    Ok((logits, tape.value(out.hidden).clone()))
}

/// Next-token targets for a flattened batch: position `t` predicts token
/// `t + 1`; the last position of every sequence is ignored.
pub fn next_token_targets<S: AsRef<[TokenId]>>(batch: &[S]) -> Vec<usize> {
    let mut targets = Vec::new();
    for seq in batch {
        let seq = seq.as_ref();
        targets.extend(seq[1..].iter().map(|&t| t as usize));
        targets.push(IGNORE_TARGET);
    }
    targets
}

/// Mean next-token cross-entropy in nats over all predicted positions.
pub fn nll_loss<T: Real, S: AsRef<[TokenId]>>(logits: &Tensor<T>, batch: &[S]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = tape.cross_entropy(z, &next_token_targets(batch))?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Final hidden state at `position` of each sequence, computed in eval mode.
pub fn extract_rows<T: Real, S: AsRef<[TokenId]>>(
    params: &BackboneParams<T>,
    batch: &[S],
    position: usize,
) -> Result<Vec<Vec<T>>> {
    if position >= params.config.seq_len {
        return Err(Error::Config(format!("feature position {position} beyond sequence")));
    }
    let mut tape = Tape::new();
    let out = forward_tape(&mut tape, params, batch, Mode::Eval, false)?;
    let h = tape.value(out.hidden).data();
    let w = params.config.width;
    let seq = params.config.seq_len;
    Ok((0..batch.len())
        .map(|b| h[(b * seq + position) * w..(b * seq + position + 1) * w].to_vec())
        .collect())
}
