//! Encoder, memory tokens, pooling and classifier head, expressed as tape
//! operations so one code path serves training and inference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, PoolMode, Variant};
use super::params::{names, Params};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};
use crate::tokenizer::TokenSequence;

/// Inverted dropout with its own random stream.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng }
    }

    fn apply(&mut self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let keep = 1.0 - self.rate;
        let n = g.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

fn maybe_drop(g: &mut Graph<'_>, x: NodeId, dropout: &mut Option<&mut Dropout>) -> Result<NodeId> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

fn param<'a>(g: &mut Graph<'a>, params: &'a Params, name: &str) -> Result<NodeId> {
    let t = params
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
    Ok(g.param(name, t))
}

fn layer_norm<'a>(g: &mut Graph<'a>, params: &'a Params, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gain = param(g, params, &format!("{prefix}.gain"))?;
    let bias = param(g, params, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// `M_i = ReLU(X_f W_i + b_i)` for each memory slot, stacked as rows.
pub fn make_memory_tokens<'a>(
    g: &mut Graph<'a>,
    features: NodeId,
    cfg: &ModelConfig,
    params: &'a Params,
) -> Result<NodeId> {
    if cfg.variant != Variant::Vsi || cfg.n_memory == 0 {
        return Err(Error::Config(format!(
            "{} with n_memory {} has no memory tokens",
            cfg.variant, cfg.n_memory
        )));
    }
    let width = g.value(features).len();
    if width != cfg.d_features {
        return Err(Error::shape(
            "make_memory_tokens",
            format!("features have {width} entries, model expects {}", cfg.d_features),
        ));
    }
    let mut rows = Vec::with_capacity(cfg.n_memory);
    for i in 0..cfg.n_memory {
        let w = param(g, params, &names::memory_weight(i))?;
        let b = param(g, params, &names::memory_bias(i))?;
        let h = g.matmul(features, w)?;
        let h = g.add_row_bias(h, b)?;
        rows.push(g.relu(h)?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}

/// Pre-norm multi-head self-attention block with residual connection.
/// `key_valid[j]` says whether position `j` may be attended to.
pub fn attention_layer<'a>(
    g: &mut Graph<'a>,
    h: NodeId,
    key_valid: &[bool],
    layer: usize,
    cfg: &ModelConfig,
    params: &'a Params,
) -> Result<NodeId> {
    attention_block(g, h, key_valid, layer, cfg, params, &mut None)
}

fn attention_block<'a>(
    g: &mut Graph<'a>,
    h: NodeId,
    key_valid: &[bool],
    layer: usize,
    cfg: &ModelConfig,
    params: &'a Params,
    dropout: &mut Option<&mut Dropout>,
) -> Result<NodeId> {
    let n = g.value(h).rows();
    if key_valid.len() != n {
        return Err(Error::InvalidMask(format!("{} mask entries for {n} positions", key_valid.len())));
    }
    let x = layer_norm(g, params, h, &names::layer(layer, "attn_norm"))?;
    let wq = param(g, params, &names::layer(layer, "attn.query"))?;
    let wk = param(g, params, &names::layer(layer, "attn.key"))?;
    let wv = param(g, params, &names::layer(layer, "attn.value"))?;
    let wo = param(g, params, &names::layer(layer, "attn.output"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;

    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let (lo, hi) = (head * hd, (head + 1) * hd);
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_rows(scores, Some(Mask::key_padding(n, key_valid)))?;
        heads.push(g.matmul(attn, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = g.matmul(joined, wo)?;
    let out = maybe_drop(g, out, dropout)?;
    g.add(h, out)
}

/// Pre-norm GEGLU feed-forward block with residual connection.
fn feed_forward<'a>(
    g: &mut Graph<'a>,
    h: NodeId,
    layer: usize,
    params: &'a Params,
    dropout: &mut Option<&mut Dropout>,
) -> Result<NodeId> {
    let x = layer_norm(g, params, h, &names::layer(layer, "ffn_norm"))?;
    let w_gate = param(g, params, &names::layer(layer, "ffn.gate"))?;
    let w_lin = param(g, params, &names::layer(layer, "ffn.linear"))?;
    let w_out = param(g, params, &names::layer(layer, "ffn.output"))?;
    let gate = g.matmul(x, w_gate)?;
    let gate = g.gelu(gate)?;
    let lin = g.matmul(x, w_lin)?;
    let mixed = g.mul(gate, lin)?;
    let out = g.matmul(mixed, w_out)?;
    let out = maybe_drop(g, out, dropout)?;
    g.add(h, out)
}

/// Output of the encoder stack plus the positions pooling may read.
pub struct Encoded {
    pub hidden: NodeId,
    /// Unpadded positions, memory positions included.
    pub valid: Vec<bool>,
    pub query_positions: usize,
}

/// Runs the encoder over `ids` (one row per position). Memory tokens, when
/// the variant has them, are appended after the query rows and carry no
/// position embedding.
pub(crate) fn encode<'a>(
    g: &mut Graph<'a>,
    ids: &[u32],
    key_valid: &[bool],
    features: Option<NodeId>,
    cfg: &ModelConfig,
    params: &'a Params,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Encoded> {
    let mut rows = Vec::new();
    let mut valid = Vec::new();
    if !ids.is_empty() {
        if ids.len() > cfg.seq_len {
            return Err(Error::shape("encode", format!("{} tokens > seq_len {}", ids.len(), cfg.seq_len)));
        }
        let table = param(g, params, names::TOKEN_EMBEDDING)?;
        let positions = param(g, params, names::POSITION_EMBEDDING)?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = g.gather_rows(table, &idx)?;
        let pos_idx: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(positions, &pos_idx)?;
        rows.push(g.add(tok, pos)?);
        valid.extend_from_slice(key_valid);
    }
    if cfg.variant == Variant::Vsi && cfg.n_memory > 0 {
        let f = features.ok_or_else(|| Error::Data("vsi model needs a dense feature vector".into()))?;
        rows.push(make_memory_tokens(g, f, cfg, params)?);
        valid.extend(std::iter::repeat(true).take(cfg.n_memory));
    }
    if rows.is_empty() || !valid.iter().any(|&v| v) {
        return Err(Error::InvalidMask("no attendable position (empty query)".into()));
    }
    let mut h = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    h = maybe_drop(g, h, dropout)?;
    for layer in 0..cfg.n_layers {
        h = attention_block(g, h, &valid, layer, cfg, params, dropout)?;
        h = feed_forward(g, h, layer, params, dropout)?;
    }
    let hidden = layer_norm(g, params, h, "final_norm")?;
    Ok(Encoded {
        hidden,
        valid,
        query_positions: ids.len(),
    })
}

fn features_node(g: &mut Graph<'_>, cfg: &ModelConfig, features: Option<&Tensor>) -> Result<Option<NodeId>> {
    if !cfg.variant.uses_features() {
        return Ok(None);
    }
    let f = features.ok_or_else(|| Error::Data(format!("{} model needs a dense feature vector", cfg.variant)))?;
    if f.len() != cfg.d_features {
        return Err(Error::shape(
            "features",
            format!("{} entries, model expects {}", f.len(), cfg.d_features),
        ));
    }
    Ok(Some(g.constant(f.clone().reshape(vec![1, cfg.d_features])?)))
}

/// Full padded forward: returns the `(L + n_memory) x d_model` hidden states.
pub fn encoder_forward<'a>(
    g: &mut Graph<'a>,
    tokens: &TokenSequence,
    features: Option<&Tensor>,
    cfg: &ModelConfig,
    params: &'a Params,
) -> Result<NodeId> {
    if tokens.ids.len() != cfg.seq_len {
        return Err(Error::shape(
            "encoder_forward",
            format!("sequence length {} vs seq_len {}", tokens.ids.len(), cfg.seq_len),
        ));
    }
    let f = features_node(g, cfg, features)?;
    Ok(encode(g, &tokens.ids, &tokens.mask, f, cfg, params, &mut None)?.hidden)
}

/// Mean over the rows flagged in `valid`.
pub fn pool(g: &mut Graph<'_>, hidden: NodeId, valid: &[bool]) -> Result<NodeId> {
    let rows: Vec<usize> = valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::InvalidMask("pooling over an empty mask".into()));
    }
    g.mean_rows(hidden, &rows)
}

/// Classifier MLP: `n_mlp_layers` GELU layers of width `d_model`, then a
/// linear map to `n_class` logits. Late fusion feeds `[pooled, X_f]`.
pub fn classify<'a>(
    g: &mut Graph<'a>,
    pooled: NodeId,
    features: Option<NodeId>,
    cfg: &ModelConfig,
    params: &'a Params,
) -> Result<NodeId> {
    let mut h = match cfg.variant {
        Variant::LateFusion => {
            let f = features.ok_or_else(|| Error::Data("late fusion needs a dense feature vector".into()))?;
            if g.value(f).len() != cfg.d_features {
                return Err(Error::shape("classify", "feature width does not match d_features"));
            }
            g.concat_cols(&[pooled, f])?
        }
        _ => pooled,
    };
    for j in 0..cfg.n_mlp_layers {
        let w = param(g, params, &names::head_hidden_weight(j))?;
        let b = param(g, params, &names::head_hidden_bias(j))?;
        h = g.matmul(h, w)?;
        h = g.add_row_bias(h, b)?;
        h = g.gelu(h)?;
    }
    let w = param(g, params, names::HEAD_OUTPUT_WEIGHT)?;
    let b = param(g, params, names::HEAD_OUTPUT_BIAS)?;
    let logits = g.matmul(h, w)?;
    g.add_row_bias(logits, b)
}

/// Softmax cross-entropy for one example.
pub fn loss(g: &mut Graph<'_>, logits: NodeId, label: u8) -> Result<NodeId> {
    if label > 1 {
        return Err(Error::Data(format!("label {label} is not 0 or 1")));
    }
    g.cross_entropy(logits, label as usize)
}

/// Logits for one example.
///
/// With `compact` set, padded positions are dropped before the encoder runs.
/// Padding is never attended to and never pooled, so both routes give the
/// same logits; the compact one is cheaper.
pub fn example_logits<'a>(
    g: &mut Graph<'a>,
    tokens: &TokenSequence,
    features: Option<&Tensor>,
    cfg: &ModelConfig,
    params: &'a Params,
    compact: bool,
    dropout: &mut Option<&mut Dropout>,
) -> Result<NodeId> {
    let f = features_node(g, cfg, features)?;
    let enc = if compact {
        let n = tokens.real_len();
        encode(g, &tokens.ids[..n], &tokens.mask[..n], f, cfg, params, dropout)?
    } else {
        encode(g, &tokens.ids, &tokens.mask, f, cfg, params, dropout)?
    };
    let mut valid = enc.valid.clone();
    if cfg.pool == PoolMode::QueryPositions {
        for v in valid.iter_mut().skip(enc.query_positions) {
            *v = false;
        }
    }
    let pooled = pool(g, enc.hidden, &valid)?;
    classify(g, pooled, f, cfg, params)
}
