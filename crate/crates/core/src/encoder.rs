//! A small BERT-style encoder: learned token and position embeddings,
//! post-norm self-attention blocks, and a dense+tanh pooler over the
//! sequence-start token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamRole, ParamStore, Tensor};

/// Token id reserved for padding; padded positions are masked out of attention.
pub const PAD_ID: u32 = 0;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 64 wide, 4 heads, 6 layers, 250 tokens, dropout 0.4.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 6,
            d_ff: 256,
            max_len: 250,
            dropout: 0.4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len {} < 3", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub attn_norm_gain: ParamId,
    pub attn_norm_bias: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub ffn_norm_gain: ParamId,
    pub ffn_norm_bias: ParamId,
}

/// Handles to the encoder's arrays inside a [`ParamStore`]. Dense weights are
/// stored `[out × in]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub embed_norm_gain: ParamId,
    pub embed_norm_bias: ParamId,
    pub layers: Vec<LayerParams>,
    pub pooler_weight: ParamId,
    pub pooler_bias: ParamId,
}

struct Init<'s, R: Rng + ?Sized> {
    store: &'s mut ParamStore,
    rng: &'s mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn weight(&mut self, name: String, role: ParamRole, shape: &[usize]) -> ParamId {
        let t = Tensor::normal(shape, INIT_STD, self.rng);
        self.store.add(name, role, true, t)
    }

    fn bias(&mut self, name: String, role: ParamRole, d: usize) -> ParamId {
        self.store.add(name, role, false, Tensor::zeros(&[d]))
    }

    fn gain(&mut self, name: String, role: ParamRole, d: usize) -> ParamId {
        self.store.add(name, role, false, Tensor::filled(&[d], 1.0))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    /// Allocates and initializes all encoder and pooler parameters in `store`.
    /// Weights are drawn from N(0, 0.02²); biases start at zero and norm gains
    /// at one.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, ff) = (config.d_model, config.d_ff);
        let mut init = Init { store, rng };
        let emb = ParamRole::Embeddings;
        let token_embedding = init.weight("embeddings.token".into(), emb, &[config.vocab_size, d]);
        let position_embedding = init.weight("embeddings.position".into(), emb, &[config.max_len, d]);
        let embed_norm_gain = init.gain("embeddings.norm.gain".into(), emb, d);
        let embed_norm_bias = init.bias("embeddings.norm.bias".into(), emb, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let r = ParamRole::Layer(l);
            let p = |s: &str| format!("layer.{l}.{s}");
            layers.push(LayerParams {
                wq: init.weight(p("attn.query.weight"), r, &[d, d]),
                bq: init.bias(p("attn.query.bias"), r, d),
                wk: init.weight(p("attn.key.weight"), r, &[d, d]),
                bk: init.bias(p("attn.key.bias"), r, d),
                wv: init.weight(p("attn.value.weight"), r, &[d, d]),
                bv: init.bias(p("attn.value.bias"), r, d),
                wo: init.weight(p("attn.output.weight"), r, &[d, d]),
                bo: init.bias(p("attn.output.bias"), r, d),
                attn_norm_gain: init.gain(p("attn.norm.gain"), r, d),
                attn_norm_bias: init.bias(p("attn.norm.bias"), r, d),
                w_in: init.weight(p("ffn.in.weight"), r, &[ff, d]),
                b_in: init.bias(p("ffn.in.bias"), r, ff),
                w_out: init.weight(p("ffn.out.weight"), r, &[d, ff]),
                b_out: init.bias(p("ffn.out.bias"), r, d),
                ffn_norm_gain: init.gain(p("ffn.norm.gain"), r, d),
                ffn_norm_bias: init.bias(p("ffn.norm.bias"), r, d),
            });
        }
        let pooler_weight = init.weight("pooler.weight".into(), ParamRole::Pooler, &[d, d]);
        let pooler_bias = init.bias("pooler.bias".into(), ParamRole::Pooler, d);
        Ok(Encoder {
            config,
            params: EncoderParams {
                token_embedding,
                position_embedding,
                embed_norm_gain,
                embed_norm_bias,
                layers,
                pooler_weight,
                pooler_bias,
            },
        })
    }

    /// Last-layer representation of the sequence-start token, shape `[d_model]`.
    ///
    /// `tokens` must already carry the start/end markers; [`PAD_ID`] positions
    /// are excluded from attention so trailing padding never changes the result.
    pub fn encode<'a, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &[u32],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.encode_traced(tape, store, tokens, train, rng, None)
    }

    /// Like [`Encoder::encode`], additionally pushing every per-head attention
    /// probability matrix onto `trace`.
    pub fn encode_traced<'a, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &[u32],
        train: bool,
        rng: &mut R,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let len = tokens.len();
        if len == 0 {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if len > cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence of {len} tokens exceeds max_len {}",
                cfg.max_len
            )));
        }
        let keep: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        if !keep[0] {
            return Err(Error::Contract("sequence starts with padding".into()));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..len).collect();
        let p = &self.params;

        let table = tape.param(store, p.token_embedding);
        let tok = tape.gather(table, &ids)?;
        let pos_table = tape.param(store, p.position_embedding);
        let pos = tape.gather(pos_table, &positions)?;
        let x = tape.add(tok, pos)?;
        let (g, b) = (tape.param(store, p.embed_norm_gain), tape.param(store, p.embed_norm_bias));
        let x = tape.layer_norm(x, g, b)?;
        let mut x = tape.dropout(x, cfg.dropout, train, rng)?;

        for (l, layer) in p.layers.iter().enumerate() {
            // Only the start row of the final layer is read downstream.
            let cls_only = l + 1 == p.layers.len();
            x = self.block(tape, store, layer, x, &keep, cls_only, train, rng, trace.as_deref_mut())?;
        }
        let cls = tape.rows(x, 0, 1)?;
        tape.reshape(cls, &[cfg.d_model])
    }

    #[allow(clippy::too_many_arguments)]
    fn block<'a, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        lp: &LayerParams,
        x: Var,
        keep: &[bool],
        cls_only: bool,
        train: bool,
        rng: &mut R,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let rate = cfg.dropout;
        let query_in = if cls_only { tape.rows(x, 0, 1)? } else { x };
        let q = linear(tape, store, query_in, lp.wq, lp.bq)?;
        let k = linear(tape, store, x, lp.wk, lp.bk)?;
        let v = linear(tape, store, x, lp.wv, lp.bv)?;
        let ctx = attention(tape, q, k, v, keep, cfg.n_heads, trace)?;
        let attn = linear(tape, store, ctx, lp.wo, lp.bo)?;
        let attn = tape.dropout(attn, rate, train, rng)?;
        let res = tape.add(query_in, attn)?;
        let (g, b) = (tape.param(store, lp.attn_norm_gain), tape.param(store, lp.attn_norm_bias));
        let h = tape.layer_norm(res, g, b)?;

        let inner = linear(tape, store, h, lp.w_in, lp.b_in)?;
        let inner = tape.gelu(inner);
        let out = linear(tape, store, inner, lp.w_out, lp.b_out)?;
        let out = tape.dropout(out, rate, train, rng)?;
        let res = tape.add(h, out)?;
        let (g, b) = (tape.param(store, lp.ffn_norm_gain), tape.param(store, lp.ffn_norm_bias));
        tape.layer_norm(res, g, b)
    }

    /// `tanh(W h + b)` on a `[d_model]` representation.
    pub fn pooler<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, h: Var) -> Result<Var> {
        let d = self.config.d_model;
        let row = tape.reshape(h, &[1, d])?;
        let z = linear(tape, store, row, self.params.pooler_weight, self.params.pooler_bias)?;
        let t = tape.tanh(z);
        tape.reshape(t, &[d])
    }
}

/// `x · Wᵀ + b` with `W` stored `[out × in]`.
pub fn linear<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let y = tape.matmul_t(x, wv)?;
    tape.add_row(y, bv)
}

/// Multi-head scaled dot-product attention; `q` may have fewer rows than `k`.
fn attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    keep: &[bool],
    n_heads: usize,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.masked_softmax(scores, keep)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(probs);
        }
        heads.push(tape.matmul(probs, vh)?);
    }
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    tape.concat_cols(&heads)
}
