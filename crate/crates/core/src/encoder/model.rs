use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::prompt::TokenSequence;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Tensors per transformer block, in checkpoint order.
pub const TENSORS_PER_LAYER: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    /// Depth the retrieval embedding is read from.
    pub k: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.max_seq == 0 || self.n_heads == 0 {
            return Err(Error::config("encoder extents must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k < 1 || self.k > self.n_layers {
            return Err(Error::config(format!(
                "retained depth k={} outside 1..={}",
                self.k, self.n_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; TENSORS_PER_LAYER] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn from_tensors(mut it: impl Iterator<Item = Tensor>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            w_q: it.next()?,
            w_k: it.next()?,
            w_v: it.next()?,
            w_o: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w_ff1: it.next()?,
            b_ff1: it.next()?,
            w_ff2: it.next()?,
            b_ff2: it.next()?,
        })
    }
}

/// Layer-stacked transformer retriever.
///
/// Parameters are ordered token table, positional table, then each block's
/// twelve tensors in [`LayerWeights`] field order. That order is the one used
/// by checkpoints, optimizers and gradient maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<LayerWeights>,
}

/// Graph handles for every parameter of an [`Encoder`], in parameter order.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    vars: Vec<Var>,
}

impl EncoderVars {
    pub fn as_slice(&self) -> &[Var] {
        &self.vars
    }

    fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, l: usize) -> &[Var] {
        let start = 2 + l * TENSORS_PER_LAYER;
        &self.vars[start..start + TENSORS_PER_LAYER]
    }
}

fn shape_of(config: &EncoderConfig, index: usize) -> Vec<usize> {
    let d = config.d_model;
    let f = config.ffn_dim();
    match index {
        0 => vec![config.vocab_size, d],
        1 => vec![config.max_seq, d],
        i => match (i - 2) % TENSORS_PER_LAYER {
            0 | 1 | 6 | 7 | 11 => vec![d],
            2..=5 => vec![d, d],
            8 => vec![d, f],
            9 => vec![f],
            10 => vec![f, d],
            _ => unreachable!(),
        },
    }
}

impl Encoder {
    /// Seeded initialization: embeddings ~ N(0, 1), positions ~ N(0, 0.1²),
    /// projections ~ N(0, 1/fan_in), residual outputs additionally scaled by
    /// 1/sqrt(2·n_layers), layer-norm gains 1 and biases 0.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: Vec<usize>, std: f64| -> Result<Tensor> {
            let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
        };
        let d = config.d_model;
        let f = config.ffn_dim();
        let residual = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let tok_emb = normal(vec![config.vocab_size, d], 1.0)?;
        let pos_emb = normal(vec![config.max_seq, d], 0.1)?;
        let proj = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: Tensor::filled(&[d], 1.0)?,
                ln1_bias: Tensor::zeros(&[d])?,
                w_q: normal(vec![d, d], proj)?,
                w_k: normal(vec![d, d], proj)?,
                w_v: normal(vec![d, d], proj)?,
                w_o: normal(vec![d, d], proj * residual)?,
                ln2_gain: Tensor::filled(&[d], 1.0)?,
                ln2_bias: Tensor::zeros(&[d])?,
                w_ff1: normal(vec![d, f], proj)?,
                b_ff1: Tensor::zeros(&[f])?,
                w_ff2: normal(vec![f, d], residual / (f as f64).sqrt())?,
                b_ff2: Tensor::zeros(&[d])?,
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
        })
    }

    /// Rebuilds an encoder from tensors in parameter order.
    pub fn from_params(config: EncoderConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = 2 + config.n_layers * TENSORS_PER_LAYER;
        if params.len() != expected {
            return Err(Error::dim("from_params", &[expected], &[params.len()]));
        }
        for (i, p) in params.iter().enumerate() {
            let want = shape_of(&config, i);
            if p.shape() != want.as_slice() {
                return Err(Error::dim("from_params", &want, p.shape()));
            }
        }
        let mut it = params.into_iter();
        let tok_emb = it.next().expect("counted");
        let pos_emb = it.next().expect("counted");
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::from_tensors(&mut it).expect("counted"))
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
        })
    }

    /// Shapes of all parameters in parameter order.
    pub fn param_shapes(config: &EncoderConfig) -> Vec<Vec<usize>> {
        (0..2 + config.n_layers * TENSORS_PER_LAYER)
            .map(|i| shape_of(config, i))
            .collect()
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Same weights, different read-out depth.
    pub fn with_depth(&self, k: usize) -> Result<Self> {
        let mut config = self.config;
        config.k = k;
        config.validate()?;
        Ok(Self {
            config,
            ..self.clone()
        })
    }

    /// Records every parameter as a leaf; `tracked` selects whether the
    /// leaves receive gradients.
    pub fn register(&self, g: &mut Graph, tracked: bool) -> EncoderVars {
        let vars = self
            .params()
            .into_iter()
            .map(|t| {
                if tracked {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        EncoderVars { vars }
    }

    /// Uses leaves already on a graph, one per parameter in parameter order.
    pub fn bind(&self, vars: &[Var]) -> Result<EncoderVars> {
        let expected = 2 + TENSORS_PER_LAYER * self.layers.len();
        if vars.len() != expected {
            return Err(Error::dim("Encoder::bind", &[vars.len()], &[expected]));
        }
        Ok(EncoderVars {
            vars: vars.to_vec(),
        })
    }

    /// Hidden states `[len × d_model]` after `upto` blocks, recorded on `g`.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        vars: &EncoderVars,
        tokens: &TokenSequence,
        upto: usize,
    ) -> Result<Var> {
        if upto < 1 || upto > self.config.n_layers {
            return Err(Error::contract(format!(
                "forward depth {upto} outside 1..={}",
                self.config.n_layers
            )));
        }
        let len = tokens.len();
        if len > self.config.max_seq {
            return Err(Error::Length(format!(
                "sequence of {len} tokens exceeds max_seq {}",
                self.config.max_seq
            )));
        }
        let ids: Vec<usize> = tokens.ids().iter().map(|&t| t as usize).collect();
        let tok = g.gather_rows(vars.tok_emb(), &ids)?;
        let pos = g.slice_rows(vars.pos_emb(), 0, len)?;
        let mut h = g.add(tok, pos)?;
        for l in 0..upto {
            h = self.block(g, vars.layer(l), h)?;
        }
        Ok(h)
    }

    fn block(&self, g: &mut Graph, w: &[Var], h: Var) -> Result<Var> {
        let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2] =
            <[Var; TENSORS_PER_LAYER]>::try_from(w).expect("block slice");
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let x = g.layer_norm_rows(h, ln1_g, ln1_b, LN_EPS)?;
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for head in 0..self.config.n_heads {
            let (qh, kh, vh) = if self.config.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, head * dh, dh)?,
                    g.slice_cols(k, head * dh, dh)?,
                    g.slice_cols(v, head * dh, dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn_out = g.matmul(merged, wo)?;
        let h = g.add(h, attn_out)?;

        let x = g.layer_norm_rows(h, ln2_g, ln2_b, LN_EPS)?;
        let f = g.matmul(x, w1)?;
        let f = g.add_row(f, b1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, b2)?;
        g.add(h, f)
    }

    /// Hidden states after `upto` blocks, without gradient tracking.
    pub fn forward(&self, tokens: &TokenSequence, upto: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let h = self.forward_on(&mut g, &vars, tokens, upto)?;
        Ok(g.value(h).clone())
    }

    /// [RET] embedding at the configured depth `k`.
    pub fn embed(&self, tokens: &TokenSequence) -> Result<Embedding> {
        let hidden = self.forward(tokens, self.config.k)?;
        extract_ret_embedding(&hidden, tokens, self.config.k)
    }
}

/// Hidden state of the [RET] token, tagged with the layer it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub source_layer: usize,
}

/// Returns the hidden row at the [RET] position, un-normalized.
pub fn extract_ret_embedding(
    hidden: &Tensor,
    tokens: &TokenSequence,
    source_layer: usize,
) -> Result<Embedding> {
    let (rows, _) = hidden.dims2()?;
    if rows != tokens.len() {
        return Err(Error::dim("extract_ret_embedding", hidden.shape(), &[tokens.len()]));
    }
    Ok(Embedding {
        vector: hidden.row(tokens.ret_position()).to_vec(),
        source_layer,
    })
}

/// Keeps the first `k` blocks; weights are deep-copied so the result never
/// shares buffers with `encoder`.
pub fn prune(encoder: &Encoder, k: usize) -> Result<Encoder> {
    if k < 1 || k > encoder.config.n_layers {
        return Err(Error::contract(format!(
            "prune depth {k} outside 1..={}",
            encoder.config.n_layers
        )));
    }
    let copy = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.to_vec()).expect("same shape");
    let config = EncoderConfig {
        n_layers: k,
        k: encoder.config.k.min(k),
        ..encoder.config
    };
    let mut params: Vec<Tensor> = vec![copy(&encoder.tok_emb), copy(&encoder.pos_emb)];
    for layer in &encoder.layers[..k] {
        params.extend(layer.tensors().into_iter().map(copy));
    }
    Encoder::from_params(config, params)
}
