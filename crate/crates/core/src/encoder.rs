//! Small pre-norm transformer encoder with exact reverse-mode gradients.
//!
//! token + learned position embeddings → `layers` × (LN → multi-head
//! self-attention → residual, LN → GELU feed-forward → residual) → final LN
//! → mean over the non-PAD positions.
//!
//! PAD positions are excluded from attention keys and from pooling, so only
//! the `attention_length` prefix of a sequence is ever computed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, LayerNormCache,
    Scalar, Tensor,
};
use crate::tokenizer::TokenSequence;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("token id {id} at position {pos} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, pos: usize, vocab_size: usize },
    #[error("sequence length {got} does not match max_len {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.into()));
        if self.vocab_size == 0 || self.dim == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("vocab_size, dim, heads and ffn_mult must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.dim * self.ffn_mult
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2)
    };
}

impl<T: Scalar> LayerParams<T> {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let f = cfg.ffn_dim();
        let w = |rows, cols, rng: &mut ChaCha8Rng| Tensor::randn(&[rows, cols], INIT_STD, rng);
        Self {
            ln1_g: Tensor::full(&[d], T::one()),
            ln1_b: Tensor::zeros(&[d]),
            wq: w(d, d, rng),
            bq: Tensor::zeros(&[d]),
            wk: w(d, d, rng),
            bk: Tensor::zeros(&[d]),
            wv: w(d, d, rng),
            bv: Tensor::zeros(&[d]),
            wo: w(d, d, rng),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], T::one()),
            ln2_b: Tensor::zeros(&[d]),
            w1: w(d, f, rng),
            b1: Tensor::zeros(&[f]),
            w2: w(f, d, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &self.$f)),*] };
        }
        layer_fields!(list)
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &mut self.$f)),*] };
        }
        layer_fields!(list)
    }
}

/// Trainable encoder state.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
}

/// Pooled encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T>(pub Vec<T>);

impl<T> EmbeddingVector<T> {
    pub fn values(&self) -> &[T] {
        &self.0
    }
}

/// Scaled-normal weights, unit layer-norm gains, zero biases.
pub fn init_params<T: Scalar>(config: EncoderConfig, seed: u64) -> Result<EncoderParams<T>, EncoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.dim;
    let tok_emb = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
    let pos_emb = Tensor::randn(&[config.max_len, d], INIT_STD, &mut rng);
    let layers = (0..config.layers)
        .map(|_| LayerParams::init(&config, &mut rng))
        .collect();
    Ok(EncoderParams {
        config,
        tok_emb,
        pos_emb,
        layers,
        lnf_g: Tensor::full(&[d], T::one()),
        lnf_b: Tensor::zeros(&[d]),
    })
}

struct LayerTrace<T> {
    ln1: LayerNormCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, `heads × n × n`.
    probs: Vec<T>,
    o: Vec<T>,
    ln2: LayerNormCache<T>,
    c: Vec<T>,
    u: Vec<T>,
    z: Vec<T>,
}

/// Activations saved by [`EncoderParams::forward_traced`] for the backward pass.
pub struct EncoderTrace<T> {
    ids: Vec<u32>,
    layers: Vec<LayerTrace<T>>,
    lnf: LayerNormCache<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, t| t.data.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    macro_rules! cast {
                        ($($f:ident),*) => { LayerParams { $($f: l.$f.cast()),* } };
                    }
                    layer_fields!(cast)
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(String, &Tensor<T>)) {
        f("tok_emb".into(), &self.tok_emb);
        f("pos_emb".into(), &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.tensors() {
                f(format!("layers.{i}.{name}"), t);
            }
        }
        f("lnf_g".into(), &self.lnf_g);
        f("lnf_b".into(), &self.lnf_b);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor<T>)) {
        f("tok_emb".into(), &mut self.tok_emb);
        f("pos_emb".into(), &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in l.tensors_mut() {
                f(format!("layers.{i}.{name}"), t);
            }
        }
        f("lnf_g".into(), &mut self.lnf_g);
        f("lnf_b".into(), &mut self.lnf_b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<EmbeddingVector<T>, EncoderError> {
        self.forward_traced(seq).map(|(e, _)| e)
    }

    pub fn forward_traced(
        &self,
        seq: &TokenSequence,
    ) -> Result<(EmbeddingVector<T>, EncoderTrace<T>), EncoderError> {
        let cfg = &self.config;
        if seq.ids.len() != cfg.max_len {
            return Err(EncoderError::LengthMismatch {
                got: seq.ids.len(),
                expected: cfg.max_len,
            });
        }
        let ids = seq.active().to_vec();
        let d = cfg.dim;
        let n = ids.len();
        let mut x = Vec::with_capacity(n * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(EncoderError::TokenOutOfRange {
                    id,
                    pos,
                    vocab_size: cfg.vocab_size,
                });
            }
            let tok = &self.tok_emb.data[id as usize * d..(id as usize + 1) * d];
            let p = &self.pos_emb.data[pos * d..(pos + 1) * d];
            x.extend(tok.iter().zip(p).map(|(&a, &b)| a + b));
        }

        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, trace) = self.layer_forward(layer, x, n);
            traces.push(trace);
            x = next;
        }
        let (y, lnf) = layer_norm(&x, d, &self.lnf_g.data, &self.lnf_b.data);
        let mut pooled = vec![T::zero(); d];
        for row in y.chunks(d) {
            for (p, &v) in pooled.iter_mut().zip(row) {
                *p = *p + v;
            }
        }
        let nt = T::of(n.max(1) as f64);
        pooled.iter_mut().for_each(|p| *p = *p / nt);
        Ok((
            EmbeddingVector(pooled),
            EncoderTrace {
                ids,
                layers: traces,
                lnf,
            },
        ))
    }

    fn layer_forward(&self, l: &LayerParams<T>, x: Vec<T>, n: usize) -> (Vec<T>, LayerTrace<T>) {
        let cfg = &self.config;
        let d = cfg.dim;
        let f = cfg.ffn_dim();
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let (a, ln1) = layer_norm(&x, d, &l.ln1_g.data, &l.ln1_b.data);
        let q = linear(&a, n, d, &l.wq.data, &l.bq.data, d);
        let k = linear(&a, n, d, &l.wk.data, &l.bk.data, d);
        let v = linear(&a, n, d, &l.wv.data, &l.bv.data, d);

        let mut probs = vec![T::zero(); heads * n * n];
        let mut o = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let qi = &q[i * d + off..i * d + off + dh];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let dot = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                }
                for s in row.iter_mut() {
                    *s = *s / sum;
                }
                let oi = &mut o[i * d + off..i * d + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (ot, &vt) in oi.iter_mut().zip(vj) {
                        *ot = *ot + p * vt;
                    }
                }
            }
        }
        let attn = linear(&o, n, d, &l.wo.data, &l.bo.data, d);
        let h1: Vec<T> = x.iter().zip(&attn).map(|(&a, &b)| a + b).collect();

        let (c, ln2) = layer_norm(&h1, d, &l.ln2_g.data, &l.ln2_b.data);
        let u = linear(&c, n, d, &l.w1.data, &l.b1.data, f);
        let z: Vec<T> = u.iter().map(|&x| gelu(x)).collect();
        let ffn = linear(&z, n, f, &l.w2.data, &l.b2.data, d);
        let out: Vec<T> = h1.iter().zip(&ffn).map(|(&a, &b)| a + b).collect();

        (
            out,
            LayerTrace {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                c,
                u,
                z,
            },
        )
    }

    /// Accumulate into `grads` the gradient of `<upstream, embedding>`.
    pub fn backward(&self, trace: &EncoderTrace<T>, upstream: &[T], grads: &mut EncoderParams<T>) {
        let cfg = &self.config;
        let d = cfg.dim;
        let n = trace.ids.len();
        let nt = T::of(n.max(1) as f64);
        let mut dy = Vec::with_capacity(n * d);
        for _ in 0..n {
            dy.extend(upstream.iter().map(|&g| g / nt));
        }
        let mut dx = layer_norm_backward(
            &dy,
            d,
            &trace.lnf,
            &self.lnf_g.data,
            &mut grads.lnf_g.data,
            &mut grads.lnf_b.data,
        );
        for ((layer, lt), lg) in self
            .layers
            .iter()
            .zip(&trace.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            dx = self.layer_backward(layer, lt, lg, dx, n);
        }
        for (pos, &id) in trace.ids.iter().enumerate() {
            let g = &dx[pos * d..(pos + 1) * d];
            let tok = &mut grads.tok_emb.data[id as usize * d..(id as usize + 1) * d];
            for (t, &v) in tok.iter_mut().zip(g) {
                *t = *t + v;
            }
            let p = &mut grads.pos_emb.data[pos * d..(pos + 1) * d];
            for (t, &v) in p.iter_mut().zip(g) {
                *t = *t + v;
            }
        }
    }

    fn layer_backward(
        &self,
        l: &LayerParams<T>,
        t: &LayerTrace<T>,
        g: &mut LayerParams<T>,
        dout: Vec<T>,
        n: usize,
    ) -> Vec<T> {
        let cfg = &self.config;
        let d = cfg.dim;
        let f = cfg.ffn_dim();
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());

        // Feed-forward branch.
        let dz = linear_backward(&t.z, &dout, n, f, d, &l.w2.data, &mut g.w2.data, &mut g.b2.data);
        let du: Vec<T> = dz.iter().zip(&t.u).map(|(&dz, &u)| dz * gelu_grad(u)).collect();
        let dc = linear_backward(&t.c, &du, n, d, f, &l.w1.data, &mut g.w1.data, &mut g.b1.data);
        let dln2 = layer_norm_backward(&dc, d, &t.ln2, &l.ln2_g.data, &mut g.ln2_g.data, &mut g.ln2_b.data);
        let dh1: Vec<T> = dout.iter().zip(&dln2).map(|(&a, &b)| a + b).collect();

        // Attention branch.
        let do_ = linear_backward(&t.o, &dh1, n, d, d, &l.wo.data, &mut g.wo.data, &mut g.bo.data);
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &t.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let doi = &do_[i * d + off..i * d + off + dh];
                let mut dot_pdp = T::zero();
                for j in 0..n {
                    let vj = &t.v[j * d + off..j * d + off + dh];
                    dp[j] = doi.iter().zip(vj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    dot_pdp = dot_pdp + p[j] * dp[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (dvt, &dot) in dvj.iter_mut().zip(doi) {
                        *dvt = *dvt + p[j] * dot;
                    }
                }
                for j in 0..n {
                    let ds = p[j] * (dp[j] - dot_pdp) * scale;
                    for tt in 0..dh {
                        dq[i * d + off + tt] = dq[i * d + off + tt] + ds * t.k[j * d + off + tt];
                        dk[j * d + off + tt] = dk[j * d + off + tt] + ds * t.q[i * d + off + tt];
                    }
                }
            }
        }
        let da_q = linear_backward(&t.a, &dq, n, d, d, &l.wq.data, &mut g.wq.data, &mut g.bq.data);
        let da_k = linear_backward(&t.a, &dk, n, d, d, &l.wk.data, &mut g.wk.data, &mut g.bk.data);
        let da_v = linear_backward(&t.a, &dv, n, d, d, &l.wv.data, &mut g.wv.data, &mut g.bv.data);
        let da: Vec<T> = da_q
            .iter()
            .zip(&da_k)
            .zip(&da_v)
            .map(|((&a, &b), &c)| a + b + c)
            .collect();
        let dln1 = layer_norm_backward(&da, d, &t.ln1, &l.ln1_g.data, &mut g.ln1_g.data, &mut g.ln1_b.data);
        dh1.iter().zip(&dln1).map(|(&a, &b)| a + b).collect()
    }
}
