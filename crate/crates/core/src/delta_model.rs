//! Encoder(s) → fusion → two-layer tanh head → probability, for all six
//! representation variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change_builder::{render_variant_input, ContextualChange, Variant};
use crate::encoder::{init_params, EmbeddingVector, EncoderConfig, EncoderError, EncoderParams, EncoderTrace, INIT_STD};
use crate::repo_miner::Label;
use crate::tensor::{sigmoid, Scalar, Tensor};
use crate::tokenizer::{encode, encode_pair, TokenSequence, TokenizerError, Vocabulary};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("input was prepared for {input} but the model is {model}")]
    VariantMismatch { input: Variant, model: Variant },
    #[error("fusion inputs have different widths: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    Subtract,
    Concat,
    SingleStream,
}

impl FusionMode {
    pub fn of(variant: Variant) -> Self {
        match variant {
            Variant::EmbedSubtractDuo | Variant::EmbedSubtractSingle => FusionMode::Subtract,
            Variant::EmbedConcatDuo => FusionMode::Concat,
            Variant::CodeConcat | Variant::CodeConcatNoContext | Variant::RawGitDiff => {
                FusionMode::SingleStream
            }
        }
    }

    pub fn output_width(self, dim: usize) -> usize {
        match self {
            FusionMode::Concat => 2 * dim,
            FusionMode::Subtract | FusionMode::SingleStream => dim,
        }
    }
}

/// Fused representation fed to the head.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRepresentation<T>(pub Vec<T>);

/// `Subtract`: `before - after`; `Concat`: `[before ; after]`.
pub fn fuse<T: Scalar>(
    before: &EmbeddingVector<T>,
    after: &EmbeddingVector<T>,
    mode: FusionMode,
) -> Result<DeltaRepresentation<T>, ModelError> {
    match mode {
        FusionMode::Subtract => {
            if before.0.len() != after.0.len() {
                return Err(ModelError::DimMismatch(before.0.len(), after.0.len()));
            }
            Ok(DeltaRepresentation(
                before.0.iter().zip(&after.0).map(|(&b, &a)| b - a).collect(),
            ))
        }
        FusionMode::Concat => {
            let mut v = before.0.clone();
            v.extend_from_slice(&after.0);
            Ok(DeltaRepresentation(v))
        }
        FusionMode::SingleStream => Err(ModelError::Unsupported(
            "single-stream models have nothing to fuse".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
}

impl ModelConfig {
    /// Head hidden width equal to the encoder width.
    pub fn new(variant: Variant, encoder: EncoderConfig) -> Self {
        Self {
            variant,
            encoder,
            head_hidden: encoder.dim,
        }
    }

    pub fn fusion(&self) -> FusionMode {
        FusionMode::of(self.variant)
    }
}

/// Feed-forward classification head: `w2 · tanh(w1ᵀ x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `fusion_width × hidden`.
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `hidden × 1`.
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> HeadParams<T> {
    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: Tensor::randn(&[input, hidden], INIT_STD, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, 1], INIT_STD, rng),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape[0]
    }

    fn hidden(&self) -> usize {
        self.w1.shape[1]
    }

    fn cast<U: Scalar>(&self) -> HeadParams<U> {
        HeadParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    fn visit(&self, mut f: impl FnMut(&'static str, &Tensor<T>)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor<T>)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }

    /// Returns `(hidden activations, logit)`.
    fn forward(&self, x: &[T]) -> (Vec<T>, T) {
        let h = self.hidden();
        let mut z = self.b1.data.clone();
        for (i, &xv) in x.iter().enumerate() {
            let row = &self.w1.data[i * h..(i + 1) * h];
            for (zj, &w) in z.iter_mut().zip(row) {
                *zj = *zj + xv * w;
            }
        }
        z.iter_mut().for_each(|v| *v = v.tanh());
        let logit = z
            .iter()
            .zip(&self.w2.data)
            .fold(self.b2.data[0], |acc, (&a, &b)| acc + a * b);
        (z, logit)
    }

    /// Accumulates parameter gradients; returns d logit / d x scaled by `dlogit`.
    fn backward(&self, x: &[T], z: &[T], dlogit: T, grads: &mut HeadParams<T>) -> Vec<T> {
        let h = self.hidden();
        grads.b2.data[0] = grads.b2.data[0] + dlogit;
        let mut dpre = vec![T::zero(); h];
        for j in 0..h {
            grads.w2.data[j] = grads.w2.data[j] + z[j] * dlogit;
            dpre[j] = self.w2.data[j] * dlogit * (T::one() - z[j] * z[j]);
            grads.b1.data[j] = grads.b1.data[j] + dpre[j];
        }
        let mut dx = vec![T::zero(); x.len()];
        for (i, &xv) in x.iter().enumerate() {
            let row = &self.w1.data[i * h..(i + 1) * h];
            let grow = &mut grads.w1.data[i * h..(i + 1) * h];
            let mut acc = T::zero();
            for j in 0..h {
                grow[j] = grow[j] + xv * dpre[j];
                acc = acc + row[j] * dpre[j];
            }
            dx[i] = acc;
        }
        dx
    }
}

/// Encoder ownership per variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoders<T> {
    /// Two independent parameter sets (Duo variants).
    Dual {
        before: EncoderParams<T>,
        after: EncoderParams<T>,
    },
    /// One parameter set; for two-stream variants it embeds both texts.
    Shared(EncoderParams<T>),
}

/// Tokenized model input for one file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub variant: Variant,
    /// `[before, after]` for Embed* variants, a single sequence otherwise.
    pub seqs: Vec<TokenSequence>,
}

/// Render and tokenize a built change for `variant`.
pub fn encode_input(
    cc: &ContextualChange,
    variant: Variant,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedInput, TokenizerError> {
    let raw = render_variant_input(cc, variant);
    let seqs = if variant.is_two_stream() {
        vec![encode(&raw.texts[0], vocab, max_len)?, encode(&raw.texts[1], vocab, max_len)?]
    } else if let Some((a, b)) = raw.sep_halves() {
        vec![encode_pair(a, b, vocab, max_len)?]
    } else {
        vec![encode(&raw.texts[0], vocab, max_len)?]
    };
    Ok(EncodedInput { variant, seqs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaModel<T> {
    pub config: ModelConfig,
    pub encoders: Encoders<T>,
    pub head: HeadParams<T>,
}

/// Activations of one file-level forward pass.
pub struct ModelTrace<T> {
    encoder_traces: Vec<EncoderTrace<T>>,
    fused: Vec<T>,
    hidden: Vec<T>,
    pub logit: T,
}

impl<T: Scalar> DeltaModel<T> {
    /// Fresh model; encoders and head draw from one seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let mut next_seed = || rng.random::<u64>();
        let encoders = if config.variant.is_dual_encoder() {
            Encoders::Dual {
                before: init_params(config.encoder, next_seed())?,
                after: init_params(config.encoder, next_seed())?,
            }
        } else {
            Encoders::Shared(init_params(config.encoder, next_seed())?)
        };
        let mut head_rng = ChaCha8Rng::seed_from_u64(next_seed());
        let head = HeadParams::init(
            config.fusion().output_width(config.encoder.dim),
            config.head_hidden,
            &mut head_rng,
        );
        Ok(Self {
            config,
            encoders,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn encoder_before(&self) -> &EncoderParams<T> {
        match &self.encoders {
            Encoders::Dual { before, .. } => before,
            Encoders::Shared(e) => e,
        }
    }

    /// For shared-encoder variants this is the same parameter set as
    /// [`Self::encoder_before`].
    pub fn encoder_after(&self) -> &EncoderParams<T> {
        match &self.encoders {
            Encoders::Dual { after, .. } => after,
            Encoders::Shared(e) => e,
        }
    }

    pub fn encoder_before_mut(&mut self) -> &mut EncoderParams<T> {
        match &mut self.encoders {
            Encoders::Dual { before, .. } => before,
            Encoders::Shared(e) => e,
        }
    }

    pub fn encoder_after_mut(&mut self) -> &mut EncoderParams<T> {
        match &mut self.encoders {
            Encoders::Dual { after, .. } => after,
            Encoders::Shared(e) => e,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, t| t.data.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    pub fn cast<U: Scalar>(&self) -> DeltaModel<U> {
        DeltaModel {
            config: self.config,
            encoders: match &self.encoders {
                Encoders::Dual { before, after } => Encoders::Dual {
                    before: before.cast(),
                    after: after.cast(),
                },
                Encoders::Shared(e) => Encoders::Shared(e.cast()),
            },
            head: self.head.cast(),
        }
    }

    /// Every tensor with a unique name, in checkpoint order.
    pub fn visit(&self, mut f: impl FnMut(String, &Tensor<T>)) {
        match &self.encoders {
            Encoders::Dual { before, after } => {
                before.visit(|n, t| f(format!("encoder_before.{n}"), t));
                after.visit(|n, t| f(format!("encoder_after.{n}"), t));
            }
            Encoders::Shared(e) => e.visit(|n, t| f(format!("encoder.{n}"), t)),
        }
        self.head.visit(|n, t| f(format!("head.{n}"), t));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor<T>)) {
        match &mut self.encoders {
            Encoders::Dual { before, after } => {
                before.visit_mut(|n, t| f(format!("encoder_before.{n}"), t));
                after.visit_mut(|n, t| f(format!("encoder_after.{n}"), t));
            }
            Encoders::Shared(e) => e.visit_mut(|n, t| f(format!("encoder.{n}"), t)),
        }
        self.head.visit_mut(|n, t| f(format!("head.{n}"), t));
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.is_finite());
        ok
    }

    /// Head logit for a pair of embeddings (two-stream variants).
    pub fn logit_from_embeddings(
        &self,
        before: &EmbeddingVector<T>,
        after: &EmbeddingVector<T>,
    ) -> Result<T, ModelError> {
        let fused = fuse(before, after, self.config.fusion())?;
        Ok(self.head.forward(&fused.0).1)
    }

    /// Gradient of the logit with respect to the before and after embeddings.
    pub fn logit_grad_wrt_embeddings(
        &self,
        before: &EmbeddingVector<T>,
        after: &EmbeddingVector<T>,
    ) -> Result<(Vec<T>, Vec<T>), ModelError> {
        let fused = fuse(before, after, self.config.fusion())?;
        let (z, _) = self.head.forward(&fused.0);
        let mut scratch = self.head.clone();
        let df = self.head.backward(&fused.0, &z, T::one(), &mut scratch);
        Ok(self.split_fusion_grad(&df))
    }

    fn split_fusion_grad(&self, df: &[T]) -> (Vec<T>, Vec<T>) {
        match self.config.fusion() {
            FusionMode::Subtract => (df.to_vec(), df.iter().map(|&g| -g).collect()),
            FusionMode::Concat => {
                let d = df.len() / 2;
                (df[..d].to_vec(), df[d..].to_vec())
            }
            FusionMode::SingleStream => (df.to_vec(), Vec::new()),
        }
    }

    pub fn forward_traced(&self, input: &EncodedInput) -> Result<ModelTrace<T>, ModelError> {
        if input.variant != self.config.variant {
            return Err(ModelError::VariantMismatch {
                input: input.variant,
                model: self.config.variant,
            });
        }
        let fusion = self.config.fusion();
        let (fused, encoder_traces) = if fusion == FusionMode::SingleStream {
            let (e, t) = self.encoder_before().forward_traced(&input.seqs[0])?;
            (e.0, vec![t])
        } else {
            let (eb, tb) = self.encoder_before().forward_traced(&input.seqs[0])?;
            let (ea, ta) = self.encoder_after().forward_traced(&input.seqs[1])?;
            (fuse(&eb, &ea, fusion)?.0, vec![tb, ta])
        };
        let (hidden, logit) = self.head.forward(&fused);
        Ok(ModelTrace {
            encoder_traces,
            fused,
            hidden,
            logit,
        })
    }

    pub fn logit(&self, input: &EncodedInput) -> Result<T, ModelError> {
        self.forward_traced(input).map(|t| t.logit)
    }

    /// `sigmoid(head(fusion))`, computed in 64-bit.
    pub fn predict_file(&self, input: &EncodedInput) -> Result<f64, ModelError> {
        Ok(sigmoid(self.logit(input)?.as_f64()))
    }

    /// Accumulate into `grads` the gradient of `dlogit · logit`.
    pub fn backward(&self, trace: &ModelTrace<T>, dlogit: T, grads: &mut DeltaModel<T>) {
        let df = self.head.backward(&trace.fused, &trace.hidden, dlogit, &mut grads.head);
        let (db, da) = self.split_fusion_grad(&df);
        match (&self.encoders, &mut grads.encoders) {
            (Encoders::Dual { before, after }, Encoders::Dual { before: gb, after: ga }) => {
                before.backward(&trace.encoder_traces[0], &db, gb);
                after.backward(&trace.encoder_traces[1], &da, ga);
            }
            (Encoders::Shared(e), Encoders::Shared(g)) => {
                e.backward(&trace.encoder_traces[0], &db, g);
                if let Some(t) = trace.encoder_traces.get(1) {
                    e.backward(t, &da, g);
                }
            }
            _ => unreachable!("gradient buffer built with zeros_like"),
        }
    }
}

/// Clamped binary cross-entropy of one probability.
pub fn bce(prob: f64, label: Label) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label.is_vf() {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean clamped binary cross-entropy over a batch.
pub fn loss<T: Scalar>(batch: &[(&EncodedInput, Label)], model: &DeltaModel<T>) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (input, label) in batch {
        total += bce(model.predict_file(input)?, *label);
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Mean loss and its gradient over a batch.
///
/// The gradient is that of the unclamped cross-entropy, `(p - y) / B` per
/// logit; it coincides with the clamped loss wherever the clamp is inactive.
pub fn loss_and_grad<T: Scalar>(
    batch: &[(&EncodedInput, Label)],
    model: &DeltaModel<T>,
) -> Result<(f64, DeltaModel<T>), ModelError> {
    let mut grads = model.zeros_like();
    let loss = accumulate_grad(batch, model, batch.len(), &mut grads)?;
    Ok((loss / batch.len().max(1) as f64, grads))
}

/// Add the gradient of `Σ bce / denom` over `batch` into `grads`; returns
/// the summed (not averaged) loss.
pub(crate) fn accumulate_grad<T: Scalar>(
    batch: &[(&EncodedInput, Label)],
    model: &DeltaModel<T>,
    denom: usize,
    grads: &mut DeltaModel<T>,
) -> Result<f64, ModelError> {
    let scale = 1.0 / denom.max(1) as f64;
    let mut total = 0.0;
    for (input, label) in batch {
        let trace = model.forward_traced(input)?;
        let p = sigmoid(trace.logit.as_f64());
        total += bce(p, *label);
        model.backward(&trace, T::of((p - label.target()) * scale), grads);
    }
    Ok(total)
}

/// Concatenation-fusion model whose logits equal those of a subtraction
/// model on every input: the head's first layer becomes `[W ; -W]`.
pub fn equivalent_concat_model<T: Scalar>(m: &DeltaModel<T>) -> Result<DeltaModel<T>, ModelError> {
    if m.config.variant != Variant::EmbedSubtractDuo {
        return Err(ModelError::Unsupported(format!(
            "equivalent concat model needs EmbedSubtract_Duo, got {}",
            m.config.variant
        )));
    }
    let d = m.head.input_width();
    let h = m.head.hidden();
    let mut w1 = Tensor::zeros(&[2 * d, h]);
    w1.data[..d * h].copy_from_slice(&m.head.w1.data);
    for (dst, &src) in w1.data[d * h..].iter_mut().zip(&m.head.w1.data) {
        *dst = -src;
    }
    Ok(DeltaModel {
        config: ModelConfig {
            variant: Variant::EmbedConcatDuo,
            ..m.config
        },
        encoders: m.encoders.clone(),
        head: HeadParams {
            w1,
            ..m.head.clone()
        },
    })
}
