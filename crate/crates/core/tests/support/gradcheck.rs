//! Central finite-difference gradient check shared by test targets.

use deltafix_core::change_builder::Variant;
use deltafix_core::delta_model::{loss, loss_and_grad, DeltaModel, EncodedInput, ModelConfig};
use deltafix_core::encoder::EncoderConfig;
use deltafix_core::repo_miner::Label;
use deltafix_core::tokenizer::{TokenSequence, BOS, EOS, PAD, SEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Worst {
    pub rel: f64,
    pub at: String,
    pub checked: usize,
}

fn random_seq(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, with_sep: bool) -> TokenSequence {
    let n = rng.random_range(3..8);
    let mut ids = vec![BOS];
    for i in 0..n {
        if with_sep && i == n / 2 {
            ids.push(SEP);
        } else {
            ids.push(rng.random_range(5..cfg.vocab_size as u32));
        }
    }
    ids.push(EOS);
    let attention_length = ids.len();
    ids.resize(cfg.max_len, PAD);
    TokenSequence {
        ids,
        attention_length,
        truncated: false,
    }
}

fn random_input(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, variant: Variant) -> EncodedInput {
    let seqs = if variant.is_two_stream() {
        vec![random_seq(rng, cfg, false), random_seq(rng, cfg, false)]
    } else {
        vec![random_seq(rng, cfg, variant != Variant::RawGitDiff)]
    };
    EncodedInput { variant, seqs }
}

/// Worst `|a - n| / max(|a|, |n|, floor)` over every parameter of a freshly
/// initialized model, on a two-example batch (one VF, one NVF).
pub fn worst_relative_error(variant: Variant, cfg: EncoderConfig, seed: u64, step: f64, floor: f64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let mut model = DeltaModel::<f64>::init(ModelConfig::new(variant, cfg), seed).unwrap();
    let inputs = [random_input(&mut rng, &cfg, variant), random_input(&mut rng, &cfg, variant)];
    let batch = [(&inputs[0], Label::Vf), (&inputs[1], Label::Nvf)];

    let (_, grads) = loss_and_grad(&batch, &model).unwrap();
    let mut analytic = Vec::new();
    grads.visit(|name, t| analytic.push((name, t.data.clone())));

    let mut worst = Worst {
        rel: 0.0,
        at: String::new(),
        checked: 0,
    };
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let set = |m: &mut DeltaModel<f64>, value: Option<f64>| {
                let mut idx = 0;
                let mut old = 0.0;
                m.visit_mut(|_, t| {
                    if idx == ti {
                        old = t.data[j];
                        t.data[j] = value.unwrap_or(old);
                    }
                    idx += 1;
                });
                old
            };
            let orig = set(&mut model, None);
            set(&mut model, Some(orig + step));
            let plus = loss(&batch, &model).unwrap();
            set(&mut model, Some(orig - step));
            let minus = loss(&batch, &model).unwrap();
            set(&mut model, Some(orig));
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst.checked += 1;
            if rel > worst.rel {
                worst.rel = rel;
                worst.at = format!("{name}[{j}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    worst
}
