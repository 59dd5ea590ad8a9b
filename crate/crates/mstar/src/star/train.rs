//! Teacher-forced training of the next-scale transformer over token
//! pyramids from a frozen tokenizer. Pyramids and teacher inputs are
//! precomputed once per corpus since the tokenizer does not move.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{CosineSchedule, OptimizerState};
use crate::autodiff::tape::Tape;
use crate::data::{Corpus, MovementAttributes};
use crate::tokenizer::{encode_to_pyramid, TokenPyramid, TokenizerModel};
use crate::tokenizer::train::TrainError;

use super::forward::{build_teacher_inputs, cond_embedding, star_forward, star_loss};
use super::model::StarModel;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StarTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub min_lr_ratio: f32,
}

impl StarTrainConfig {
    pub fn desk() -> Self {
        StarTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            min_lr_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StarEpochLog {
    pub epoch: usize,
    /// Summed cross-entropy over all scales, averaged over samples.
    pub total: f64,
    /// The same loss per token.
    pub per_token: f64,
    pub lr: f32,
}

/// Draw one user's movement attributes uniformly from the corpus; sampling
/// whole users preserves the home/commute/label correlations.
pub fn sample_condition(corpus: &Corpus, seed: u64) -> Result<MovementAttributes, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rng.gen_range(0..corpus.len());
    Ok(corpus.members[idx].1)
}

struct StarSample {
    attrs: MovementAttributes,
    pyramid: TokenPyramid,
    teacher_blocks: Vec<Vec<f32>>,
}

/// Precompute pyramids and teacher inputs for every corpus member.
pub fn prepare_star_samples(
    tokenizer: &TokenizerModel,
    corpus: &Corpus,
) -> Vec<(TokenPyramid, Vec<Vec<f32>>)> {
    corpus
        .members
        .par_iter()
        .map(|(traj, _)| {
            let pyramid = encode_to_pyramid(tokenizer, traj);
            let blocks = build_teacher_inputs(tokenizer, &pyramid);
            (pyramid, blocks)
        })
        .collect()
}

pub fn train_star(
    star: &mut StarModel,
    tokenizer: &TokenizerModel,
    corpus: &Corpus,
    cfg: &StarTrainConfig,
    seed: u64,
) -> Result<Vec<StarEpochLog>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    assert_eq!(
        tokenizer.ladder, star.ladder,
        "models must share one ladder"
    );
    let n = corpus.len();
    let prepared = prepare_star_samples(tokenizer, corpus);
    let samples: Vec<StarSample> = corpus
        .members
        .iter()
        .zip(prepared)
        .map(|((_, attrs), (pyramid, teacher_blocks))| StarSample {
            attrs: *attrs,
            pyramid,
            teacher_blocks,
        })
        .collect();

    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.lr * cfg.min_lr_ratio,
        total_steps: cfg.epochs * batches_per_epoch,
    };
    let mut opt = OptimizerState::new(&star.store, schedule);
    let d = star.cfg.d;
    let lens = star.ladder.token_lens();
    let tokens_per_sample: usize = lens.iter().sum();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(seed);
        epoch_rng.set_stream(epoch as u64 + 1);
        use rand::seq::SliceRandom;
        order.shuffle(&mut epoch_rng);

        let lr_at_start = opt.current_lr();
        let mut loss_sum = 0.0f64;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Result<Vec<_>, TrainError> = batch
                .par_iter()
                .map(|&i| {
                    let sample = &samples[i];
                    let mut tape = Tape::new();
                    let cond = cond_embedding(&mut tape, star, &sample.attrs);
                    let nodes: Vec<_> = sample
                        .teacher_blocks
                        .iter()
                        .zip(lens[1..].iter())
                        .map(|(b, &t)| tape.constant(vec![t, d], b.clone()))
                        .collect();
                    let logits = star_forward(&mut tape, star, cond, &nodes);
                    let (loss, _) = star_loss(&mut tape, &logits, &sample.pyramid);
                    let value = tape.scalar_value(loss) as f64;
                    tape.backward(loss).map_err(|e| TrainError::Diverged {
                        epoch: epoch + 1,
                        batch: batch_idx + 1,
                        message: e.to_string(),
                    })?;
                    Ok((value, tape.take_param_grads()))
                })
                .collect();
            let results = results?;
            for (value, grads) in &results {
                loss_sum += value;
                for (pid, g) in grads {
                    star.store.accumulate_grad(*pid, g);
                }
            }
            star.store.scale_grads(1.0 / batch.len() as f32);
            opt.step(&mut star.store)?;
        }

        logs.push(StarEpochLog {
            epoch: epoch + 1,
            total: loss_sum / n as f64,
            per_token: loss_sum / (n * tokens_per_sample) as f64,
            lr: lr_at_start,
        });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid::GridSpec;
    use crate::data::ladder::ScaleLadder;
    use crate::data::synth::{synth_corpus, SynthConfig};
    use crate::star::model::StarConfig;
    use crate::tokenizer::TokenizerConfig;

    fn tiny_setup(n_users: usize) -> (TokenizerModel, StarModel, Corpus) {
        let grid = GridSpec::new(4, 4, 1.0);
        let ladder = ScaleLadder::new(grid, 24, &[(4, 24.0), (2, 6.0), (1, 1.0)]).unwrap();
        let tok = TokenizerModel::new(
            TokenizerConfig {
                v: 32,
                d: 8,
                layers: 1,
                heads: 2,
                mlp_hidden: 16,
                conv_kernel: 3,
                beta: 0.25,
            },
            ladder.clone(),
            3,
        );
        let star = StarModel::new(
            StarConfig {
                v: 32,
                d: 8,
                layers: 1,
                heads: 2,
                mlp_hidden: 16,
            },
            ladder,
            4,
        );
        let corpus = synth_corpus(&SynthConfig::desk(grid, 24, n_users), 5).unwrap();
        (tok, star, corpus)
    }

    #[test]
    fn initial_per_token_loss_near_ln_v() {
        let (tok, mut star, corpus) = tiny_setup(8);
        let cfg = StarTrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.0,
            min_lr_ratio: 1.0,
        };
        let logs = train_star(&mut star, &tok, &corpus, &cfg, 1).unwrap();
        let ln_v = (star.cfg.v as f64).ln();
        let got = logs[0].per_token;
        assert!(
            (got - ln_v).abs() / ln_v < 0.05,
            "init per-token loss {got} vs ln V {ln_v}"
        );
    }

    #[test]
    fn loss_decreases_with_training() {
        let (tok, mut star, corpus) = tiny_setup(16);
        let cfg = StarTrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 3e-3,
            min_lr_ratio: 0.01,
        };
        let logs = train_star(&mut star, &tok, &corpus, &cfg, 2).unwrap();
        assert!(logs.last().unwrap().total < logs[0].total);
    }

    #[test]
    fn training_deterministic_in_seed() {
        let (tok, mut a, corpus) = tiny_setup(8);
        let (_, mut b, _) = tiny_setup(8);
        let cfg = StarTrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            min_lr_ratio: 0.01,
        };
        let la = train_star(&mut a, &tok, &corpus, &cfg, 7).unwrap();
        let lb = train_star(&mut b, &tok, &corpus, &cfg, 7).unwrap();
        for (x, y) in la.iter().zip(lb.iter()) {
            assert_eq!(x.total, y.total);
        }
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.tensor.values, pb.tensor.values, "{}", pa.name);
        }
    }

    #[test]
    fn condition_sampling_behaviour() {
        let (_, _, corpus) = tiny_setup(30);
        // Same seed, same draw.
        let a = sample_condition(&corpus, 5).unwrap();
        let b = sample_condition(&corpus, 5).unwrap();
        assert_eq!(a, b);

        // Single-user corpus always yields that user.
        let single = Corpus::new(
            corpus.grid,
            corpus.t_len,
            vec![corpus.members[0].clone()],
        )
        .unwrap();
        for s in 0..20 {
            assert_eq!(
                sample_condition(&single, s).unwrap(),
                corpus.members[0].1
            );
        }

        // Label frequencies track the corpus distribution.
        let mut corpus_counts = [0usize; 3];
        for (_, a) in &corpus.members {
            corpus_counts[a.pattern_label.index()] += 1;
        }
        let draws = 10_000;
        let mut draw_counts = [0usize; 3];
        for s in 0..draws {
            let c = sample_condition(&corpus, s as u64).unwrap();
            draw_counts[c.pattern_label.index()] += 1;
        }
        for i in 0..3 {
            let want = corpus_counts[i] as f64 / corpus.len() as f64;
            let got = draw_counts[i] as f64 / draws as f64;
            assert!((got - want).abs() <= 0.02, "label {i}: {got} vs {want}");
        }
    }
}
