//! Mini-batch training of the tokenizer. Per-sample tapes run in parallel;
//! gradients merge in sample order, so results are independent of thread
//! count. Dead codewords are reseeded from recent encoder residuals at each
//! epoch boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::error::AutodiffError;
use crate::autodiff::optim::{CosineSchedule, OptimizerState};
use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::ParamId;
use crate::data::corpus::scale_sequences;
use crate::data::Corpus;

use super::forward::tokenizer_loss;
use super::model::TokenizerModel;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Diverged {
        epoch: usize,
        batch: usize,
        message: String,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("empty training corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Cosine schedule floor as a fraction of the base rate.
    pub min_lr_ratio: f32,
}

impl TokenizerTrainConfig {
    pub fn desk() -> Self {
        TokenizerTrainConfig {
            epochs: 6,
            batch_size: 32,
            lr: 3e-4,
            min_lr_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenizerEpochLog {
    pub epoch: usize,
    pub total: f64,
    pub rec: f64,
    pub com: f64,
    pub qua: f64,
    /// Fraction of codewords selected at least once this epoch.
    pub codebook_usage: f64,
    pub lr: f32,
}

struct SampleOut {
    grads: Vec<(ParamId, Vec<f32>)>,
    total: f64,
    rec: f64,
    com: f64,
    qua: f64,
    tokens: Vec<Vec<usize>>,
    residual_rows: Vec<f32>,
}

pub fn train_tokenizer(
    model: &mut TokenizerModel,
    corpus: &Corpus,
    cfg: &TokenizerTrainConfig,
    seed: u64,
) -> Result<Vec<TokenizerEpochLog>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let n = corpus.len();
    let samples: Vec<(Vec<usize>, Vec<Vec<usize>>)> = corpus
        .members
        .iter()
        .map(|(traj, _)| {
            let seqs = scale_sequences(traj, &model.ladder).expect("corpus matches ladder");
            (traj.cells.clone(), seqs)
        })
        .collect();

    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.lr * cfg.min_lr_ratio,
        total_steps: cfg.epochs * batches_per_epoch,
    };
    let mut opt = OptimizerState::new(&model.store, schedule);
    let v = model.cfg.v;
    let d = model.cfg.d;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(seed);
        epoch_rng.set_stream(epoch as u64 + 1);
        use rand::seq::SliceRandom;
        order.shuffle(&mut epoch_rng);

        let lr_at_start = opt.current_lr();
        let mut used = vec![false; v];
        let mut sums = [0.0f64; 4];
        let mut residual_pool: Vec<f32> = Vec::new();

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Result<Vec<SampleOut>, TrainError> = batch
                .par_iter()
                .map(|&i| {
                    let (cells, seqs) = &samples[i];
                    let mut tape = Tape::new();
                    let nodes = tokenizer_loss(&mut tape, model, cells, seqs);
                    let total = tape.scalar_value(nodes.total) as f64;
                    tape.backward(nodes.total)
                        .map_err(|e| TrainError::Diverged {
                            epoch: epoch + 1,
                            batch: batch_idx + 1,
                            message: e.to_string(),
                        })?;
                    Ok(SampleOut {
                        total,
                        rec: tape.scalar_value(nodes.rec) as f64,
                        com: tape.scalar_value(nodes.com) as f64,
                        qua: tape.scalar_value(nodes.qua) as f64,
                        residual_rows: tape.value(nodes.f_enc_finest).to_vec(),
                        tokens: nodes.pyramid.tokens,
                        grads: tape.take_param_grads(),
                    })
                })
                .collect();
            let results = results?;

            let is_last_batch = batch_idx + 1 == batches_per_epoch;
            if is_last_batch {
                residual_pool.clear();
            }
            for out in &results {
                for (pid, g) in &out.grads {
                    model.store.accumulate_grad(*pid, g);
                }
                for seq in &out.tokens {
                    for &tok in seq {
                        used[tok] = true;
                    }
                }
                sums[0] += out.total;
                sums[1] += out.rec;
                sums[2] += out.com;
                sums[3] += out.qua;
                if is_last_batch {
                    residual_pool.extend_from_slice(&out.residual_rows);
                }
            }
            model.store.scale_grads(1.0 / batch.len() as f32);
            opt.step(&mut model.store)?;
        }

        // Reseed codewords that went unused for the whole epoch.
        let pool_rows = residual_pool.len() / d;
        if pool_rows > 0 {
            for cw in 0..v {
                if used[cw] {
                    continue;
                }
                let row = (cw * 7919) % pool_rows;
                let mut values = residual_pool[row * d..(row + 1) * d].to_vec();
                for val in values.iter_mut() {
                    *val += epoch_rng.gen_range(-1e-3..1e-3);
                }
                model.set_codeword(cw, &values);
                opt.zero_moments(model.codebook.0, cw * d, d);
            }
        }

        let usage = used.iter().filter(|&&u| u).count() as f64 / v as f64;
        logs.push(TokenizerEpochLog {
            epoch: epoch + 1,
            total: sums[0] / n as f64,
            rec: sums[1] / n as f64,
            com: sums[2] / n as f64,
            qua: sums[3] / n as f64,
            codebook_usage: usage,
            lr: lr_at_start,
        });
    }
    Ok(logs)
}
