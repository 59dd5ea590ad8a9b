//! Coarse-to-fine generation: sample the coarsest tokens from the condition
//! block, then extend the cached transformer one scale block at a time,
//! refining the accumulated representation between scales. One transformer
//! invocation per scale, independent of the trajectory length.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::interp::linear_weights;
use crate::data::{MovementAttributes, Trajectory};
use crate::nn::{attend_extend, layer_norm_plain_raw, LayerKv};
use crate::tokenizer::{infer::decode_features, TokenizerModel};

use super::model::{StarError, StarModel};
use super::sampling::{moving_average_smooth, sample_token, tokenwise_temperatures};
use super::model::SamplerConfig;

/// Per-generation instrumentation.
#[derive(Debug, Clone, Serialize)]
pub struct GenerationTrace {
    /// Sampled tokens per scale.
    pub tokens: Vec<Vec<usize>>,
    pub confidences: Vec<Vec<f32>>,
    pub temperatures: Vec<Vec<f32>>,
    /// Scale-level transformer invocations performed.
    pub transformer_invocations: usize,
    /// Wall-clock spent in the scale stage (transformer + heads), in
    /// nanoseconds.
    pub scale_stage_nanos: u128,
    pub trajectory: Vec<usize>,
    /// Per-scale logits, captured on request for equivalence checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f32>>>,
}

struct StarRunner<'a> {
    star: &'a StarModel,
    caches: Vec<LayerKv>,
    /// Per layer: (gamma1, beta1, gamma2, beta2), each of width d.
    adaln: Vec<[Vec<f32>; 4]>,
    cond_row: Vec<f32>,
}

impl<'a> StarRunner<'a> {
    fn new(star: &'a StarModel, attrs: &MovementAttributes) -> Self {
        let store = &star.store;
        let d = star.cfg.d;
        let home = &store.values(star.cond_home_embed)[attrs.home_cell * d..(attrs.home_cell + 1) * d];
        let commute = &store.values(star.cond_commute_embed)
            [attrs.commute_cell * d..(attrs.commute_cell + 1) * d];
        let label_idx = attrs.pattern_label.index();
        let label = &store.values(star.cond_label_embed)[label_idx * d..(label_idx + 1) * d];
        let mut cat = Vec::with_capacity(3 * d);
        cat.extend_from_slice(home);
        cat.extend_from_slice(commute);
        cat.extend_from_slice(label);
        let cond_row = star.cond_proj.forward_raw(store, &cat, 1);

        let adaln = star
            .layers
            .iter()
            .map(|layer| {
                let gb = layer.adaln.forward_raw(store, &cond_row, 1);
                [
                    gb[..d].to_vec(),
                    gb[d..2 * d].to_vec(),
                    gb[2 * d..3 * d].to_vec(),
                    gb[3 * d..4 * d].to_vec(),
                ]
            })
            .collect();

        StarRunner {
            star,
            caches: star.layers.iter().map(|_| LayerKv::default()).collect(),
            adaln,
            cond_row,
        }
    }

    /// Extend the cached transformer with `n` new rows; returns the
    /// final-norm hidden states for those rows.
    fn extend(&mut self, x_new: &[f32], n: usize) -> Vec<f32> {
        let store = &self.star.store;
        let d = self.star.cfg.d;
        let mut x = x_new.to_vec();
        for (li, layer) in self.star.layers.iter().enumerate() {
            let [g1, b1, g2, b2] = &self.adaln[li];
            let mut h = layer_norm_plain_raw(&x, n, d);
            modulate(&mut h, g1, b1, n, d);
            let a = attend_extend(&layer.attn, store, &mut self.caches[li], &h, n);
            for (xv, av) in x.iter_mut().zip(a.iter()) {
                *xv += av;
            }
            let mut h = layer_norm_plain_raw(&x, n, d);
            modulate(&mut h, g2, b2, n, d);
            let m = layer.mlp.forward_raw(store, &h, n);
            for (xv, mv) in x.iter_mut().zip(m.iter()) {
                *xv += mv;
            }
        }
        self.star.final_ln.forward_raw(store, &x, n)
    }

    /// Input rows for the scale-k block (1-based): base features plus the
    /// scale embedding and within-scale positions.
    fn block_input(&self, base: Option<&[f32]>, k: usize, t_k: usize) -> Vec<f32> {
        let d = self.star.cfg.d;
        let se = &self.star.store.values(self.star.scale_embed)[(k - 1) * d..k * d];
        let pos = self.star.store.values(self.star.pos_embed);
        let mut x = match base {
            Some(b) => b.to_vec(),
            None => vec![0.0f32; t_k * d],
        };
        for r in 0..t_k {
            let row = &mut x[r * d..(r + 1) * d];
            for c in 0..d {
                row[c] += se[c] + pos[r * d + c];
            }
        }
        x
    }
}

fn modulate(h: &mut [f32], gamma: &[f32], beta: &[f32], rows: usize, d: usize) {
    for r in 0..rows {
        let row = &mut h[r * d..(r + 1) * d];
        for c in 0..d {
            row[c] = row[c] * (1.0 + gamma[c]) + beta[c];
        }
    }
}

fn check_models(tokenizer: &TokenizerModel, star: &StarModel) -> Result<(), StarError> {
    if tokenizer.ladder != star.ladder {
        return Err(StarError::LadderMismatch);
    }
    if tokenizer.cfg.d != star.cfg.d {
        return Err(StarError::WidthMismatch {
            star: star.cfg.d,
            tokenizer: tokenizer.cfg.d,
        });
    }
    Ok(())
}

/// Generate one trajectory. Deterministic in `(sampler.seed, cond, models)`.
pub fn generate(
    cond: &MovementAttributes,
    tokenizer: &TokenizerModel,
    star: &StarModel,
    sampler: &SamplerConfig,
    user_id: &str,
) -> Result<(Trajectory, GenerationTrace), StarError> {
    generate_inner(cond, tokenizer, star, sampler, user_id, false, false)
}

/// Like [`generate`], also capturing per-scale logits in the trace.
pub fn generate_with_logits(
    cond: &MovementAttributes,
    tokenizer: &TokenizerModel,
    star: &StarModel,
    sampler: &SamplerConfig,
    user_id: &str,
) -> Result<(Trajectory, GenerationTrace), StarError> {
    generate_inner(cond, tokenizer, star, sampler, user_id, false, true)
}

/// Ablation used for the efficiency comparison: the finest scale is sampled
/// one token per transformer invocation instead of one whole block.
pub fn generate_tokenwise_ablation(
    cond: &MovementAttributes,
    tokenizer: &TokenizerModel,
    star: &StarModel,
    sampler: &SamplerConfig,
    user_id: &str,
) -> Result<(Trajectory, GenerationTrace), StarError> {
    generate_inner(cond, tokenizer, star, sampler, user_id, true, false)
}

#[allow(clippy::too_many_arguments)]
fn generate_inner(
    cond: &MovementAttributes,
    tokenizer: &TokenizerModel,
    star: &StarModel,
    sampler: &SamplerConfig,
    user_id: &str,
    tokenwise_finest: bool,
    capture_logits: bool,
) -> Result<(Trajectory, GenerationTrace), StarError> {
    check_models(tokenizer, star)?;
    sampler.validate()?;

    let d = star.cfg.d;
    let v = star.cfg.v;
    let k_scales = star.ladder.num_scales();
    let lens = star.ladder.token_lens();
    let store = &star.store;
    let codebook = tokenizer.store.values(tokenizer.codebook);
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);

    let mut runner = StarRunner::new(star, cond);
    let mut tokens: Vec<Vec<usize>> = Vec::with_capacity(k_scales);
    let mut confidences = Vec::with_capacity(k_scales);
    let mut temperatures = Vec::with_capacity(k_scales);
    let mut captured: Vec<Vec<f32>> = Vec::new();
    let mut invocations = 0usize;
    let mut scale_stage = 0u128;

    // Scale 1: the condition token and the scale-1 slots form one block.
    let t1 = lens[0];
    let slot = runner.block_input(None, 1, t1);
    let mut first_rows = runner.cond_row.clone();
    first_rows.extend_from_slice(&slot);
    let started = Instant::now();
    let hidden = runner.extend(&first_rows, 1 + t1);
    let logits = star.head.forward_raw(store, &hidden[d..], t1);
    scale_stage += started.elapsed().as_nanos();
    invocations += 1;

    let (conf, temp) = tokenwise_temperatures(&logits, t1, v, sampler.alpha, sampler.temp_floor);
    let seq: Vec<usize> = (0..t1)
        .map(|i| sample_token(&logits[i * v..(i + 1) * v], temp[i], sampler.temp_floor, &mut rng))
        .collect();
    if capture_logits {
        captured.push(logits);
    }
    let mut z_acc = lookup_rows(codebook, &seq, d);
    tokens.push(seq);
    confidences.push(conf);
    temperatures.push(temp);

    // Scales 2..K: refine, extend, sample, accumulate.
    for k in 2..=k_scales {
        let t_k = lens[k - 1];
        let t_prev = lens[k - 2];
        let up = linear_weights(t_prev, t_k).apply(&z_acc, d);
        let zhat = tokenizer.conv_blocks[k - 2].forward_raw(&tokenizer.store, &up, t_k);
        let block = runner.block_input(Some(&zhat), k, t_k);

        let (logits, n_inv, nanos) = if tokenwise_finest && k == k_scales {
            let mut all = Vec::with_capacity(t_k * v);
            let mut nanos = 0u128;
            for r in 0..t_k {
                let started = Instant::now();
                let hidden = runner.extend(&block[r * d..(r + 1) * d], 1);
                let row_logits = star.head.forward_raw(store, &hidden, 1);
                nanos += started.elapsed().as_nanos();
                all.extend_from_slice(&row_logits);
            }
            (all, t_k, nanos)
        } else {
            let started = Instant::now();
            let hidden = runner.extend(&block, t_k);
            let logits = star.head.forward_raw(store, &hidden, t_k);
            (logits, 1, started.elapsed().as_nanos())
        };
        invocations += n_inv;
        scale_stage += nanos;

        let (conf, temp) =
            tokenwise_temperatures(&logits, t_k, v, sampler.alpha, sampler.temp_floor);
        let seq: Vec<usize> = (0..t_k)
            .map(|i| {
                sample_token(&logits[i * v..(i + 1) * v], temp[i], sampler.temp_floor, &mut rng)
            })
            .collect();
        if capture_logits {
            captured.push(logits);
        }
        let f = lookup_rows(codebook, &seq, d);
        z_acc = zhat;
        for (zv, fv) in z_acc.iter_mut().zip(f.iter()) {
            *zv += fv;
        }
        tokens.push(seq);
        confidences.push(conf);
        temperatures.push(temp);
    }

    let smoothed = moving_average_smooth(&z_acc, star.ladder.t_len, d, sampler.ma_window);
    let cells = decode_features(tokenizer, &smoothed, sampler.decoder_temperature, &mut rng);

    let trace = GenerationTrace {
        tokens,
        confidences,
        temperatures,
        transformer_invocations: invocations,
        scale_stage_nanos: scale_stage,
        trajectory: cells.clone(),
        logits: if capture_logits { Some(captured) } else { None },
    };
    Ok((
        Trajectory {
            user_id: user_id.to_string(),
            cells,
        },
        trace,
    ))
}

fn lookup_rows(codebook: &[f32], seq: &[usize], d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(seq.len() * d);
    for &idx in seq {
        out.extend_from_slice(&codebook[idx * d..(idx + 1) * d]);
    }
    out
}

/// Recompute the per-scale logits for already-sampled tokens with the
/// full-sequence (uncached) forward; the oracle for cache equivalence.
pub fn recompute_logits_full(
    cond: &MovementAttributes,
    tokenizer: &TokenizerModel,
    star: &StarModel,
    tokens: &crate::tokenizer::TokenPyramid,
) -> Vec<Vec<f32>> {
    use crate::star::forward::{build_teacher_inputs, cond_embedding, star_forward};
    let blocks = build_teacher_inputs(tokenizer, tokens);
    let mut tape = crate::autodiff::tape::Tape::no_grad();
    let cond_node = cond_embedding(&mut tape, star, cond);
    let lens = star.ladder.token_lens();
    let nodes: Vec<_> = blocks
        .iter()
        .zip(lens[1..].iter())
        .map(|(b, &t)| tape.constant(vec![t, star.cfg.d], b.clone()))
        .collect();
    let logits = star_forward(&mut tape, star, cond_node, &nodes);
    logits.iter().map(|&l| tape.value(l).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid::GridSpec;
    use crate::data::ladder::ScaleLadder;
    use crate::data::PatternLabel;
    use crate::star::model::StarConfig;
    use crate::tokenizer::{TokenPyramid, TokenizerConfig};

    fn tiny_ladder() -> ScaleLadder {
        ScaleLadder::new(
            GridSpec::new(4, 4, 1.0),
            24,
            &[(4, 24.0), (2, 6.0), (1, 1.0)],
        )
        .unwrap()
    }

    fn models(seed: u64) -> (TokenizerModel, StarModel) {
        let tok_cfg = TokenizerConfig {
            v: 16,
            d: 8,
            layers: 1,
            heads: 2,
            mlp_hidden: 16,
            conv_kernel: 3,
            beta: 0.25,
        };
        let star_cfg = StarConfig {
            v: 16,
            d: 8,
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
        };
        (
            TokenizerModel::new(tok_cfg, tiny_ladder(), seed),
            StarModel::new(star_cfg, tiny_ladder(), seed + 1),
        )
    }

    fn attrs() -> MovementAttributes {
        MovementAttributes {
            home_cell: 3,
            commute_cell: 12,
            pattern_label: PatternLabel::HomeStayer,
        }
    }

    #[test]
    fn output_has_full_length_and_k_invocations() {
        let (tok, star) = models(5);
        let sampler = SamplerConfig::desk(9);
        let (traj, trace) = generate(&attrs(), &tok, &star, &sampler, "g0").unwrap();
        assert_eq!(traj.cells.len(), 24);
        assert_eq!(trace.transformer_invocations, 3);
        assert_eq!(trace.tokens.len(), 3);
        assert_eq!(trace.tokens[2].len(), 24);
        assert!(traj.cells.iter().all(|&c| c < 16));
    }

    #[test]
    fn generation_deterministic_in_seed() {
        let (tok, star) = models(6);
        let sampler = SamplerConfig::desk(42);
        let (a, ta) = generate(&attrs(), &tok, &star, &sampler, "g").unwrap();
        let (b, tb) = generate(&attrs(), &tok, &star, &sampler, "g").unwrap();
        assert_eq!(a.cells, b.cells);
        assert_eq!(ta.tokens, tb.tokens);
        let other = SamplerConfig::desk(43);
        let (c, _) = generate(&attrs(), &tok, &star, &other, "g").unwrap();
        assert_ne!(a.cells, c.cells, "different seeds should diverge");
    }

    #[test]
    fn cached_logits_match_full_recomputation() {
        let (tok, star) = models(7);
        let sampler = SamplerConfig::desk(3);
        let (_, trace) = generate_with_logits(&attrs(), &tok, &star, &sampler, "g").unwrap();
        let pyramid = TokenPyramid {
            tokens: trace.tokens.clone(),
        };
        let full = recompute_logits_full(&attrs(), &tok, &star, &pyramid);
        let cached = trace.logits.expect("captured");
        assert_eq!(full.len(), cached.len());
        for (k, (f, c)) in full.iter().zip(cached.iter()).enumerate() {
            assert_eq!(f.len(), c.len());
            for (a, b) in f.iter().zip(c.iter()) {
                assert!((a - b).abs() <= 1e-5, "scale {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tokenwise_ablation_same_traj_shape_more_invocations() {
        let (tok, star) = models(8);
        let sampler = SamplerConfig::desk(11);
        let (traj, trace) =
            generate_tokenwise_ablation(&attrs(), &tok, &star, &sampler, "g").unwrap();
        assert_eq!(traj.cells.len(), 24);
        // K-1 block invocations plus one per finest token.
        assert_eq!(trace.transformer_invocations, 2 + 24);
    }

    #[test]
    fn mismatched_ladders_rejected() {
        let (tok, _) = models(9);
        let other_ladder =
            ScaleLadder::new(GridSpec::new(4, 4, 1.0), 24, &[(2, 6.0), (1, 1.0)]).unwrap();
        let star = StarModel::new(
            StarConfig {
                v: 16,
                d: 8,
                layers: 1,
                heads: 2,
                mlp_hidden: 16,
            },
            other_ladder,
            1,
        );
        let sampler = SamplerConfig::desk(0);
        assert!(matches!(
            generate(&attrs(), &tok, &star, &sampler, "g"),
            Err(StarError::LadderMismatch)
        ));
    }
}
