//! Tape-recorded forward passes: multi-scale encoding, residual
//! quantization, progressive decoding, trajectory decoding, and the
//! three-part training loss.

use crate::autodiff::tape::{NodeId, Reduction, Tape};

use super::model::{nearest_codeword, TokenPyramid, TokenizerModel};

/// Additive attention bias for causal (lower-triangular) visibility.
pub fn causal_mask_bias(t: usize) -> Vec<f32> {
    let mut bias = vec![0.0f32; t * t];
    for i in 0..t {
        for j in i + 1..t {
            bias[i * t + j] = -1e9;
        }
    }
    bias
}

/// Spatial embedding of one scale's cell sequence: a pure table gather,
/// equivalent to the one-hot matrix product.
pub fn embed_scale(
    tape: &mut Tape,
    model: &TokenizerModel,
    scale_seq: &[usize],
    k: usize,
) -> NodeId {
    assert!(k >= 1 && k <= model.num_scales(), "scale index out of range");
    let table = tape.param(&model.store, model.scale_embeddings[k - 1]);
    tape.gather(table, scale_seq)
}

/// Run the shared temporal encoder over one scale's embeddings and
/// downsample to that scale's token length.
fn encode_one_scale(
    tape: &mut Tape,
    model: &TokenizerModel,
    scale_seq: &[usize],
    k: usize,
) -> NodeId {
    let x = embed_scale(tape, model, scale_seq, k);
    let pos = tape.param(&model.store, model.enc_pos);
    let mut h = tape.add(x, pos);
    for layer in &model.encoder {
        h = layer.forward(tape, &model.store, h, None);
    }
    h = model.enc_final_ln.forward(tape, &model.store, h);
    let t_k = model.ladder.levels()[k - 1].token_len;
    tape.area_interpolate(h, t_k)
        .expect("token lengths are validated positive")
}

/// Encode every scale: shared encoder parameters, per-scale embeddings and
/// temporal resolutions. Returns `[Z_1 .. Z_K]` with `Z_k` of length `T_k`.
pub fn encode_scales(
    tape: &mut Tape,
    model: &TokenizerModel,
    scale_seqs: &[Vec<usize>],
) -> Vec<NodeId> {
    assert_eq!(scale_seqs.len(), model.num_scales());
    (1..=model.num_scales())
        .map(|k| encode_one_scale(tape, model, &scale_seqs[k - 1], k))
        .collect()
}

/// Everything the quantizer produces for one trajectory.
pub struct QuantizeOutput {
    pub pyramid: TokenPyramid,
    /// Encoder-side representations Z_k.
    pub z_enc: Vec<NodeId>,
    /// Coarser-scale predictions; index 0 is the zero convention.
    pub zhat_enc: Vec<NodeId>,
    /// Residuals F_k = Z_k - Zhat_k.
    pub f_enc: Vec<NodeId>,
    /// Codebook rows selected for each residual (gather nodes, so the
    /// codebook receives gradients through them).
    pub f_lookup: Vec<NodeId>,
}

/// Residual quantization across scales against the shared codebook.
pub fn quantize_pyramid(
    tape: &mut Tape,
    model: &TokenizerModel,
    z_enc: Vec<NodeId>,
) -> QuantizeOutput {
    let d = model.cfg.d;
    let v = model.cfg.v;
    let codebook = tape.param(&model.store, model.codebook);
    let cb_values = tape.value(codebook).to_vec();

    let mut zhat_enc = Vec::with_capacity(z_enc.len());
    let mut f_enc = Vec::with_capacity(z_enc.len());
    let mut f_lookup = Vec::with_capacity(z_enc.len());
    let mut tokens = Vec::with_capacity(z_enc.len());

    for k in 0..z_enc.len() {
        let t_k = model.ladder.levels()[k].token_len;
        let zhat = if k == 0 {
            // No coarser predecessor: predict zero.
            tape.constant(vec![t_k, d], vec![0.0; t_k * d])
        } else {
            let up = tape
                .linear_upsample(z_enc[k - 1], t_k)
                .expect("token lengths increase with k");
            model.conv_blocks[k - 1].forward(tape, &model.store, up)
        };
        let f = tape.sub(z_enc[k], zhat);

        let f_vals = tape.value(f);
        let seq: Vec<usize> = (0..t_k)
            .map(|r| nearest_codeword(&f_vals[r * d..(r + 1) * d], &cb_values, v, d))
            .collect();
        let lookup = tape.gather(codebook, &seq);

        zhat_enc.push(zhat);
        f_enc.push(f);
        f_lookup.push(lookup);
        tokens.push(seq);
    }

    QuantizeOutput {
        pyramid: TokenPyramid { tokens },
        z_enc,
        zhat_enc,
        f_enc,
        f_lookup,
    }
}

/// Progressive decode composition from per-scale residual features.
pub struct DecodeChain {
    /// Zhat_k on the decode side; index 0 is the zero convention.
    pub zhat: Vec<NodeId>,
    /// Z_k^dec = Zhat_k^dec + F_k^dec.
    pub z: Vec<NodeId>,
}

/// Compose residual features coarse-to-fine with the same refinement blocks
/// used during encoding.
pub fn decode_chain(tape: &mut Tape, model: &TokenizerModel, f_dec: &[NodeId]) -> DecodeChain {
    assert_eq!(f_dec.len(), model.num_scales());
    let d = model.cfg.d;
    let mut zhat = Vec::with_capacity(f_dec.len());
    let mut z: Vec<NodeId> = Vec::with_capacity(f_dec.len());
    for k in 0..f_dec.len() {
        let t_k = model.ladder.levels()[k].token_len;
        let zh = if k == 0 {
            tape.constant(vec![t_k, d], vec![0.0; t_k * d])
        } else {
            let up = tape
                .linear_upsample(z[k - 1], t_k)
                .expect("token lengths increase with k");
            model.conv_blocks[k - 1].forward(tape, &model.store, up)
        };
        let zk = tape.add(zh, f_dec[k]);
        zhat.push(zh);
        z.push(zk);
    }
    DecodeChain { zhat, z }
}

/// Decode a token pyramid to the finest-scale feature sequence.
pub fn decode_pyramid(
    tape: &mut Tape,
    model: &TokenizerModel,
    pyramid: &TokenPyramid,
) -> DecodeChain {
    assert!(
        pyramid.validate(&model.ladder, model.cfg.v),
        "pyramid does not match the ladder/codebook"
    );
    let codebook = tape.param(&model.store, model.codebook);
    let f_dec: Vec<NodeId> = pyramid
        .tokens
        .iter()
        .map(|seq| tape.gather(codebook, seq))
        .collect();
    decode_chain(tape, model, &f_dec)
}

/// Teacher-forced trajectory decoding: a causal transformer over the finest
/// features plus previous-location embeddings; returns per-step logits over
/// the finest grid.
pub fn traj_decode_teacher(
    tape: &mut Tape,
    model: &TokenizerModel,
    z: NodeId,
    teacher: &[usize],
) -> NodeId {
    let t = model.ladder.t_len;
    assert_eq!(teacher.len(), t, "teacher length must equal T");
    let mut prev_ids = Vec::with_capacity(t);
    prev_ids.push(model.start_token());
    prev_ids.extend_from_slice(&teacher[..t - 1]);

    let table = tape.param(&model.store, model.dec_prev_embed);
    let emb = tape.gather(table, &prev_ids);
    let x = tape.add(emb, z);
    let pos = tape.param(&model.store, model.dec_pos);
    let mut h = tape.add(x, pos);
    let mask = tape.constant(vec![t, t], causal_mask_bias(t));
    for layer in &model.decoder {
        h = layer.forward(tape, &model.store, h, Some(mask));
    }
    let h = model.dec_final_ln.forward(tape, &model.store, h);
    model.head.forward(tape, &model.store, h)
}

pub struct TokenizerLossNodes {
    pub total: NodeId,
    pub rec: NodeId,
    pub com: NodeId,
    pub qua: NodeId,
    pub pyramid: TokenPyramid,
    /// Residual rows (finest scale) for dead-codeword reseeding.
    pub f_enc_finest: NodeId,
}

/// Full training loss for one trajectory. The straight-through bridge feeds
/// the reconstruction path, so its gradient reaches the encoder; a parallel
/// decode from raw codebook rows carries the quantization term, which is how
/// the codebook itself trains.
pub fn tokenizer_loss(
    tape: &mut Tape,
    model: &TokenizerModel,
    cells: &[usize],
    scale_seqs: &[Vec<usize>],
) -> TokenizerLossNodes {
    let z_enc = encode_scales(tape, model, scale_seqs);
    let q = quantize_pyramid(tape, model, z_enc);
    let pyramid = q.pyramid.clone();
    tokenizer_loss_from_quantized(tape, model, cells, q, pyramid)
}

/// Same loss with the code assignments fixed in advance; used to check
/// gradients with frozen indices where the loss is differentiable.
pub fn tokenizer_loss_with_codes(
    tape: &mut Tape,
    model: &TokenizerModel,
    cells: &[usize],
    scale_seqs: &[Vec<usize>],
    pyramid: &TokenPyramid,
) -> TokenizerLossNodes {
    let z_enc = encode_scales(tape, model, scale_seqs);
    let d = model.cfg.d;
    let codebook = tape.param(&model.store, model.codebook);

    let mut zhat_enc = Vec::new();
    let mut f_enc = Vec::new();
    let mut f_lookup = Vec::new();
    for k in 0..z_enc.len() {
        let t_k = model.ladder.levels()[k].token_len;
        let zhat = if k == 0 {
            tape.constant(vec![t_k, d], vec![0.0; t_k * d])
        } else {
            let up = tape.linear_upsample(z_enc[k - 1], t_k).unwrap();
            model.conv_blocks[k - 1].forward(tape, &model.store, up)
        };
        let f = tape.sub(z_enc[k], zhat);
        let lookup = tape.gather(codebook, &pyramid.tokens[k]);
        zhat_enc.push(zhat);
        f_enc.push(f);
        f_lookup.push(lookup);
    }
    let q = QuantizeOutput {
        pyramid: pyramid.clone(),
        z_enc,
        zhat_enc,
        f_enc,
        f_lookup,
    };
    tokenizer_loss_from_quantized(tape, model, cells, q, pyramid.clone())
}

fn tokenizer_loss_from_quantized(
    tape: &mut Tape,
    model: &TokenizerModel,
    cells: &[usize],
    q: QuantizeOutput,
    pyramid: TokenPyramid,
) -> TokenizerLossNodes {
    let k_scales = model.num_scales();

    // Straight-through decode feeds the reconstruction.
    let f_st: Vec<NodeId> = q
        .f_enc
        .iter()
        .zip(q.f_lookup.iter())
        .map(|(&z, &qv)| tape.straight_through(z, qv))
        .collect();
    let st_chain = decode_chain(tape, model, &f_st);

    // Raw-lookup decode carries the quantization term.
    let raw_chain = decode_chain(tape, model, &q.f_lookup);

    let logits = traj_decode_teacher(tape, model, st_chain.z[k_scales - 1], cells);
    let rec = tape.cross_entropy(logits, cells, Reduction::Mean);

    let mut com_sum: Option<NodeId> = None;
    for k in 0..k_scales {
        let sg_dec = tape.detach(st_chain.z[k]);
        let diff = tape.sub(sg_dec, q.z_enc[k]);
        let term = tape.mean_sq(diff);
        com_sum = Some(match com_sum {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let com = tape.scale(com_sum.expect("at least one scale"), 1.0 / k_scales as f32);

    let sg_enc = tape.detach(q.z_enc[k_scales - 1]);
    let qua_diff = tape.sub(raw_chain.z[k_scales - 1], sg_enc);
    let qua = tape.mean_sq(qua_diff);

    let com_weighted = tape.scale(com, model.cfg.beta);
    let partial = tape.add(rec, com_weighted);
    let total = tape.add(partial, qua);

    TokenizerLossNodes {
        total,
        rec,
        com,
        qua,
        pyramid,
        f_enc_finest: q.f_enc[k_scales - 1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid::GridSpec;
    use crate::data::ladder::ScaleLadder;
    use crate::data::{map_to_scale, Trajectory};
    use crate::tokenizer::model::TokenizerConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> TokenizerModel {
        let ladder = ScaleLadder::new(
            GridSpec::new(4, 4, 1.0),
            24,
            &[(4, 24.0), (2, 6.0), (1, 1.0)],
        )
        .unwrap();
        let cfg = TokenizerConfig {
            v: 16,
            d: 8,
            layers: 1,
            heads: 2,
            mlp_hidden: 16,
            conv_kernel: 3,
            beta: 0.25,
        };
        TokenizerModel::new(cfg, ladder, 42)
    }

    fn random_scale_seqs(model: &TokenizerModel, seed: u64) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells: Vec<usize> = (0..model.ladder.t_len)
            .map(|_| rng.gen_range(0..model.ladder.fine_grid.cell_count()))
            .collect();
        let traj = Trajectory {
            user_id: "t".into(),
            cells: cells.clone(),
        };
        let seqs = (1..=model.num_scales())
            .map(|k| map_to_scale(&traj, &model.ladder, k).unwrap())
            .collect();
        (cells, seqs)
    }

    #[test]
    fn embed_scale_is_a_gather() {
        let model = tiny_model();
        let mut tape = Tape::no_grad();
        let x = embed_scale(&mut tape, &model, &[5], 3);
        let table = model.store.values(model.scale_embeddings[2]);
        assert_eq!(tape.value(x), &table[5 * 8..6 * 8]);
        assert_eq!(tape.shape(x), &[1, 8]);
    }

    #[test]
    fn embed_scale_matches_one_hot_product() {
        let model = tiny_model();
        let seq = [3usize, 0, 7];
        let mut tape = Tape::no_grad();
        let x = embed_scale(&mut tape, &model, &seq, 3);
        // Dense one-hot matrix multiplied against the table.
        let n = 16;
        let mut onehot = vec![0.0f32; seq.len() * n];
        for (r, &c) in seq.iter().enumerate() {
            onehot[r * n + c] = 1.0;
        }
        let oh = tape.constant(vec![seq.len(), n], onehot);
        let table = tape.param(&model.store, model.scale_embeddings[2]);
        let dense = tape.matmul(oh, table);
        assert_eq!(tape.value(x), tape.value(dense));
    }

    #[test]
    fn encode_lengths_follow_ladder() {
        let model = tiny_model();
        let (_, seqs) = random_scale_seqs(&model, 1);
        let mut tape = Tape::no_grad();
        let zs = encode_scales(&mut tape, &model, &seqs);
        assert_eq!(tape.shape(zs[0]), &[1, 8]);
        assert_eq!(tape.shape(zs[1]), &[4, 8]);
        assert_eq!(tape.shape(zs[2]), &[24, 8]);
    }

    #[test]
    fn telescoping_identity_bitwise() {
        let model = tiny_model();
        let (_, seqs) = random_scale_seqs(&model, 2);
        let mut tape = Tape::no_grad();
        let zs = encode_scales(&mut tape, &model, &seqs);
        let q = quantize_pyramid(&mut tape, &model, zs);
        for k in 0..model.num_scales() {
            let z = tape.value(q.z_enc[k]);
            let zhat = tape.value(q.zhat_enc[k]);
            let f = tape.value(q.f_enc[k]);
            for i in 0..z.len() {
                assert_eq!(f[i], z[i] - zhat[i], "scale {k} element {i}");
            }
        }
    }

    #[test]
    fn quantizer_is_true_nearest_neighbor() {
        let model = tiny_model();
        let (_, seqs) = random_scale_seqs(&model, 3);
        let mut tape = Tape::no_grad();
        let zs = encode_scales(&mut tape, &model, &seqs);
        let q = quantize_pyramid(&mut tape, &model, zs);
        let cb = model.store.values(model.codebook);
        let d = model.cfg.d;
        for k in 0..model.num_scales() {
            let f = tape.value(q.f_enc[k]);
            for (r, &idx) in q.pyramid.tokens[k].iter().enumerate() {
                let row = &f[r * d..(r + 1) * d];
                for v in 0..model.cfg.v {
                    let dist = |cw: usize| -> f64 {
                        (0..d)
                            .map(|i| {
                                let diff = row[i] as f64 - cb[cw * d + i] as f64;
                                diff * diff
                            })
                            .sum()
                    };
                    assert!(dist(idx) <= dist(v), "scale {k} row {r}: {idx} vs {v}");
                }
            }
        }
    }

    #[test]
    fn decode_side_composition_bitwise() {
        let model = tiny_model();
        let (_, seqs) = random_scale_seqs(&model, 4);
        let mut tape = Tape::no_grad();
        let zs = encode_scales(&mut tape, &model, &seqs);
        let q = quantize_pyramid(&mut tape, &model, zs);
        let chain = decode_chain(&mut tape, &model, &q.f_lookup);
        for k in 0..model.num_scales() {
            let z = tape.value(chain.z[k]);
            let zhat = tape.value(chain.zhat[k]);
            let f = tape.value(q.f_lookup[k]);
            for i in 0..z.len() {
                assert_eq!(z[i], zhat[i] + f[i], "scale {k} element {i}");
            }
        }
    }

    #[test]
    fn bypass_quantization_reproduces_encoder_output() {
        let model = tiny_model();
        let (_, seqs) = random_scale_seqs(&model, 5);
        let mut tape = Tape::no_grad();
        let zs = encode_scales(&mut tape, &model, &seqs);
        let q = quantize_pyramid(&mut tape, &model, zs);
        let chain = decode_chain(&mut tape, &model, &q.f_enc);
        let k = model.num_scales() - 1;
        let dec = tape.value(chain.z[k]);
        let enc = tape.value(q.z_enc[k]);
        for (a, b) in dec.iter().zip(enc.iter()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn single_scale_pyramid_quantizes_z_directly() {
        let ladder = ScaleLadder::new(GridSpec::new(4, 4, 1.0), 24, &[(1, 1.0)]).unwrap();
        let cfg = TokenizerConfig {
            v: 8,
            d: 8,
            layers: 1,
            heads: 2,
            mlp_hidden: 16,
            conv_kernel: 3,
            beta: 0.25,
        };
        let model = TokenizerModel::new(cfg, ladder, 7);
        let seqs = vec![(0..24).map(|t| t % 16).collect::<Vec<_>>()];
        let mut tape = Tape::no_grad();
        let zs = encode_scales(&mut tape, &model, &seqs);
        let q = quantize_pyramid(&mut tape, &model, zs);
        // F_1 = Z_1 exactly, and the decode of one scale is the lookup.
        assert_eq!(tape.value(q.f_enc[0]), tape.value(q.z_enc[0]));
        let chain = decode_chain(&mut tape, &model, &q.f_lookup);
        assert_eq!(tape.value(chain.z[0]), tape.value(q.f_lookup[0]));
    }

    #[test]
    fn traj_decode_is_causal() {
        let model = tiny_model();
        let (cells, seqs) = random_scale_seqs(&model, 6);
        let mut tape = Tape::no_grad();
        let zs = encode_scales(&mut tape, &model, &seqs);
        let q = quantize_pyramid(&mut tape, &model, zs);
        let chain = decode_chain(&mut tape, &model, &q.f_lookup);
        let z_last = chain.z[model.num_scales() - 1];
        let logits = traj_decode_teacher(&mut tape, &model, z_last, &cells);
        let base = tape.value(logits).to_vec();
        let n = model.ladder.fine_grid.cell_count();

        // Perturb the teacher at position t; logits at positions <= t must
        // not change (position t sees locations strictly before t).
        let t_perturb = 10;
        let mut cells2 = cells.clone();
        cells2[t_perturb] = (cells2[t_perturb] + 1) % n;
        let mut tape2 = Tape::no_grad();
        let zs2 = encode_scales(&mut tape2, &model, &seqs);
        let q2 = quantize_pyramid(&mut tape2, &model, zs2);
        let chain2 = decode_chain(&mut tape2, &model, &q2.f_lookup);
        let logits2 =
            traj_decode_teacher(&mut tape2, &model, chain2.z[model.num_scales() - 1], &cells2);
        let pert = tape2.value(logits2);
        for t in 0..=t_perturb {
            for c in 0..n {
                assert_eq!(base[t * n + c], pert[t * n + c], "t={t}");
            }
        }
        assert!(
            (0..n).any(|c| base[(t_perturb + 1) * n + c] != pert[(t_perturb + 1) * n + c]),
            "perturbation must reach later positions"
        );
    }

    #[test]
    fn loss_components_behave() {
        let model = tiny_model();
        let (cells, seqs) = random_scale_seqs(&model, 8);
        let mut tape = Tape::new();
        let nodes = tokenizer_loss(&mut tape, &model, &cells, &seqs);
        let total = tape.scalar_value(nodes.total);
        let rec = tape.scalar_value(nodes.rec);
        let com = tape.scalar_value(nodes.com);
        let qua = tape.scalar_value(nodes.qua);
        assert!(total.is_finite());
        assert!(
            (total - (rec + model.cfg.beta * com + qua)).abs() < 1e-5,
            "total {total} vs parts {rec} {com} {qua}"
        );
        // At init the reconstruction is near the uniform bound.
        let uniform = (model.ladder.fine_grid.cell_count() as f32).ln();
        assert!((rec - uniform).abs() < 0.5, "rec {rec} vs ln(N)={uniform}");
    }

    #[test]
    fn loss_backward_populates_all_params() {
        let model = tiny_model();
        let (cells, seqs) = random_scale_seqs(&model, 9);
        let mut tape = Tape::new();
        let nodes = tokenizer_loss(&mut tape, &model, &cells, &seqs);
        tape.backward(nodes.total).unwrap();
        let mut store = model.store.clone();
        tape.export_param_grads(&mut store);
        // Every parameter that participates must see a finite gradient;
        // the codebook in particular trains through the quantization term.
        let cb_grad = store.get(model.codebook).tensor.grad.as_ref().unwrap();
        assert!(cb_grad.iter().any(|&g| g != 0.0), "codebook gets gradient");
        for (_, p) in store.iter() {
            let g = p.tensor.grad.as_ref().unwrap();
            assert!(g.iter().all(|v| v.is_finite()), "{}", p.name);
        }
    }
}
