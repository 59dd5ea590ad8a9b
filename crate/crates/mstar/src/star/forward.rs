//! Teacher-forced forward pass of the next-scale transformer and its loss.

use crate::autodiff::tape::{NodeId, Reduction, Tape};
use crate::data::MovementAttributes;
use crate::tokenizer::{decode_pyramid, TokenPyramid, TokenizerModel};

use super::mask::{blockwise_mask, mask_to_bias};
use super::model::StarModel;

/// Teacher inputs for scales 2..K, derived from the ground-truth pyramid
/// with the frozen tokenizer: each block is the refinement of the
/// accumulated coarser representation. Returned as raw row-major buffers.
pub fn build_teacher_inputs(
    tokenizer: &TokenizerModel,
    pyramid: &TokenPyramid,
) -> Vec<Vec<f32>> {
    let mut tape = Tape::no_grad();
    let chain = decode_pyramid(&mut tape, tokenizer, pyramid);
    // zhat[0] is the zero convention for scale 1; the teacher blocks start
    // at scale 2.
    chain.zhat[1..]
        .iter()
        .map(|&n| tape.value(n).to_vec())
        .collect()
}

/// Embed the movement attributes into the condition vector (1 x d).
pub fn cond_embedding(
    tape: &mut Tape,
    star: &StarModel,
    attrs: &MovementAttributes,
) -> NodeId {
    let home_t = tape.param(&star.store, star.cond_home_embed);
    let commute_t = tape.param(&star.store, star.cond_commute_embed);
    let label_t = tape.param(&star.store, star.cond_label_embed);
    let h = tape.gather(home_t, &[attrs.home_cell]);
    let c = tape.gather(commute_t, &[attrs.commute_cell]);
    let l = tape.gather(label_t, &[attrs.pattern_label.index()]);
    let cat = tape.concat_cols(&[h, c, l]);
    star.cond_proj.forward(tape, &star.store, cat)
}

/// Assemble the block sequence, run the AdaLN transformer under the
/// block-wise causal mask, and return per-scale logit blocks.
///
/// `zhat_blocks` are the inputs for scales 2..K (tape nodes of shape
/// T_k x d); scale 1 rides in the condition block as learned slots.
pub fn star_forward(
    tape: &mut Tape,
    star: &StarModel,
    cond: NodeId,
    zhat_blocks: &[NodeId],
) -> Vec<NodeId> {
    let k_scales = star.ladder.num_scales();
    assert_eq!(
        zhat_blocks.len(),
        k_scales - 1,
        "one teacher block per scale after the first"
    );
    let d = star.cfg.d;
    let lens = star.ladder.token_lens();

    let scale_table = tape.param(&star.store, star.scale_embed);
    let pos_table = tape.param(&star.store, star.pos_embed);

    let mut parts = vec![cond];
    for k in 1..=k_scales {
        let t_k = lens[k - 1];
        let base = if k == 1 {
            tape.constant(vec![t_k, d], vec![0.0; t_k * d])
        } else {
            zhat_blocks[k - 2]
        };
        let se = tape.slice_rows(scale_table, k - 1, 1);
        let pe = tape.slice_rows(pos_table, 0, t_k);
        let x = tape.add_row(base, se);
        let x = tape.add(x, pe);
        parts.push(x);
    }
    let mut x = tape.concat_rows(&parts);
    let total = tape.shape(x)[0];

    let bias = mask_to_bias(&blockwise_mask(&star.block_lengths()));
    let mask = tape.constant(vec![total, total], bias);
    let ones = tape.constant(vec![1, d], vec![1.0; d]);

    for layer in &star.layers {
        let gb = layer.adaln.forward(tape, &star.store, cond);
        let g1 = tape.slice_cols(gb, 0, d);
        let b1 = tape.slice_cols(gb, d, d);
        let g2 = tape.slice_cols(gb, 2 * d, d);
        let b2 = tape.slice_cols(gb, 3 * d, d);

        let n = tape.layer_norm_plain(x);
        let g1p = tape.add(g1, ones);
        let n = tape.mul_row(n, g1p);
        let n = tape.add_row(n, b1);
        let a = layer.attn.forward(tape, &star.store, n, Some(mask));
        x = tape.add(x, a);

        let n = tape.layer_norm_plain(x);
        let g2p = tape.add(g2, ones);
        let n = tape.mul_row(n, g2p);
        let n = tape.add_row(n, b2);
        let m = layer.mlp.forward(tape, &star.store, n);
        x = tape.add(x, m);
    }
    let x = star.final_ln.forward(tape, &star.store, x);
    let logits = star.head.forward(tape, &star.store, x);

    (1..=k_scales)
        .map(|k| tape.slice_rows(logits, star.scale_row_offset(k), lens[k - 1]))
        .collect()
}

/// Cross-entropy aggregated over all scales (summed), plus the token count
/// for per-token reporting.
pub fn star_loss(
    tape: &mut Tape,
    logit_blocks: &[NodeId],
    pyramid: &TokenPyramid,
) -> (NodeId, usize) {
    assert_eq!(logit_blocks.len(), pyramid.tokens.len());
    let mut total: Option<NodeId> = None;
    let mut count = 0usize;
    for (&logits, targets) in logit_blocks.iter().zip(pyramid.tokens.iter()) {
        let term = tape.cross_entropy(logits, targets, Reduction::Sum);
        count += targets.len();
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    (total.expect("at least one scale"), count)
}
