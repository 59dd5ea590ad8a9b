//! Tokenizer inference: trajectory -> token pyramid, pyramid -> features,
//! and cached autoregressive trajectory decoding.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::tape::Tape;
use crate::data::corpus::scale_sequences;
use crate::data::Trajectory;
use crate::nn::{argmax, attend_extend, sample_with_temperature, LayerKv};

use super::forward::{decode_pyramid, encode_scales, quantize_pyramid};
use super::model::{TokenPyramid, TokenizerModel};

/// Encode a trajectory into its multi-scale token pyramid (no gradients).
pub fn encode_to_pyramid(model: &TokenizerModel, traj: &Trajectory) -> TokenPyramid {
    let seqs = scale_sequences(traj, &model.ladder).expect("trajectory matches ladder");
    let mut tape = Tape::no_grad();
    let zs = encode_scales(&mut tape, model, &seqs);
    quantize_pyramid(&mut tape, model, zs).pyramid
}

/// Decode a pyramid to the finest-scale feature sequence (row-major T x d).
pub fn finest_decode_features(model: &TokenizerModel, pyramid: &TokenPyramid) -> Vec<f32> {
    let mut tape = Tape::no_grad();
    let chain = decode_pyramid(&mut tape, model, pyramid);
    tape.value(chain.z[model.num_scales() - 1]).to_vec()
}

/// Autoregressive trajectory decoding over precomputed features, with a
/// per-layer KV cache. A non-positive temperature decodes greedily.
pub fn decode_features(
    model: &TokenizerModel,
    z: &[f32],
    temperature: f32,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let t_len = model.ladder.t_len;
    let d = model.cfg.d;
    assert_eq!(z.len(), t_len * d, "feature buffer must be T x d");
    let store = &model.store;
    let prev_table = store.values(model.dec_prev_embed);
    let pos = store.values(model.dec_pos);

    let mut caches: Vec<LayerKv> = model.decoder.iter().map(|_| LayerKv::default()).collect();
    let mut cells = Vec::with_capacity(t_len);
    let mut prev_id = model.start_token();
    for t in 0..t_len {
        let mut x: Vec<f32> = prev_table[prev_id * d..(prev_id + 1) * d].to_vec();
        for (i, xv) in x.iter_mut().enumerate() {
            *xv += z[t * d + i] + pos[t * d + i];
        }
        for (layer, cache) in model.decoder.iter().zip(caches.iter_mut()) {
            let n = layer.ln1.forward_raw(store, &x, 1);
            let a = attend_extend(&layer.attn, store, cache, &n, 1);
            for (xv, av) in x.iter_mut().zip(a.iter()) {
                *xv += av;
            }
            let n = layer.ln2.forward_raw(store, &x, 1);
            let m = layer.mlp.forward_raw(store, &n, 1);
            for (xv, mv) in x.iter_mut().zip(m.iter()) {
                *xv += mv;
            }
        }
        let h = model.dec_final_ln.forward_raw(store, &x, 1);
        let logits = model.head.forward_raw(store, &h, 1);
        let cell = if temperature <= 0.0 {
            argmax(&logits)
        } else {
            sample_with_temperature(&logits, temperature, rng)
        };
        cells.push(cell);
        prev_id = cell;
    }
    cells
}

/// Full reconstruction: encode, quantize, decode, then greedy cell decoding.
pub fn reconstruct(model: &TokenizerModel, traj: &Trajectory) -> Vec<usize> {
    let pyramid = encode_to_pyramid(model, traj);
    let z = finest_decode_features(model, &pyramid);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    decode_features(model, &z, 0.0, &mut rng)
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Tape;
    use crate::data::grid::GridSpec;
    use crate::data::ladder::ScaleLadder;
    use crate::tokenizer::forward::traj_decode_teacher;
    use crate::tokenizer::model::TokenizerConfig;
    use rand::Rng;

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
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
            conv_kernel: 3,
            beta: 0.25,
        };
        TokenizerModel::new(cfg, ladder, 11)
    }

    /// The cached greedy decode must agree with teacher-forcing the decoder
    /// on its own output: feed the greedy cells back as the teacher and the
    /// per-step argmax of the teacher-forced logits must reproduce them.
    #[test]
    fn cached_decode_consistent_with_tape_path() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traj = Trajectory {
            user_id: "u".into(),
            cells: (0..24).map(|_| rng.gen_range(0..16)).collect(),
        };
        let pyramid = encode_to_pyramid(&model, &traj);
        let z = finest_decode_features(&model, &pyramid);
        let greedy = decode_features(&model, &z, 0.0, &mut rng);
        assert_eq!(greedy.len(), 24);

        let mut tape = Tape::no_grad();
        let chain = decode_pyramid(&mut tape, &model, &pyramid);
        let z_node = chain.z[model.num_scales() - 1];
        let logits = traj_decode_teacher(&mut tape, &model, z_node, &greedy);
        let lv = tape.value(logits);
        let n = model.ladder.fine_grid.cell_count();
        for t in 0..24 {
            let row = &lv[t * n..(t + 1) * n];
            assert_eq!(argmax(row), greedy[t], "step {t}");
        }
    }

    #[test]
    fn pyramid_shapes_match_ladder() {
        let model = tiny_model();
        let traj = Trajectory {
            user_id: "u".into(),
            cells: vec![3; 24],
        };
        let p = encode_to_pyramid(&model, &traj);
        assert!(p.validate(&model.ladder, model.cfg.v));
        assert_eq!(
            p.tokens.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![1, 4, 24]
        );
    }
}
