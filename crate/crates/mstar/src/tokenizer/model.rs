//! The multi-scale tokenizer model: per-scale spatial embeddings, one shared
//! temporal encoder, per-transition refinement blocks, a shared codebook,
//! and a causal trajectory decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::{randn_tensor, uniform_tensor, ParamId, ParamStore};
use crate::data::ladder::ScaleLadder;
use crate::nn::{ConvBlock, EncoderLayer, LayerNormParams, Linear, INIT_STD};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenizerConfig {
    /// Codebook size.
    pub v: usize,
    /// Embedding and codeword width (one width throughout).
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub conv_kernel: usize,
    /// Commitment-loss weight.
    pub beta: f32,
}

impl TokenizerConfig {
    pub fn desk() -> Self {
        TokenizerConfig {
            v: 256,
            d: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            conv_kernel: 3,
            beta: 0.25,
        }
    }
}

/// Per-scale residual token sequences for one trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPyramid {
    pub tokens: Vec<Vec<usize>>,
}

impl TokenPyramid {
    pub fn validate(&self, ladder: &ScaleLadder, v: usize) -> bool {
        self.tokens.len() == ladder.num_scales()
            && self
                .tokens
                .iter()
                .zip(ladder.levels())
                .all(|(seq, lvl)| seq.len() == lvl.token_len && seq.iter().all(|&t| t < v))
    }
}

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    pub cfg: TokenizerConfig,
    pub ladder: ScaleLadder,
    pub store: ParamStore,
    /// E_k, one table per scale, sized to that scale's grid.
    pub scale_embeddings: Vec<ParamId>,
    pub enc_pos: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub enc_final_ln: LayerNormParams,
    /// One block per scale transition; `conv_blocks[i]` refines the
    /// upsampled scale `i+1` into scale `i+2` (1-based). Shared between the
    /// encoding and decoding phases.
    pub conv_blocks: Vec<ConvBlock>,
    pub codebook: ParamId,
    /// Previous-location embeddings for the trajectory decoder; the extra
    /// last row is the start token.
    pub dec_prev_embed: ParamId,
    pub dec_pos: ParamId,
    pub decoder: Vec<EncoderLayer>,
    pub dec_final_ln: LayerNormParams,
    pub head: Linear,
}

impl TokenizerModel {
    pub fn new(cfg: TokenizerConfig, ladder: ScaleLadder, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let t = ladder.t_len;
        let n_fine = ladder.fine_grid.cell_count();

        let scale_embeddings = ladder
            .levels()
            .iter()
            .enumerate()
            .map(|(i, lvl)| {
                store.add(
                    format!("embed.scale{}", i + 1),
                    randn_tensor(&mut rng, vec![lvl.grid.cell_count(), d], INIT_STD),
                )
            })
            .collect();

        let enc_pos = store.add("enc.pos", randn_tensor(&mut rng, vec![t, d], INIT_STD));
        let encoder = (0..cfg.layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("enc.layer{i}"),
                    d,
                    cfg.heads,
                    cfg.mlp_hidden,
                )
            })
            .collect();
        let enc_final_ln = LayerNormParams::new(&mut store, "enc.final_ln", d);

        let conv_blocks = (1..ladder.num_scales())
            .map(|k| {
                ConvBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("convblock{}", k + 1),
                    d,
                    cfg.mlp_hidden,
                    cfg.conv_kernel,
                )
            })
            .collect();

        let bound = 1.0 / cfg.v as f32;
        let codebook = store.add(
            "codebook",
            uniform_tensor(&mut rng, vec![cfg.v, d], -bound, bound),
        );

        let dec_prev_embed = store.add(
            "dec.prev_embed",
            randn_tensor(&mut rng, vec![n_fine + 1, d], INIT_STD),
        );
        let dec_pos = store.add("dec.pos", randn_tensor(&mut rng, vec![t, d], INIT_STD));
        let decoder = (0..cfg.layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("dec.layer{i}"),
                    d,
                    cfg.heads,
                    cfg.mlp_hidden,
                )
            })
            .collect();
        let dec_final_ln = LayerNormParams::new(&mut store, "dec.final_ln", d);
        let head = Linear::new(&mut store, &mut rng, "dec.head", d, n_fine);

        TokenizerModel {
            cfg,
            ladder,
            store,
            scale_embeddings,
            enc_pos,
            encoder,
            enc_final_ln,
            conv_blocks,
            codebook,
            dec_prev_embed,
            dec_pos,
            decoder,
            dec_final_ln,
            head,
        }
    }

    /// Start-token row index in the previous-location embedding table.
    pub fn start_token(&self) -> usize {
        self.ladder.fine_grid.cell_count()
    }

    pub fn num_scales(&self) -> usize {
        self.ladder.num_scales()
    }

    /// Overwrite a codebook row, e.g. when reseeding a dead codeword.
    pub fn set_codeword(&mut self, index: usize, values: &[f32]) {
        let d = self.cfg.d;
        let cb = self.store.get_mut(self.codebook);
        cb.tensor.values[index * d..(index + 1) * d].copy_from_slice(values);
    }
}

/// Index of the codeword nearest to `f` under squared Euclidean distance,
/// accumulated in f64; ties resolve to the lowest index.
pub fn nearest_codeword(f: &[f32], codebook: &[f32], v: usize, d: usize) -> usize {
    debug_assert_eq!(f.len(), d);
    debug_assert_eq!(codebook.len(), v * d);
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for cw in 0..v {
        let row = &codebook[cw * d..(cw + 1) * d];
        let mut acc = 0.0f64;
        for i in 0..d {
            let diff = f[i] as f64 - row[i] as f64;
            acc += diff * diff;
        }
        if acc < best_dist {
            best_dist = acc;
            best = cw;
        }
    }
    best
}
