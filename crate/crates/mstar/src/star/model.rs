//! The next-scale generator: a transformer over scale blocks with adaptive
//! layer normalization driven by the user's movement attributes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::tensor::{randn_tensor, ParamId, ParamStore};
use crate::data::ladder::ScaleLadder;
use crate::nn::{Attention, LayerNormParams, Linear, Mlp, INIT_STD};

#[derive(Debug, Error)]
pub enum StarError {
    #[error("scale ladders of the two models do not match")]
    LadderMismatch,
    #[error("invalid sampler config: {0}")]
    InvalidSampler(String),
    #[error("codeword width {star} does not match tokenizer width {tokenizer}")]
    WidthMismatch { star: usize, tokenizer: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StarConfig {
    /// Codebook size the output head predicts over.
    pub v: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl StarConfig {
    pub fn desk() -> Self {
        StarConfig {
            v: 256,
            d: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

/// Token-wise sampling behaviour during generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplerConfig {
    /// Temperature offset; per-token temperature is `alpha - confidence`.
    pub alpha: f32,
    /// Lower bound on the temperature; at the floor, sampling is argmax.
    pub temp_floor: f32,
    /// Centered moving-average window (odd) smoothing the final features.
    pub ma_window: usize,
    /// Temperature of the final trajectory decoder.
    pub decoder_temperature: f32,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn desk(seed: u64) -> Self {
        SamplerConfig {
            alpha: 1.3,
            temp_floor: 0.05,
            ma_window: 3,
            decoder_temperature: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), StarError> {
        if self.alpha < 1.0 {
            return Err(StarError::InvalidSampler(format!(
                "alpha must be >= 1, got {}",
                self.alpha
            )));
        }
        if self.temp_floor <= 0.0 {
            return Err(StarError::InvalidSampler(format!(
                "temp_floor must be positive, got {}",
                self.temp_floor
            )));
        }
        if self.ma_window % 2 == 0 || self.ma_window == 0 {
            return Err(StarError::InvalidSampler(format!(
                "ma_window must be odd and positive, got {}",
                self.ma_window
            )));
        }
        Ok(())
    }
}

/// Transformer block with AdaLN modulation: both normalization sites are
/// plain layer norms whose scale and shift come from a learned projection of
/// the condition embedding.
#[derive(Debug, Clone)]
pub struct AdaLnLayer {
    pub attn: Attention,
    pub mlp: Mlp,
    /// d -> 4d projection producing (gamma1, beta1, gamma2, beta2).
    pub adaln: Linear,
}

impl AdaLnLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        AdaLnLayer {
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, hidden),
            adaln: Linear::new(store, rng, &format!("{name}.adaln"), d, 4 * d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StarModel {
    pub cfg: StarConfig,
    pub ladder: ScaleLadder,
    pub store: ParamStore,
    /// Condition embedder: home cell, commute cell, and pattern label each
    /// get a table; the concatenation projects to the model width.
    pub cond_home_embed: ParamId,
    pub cond_commute_embed: ParamId,
    pub cond_label_embed: ParamId,
    pub cond_proj: Linear,
    /// One learned vector per scale level.
    pub scale_embed: ParamId,
    /// Within-scale positional embeddings, sized to the finest length.
    pub pos_embed: ParamId,
    pub layers: Vec<AdaLnLayer>,
    pub final_ln: LayerNormParams,
    pub head: Linear,
}

impl StarModel {
    pub fn new(cfg: StarConfig, ladder: ScaleLadder, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let n_fine = ladder.fine_grid.cell_count();
        let k = ladder.num_scales();
        let t = ladder.t_len;

        let cond_home_embed = store.add(
            "cond.home",
            randn_tensor(&mut rng, vec![n_fine, d], INIT_STD),
        );
        let cond_commute_embed = store.add(
            "cond.commute",
            randn_tensor(&mut rng, vec![n_fine, d], INIT_STD),
        );
        let cond_label_embed =
            store.add("cond.label", randn_tensor(&mut rng, vec![3, d], INIT_STD));
        let cond_proj = Linear::new(&mut store, &mut rng, "cond.proj", 3 * d, d);

        let scale_embed = store.add("scale_embed", randn_tensor(&mut rng, vec![k, d], INIT_STD));
        let pos_embed = store.add("pos_embed", randn_tensor(&mut rng, vec![t, d], INIT_STD));

        let layers = (0..cfg.layers)
            .map(|i| {
                AdaLnLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("layer{i}"),
                    d,
                    cfg.heads,
                    cfg.mlp_hidden,
                )
            })
            .collect();
        let final_ln = LayerNormParams::new(&mut store, "final_ln", d);
        let head = Linear::new(&mut store, &mut rng, "head", d, cfg.v);

        StarModel {
            cfg,
            ladder,
            store,
            cond_home_embed,
            cond_commute_embed,
            cond_label_embed,
            cond_proj,
            scale_embed,
            pos_embed,
            layers,
            final_ln,
            head,
        }
    }

    /// Sequence length of the teacher-forced forward: one condition token,
    /// the scale-1 slots, then one block per finer scale.
    pub fn seq_len(&self) -> usize {
        1 + self.ladder.total_tokens()
    }

    /// Attention block lengths: the condition token shares a block with the
    /// scale-1 slots.
    pub fn block_lengths(&self) -> Vec<usize> {
        let lens = self.ladder.token_lens();
        let mut out = Vec::with_capacity(lens.len());
        out.push(1 + lens[0]);
        out.extend_from_slice(&lens[1..]);
        out
    }

    /// Row offset of scale `k` (1-based) in the assembled sequence.
    pub fn scale_row_offset(&self, k: usize) -> usize {
        let lens = self.ladder.token_lens();
        1 + lens[..k - 1].iter().sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid::GridSpec;

    fn ladder() -> ScaleLadder {
        ScaleLadder::new(
            GridSpec::new(16, 16, 1.0),
            168,
            &[(8, 168.0), (4, 24.0), (2, 6.0), (1, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn dimensions() {
        let m = StarModel::new(StarConfig::desk(), ladder(), 3);
        assert_eq!(m.store.shape(m.scale_embed), &[4, 64]);
        assert_eq!(m.seq_len(), 1 + 1 + 7 + 28 + 168);
        assert_eq!(m.block_lengths(), vec![2, 7, 28, 168]);
        assert_eq!(m.scale_row_offset(1), 1);
        assert_eq!(m.scale_row_offset(2), 2);
        assert_eq!(m.scale_row_offset(4), 2 + 7 + 28);
        assert_eq!(m.head.d_out, 256);
    }

    #[test]
    fn sampler_validation() {
        assert!(SamplerConfig::desk(0).validate().is_ok());
        let mut s = SamplerConfig::desk(0);
        s.alpha = 0.9;
        assert!(s.validate().is_err());
        let mut s = SamplerConfig::desk(0);
        s.ma_window = 4;
        assert!(s.validate().is_err());
        let mut s = SamplerConfig::desk(0);
        s.temp_floor = 0.0;
        assert!(s.validate().is_err());
    }
}
