//! The coarse-to-fine ladder of (spatial, temporal) resolutions.

use serde::{Deserialize, Serialize};

use super::error::DataError;
use super::grid::GridSpec;

/// One rung: a spatial coarsening factor relative to the finest grid, a
/// temporal resolution in hours, the derived grid, and the number of tokens
/// the scale carries.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLevel {
    pub s: usize,
    pub tau_hours: f64,
    pub grid: GridSpec,
    pub token_len: usize,
}

/// Ordered coarse-to-fine list of scales. The last level is always the raw
/// resolution: spatial factor 1 and the one-hour base step.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLadder {
    pub t_len: usize,
    pub fine_grid: GridSpec,
    levels: Vec<ScaleLevel>,
}

/// Serializable form: a list of `(s, tau_hours)` pairs, coarse to fine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSpec(pub Vec<(usize, f64)>);

impl ScaleLadder {
    pub fn new(
        fine_grid: GridSpec,
        t_len: usize,
        pairs: &[(usize, f64)],
    ) -> Result<Self, DataError> {
        if pairs.is_empty() {
            return Err(DataError::InvalidLadder("ladder has no levels".into()));
        }
        let mut levels = Vec::with_capacity(pairs.len());
        let mut prev: Option<(usize, f64)> = None;
        for (i, &(s, tau)) in pairs.iter().enumerate() {
            if s == 0 || tau <= 0.0 {
                return Err(DataError::InvalidLadder(format!(
                    "level {}: factors must be positive, got s={s}, tau={tau}",
                    i + 1
                )));
            }
            if let Some((ps, ptau)) = prev {
                if s > ps || tau > ptau {
                    return Err(DataError::InvalidLadder(format!(
                        "levels must be coarse-to-fine: level {} has (s={s}, tau={tau}) after (s={ps}, tau={ptau})",
                        i + 1
                    )));
                }
            }
            if fine_grid.rows % s != 0 || fine_grid.cols % s != 0 {
                return Err(DataError::InvalidLadder(format!(
                    "level {}: spatial factor {s} does not divide the {}x{} grid",
                    i + 1,
                    fine_grid.rows,
                    fine_grid.cols
                )));
            }
            let token_len = ((t_len as f64 / tau).round() as usize).max(1);
            let grid = fine_grid.coarsened(s).expect("divisibility checked");
            levels.push(ScaleLevel {
                s,
                tau_hours: tau,
                grid,
                token_len,
            });
            prev = Some((s, tau));
        }
        let last = levels.last().expect("non-empty");
        if last.s != 1 {
            return Err(DataError::InvalidLadder(format!(
                "finest level must have spatial factor 1, got {}",
                last.s
            )));
        }
        if last.tau_hours != 1.0 {
            return Err(DataError::InvalidLadder(format!(
                "finest level must run at the base step (tau = 1), got {}",
                last.tau_hours
            )));
        }
        if last.token_len != t_len {
            return Err(DataError::InvalidLadder(format!(
                "finest level must carry {t_len} tokens, got {}",
                last.token_len
            )));
        }
        Ok(ScaleLadder {
            t_len,
            fine_grid,
            levels,
        })
    }

    pub fn from_spec(
        fine_grid: GridSpec,
        t_len: usize,
        spec: &LadderSpec,
    ) -> Result<Self, DataError> {
        Self::new(fine_grid, t_len, &spec.0)
    }

    pub fn spec(&self) -> LadderSpec {
        LadderSpec(self.levels.iter().map(|l| (l.s, l.tau_hours)).collect())
    }

    pub fn num_scales(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[ScaleLevel] {
        &self.levels
    }

    /// 1-based scale access, matching the coarse-to-fine numbering.
    pub fn level(&self, k: usize) -> Result<&ScaleLevel, DataError> {
        if k == 0 || k > self.levels.len() {
            return Err(DataError::InvalidScaleIndex {
                k,
                max: self.levels.len(),
            });
        }
        Ok(&self.levels[k - 1])
    }

    pub fn token_lens(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.token_len).collect()
    }

    /// Total number of tokens across all scales.
    pub fn total_tokens(&self) -> usize {
        self.levels.iter().map(|l| l.token_len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_grid() -> GridSpec {
        GridSpec::new(16, 16, 1.0)
    }

    #[test]
    fn desk_ladder_token_lens() {
        let ladder = ScaleLadder::new(
            desk_grid(),
            168,
            &[(8, 168.0), (4, 24.0), (2, 6.0), (1, 1.0)],
        )
        .unwrap();
        assert_eq!(ladder.token_lens(), vec![1, 7, 28, 168]);
        assert_eq!(ladder.level(1).unwrap().grid.cell_count(), 4);
        assert_eq!(ladder.level(4).unwrap().grid.cell_count(), 256);
    }

    #[test]
    fn full_ladder_token_lens() {
        // The eight-level ladder, coarse to fine, with the fractional step.
        let pairs = [
            (8, 168.0),
            (8, 24.0),
            (4, 12.0),
            (4, 6.0),
            (2, 3.0),
            (2, 2.0),
            (1, 1.5),
            (1, 1.0),
        ];
        let ladder = ScaleLadder::new(desk_grid(), 168, &pairs).unwrap();
        assert_eq!(ladder.token_lens(), vec![1, 7, 14, 28, 56, 84, 112, 168]);
    }

    #[test]
    fn non_dividing_spatial_factor_is_named() {
        let err = ScaleLadder::new(desk_grid(), 168, &[(3, 24.0), (1, 1.0)]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("factor 3"), "{msg}");
    }

    #[test]
    fn unordered_levels_rejected() {
        let err =
            ScaleLadder::new(desk_grid(), 168, &[(2, 6.0), (4, 24.0), (1, 1.0)]).unwrap_err();
        assert!(err.to_string().contains("coarse-to-fine"), "{err}");
    }

    #[test]
    fn finest_level_must_be_raw() {
        let err = ScaleLadder::new(desk_grid(), 168, &[(8, 168.0), (2, 2.0)]).unwrap_err();
        assert!(err.to_string().contains("spatial factor 1"), "{err}");
        let err = ScaleLadder::new(desk_grid(), 168, &[(8, 168.0), (1, 2.0)]).unwrap_err();
        assert!(err.to_string().contains("base step"), "{err}");
    }

    #[test]
    fn invalid_scale_index() {
        let ladder = ScaleLadder::new(desk_grid(), 168, &[(1, 1.0)]).unwrap();
        assert!(ladder.level(0).is_err());
        assert!(ladder.level(2).is_err());
    }
}
