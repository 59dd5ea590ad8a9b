//! Spatial grids and multi-resolution cell mapping.

use serde::{Deserialize, Serialize};

use super::error::DataError;

/// A regular grid of square cells; identifiers are row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_km: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, cell_km: f64) -> Self {
        assert!(rows >= 1 && cols >= 1, "grid must have at least one cell");
        assert!(cell_km > 0.0, "cell edge must be positive");
        GridSpec {
            rows,
            cols,
            cell_km,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn contains(&self, cell: usize) -> bool {
        cell < self.cell_count()
    }

    pub fn cell_rc(&self, cell: usize) -> (usize, usize) {
        debug_assert!(self.contains(cell));
        (cell / self.cols, cell % self.cols)
    }

    pub fn cell_id(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    /// Cell-center coordinates in kilometers.
    pub fn center_km(&self, cell: usize) -> (f64, f64) {
        let (r, c) = self.cell_rc(cell);
        (
            (c as f64 + 0.5) * self.cell_km,
            (r as f64 + 0.5) * self.cell_km,
        )
    }

    pub fn center_distance_km(&self, a: usize, b: usize) -> f64 {
        let (ax, ay) = self.center_km(a);
        let (bx, by) = self.center_km(b);
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Diagonal extent of the whole grid in kilometers.
    pub fn diagonal_km(&self) -> f64 {
        ((self.rows as f64 * self.cell_km).powi(2) + (self.cols as f64 * self.cell_km).powi(2))
            .sqrt()
    }

    /// The grid obtained by merging `factor x factor` blocks of cells.
    pub fn coarsened(&self, factor: usize) -> Result<GridSpec, DataError> {
        if factor == 0 || self.rows % factor != 0 || self.cols % factor != 0 {
            return Err(DataError::NonDividingFactor {
                factor,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(GridSpec {
            rows: self.rows / factor,
            cols: self.cols / factor,
            cell_km: self.cell_km * factor as f64,
        })
    }
}

/// Map a fine-grid cell to the coarsened grid: `(r, c)` becomes
/// `(r / factor, c / factor)`.
pub fn coarsen_cell(cell: usize, fine: &GridSpec, factor: usize) -> Result<usize, DataError> {
    if factor == 0 || fine.rows % factor != 0 || fine.cols % factor != 0 {
        return Err(DataError::NonDividingFactor {
            factor,
            rows: fine.rows,
            cols: fine.cols,
        });
    }
    if !fine.contains(cell) {
        return Err(DataError::CellOutOfRange {
            cell,
            max: fine.cell_count(),
        });
    }
    let (r, c) = fine.cell_rc(cell);
    let coarse_cols = fine.cols / factor;
    Ok((r / factor) * coarse_cols + c / factor)
}
