//! Individual-level trajectory statistics, pooled over a corpus into fixed
//! histograms: displacement, radius of gyration, stay duration, and daily
//! distinct locations.

use std::collections::BTreeSet;

use crate::data::{Corpus, GridSpec};

use super::error::MetricsError;
use super::histogram::{integer_edges, log_distance_edges, Histogram};

pub const LOG_BINS: usize = 20;
pub const DISTANCE_LO_KM: f64 = 0.1;
pub const DAILYLOC_MAX: usize = 24;

fn distance_edges(grid: &GridSpec) -> Vec<f64> {
    log_distance_edges(DISTANCE_LO_KM, grid.diagonal_km(), LOG_BINS)
}

/// Travel length between consecutive locations, in kilometers between cell
/// centers, pooled over every step pair in the corpus.
pub fn displacement_hist(corpus: &Corpus, grid: &GridSpec) -> Result<Histogram, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut values = Vec::new();
    for traj in corpus.trajectories() {
        for w in traj.cells.windows(2) {
            values.push(grid.center_distance_km(w[0], w[1]));
        }
    }
    Histogram::from_values(distance_edges(grid), &values)
}

/// Radius of gyration: root-mean-square distance of the visited cell
/// centers from their centroid, one value per trajectory.
pub fn radius_hist(corpus: &Corpus, grid: &GridSpec) -> Result<Histogram, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let values: Vec<f64> = corpus
        .trajectories()
        .map(|traj| radius_of_gyration(&traj.cells, grid))
        .collect();
    Histogram::from_values(distance_edges(grid), &values)
}

pub fn radius_of_gyration(cells: &[usize], grid: &GridSpec) -> f64 {
    let n = cells.len() as f64;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for &c in cells {
        let (x, y) = grid.center_km(c);
        cx += x;
        cy += y;
    }
    cx /= n;
    cy /= n;
    let mut acc = 0.0;
    for &c in cells {
        let (x, y) = grid.center_km(c);
        acc += (x - cx).powi(2) + (y - cy).powi(2);
    }
    (acc / n).sqrt()
}

/// Lengths of maximal constant runs, in hours, pooled over the corpus.
pub fn duration_hist(corpus: &Corpus) -> Result<Histogram, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut values = Vec::new();
    for traj in corpus.trajectories() {
        for run in run_lengths(&traj.cells) {
            values.push(run as f64);
        }
    }
    Histogram::from_values(integer_edges(corpus.t_len), &values)
}

pub fn run_lengths(cells: &[usize]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut len = 0usize;
    let mut prev: Option<usize> = None;
    for &c in cells {
        match prev {
            Some(p) if p == c => len += 1,
            Some(_) => {
                runs.push(len);
                len = 1;
            }
            None => len = 1,
        }
        prev = Some(c);
    }
    if len > 0 {
        runs.push(len);
    }
    runs
}

/// Distinct visited locations per 24-step day, pooled over the corpus.
pub fn dailyloc_hist(corpus: &Corpus) -> Result<Histogram, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut values = Vec::new();
    for traj in corpus.trajectories() {
        for day in traj.cells.chunks(24) {
            let distinct: BTreeSet<usize> = day.iter().copied().collect();
            values.push(distinct.len() as f64);
        }
    }
    Histogram::from_values(integer_edges(DAILYLOC_MAX), &values)
}
