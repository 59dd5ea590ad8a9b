//! Population-level metrics: origin-destination flows, per-cell densities,
//! their MAPE against a reference, and the common part of commuters.

use std::collections::BTreeMap;

use crate::data::{Corpus, GridSpec};

use super::error::MetricsError;

/// Per-time-step origin-destination transition counts. Self-transitions
/// count; every user contributes one transition per step pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix {
    pub grid: GridSpec,
    /// Number of step pairs (T - 1).
    pub steps: usize,
    counts: BTreeMap<(usize, usize, usize), u64>,
}

impl FlowMatrix {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self, MetricsError> {
        if corpus.is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        let mut counts = BTreeMap::new();
        for traj in corpus.trajectories() {
            for (step, w) in traj.cells.windows(2).enumerate() {
                *counts.entry((step, w[0], w[1])).or_insert(0) += 1;
            }
        }
        Ok(FlowMatrix {
            grid: corpus.grid,
            steps: corpus.t_len - 1,
            counts,
        })
    }

    pub fn count(&self, step: usize, origin: usize, dest: usize) -> u64 {
        self.counts.get(&(step, origin, dest)).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize, usize), &u64)> {
        self.counts.iter()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Per-step totals must equal the user count.
    pub fn per_step_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.steps];
        for (&(step, _, _), &c) in &self.counts {
            totals[step] += c;
        }
        totals
    }

    /// Time-pooled OD matrix.
    pub fn pooled(&self) -> BTreeMap<(usize, usize), u64> {
        let mut out = BTreeMap::new();
        for (&(_, o, d), &c) in &self.counts {
            *out.entry((o, d)).or_insert(0) += c;
        }
        out
    }
}

/// Per-cell user counts per step (dense T x N).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub grid: GridSpec,
    pub steps: usize,
    counts: Vec<u64>,
}

impl DensityMatrix {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self, MetricsError> {
        if corpus.is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        let n = corpus.grid.cell_count();
        let mut counts = vec![0u64; corpus.t_len * n];
        for traj in corpus.trajectories() {
            for (t, &c) in traj.cells.iter().enumerate() {
                counts[t * n + c] += 1;
            }
        }
        Ok(DensityMatrix {
            grid: corpus.grid,
            steps: corpus.t_len,
            counts,
        })
    }

    pub fn count(&self, step: usize, cell: usize) -> u64 {
        self.counts[step * self.grid.cell_count() + cell]
    }

    pub fn raw(&self) -> &[u64] {
        &self.counts
    }
}

fn check_same_shape(a_grid: &GridSpec, a_steps: usize, b_grid: &GridSpec, b_steps: usize) -> Result<(), MetricsError> {
    if a_grid.rows != b_grid.rows || a_grid.cols != b_grid.cols || a_steps != b_steps {
        return Err(MetricsError::GridMismatch);
    }
    Ok(())
}

/// Mean absolute percentage error over entries where the reference is
/// positive; zero-reference entries are excluded from the mean.
pub fn flow_mape(gen: &FlowMatrix, reference: &FlowMatrix) -> Result<f64, MetricsError> {
    check_same_shape(&gen.grid, gen.steps, &reference.grid, reference.steps)?;
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (&key, &ref_c) in reference.entries() {
        if ref_c == 0 {
            continue;
        }
        let gen_c = gen.counts.get(&key).copied().unwrap_or(0);
        total += (gen_c as f64 - ref_c as f64).abs() / ref_c as f64;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::AllZeroReference);
    }
    Ok(total / n as f64)
}

pub fn density_mape(gen: &DensityMatrix, reference: &DensityMatrix) -> Result<f64, MetricsError> {
    check_same_shape(&gen.grid, gen.steps, &reference.grid, reference.steps)?;
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (&g, &r) in gen.counts.iter().zip(reference.counts.iter()) {
        if r == 0 {
            continue;
        }
        total += (g as f64 - r as f64).abs() / r as f64;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::AllZeroReference);
    }
    Ok(total / n as f64)
}

/// Common part of commuters over time-pooled OD matrices:
/// `2 * sum(min) / (sum(gen) + sum(ref))`.
pub fn cpc(gen: &FlowMatrix, reference: &FlowMatrix) -> Result<f64, MetricsError> {
    check_same_shape(&gen.grid, gen.steps, &reference.grid, reference.steps)?;
    let a = gen.pooled();
    let b = reference.pooled();
    let total_a: u64 = a.values().sum();
    let total_b: u64 = b.values().sum();
    if total_a + total_b == 0 {
        return Err(MetricsError::BothTotalsZero);
    }
    let mut common = 0u64;
    for (key, &ca) in &a {
        if let Some(&cb) = b.get(key) {
            common += ca.min(cb);
        }
    }
    Ok(2.0 * common as f64 / (total_a + total_b) as f64)
}
