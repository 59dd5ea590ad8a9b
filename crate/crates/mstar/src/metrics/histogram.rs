//! Normalized histograms with fixed binning policies, and the
//! Jensen-Shannon divergence between them.

use serde::{Deserialize, Serialize};

use super::error::MetricsError;

/// A normalized histogram; `edges` has one more entry than `masses`.
/// Comparisons require bit-identical edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

impl Histogram {
    /// Pool raw values into bins defined by `edges`; values outside the
    /// range clamp into the first/last bin. Masses normalize to 1.
    pub fn from_values(edges: Vec<f64>, values: &[f64]) -> Result<Self, MetricsError> {
        assert!(edges.len() >= 2, "need at least one bin");
        if values.is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0u64; bins];
        for &v in values {
            counts[bin_index(&edges, v)] += 1;
        }
        let total = values.len() as f64;
        let masses = counts.iter().map(|&c| c as f64 / total).collect();
        Ok(Histogram { edges, masses })
    }

    pub fn num_bins(&self) -> usize {
        self.masses.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

fn bin_index(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    if v < edges[0] {
        return 0;
    }
    // Last bin is closed on the right.
    if v >= edges[bins] {
        return bins - 1;
    }
    // Edges are sorted; a linear scan is fine at these sizes, but binary
    // search keeps large integer-bin policies cheap.
    match edges.binary_search_by(|e| e.partial_cmp(&v).unwrap()) {
        Ok(i) => i.min(bins - 1),
        Err(i) => i - 1,
    }
}

/// Distance bins: one zero bin below `lo`, then `n_log` log-spaced bins over
/// `[lo, hi]`.
pub fn log_distance_edges(lo: f64, hi: f64, n_log: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n_log >= 1);
    let mut edges = Vec::with_capacity(n_log + 2);
    edges.push(0.0);
    let log_lo = lo.ln();
    let log_hi = hi.ln();
    for i in 0..=n_log {
        let f = i as f64 / n_log as f64;
        edges.push((log_lo + f * (log_hi - log_lo)).exp());
    }
    edges
}

/// Unit-width bins centred on the integers `1..=max`.
pub fn integer_edges(max: usize) -> Vec<f64> {
    (0..=max).map(|i| i as f64 + 0.5).collect()
}

/// Jensen-Shannon divergence, base 2, so the range is [0, 1]. The
/// convention 0 * log 0 = 0 applies.
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64, MetricsError> {
    if p.edges != q.edges {
        return Err(MetricsError::EdgeMismatch);
    }
    let mut total = 0.0f64;
    for (&pi, &qi) in p.masses.iter().zip(q.masses.iter()) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            total += 0.5 * pi * (pi / m).log2();
        }
        if qi > 0.0 {
            total += 0.5 * qi * (qi / m).log2();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist(masses: Vec<f64>) -> Histogram {
        let edges = (0..=masses.len()).map(|i| i as f64).collect();
        Histogram { edges, masses }
    }

    #[test]
    fn jsd_self_is_exactly_zero() {
        let p = hist(vec![0.25, 0.5, 0.25]);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn jsd_disjoint_is_exactly_one() {
        let p = hist(vec![0.3, 0.7, 0.0, 0.0]);
        let q = hist(vec![0.0, 0.0, 0.4, 0.6]);
        assert_eq!(jsd(&p, &q).unwrap(), 1.0);
    }

    #[test]
    fn jsd_half_half_vs_point_mass() {
        // P = [0.5, 0.5], Q = [1, 0] -> 0.3113 within 1e-4
        let p = hist(vec![0.5, 0.5]);
        let q = hist(vec![1.0, 0.0]);
        let v = jsd(&p, &q).unwrap();
        assert!((v - 0.3113).abs() < 1e-4, "{v}");
    }

    #[test]
    fn jsd_edge_mismatch_rejected() {
        let p = hist(vec![0.5, 0.5]);
        let mut q = hist(vec![0.5, 0.5]);
        q.edges[1] += 0.5;
        assert!(matches!(jsd(&p, &q), Err(MetricsError::EdgeMismatch)));
    }

    #[test]
    fn from_values_normalizes_and_clamps() {
        let edges = vec![0.0, 1.0, 2.0, 4.0];
        let h = Histogram::from_values(edges, &[0.5, 1.5, 3.0, 9.0, -1.0]).unwrap();
        assert!((h.total_mass() - 1.0).abs() < 1e-12);
        assert_eq!(h.masses, vec![0.4, 0.2, 0.4]);
    }

    #[test]
    fn integer_bins_capture_integers() {
        let edges = integer_edges(5);
        let h = Histogram::from_values(edges, &[1.0, 1.0, 3.0, 5.0]).unwrap();
        assert_eq!(h.masses, vec![0.5, 0.0, 0.25, 0.0, 0.25]);
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded(
            a in prop::collection::vec(0.0f64..10.0, 6),
            b in prop::collection::vec(0.0f64..10.0, 6),
        ) {
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().sum::<f64>().max(1e-12);
                hist(v.into_iter().map(|x| x / s).collect())
            };
            let p = norm(a);
            let q = norm(b);
            let ab = jsd(&p, &q).unwrap();
            let ba = jsd(&q, &p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
        }
    }
}
