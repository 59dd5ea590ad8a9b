//! Temporal resampling weights.
//!
//! Both resamplers are linear maps, so each is described by a sparse
//! per-output-row weight list. The same weights drive the tape ops (forward
//! and backward) and the cache-based inference path.

/// Sparse interpolation weights: `rows[j]` lists `(input_row, weight)` pairs
/// whose weighted sum produces output row `j`.
#[derive(Debug, Clone)]
pub struct InterpWeights {
    pub in_len: usize,
    pub out_len: usize,
    pub rows: Vec<Vec<(usize, f32)>>,
}

impl InterpWeights {
    /// Apply to a row-major `in_len x width` buffer.
    pub fn apply(&self, input: &[f32], width: usize) -> Vec<f32> {
        debug_assert_eq!(input.len(), self.in_len * width);
        let mut out = vec![0.0f32; self.out_len * width];
        for (j, row) in self.rows.iter().enumerate() {
            let out_row = &mut out[j * width..(j + 1) * width];
            for &(i, w) in row {
                let in_row = &input[i * width..(i + 1) * width];
                for (o, &v) in out_row.iter_mut().zip(in_row.iter()) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// Transposed application, used by the backward pass: scatters an
    /// `out_len x width` gradient back onto the input rows.
    pub fn apply_transposed(&self, grad_out: &[f32], width: usize, grad_in: &mut [f32]) {
        debug_assert_eq!(grad_out.len(), self.out_len * width);
        debug_assert_eq!(grad_in.len(), self.in_len * width);
        for (j, row) in self.rows.iter().enumerate() {
            let g_row = &grad_out[j * width..(j + 1) * width];
            for &(i, w) in row {
                let in_row = &mut grad_in[i * width..(i + 1) * width];
                for (o, &g) in in_row.iter_mut().zip(g_row.iter()) {
                    *o += w * g;
                }
            }
        }
    }
}

/// Area (overlap-averaging) downsampling weights. Output position `j`
/// averages the input signal, viewed as piecewise constant over unit steps,
/// across the real interval `[j*T/L, (j+1)*T/L)`.
pub fn area_weights(in_len: usize, out_len: usize) -> InterpWeights {
    assert!(in_len >= 1 && out_len >= 1);
    let ratio = in_len as f64 / out_len as f64;
    let mut rows = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let lo = j as f64 * ratio;
        let hi = (j + 1) as f64 * ratio;
        let mut row = Vec::new();
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(in_len);
        for i in first..last {
            let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
            if overlap > 0.0 {
                row.push((i, (overlap / ratio) as f32));
            }
        }
        rows.push(row);
    }
    InterpWeights {
        in_len,
        out_len,
        rows,
    }
}

/// Piecewise-linear upsampling weights over sample centers, endpoints
/// clamped. Identity when lengths match.
pub fn linear_weights(in_len: usize, out_len: usize) -> InterpWeights {
    assert!(in_len >= 1 && out_len >= 1);
    let mut rows = Vec::with_capacity(out_len);
    if in_len == out_len {
        for j in 0..out_len {
            rows.push(vec![(j, 1.0f32)]);
        }
    } else {
        let scale = in_len as f64 / out_len as f64;
        for j in 0..out_len {
            // Input coordinate of output sample center j, in input index units.
            let u = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = u.floor() as usize;
            let frac = u - i0 as f64;
            if frac == 0.0 || i0 + 1 >= in_len {
                rows.push(vec![(i0, 1.0f32)]);
            } else {
                rows.push(vec![(i0, (1.0 - frac) as f32), (i0 + 1, frac as f32)]);
            }
        }
    }
    InterpWeights {
        in_len,
        out_len,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_block_average() {
        let w = area_weights(4, 2);
        let out = w.apply(&[1.0, 2.0, 3.0, 4.0], 1);
        assert_eq!(out, vec![1.5, 3.5]);
    }

    #[test]
    fn area_constant_invariant() {
        for target in [1, 3, 5, 7] {
            let w = area_weights(7, target);
            let input = vec![2.5f32; 7];
            let out = w.apply(&input, 1);
            for v in out {
                assert!((v - 2.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn area_rows_sum_to_one() {
        let w = area_weights(168, 112);
        for row in &w.rows {
            let s: f64 = row.iter().map(|&(_, wt)| wt as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_identity_when_equal() {
        let w = linear_weights(5, 5);
        let input = [0.3, -1.0, 2.0, 0.0, 7.0];
        let out = w.apply(&input, 1);
        assert_eq!(out, input.to_vec());
    }

    #[test]
    fn linear_two_to_four() {
        // Sample centers of length-4 output land at input coords
        // {-0.25, 0.25, 0.75, 1.25}, clamped to [0, 1].
        let w = linear_weights(2, 4);
        let out = w.apply(&[0.0, 1.0], 1);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (v, e) in out.iter().zip(expect.iter()) {
            assert!((v - e).abs() < 1e-6, "{out:?}");
        }
    }
}
