//! Block-wise causal attention mask: full visibility within a block and to
//! every earlier block, none forward.

/// Row-major `L x L` boolean mask; `true` means position `i` may attend to
/// position `j`.
pub fn blockwise_mask(lengths: &[usize]) -> Vec<bool> {
    assert!(!lengths.is_empty(), "mask needs at least one block");
    let total: usize = lengths.iter().sum();
    let mut block_of = Vec::with_capacity(total);
    for (b, &len) in lengths.iter().enumerate() {
        block_of.extend(std::iter::repeat(b).take(len));
    }
    let mut mask = vec![false; total * total];
    for i in 0..total {
        for j in 0..total {
            mask[i * total + j] = block_of[j] <= block_of[i];
        }
    }
    mask
}

/// Additive attention bias: 0 where allowed, a large negative value where
/// masked.
pub fn mask_to_bias(mask: &[bool]) -> Vec<f32> {
    mask.iter().map(|&m| if m { 0.0 } else { -1e9 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_is_all_true() {
        let m = blockwise_mask(&[3]);
        assert!(m.iter().all(|&x| x));
    }

    #[test]
    fn two_blocks_example() {
        // Blocks [1, 2]: positions 1,2 attend to {0,1,2}; position 0 only
        // to itself.
        let m = blockwise_mask(&[1, 2]);
        let at = |i: usize, j: usize| m[i * 3 + j];
        assert!(at(0, 0) && !at(0, 1) && !at(0, 2));
        for i in 1..3 {
            for j in 0..3 {
                assert!(at(i, j), "({i},{j})");
            }
        }
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let lengths = [1usize, 2, 4];
        let got = blockwise_mask(&lengths);
        // Brute-force construction straight from the definition.
        let total: usize = lengths.iter().sum();
        let mut starts = vec![0usize];
        for &l in &lengths {
            starts.push(starts.last().unwrap() + l);
        }
        for i in 0..total {
            for j in 0..total {
                let bi = (0..lengths.len())
                    .find(|&b| i >= starts[b] && i < starts[b + 1])
                    .unwrap();
                let bj = (0..lengths.len())
                    .find(|&b| j >= starts[b] && j < starts[b + 1])
                    .unwrap();
                assert_eq!(got[i * total + j], bj <= bi, "({i},{j})");
            }
        }
    }

    #[test]
    #[should_panic(expected = "at least one block")]
    fn empty_lengths_rejected() {
        blockwise_mask(&[]);
    }
}
