//! Multi-index polynomial bases for local polynomial fitting.

use serde::{Deserialize, Serialize};

/// All multi-indices `λ` in `d` variables with `|λ| <= p - 1`, in graded
/// lexicographic order: by total degree, then lexicographically descending so
/// that `(1,0)` precedes `(0,1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiIndexBasis {
    d: usize,
    p: usize,
    indices: Vec<Vec<u32>>,
    /// `unit_positions[k]` is the position of the unit multi-index along axis `k`.
    /// Empty when `p == 1`.
    unit_positions: Vec<usize>,
}

impl MultiIndexBasis {
    /// Builds the basis. Panics if `d == 0` or `p == 0`.
    pub fn new(d: usize, p: usize) -> Self {
        assert!(d >= 1 && p >= 1, "multi-index basis needs d >= 1 and p >= 1");
        let mut indices = Vec::new();
        for degree in 0..p as u32 {
            let mut current = vec![0u32; d];
            compositions(degree, 0, &mut current, &mut indices);
        }
        let unit_positions = if p >= 2 {
            (0..d)
                .map(|k| {
                    indices
                        .iter()
                        .position(|idx| {
                            idx.iter().enumerate().all(|(j, &e)| e == u32::from(j == k))
                        })
                        .expect("unit index present for p >= 2")
                })
                .collect()
        } else {
            Vec::new()
        };
        MultiIndexBasis {
            d,
            p,
            indices,
            unit_positions,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[Vec<u32>] {
        &self.indices
    }

    pub fn unit_positions(&self) -> &[usize] {
        &self.unit_positions
    }

    /// Position of the first-order term for `axis`, if the basis has one.
    pub fn unit_position(&self, axis: usize) -> Option<usize> {
        self.unit_positions.get(axis).copied()
    }

    pub fn degree(&self, pos: usize) -> u32 {
        self.indices[pos].iter().sum()
    }

    /// Evaluates every monomial `Π z_k^{λ_k}` at `z`.
    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(z, &mut out);
        out
    }

    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.d);
        match self.p {
            1 => out[0] = 1.0,
            2 => {
                // the common local-linear case
                out[0] = 1.0;
                out[1..=self.d].copy_from_slice(z);
            }
            _ => {
                for (slot, idx) in out.iter_mut().zip(&self.indices) {
                    *slot = idx
                        .iter()
                        .zip(z)
                        .map(|(&e, &zk)| zk.powi(e as i32))
                        .product();
                }
            }
        }
    }
}

fn compositions(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let d = current.len();
    if pos == d - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        compositions(remaining - e, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// `C(n, k)` as a float.
pub fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
