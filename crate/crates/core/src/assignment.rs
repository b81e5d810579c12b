//! Exact linear assignment by shortest augmenting paths with dual
//! potentials (Jonker–Volgenant style, O(n²m)).

use crate::numcore::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column given to row `i`, `None` when there are
    /// more rows than columns and row `i` is left out.
    pub row_to_col: Vec<Option<usize>>,
    pub cost: f64,
}

/// Minimum-cost assignment for an `[m, n]` cost matrix. Every row is
/// assigned when `m <= n`, otherwise every column is.
pub fn solve(costs: &Tensor) -> Result<Assignment> {
    let shape = costs.shape();
    if shape.len() != 2 {
        return Err(Error::Invalid(format!("cost matrix shape {shape:?}")));
    }
    if !costs.is_finite() {
        return Err(Error::Invalid("non-finite assignment cost".into()));
    }
    let (m, n) = (shape[0], shape[1]);
    if m <= n {
        let row_to_col = solve_tall(m, n, |i, j| costs.data()[i * n + j]);
        let cost = total(costs, &row_to_col);
        Ok(Assignment { row_to_col, cost })
    } else {
        let col_to_row = solve_tall(n, m, |j, i| costs.data()[i * n + j]);
        let mut row_to_col = vec![None; m];
        for (j, i) in col_to_row.iter().enumerate() {
            if let Some(i) = i {
                row_to_col[*i] = Some(j);
            }
        }
        let cost = total(costs, &row_to_col);
        Ok(Assignment { row_to_col, cost })
    }
}

fn total(costs: &Tensor, row_to_col: &[Option<usize>]) -> f64 {
    let n = costs.cols();
    row_to_col
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| costs.data()[i * n + j]))
        .sum()
}

/// `rows <= cols`. Indices are 1-based internally with 0 as the virtual
/// root column.
fn solve_tall(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        // Flip the augmenting path back to the root.
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = Some(j - 1);
        }
    }
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimum over all injective maps rows → cols by enumeration.
    fn brute_force(costs: &Tensor) -> f64 {
        let (m, n) = (costs.rows(), costs.cols());
        fn rec(i: usize, m: usize, n: usize, used: &mut Vec<bool>, acc: f64, c: &Tensor, best: &mut f64) {
            if i == m {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(i + 1, m, n, used, acc + c.data()[i * n + j], c, best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        if m <= n {
            rec(0, m, n, &mut vec![false; n], 0.0, costs, &mut best);
        } else {
            let t = costs.transpose().unwrap();
            rec(0, n, m, &mut vec![false; m], 0.0, &t, &mut best);
        }
        best
    }

    #[test]
    fn diagonal_minimum_picks_identity() {
        let c = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let a = solve(&c).unwrap();
        assert_eq!(a.row_to_col, vec![Some(0), Some(1)]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn anti_diagonal() {
        let c = Tensor::from_rows(&[[5.0, 1.0, 9.0], [1.0, 5.0, 9.0], [9.0, 9.0, 0.5]]);
        let a = solve(&c).unwrap();
        assert_eq!(a.row_to_col, vec![Some(1), Some(0), Some(2)]);
        assert_eq!(a.cost, 2.5);
    }

    #[test]
    fn empty_matrix() {
        let a = solve(&Tensor::zeros(&[0, 0])).unwrap();
        assert!(a.row_to_col.is_empty());
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        let c = Tensor::from_rows(&[[0.0, f64::NAN]]);
        assert!(solve(&c).is_err());
    }

    proptest! {
        #[test]
        fn matches_enumeration(
            m in 1usize..=7,
            n in 1usize..=7,
            seed in proptest::collection::vec(-10.0f64..10.0, 49),
        ) {
            let c = Tensor::matrix(m, n, seed[..m * n].to_vec()).unwrap();
            let a = solve(&c).unwrap();
            prop_assert!((a.cost - brute_force(&c)).abs() < 1e-9);
            let assigned: Vec<usize> = a.row_to_col.iter().flatten().copied().collect();
            prop_assert_eq!(assigned.len(), m.min(n));
            let mut uniq = assigned.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), assigned.len());
        }
    }
}
