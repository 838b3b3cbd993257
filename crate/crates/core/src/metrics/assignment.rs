//! Minimum-cost perfect matching on a square cost matrix.

/// Shortest augmenting path Hungarian method, `O(m^3)`. Returns the column
/// assigned to each row.
pub fn hungarian(cost: &[f64], m: usize) -> Vec<usize> {
    assert_eq!(cost.len(), m * m, "cost matrix must be m x m");
    // potentials and matches are 1-based; index 0 is the virtual root
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; m];
    for j in 1..=m {
        col[row_of[j] - 1] = j - 1;
    }
    col
}

pub fn assignment_cost(cost: &[f64], m: usize, col: &[usize]) -> f64 {
    col.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum()
}
