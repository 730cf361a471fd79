//! Minimum-cost rectangular assignment (Hungarian method with potentials).

/// Assigns every row of an `rows x cols` cost matrix (`rows <= cols`) to a
/// distinct column at minimum total cost. Returns the column of each row.
///
/// `cost(i, j)` is queried `O(rows * cols)` times per augmentation, so it
/// should be cheap.
pub fn assign_rows(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    assert!(rows <= cols, "assignment needs rows <= cols, got {rows} x {cols}");
    if rows == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is a sentinel.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    let mut minv = vec![0.0; cols + 1];
    let mut used = vec![false; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
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
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// Assignment for any shape: pairs `(row, col)` of a minimum-cost matching
/// of size `min(rows, cols)`.
pub fn assign(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    if rows <= cols {
        assign_rows(rows, cols, cost).into_iter().enumerate().collect()
    } else {
        assign_rows(cols, rows, |j, i| cost(i, j))
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    }
}
