//! Ground-truth topology projected onto prediction indices.
//!
//! Under a one-to-one assignment `σ`, GT entry `g[p][q]` lands at
//! `z[σ(p)][σ(q)]`. The full regime supervises every prediction pair (pairs
//! touching a negative are pushed to 0); the valid-only regime supervises just
//! the `σ × σ` product set. One-to-many projection copies `g[p][q]` onto every
//! pair of the positive sets of `p` and `q`, which turns `N_L²` supervised
//! entries into `(K·N_L)²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Full,
    ValidOnly,
}

/// Row-major target and mask of shape `rows × cols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionTarget {
    pub rows: usize,
    pub cols: usize,
    pub z: Vec<u8>,
    pub valid: Vec<bool>,
}

impl SupervisionTarget {
    fn empty(rows: usize, cols: usize, all_valid: bool) -> Self {
        SupervisionTarget {
            rows,
            cols,
            z: vec![0; rows * cols],
            valid: vec![all_valid; rows * cols],
        }
    }

    pub fn z_at(&self, r: usize, c: usize) -> u8 {
        self.z[r * self.cols + c]
    }

    pub fn valid_at(&self, r: usize, c: usize) -> bool {
        self.valid[r * self.cols + c]
    }

    pub fn ones(&self) -> usize {
        self.z.iter().filter(|&&v| v == 1).count()
    }
}

/// Column-side index sets for [`project_o2m`].
#[derive(Debug, Clone, Copy)]
pub enum ColumnSets<'a> {
    /// Columns are lanes too and share the row sets (lane-lane).
    Lanes,
    /// Columns are traffic elements under their own one-to-one `σ_t` (lane-traffic).
    Traffic(&'a [usize]),
}

fn check_shape(g: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
    if g.len() != rows || g.iter().any(|r| r.len() != cols) {
        return Err(Error::Usage(format!(
            "topology matrix does not match {rows} × {cols} assigned ground truths"
        )));
    }
    Ok(())
}

fn check_sets(sets: &[Vec<usize>], bound: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; bound];
    for (p, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Usage(format!("{what} set {p} is empty")));
        }
        for &j in set {
            if j >= bound {
                return Err(Error::Usage(format!(
                    "{what} index {j} out of range for {bound} predictions"
                )));
            }
            if seen[j] {
                return Err(Error::Usage(format!("{what} index {j} is assigned twice")));
            }
            seen[j] = true;
        }
    }
    Ok(())
}

/// One-to-one projection. `row_sigma[p]` / `col_sigma[q]` are the predictions
/// matched to GT row `p` / column `q` (both `σ` for lane-lane).
pub fn project_o2o(
    g: &[Vec<u8>],
    row_sigma: &[usize],
    col_sigma: &[usize],
    n_rows: usize,
    n_cols: usize,
    regime: Regime,
) -> Result<SupervisionTarget> {
    let rows: Vec<Vec<usize>> = row_sigma.iter().map(|&j| vec![j]).collect();
    let cols: Vec<Vec<usize>> = col_sigma.iter().map(|&j| vec![j]).collect();
    let mut t = project_sets(g, &rows, &cols, n_rows, n_cols)?;
    if regime == Regime::Full {
        t.valid.iter_mut().for_each(|v| *v = true);
    }
    Ok(t)
}

/// One-to-many projection over disjoint positive sets (valid-only by construction).
pub fn project_o2m(
    g: &[Vec<u8>],
    row_sets: &[Vec<usize>],
    cols: ColumnSets<'_>,
    n_rows: usize,
    n_cols: usize,
) -> Result<SupervisionTarget> {
    match cols {
        ColumnSets::Lanes => project_sets(g, row_sets, row_sets, n_rows, n_cols),
        ColumnSets::Traffic(sigma) => {
            let col_sets: Vec<Vec<usize>> = sigma.iter().map(|&j| vec![j]).collect();
            project_sets(g, row_sets, &col_sets, n_rows, n_cols)
        }
    }
}

fn project_sets(
    g: &[Vec<u8>],
    row_sets: &[Vec<usize>],
    col_sets: &[Vec<usize>],
    n_rows: usize,
    n_cols: usize,
) -> Result<SupervisionTarget> {
    check_shape(g, row_sets.len(), col_sets.len())?;
    check_sets(row_sets, n_rows, "row")?;
    check_sets(col_sets, n_cols, "column")?;
    let mut t = SupervisionTarget::empty(n_rows, n_cols, false);
    for (p, rs) in row_sets.iter().enumerate() {
        for (q, cs) in col_sets.iter().enumerate() {
            for &r in rs {
                for &c in cs {
                    t.z[r * n_cols + c] = g[p][q];
                    t.valid[r * n_cols + c] = true;
                }
            }
        }
    }
    Ok(t)
}

/// Number of supervised entries.
pub fn count_valid(t: &SupervisionTarget) -> usize {
    t.valid.iter().filter(|&&v| v).count()
}
