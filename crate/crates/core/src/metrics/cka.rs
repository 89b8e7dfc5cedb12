//! Linear centered kernel alignment between two representations of the
//! same examples.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::model::ModelState;
use crate::nn::Act;
use crate::rng::rng_for;
use crate::{Error, Result};

/// Evaluation sets larger than this are subsampled for CKA.
pub const CKA_SUBSAMPLE: usize = 2048;

/// `||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)` after centering each column.
/// `x` is `n x dx` and `y` is `n x dy`, row-major. `None` if either side
/// has zero variance.
pub fn linear_cka(x: &[f32], dx: usize, y: &[f32], dy: usize) -> Result<Option<f64>> {
    if dx == 0 || dy == 0 || x.len() % dx != 0 || y.len() % dy != 0 {
        return Err(Error::Contract("CKA feature widths do not divide the buffers".into()));
    }
    let n = x.len() / dx;
    if y.len() / dy != n {
        return Err(Error::Contract(format!(
            "CKA needs the same examples on both sides ({n} vs {})",
            y.len() / dy
        )));
    }
    if n < 2 {
        return Err(Error::Contract("CKA needs at least two examples".into()));
    }
    let xc = centered(x, n, dx);
    let yc = centered(y, n, dy);
    let xy = frob_sq_cross(&yc, dy, &xc, dx, n);
    let xx = frob_sq_cross(&xc, dx, &xc, dx, n).sqrt();
    let yy = frob_sq_cross(&yc, dy, &yc, dy, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(None);
    }
    Ok(Some(xy / (xx * yy)))
}

fn centered(v: &[f32], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0f64; d];
    for row in v.chunks(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    v.chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(&x, m)| x as f64 - m))
        .collect()
}

/// `||A^T B||_F^2` for `A: n x da`, `B: n x db`.
fn frob_sq_cross(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut m = vec![0.0f64; da * db];
    for r in 0..n {
        let ar = &a[r * da..(r + 1) * da];
        let br = &b[r * db..(r + 1) * db];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut m[i * db..(i + 1) * db];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Seeded subset of `indices` of size at most [`CKA_SUBSAMPLE`], kept in
/// ascending order.
pub fn cka_subsample(indices: &[usize], seed: u64) -> Vec<usize> {
    if indices.len() <= CKA_SUBSAMPLE {
        return indices.to_vec();
    }
    let mut rng = rng_for(seed, "cka/subsample");
    let mut picked: Vec<usize> = sample(&mut rng, indices.len(), CKA_SUBSAMPLE)
        .into_iter()
        .map(|i| indices[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Sessions x sessions CKA values; `values[i][j]` compares session `i` of
/// the row family with session `j` of the column family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub row_model: String,
    pub col_model: String,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CkaMatrix {
    /// Mean over defined entries.
    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.values.iter().flatten().filter_map(|x| *x).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn diagonal_mean(&self) -> Option<f64> {
        let v: Vec<f64> = (0..self.values.len())
            .filter_map(|i| self.values[i].get(i).copied().flatten())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Diagonal mean over sessions `from..`.
    pub fn diagonal_mean_from(&self, from: usize) -> Option<f64> {
        let v: Vec<f64> = (from..self.values.len())
            .filter_map(|i| self.values[i].get(i).copied().flatten())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// CKA between every pair of per-session models on one shared batch.
pub fn cka_session_grid(
    models_a: &[ModelState],
    models_b: &[ModelState],
    images: &Act,
    labels: (&str, &str),
) -> Result<CkaMatrix> {
    if models_a.len() != models_b.len() {
        return Err(Error::Contract(format!(
            "CKA grid over {} vs {} sessions",
            models_a.len(),
            models_b.len()
        )));
    }
    let embed = |ms: &[ModelState]| -> Result<Vec<(Vec<f32>, usize)>> {
        ms.iter()
            .map(|m| m.embed(images).map(|e| (e.features, e.dim)))
            .collect()
    };
    let ea = embed(models_a)?;
    let eb = embed(models_b)?;
    let mut values = Vec::with_capacity(ea.len());
    for (xa, da) in &ea {
        let mut row = Vec::with_capacity(eb.len());
        for (xb, db) in &eb {
            row.push(linear_cka(xa, *da, xb, *db)?);
        }
        values.push(row);
    }
    Ok(CkaMatrix {
        row_model: labels.0.to_string(),
        col_model: labels.1.to_string(),
        values,
    })
}
