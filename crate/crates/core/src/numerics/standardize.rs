use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-column affine input map `(x - mean) / scale`.
///
/// State features can live on very different scales; without this a network
/// barely sees a feature whose range is a few hundredths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations; constant columns get
    /// scale 1.
    pub fn fit(rows: ArrayView2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::invalid("cannot fit a standardizer to zero rows"));
        }
        let mean = rows.mean_axis(Axis(0)).expect("non-empty");
        let std = rows.std_axis(Axis(0), 0.0);
        Ok(Self {
            mean: mean.to_vec(),
            scale: std.iter().map(|&s| if s > 1e-12 { s } else { 1.0 }).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        if rows.ncols() != self.dim() {
            return Err(Error::shape("standardized columns", self.dim(), rows.ncols()));
        }
        let mut out = rows.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        Ok(out)
    }
}
