//! PCA through a thin SVD of the (optionally standardized) sample matrix.

use nalgebra::DMatrix;

use super::dbscan::dbscan_outliers;
use crate::error::{Error, Result};

/// Relative standard deviation below which a dimension counts as constant.
const CONSTANT_DIM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub labels: Vec<String>,
    /// Projected coordinates, one per input vector, `dims` long.
    pub points: Vec<Vec<f64>>,
    /// Sample variance (divisor `n − 1`) along each component,
    /// non-increasing.
    pub explained_variance: Vec<f64>,
    /// Unit component directions over the kept dimensions.
    pub components: Vec<Vec<f64>>,
    /// Per-dimension mean of the raw input.
    pub mean: Vec<f64>,
    /// Per-dimension scale divided out before the SVD (1 without
    /// standardization).
    pub scale: Vec<f64>,
    /// Input dimensions that entered the SVD; constant ones are dropped under
    /// standardization.
    pub kept_dims: Vec<usize>,
    /// Labels flagged and removed as density outliers.
    pub outliers: Vec<String>,
}

impl Projection {
    /// Maps projected points back to input space.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|p| {
                let mut x = self.mean.clone();
                for (k, &d) in self.kept_dims.iter().enumerate() {
                    let z: f64 = p.iter().zip(&self.components).map(|(s, c)| s * c[k]).sum();
                    x[d] += self.scale[d] * z;
                }
                x
            })
            .collect()
    }

    /// Drops points DBSCAN marks as noise, recording their labels.
    pub fn remove_outliers(mut self, eps: f64, min_pts: usize) -> Result<Self> {
        let noise = dbscan_outliers(&self.points, eps, min_pts)?;
        let mut keep_labels = Vec::new();
        let mut keep_points = Vec::new();
        for (i, (label, point)) in self.labels.into_iter().zip(self.points).enumerate() {
            if noise.contains(&i) {
                self.outliers.push(label);
            } else {
                keep_labels.push(label);
                keep_points.push(point);
            }
        }
        self.labels = keep_labels;
        self.points = keep_points;
        Ok(self)
    }
}

/// Projects `vectors` onto their top `dims` principal components.
///
/// With `standardize`, each dimension is shifted to zero mean and scaled to
/// unit population variance first; constant dimensions are dropped. Each
/// component's largest-magnitude entry is made positive.
pub fn pca_project(vectors: &[Vec<f64>], dims: usize, standardize: bool) -> Result<Projection> {
    if !(2..=3).contains(&dims) {
        return Err(Error::InvalidArgument(format!(
            "dims must be 2 or 3, got {dims}"
        )));
    }
    let n = vectors.len();
    if n < dims + 1 {
        return Err(Error::InsufficientSamples {
            needed: dims + 1,
            got: n,
        });
    }
    let d = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }

    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut scale = vec![1.0; d];
    let mut kept_dims: Vec<usize> = (0..d).collect();
    if standardize {
        kept_dims.clear();
        for j in 0..d {
            let var = vectors
                .iter()
                .map(|v| (v[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n as f64;
            let sd = var.sqrt();
            if sd > CONSTANT_DIM_TOL * mean[j].abs().max(1.0) {
                scale[j] = sd;
                kept_dims.push(j);
            }
        }
    }
    let k = kept_dims.len();

    let x = DMatrix::from_fn(n, k.max(1), |i, c| {
        if k == 0 {
            0.0
        } else {
            let j = kept_dims[c];
            (vectors[i][j] - mean[j]) / scale[j]
        }
    });
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut components = Vec::with_capacity(dims);
    let mut explained_variance = Vec::with_capacity(dims);
    for &o in order.iter().take(dims) {
        let mut c: Vec<f64> = v_t.row(o).iter().copied().collect();
        c.truncate(k);
        let lead = c
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| {
                if v.abs() > best.1 {
                    (i, v.abs())
                } else {
                    best
                }
            })
            .0;
        if c.get(lead).is_some_and(|&v| v < 0.0) {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        let s = svd.singular_values[o];
        explained_variance.push(s * s / (n - 1) as f64);
        components.push(c);
    }
    while components.len() < dims {
        components.push(vec![0.0; k]);
        explained_variance.push(0.0);
    }

    let points = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| (0..k).map(|col| x[(i, col)] * c[col]).sum())
                .collect()
        })
        .collect();

    Ok(Projection {
        labels: (0..n).map(|i| i.to_string()).collect(),
        points,
        explained_variance,
        components,
        mean,
        scale,
        kept_dims,
        outliers: Vec::new(),
    })
}
