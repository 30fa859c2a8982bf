use super::similarity::{gate_embedding_sim, neuron_average_sim};
use crate::error::{Error, Result};
use crate::model::{MoeModel, WhichMatrix};

/// Gate-similarity vs expert-similarity regression for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionReport {
    pub layer: usize,
    pub which: WhichMatrix,
    /// `(gate similarity, neuron-averaged expert similarity)` for each
    /// expert pair `i < j`, in row-major upper-triangle order.
    pub pairs: Vec<(f64, f64)>,
    pub r: f64,
    pub r2: f64,
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateRegression("X"));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateRegression("Y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn regression_from_pairs(
    layer: usize,
    which: WhichMatrix,
    pairs: Vec<(f64, f64)>,
) -> Result<RegressionReport> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let r = pearson(&x, &y)?;
    Ok(RegressionReport {
        layer,
        which,
        pairs,
        r,
        r2: r * r,
    })
}

/// Correlates gate-row similarity (X) with neuron-averaged similarity of the
/// chosen projection (Y) over all expert pairs of a layer.
pub fn gate_expert_regression(
    model: &MoeModel,
    layer: usize,
    which: WhichMatrix,
) -> Result<RegressionReport> {
    let n = model.layer(layer)?.num_experts();
    if model.layer(layer)?.is_dense() {
        return Err(Error::DenseLayer(layer));
    }
    if n < 3 {
        return Err(Error::InsufficientSamples { needed: 3, got: n });
    }
    let x = gate_embedding_sim(model, layer)?.expert_upper_triangle();
    let y = neuron_average_sim(model, layer, which, None)?.expert_upper_triangle();
    let pairs = x
        .into_iter()
        .zip(y)
        .map(|(a, b)| {
            (
                a.expect("static similarities are defined"),
                b.expect("static similarities are defined"),
            )
        })
        .collect();
    regression_from_pairs(layer, which, pairs)
}

/// Mean R² across layers.
pub fn aggregate_r2(reports: &[RegressionReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("regression reports"));
    }
    Ok(reports.iter().map(|r| r.r2).sum::<f64>() / reports.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_r() {
        // x̄ = ȳ = 2, Σdx·dy = 1, Σdx² = Σdy² = 2, so R = 1/2.
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn decreasing_affine_is_minus_one() {
        let x = [0.1, 0.5, -0.3, 0.9];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 3.0 * v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let err = pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("degenerate regression"));
        assert!(pearson(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).is_err());
    }

    #[test]
    fn aggregate_is_mean() {
        let mk = |r2: f64| RegressionReport {
            layer: 0,
            which: WhichMatrix::Act,
            pairs: vec![],
            r: r2.sqrt(),
            r2,
        };
        assert!((aggregate_r2(&[mk(0.4)]).unwrap() - 0.4).abs() < 1e-15);
        assert!((aggregate_r2(&[mk(0.2), mk(0.6)]).unwrap() - 0.4).abs() < 1e-15);
        assert!(aggregate_r2(&[]).is_err());
    }
}
