use super::assignment::{assignment_total, solve_assignment};
use super::kendall::kendall_tau;
use super::similarity::cosine_sim;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::{Expert, MoeModel, WhichMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ReorderReport {
    pub pair: (usize, usize),
    pub which: WhichMatrix,
    /// Slot `i` of the reordered `b` holds `b`'s neuron `permutation[i]`,
    /// the partner matched to `a`'s neuron `i`.
    pub permutation: Vec<usize>,
    pub sim_before: f64,
    pub sim_after: f64,
    /// Kendall τ of `permutation` against the identity.
    pub tau: f64,
    /// Summed neuron-pair cosine of the assignment.
    pub assignment_total: f64,
}

/// The chosen projection of `e` with slot `i` taking neuron `perm[i]`.
pub fn permute_neurons(e: &Expert, which: WhichMatrix, perm: &[usize]) -> Matrix {
    let src = e.matrix(which);
    let mut out = Matrix::zeros(src.rows(), src.cols());
    for (slot, &n) in perm.iter().enumerate() {
        match which {
            WhichMatrix::Up | WhichMatrix::Act => {
                for c in 0..src.cols() {
                    out.set(slot, c, src.get(n, c));
                }
            }
            WhichMatrix::Down => {
                for r in 0..src.rows() {
                    out.set(r, slot, src.get(r, n));
                }
            }
        }
    }
    out
}

/// `d_mid × d_mid` cosine table between `a`'s and `b`'s neurons; pairs with
/// a zero-norm neuron score 0.
pub fn neuron_pair_similarity(a: &Expert, b: &Expert, which: WhichMatrix) -> Result<Matrix> {
    if a.d_mid() != b.d_mid() || a.d_hid() != b.d_hid() {
        return Err(Error::DimensionMismatch {
            expected: a.d_mid() * a.d_hid(),
            actual: b.d_mid() * b.d_hid(),
        });
    }
    let na = a.neuron_vectors(which);
    let nb = b.neuron_vectors(which);
    let la: Vec<f64> = na.iter().map(|v| norm(v)).collect();
    let lb: Vec<f64> = nb.iter().map(|v| norm(v)).collect();
    let m = na.len();
    let mut s = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if la[i] > 0.0 && lb[j] > 0.0 {
                s.set(
                    i,
                    j,
                    (dot(&na[i], &nb[j]) / (la[i] * lb[j])).clamp(-1.0, 1.0),
                );
            }
        }
    }
    Ok(s)
}

/// Matches `b`'s neurons to `a`'s by maximizing summed neuron cosine, then
/// reports the flattened similarity before and after applying the match.
pub fn reorder_neurons(a: &Expert, b: &Expert, which: WhichMatrix) -> Result<ReorderReport> {
    let s = neuron_pair_similarity(a, b, which)?;
    let permutation = solve_assignment(&s, true)?;
    let identity: Vec<usize> = (0..permutation.len()).collect();
    let flat_a = a.matrix(which).as_slice();
    let sim_before = cosine_sim(flat_a, b.matrix(which).as_slice())?;
    let sim_after = cosine_sim(flat_a, permute_neurons(b, which, &permutation).as_slice())?;
    let tau = if permutation.len() >= 2 {
        kendall_tau(&permutation, &identity)?
    } else {
        1.0
    };
    Ok(ReorderReport {
        pair: (0, 1),
        which,
        assignment_total: assignment_total(&s, &permutation),
        permutation,
        sim_before,
        sim_after,
        tau,
    })
}

/// Reorder reports for every expert pair `a < b` of a MoE layer.
pub fn reorder_layer(
    model: &MoeModel,
    layer: usize,
    which: WhichMatrix,
) -> Result<Vec<ReorderReport>> {
    let weights = model.layer(layer)?;
    if weights.is_dense() {
        return Err(Error::DenseLayer(layer));
    }
    let experts = weights.routed();
    let mut out = Vec::new();
    for a in 0..experts.len() {
        for b in a + 1..experts.len() {
            let mut r = reorder_neurons(&experts[a], &experts[b], which)?;
            r.pair = (a, b);
            out.push(r);
        }
    }
    Ok(out)
}

/// Mean τ over reports (the τ̄ summary).
pub fn mean_tau(reports: &[ReorderReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("reorder reports"));
    }
    Ok(reports.iter().map(|r| r.tau).sum::<f64>() / reports.len() as f64)
}
