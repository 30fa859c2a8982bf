//! Behaviour analyses over two-stage traces.

use crate::analysis::similarity::{
    cosine_sim, pairwise_cosine, EntityLabel, Metric, SimilarityMatrix,
};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::model::{softmax, LayerTrace, TokenTrace};

/// `1 − arccos(c)/π` with `c` clamped to `[−1, 1]`.
pub fn angular_from_cosine(c: f64) -> f64 {
    1.0 - c.clamp(-1.0, 1.0).acos() / std::f64::consts::PI
}

pub fn angular_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    cosine_sim(u, v).map(angular_from_cosine)
}

fn layer_of(trace: &TokenTrace, layer: usize) -> Result<&LayerTrace> {
    trace.per_layer.get(layer).ok_or(Error::LayerOutOfRange {
        layer,
        num_layers: trace.per_layer.len(),
    })
}

/// Cosine between every routed expert output, then shared experts, then the
/// reference FFN when traced. Cells involving a zero output are masked.
pub fn output_sim_per_token(trace: &TokenTrace, layer: usize) -> Result<SimilarityMatrix> {
    let lt = layer_of(trace, layer)?;
    let mut labels: Vec<EntityLabel> = (0..lt.expert_outputs.len())
        .map(EntityLabel::Expert)
        .collect();
    let mut vectors = lt.expert_outputs.clone();
    for (i, s) in lt.shared_outputs.iter().enumerate() {
        labels.push(EntityLabel::Shared(i));
        vectors.push(s.clone());
    }
    if let Some(r) = &lt.reference_output {
        labels.push(EntityLabel::Reference);
        vectors.push(r.clone());
    }
    let mut m = pairwise_cosine(labels, &vectors, true)?;
    m.selected = lt.selected.clone();
    Ok(m)
}

/// Element-wise mean of per-token angular similarity matrices, accumulated
/// in corpus order. A cell undefined for some tokens averages over the
/// tokens where it is defined.
pub fn avg_output_sim(traces: &[TokenTrace], layer: usize) -> Result<SimilarityMatrix> {
    let first = traces.first().ok_or(Error::EmptyInput("corpus"))?;
    let template = output_sim_per_token(first, layer)?;
    let n = template.len();
    let mut sum = vec![vec![0.0; n]; n];
    let mut count = vec![vec![0u64; n]; n];
    for t in traces {
        let m = output_sim_per_token(t, layer)?;
        if m.labels != template.labels {
            return Err(Error::InvalidArgument(
                "traces disagree on the entities of this layer".into(),
            ));
        }
        for i in 0..n {
            for j in 0..n {
                if let Some(c) = m.values[i][j] {
                    sum[i][j] += angular_from_cosine(c);
                    count[i][j] += 1;
                }
            }
        }
    }
    let values = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (count[i][j] > 0).then(|| sum[i][j] / count[i][j] as f64))
                .collect()
        })
        .collect();
    Ok(SimilarityMatrix {
        labels: template.labels,
        values,
        metric: Metric::Angular,
        selected: Vec::new(),
    })
}

/// L2 norm of each routed expert's output.
pub fn expert_norms(trace: &TokenTrace, layer: usize) -> Result<Vec<f64>> {
    Ok(layer_of(trace, layer)?
        .expert_outputs
        .iter()
        .map(|o| norm(o))
        .collect())
}

/// 0-based ascending ranks; ties go to the lower index first.
fn ascending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut rank = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// `counts[i][j]`: experts whose output-norm rank is `i` and whose gate-score
/// rank is `j` (0-based here, rank 0 = smallest), summed over every
/// `(token, layer)` event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankCountMatrix {
    pub n: usize,
    pub counts: Vec<Vec<u64>>,
    pub events: u64,
}

impl RankCountMatrix {
    pub fn is_diagonal(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| i == j || self.counts[i][j] == 0))
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.n)
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

/// Scores for ranking come from normalizing the logits over all experts
/// (`k = N`), so unselected experts are comparable too.
pub fn rank_count_matrix(traces: &[TokenTrace], layers: &[usize]) -> Result<RankCountMatrix> {
    if layers.is_empty() {
        return Err(Error::EmptyInput("layer selection"));
    }
    let mut n = None;
    let mut counts = Vec::new();
    let mut events = 0u64;
    for t in traces {
        for &layer in layers {
            let lt = layer_of(t, layer)?;
            let ne = lt.num_experts();
            match n {
                None => {
                    n = Some(ne);
                    counts = vec![vec![0u64; ne]; ne];
                }
                Some(prev) if prev != ne => return Err(Error::HeterogeneousExperts(prev, ne)),
                Some(_) => {}
            }
            let norms: Vec<f64> = lt.expert_outputs.iter().map(|o| norm(o)).collect();
            let norm_rank = ascending_ranks(&norms);
            let score_rank = ascending_ranks(&softmax(&lt.logits));
            for e in 0..ne {
                counts[norm_rank[e]][score_rank[e]] += 1;
            }
            events += 1;
        }
    }
    let n = n.ok_or(Error::EmptyInput("traces"))?;
    Ok(RankCountMatrix { n, counts, events })
}

/// Fraction of intermediate-state entries with `|v| > threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRatio {
    /// `per_expert[layer][expert]`.
    pub per_expert: Vec<Vec<f64>>,
    pub overall: f64,
    pub active: u64,
    pub total: u64,
}

pub fn fraction_above(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| v.abs() > threshold).count() as f64 / values.len() as f64
}

pub fn activation_ratio(traces: &[TokenTrace], threshold: f64) -> Result<ActivationRatio> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "threshold must be nonnegative, got {threshold}"
        )));
    }
    let shape: Vec<usize> = traces
        .first()
        .map(|t| t.per_layer.iter().map(|l| l.intermediates.len()).collect())
        .unwrap_or_default();
    let mut active: Vec<Vec<u64>> = shape.iter().map(|&n| vec![0; n]).collect();
    let mut total: Vec<Vec<u64>> = shape.iter().map(|&n| vec![0; n]).collect();
    for t in traces {
        for (l, lt) in t.per_layer.iter().enumerate() {
            for (e, inter) in lt.intermediates.iter().enumerate() {
                active[l][e] += inter.iter().filter(|v| v.abs() > threshold).count() as u64;
                total[l][e] += inter.len() as u64;
            }
        }
    }
    let per_expert = active
        .iter()
        .zip(&total)
        .map(|(a, t)| {
            a.iter()
                .zip(t)
                .map(|(&a, &t)| if t == 0 { 0.0 } else { a as f64 / t as f64 })
                .collect()
        })
        .collect();
    let a: u64 = active.iter().flatten().sum();
    let t: u64 = total.iter().flatten().sum();
    Ok(ActivationRatio {
        per_expert,
        overall: if t == 0 { 0.0 } else { a as f64 / t as f64 },
        active: a,
        total: t,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingEntry {
    pub position: usize,
    pub token_id: usize,
    pub layer: usize,
    /// `(expert, score)` in selection order.
    pub choices: Vec<(usize, f64)>,
}

/// Selected experts and their post-softmax scores for every token and MoE
/// layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingLog {
    pub entries: Vec<RoutingEntry>,
}

pub fn routing_pattern(traces: &[TokenTrace]) -> RoutingLog {
    let mut entries = Vec::new();
    for (position, t) in traces.iter().enumerate() {
        for (layer, lt) in t.per_layer.iter().enumerate() {
            if lt.num_experts() < 2 {
                continue;
            }
            entries.push(RoutingEntry {
                position,
                token_id: t.token_id,
                layer,
                choices: lt
                    .selected
                    .iter()
                    .map(|&e| (e, lt.gate_scores[e]))
                    .collect(),
            });
        }
    }
    RoutingLog { entries }
}

/// `N × d_mid` matrix of `|σ(W_act h)|` per expert.
pub fn intermediate_heatmap(trace: &TokenTrace, layer: usize) -> Result<Matrix> {
    let lt = layer_of(trace, layer)?;
    let rows: Vec<Vec<f64>> = lt
        .intermediates
        .iter()
        .map(|r| r.iter().map(|v| v.abs()).collect())
        .collect();
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_trace(outputs: Vec<Vec<f64>>, logits: Vec<f64>) -> LayerTrace {
        let n = outputs.len();
        LayerTrace {
            z_in: vec![0.0; 2],
            z_out: vec![0.0; 2],
            h: vec![0.0; 2],
            intermediates: vec![vec![0.0; 3]; n],
            expert_outputs: outputs,
            shared_outputs: vec![],
            gate_scores: softmax(&logits),
            logits,
            selected: vec![0],
            reference_output: None,
        }
    }

    fn token(layers: Vec<LayerTrace>) -> TokenTrace {
        TokenTrace {
            token_id: 0,
            per_layer: layers,
        }
    }

    #[test]
    fn angular_reference_points() {
        assert!((angular_from_cosine(1.0) - 1.0).abs() < 1e-15);
        assert!((angular_from_cosine(0.0) - 0.5).abs() < 1e-15);
        assert!((angular_from_cosine(-1.0) - 0.0).abs() < 1e-15);
        assert!((angular_from_cosine(0.5f64.sqrt()) - 0.75).abs() < 1e-12);
        assert!((angular_sim(&[1.0, 0.0], &[0.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(angular_from_cosine(1.0 + 1e-12), 1.0);
    }

    #[test]
    fn norms() {
        let t = token(vec![layer_trace(
            vec![vec![3.0, 4.0], vec![0.0, 0.0]],
            vec![0.0, 1.0],
        )]);
        assert_eq!(expert_norms(&t, 0).unwrap(), vec![5.0, 0.0]);
        assert!(expert_norms(&t, 1).is_err());
    }

    #[test]
    fn zero_output_masks_cells() {
        let t = token(vec![layer_trace(
            vec![vec![3.0, 4.0], vec![0.0, 0.0], vec![1.0, 0.0]],
            vec![0.0, 1.0, 2.0],
        )]);
        let m = output_sim_per_token(&t, 0).unwrap();
        assert_eq!(m.get(0, 1), None);
        assert!((m.get(0, 2).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(m.label_strings(), vec!["0*", "1", "2"]);
    }

    #[test]
    fn two_expert_rank_enumeration() {
        // Expert 0: smaller norm, larger score.
        let t = token(vec![layer_trace(
            vec![vec![1.0, 0.0], vec![2.0, 0.0]],
            vec![1.0, 0.0],
        )]);
        let r = rank_count_matrix(&[t], &[0]).unwrap();
        assert_eq!(r.counts, vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(r.events, 1);
    }

    #[test]
    fn heterogeneous_layers_rejected() {
        let t = token(vec![
            layer_trace(vec![vec![1.0, 0.0], vec![2.0, 0.0]], vec![1.0, 0.0]),
            layer_trace(vec![vec![1.0, 0.0]; 3], vec![1.0, 0.0, 0.5]),
        ]);
        assert!(matches!(
            rank_count_matrix(&[t], &[0, 1]),
            Err(Error::HeterogeneousExperts(2, 3))
        ));
    }

    #[test]
    fn activation_fraction_by_hand() {
        assert_eq!(fraction_above(&[0.0005, 0.5, -0.2, 0.0001], 0.001), 0.5);
        assert_eq!(fraction_above(&[0.0; 4], 0.001), 0.0);
        assert_eq!(fraction_above(&[0.0, 1e-30, -2.0, 0.0], 0.0), 0.5);
    }
}
