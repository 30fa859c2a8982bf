use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::model::{Expert, LayerWeights, MoeModel, WhichMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    Angular,
}

impl Metric {
    /// Natural value range, used as the default heatmap scale.
    pub fn range(self) -> (f64, f64) {
        match self {
            Metric::Cosine => (-1.0, 1.0),
            Metric::Angular => (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityLabel {
    Expert(usize),
    Shared(usize),
    /// Dense FFN of a reference model ("F").
    Reference,
}

impl std::fmt::Display for EntityLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EntityLabel::Expert(i) => write!(f, "{i}"),
            EntityLabel::Shared(i) => write!(f, "SE{i}"),
            EntityLabel::Reference => f.write_str("F"),
        }
    }
}

/// Square, symmetric similarity table over labeled entities. `None` cells are
/// undefined (a zero vector was involved).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub labels: Vec<EntityLabel>,
    pub values: Vec<Vec<Option<f64>>>,
    pub metric: Metric,
    /// Experts the gate picked, for per-token output matrices.
    pub selected: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i][j]
    }

    /// Label text, with a `*` suffix on gate-selected experts.
    pub fn label_strings(&self) -> Vec<String> {
        self.labels
            .iter()
            .map(|l| match l {
                EntityLabel::Expert(i) if self.selected.contains(i) => format!("{l}*"),
                _ => l.to_string(),
            })
            .collect()
    }

    fn mean_where(&self, pick: impl Fn(EntityLabel, EntityLabel) -> bool) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..self.len() {
            for j in 0..self.len() {
                if i == j || !pick(self.labels[i], self.labels[j]) {
                    continue;
                }
                if let Some(v) = self.values[i][j] {
                    sum += v;
                    count += 1;
                }
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// Mean off-diagonal expert-expert value (S_ee).
    pub fn s_ee(&self) -> Option<f64> {
        self.mean_where(|a, b| {
            matches!(a, EntityLabel::Expert(_)) && matches!(b, EntityLabel::Expert(_))
        })
    }

    /// Mean expert-vs-reference value (S_ef); `None` without a reference.
    pub fn s_ef(&self) -> Option<f64> {
        self.mean_where(|a, b| matches!(a, EntityLabel::Expert(_)) && b == EntityLabel::Reference)
    }

    /// Upper-triangle (i < j) values over routed experts only.
    pub fn expert_upper_triangle(&self) -> Vec<Option<f64>> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| matches!(self.labels[i], EntityLabel::Expert(_)))
            .collect();
        let mut out = Vec::new();
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                out.push(self.values[i][j]);
            }
        }
        out
    }

    pub fn map(&self, metric: Metric, f: impl Fn(f64) -> f64) -> SimilarityMatrix {
        SimilarityMatrix {
            labels: self.labels.clone(),
            values: self
                .values
                .iter()
                .map(|row| row.iter().map(|v| v.map(&f)).collect())
                .collect(),
            metric,
            selected: self.selected.clone(),
        }
    }
}

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Pairwise cosine over vectors; zero vectors either fail or mask their row
/// and column.
pub(crate) fn pairwise_cosine(
    labels: Vec<EntityLabel>,
    vectors: &[Vec<f64>],
    mask_zero: bool,
) -> Result<SimilarityMatrix> {
    let n = vectors.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = match cosine_sim(&vectors[i], &vectors[j]) {
                Ok(v) => Some(v),
                Err(Error::ZeroVector) if mask_zero => None,
                Err(e) => return Err(e),
            };
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(SimilarityMatrix {
        labels,
        values,
        metric: Metric::Cosine,
        selected: Vec::new(),
    })
}

/// Row-major flattening of the chosen projection.
pub fn flatten(e: &Expert, which: WhichMatrix) -> Vec<f64> {
    e.matrix(which).as_slice().to_vec()
}

/// Mean neuron vector: row mean for `up`/`act`, column mean for `down`.
pub fn neuron_average(e: &Expert, which: WhichMatrix) -> Vec<f64> {
    let neurons = e.neuron_vectors(which);
    let mut acc = vec![0.0; e.d_hid()];
    for v in &neurons {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = neurons.len() as f64;
    acc.into_iter().map(|a| a / n).collect()
}

/// Labeled experts of a layer plus an optional reference FFN, appended last.
pub fn layer_entities<'a>(
    model: &'a MoeModel,
    layer: usize,
    reference: Option<&'a MoeModel>,
) -> Result<Vec<(EntityLabel, &'a Expert)>> {
    let weights = model.layer(layer)?;
    if weights.is_dense() && reference.is_none() {
        return Err(Error::DenseLayer(layer));
    }
    let mut out: Vec<(EntityLabel, &Expert)> = weights
        .routed()
        .iter()
        .enumerate()
        .map(|(i, e)| (EntityLabel::Expert(i), e))
        .collect();
    if let Some(r) = reference {
        match r.layer(layer)? {
            LayerWeights::Dense(ffn) => out.push((EntityLabel::Reference, ffn)),
            LayerWeights::Moe { .. } => {
                return Err(Error::InvalidArgument(format!(
                    "reference layer {layer} is not a dense FFN"
                )))
            }
        }
    }
    let (h, m) = (out[0].1.d_hid(), out[0].1.d_mid());
    for (_, e) in &out {
        if e.d_mid() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: e.d_mid(),
            });
        }
        if e.d_hid() != h {
            return Err(Error::DimensionMismatch {
                expected: h,
                actual: e.d_hid(),
            });
        }
    }
    Ok(out)
}

fn entity_sim(
    entities: &[(EntityLabel, &Expert)],
    vector: impl Fn(&Expert) -> Vec<f64>,
) -> Result<SimilarityMatrix> {
    let labels = entities.iter().map(|(l, _)| *l).collect();
    let vectors: Vec<Vec<f64>> = entities.iter().map(|(_, e)| vector(e)).collect();
    pairwise_cosine(labels, &vectors, false)
}

/// Cosine over flattened projections of every expert (and the reference).
pub fn matrix_level_sim(
    model: &MoeModel,
    layer: usize,
    which: WhichMatrix,
    reference: Option<&MoeModel>,
) -> Result<SimilarityMatrix> {
    entity_sim(&layer_entities(model, layer, reference)?, |e| {
        flatten(e, which)
    })
}

pub fn matrix_level_sim_experts(
    entities: &[(EntityLabel, &Expert)],
    which: WhichMatrix,
) -> Result<SimilarityMatrix> {
    entity_sim(entities, |e| flatten(e, which))
}

/// Cosine over neuron-averaged vectors.
pub fn neuron_average_sim(
    model: &MoeModel,
    layer: usize,
    which: WhichMatrix,
    reference: Option<&MoeModel>,
) -> Result<SimilarityMatrix> {
    neuron_average_sim_experts(&layer_entities(model, layer, reference)?, which)
}

pub fn neuron_average_sim_experts(
    entities: &[(EntityLabel, &Expert)],
    which: WhichMatrix,
) -> Result<SimilarityMatrix> {
    entity_sim(entities, |e| neuron_average(e, which))
}

/// Cosine between gate embedding rows `W_g[n, :]`.
pub fn gate_embedding_sim(model: &MoeModel, layer: usize) -> Result<SimilarityMatrix> {
    let gate = model.layer(layer)?.gate().ok_or(Error::DenseLayer(layer))?;
    let w = &gate.w_g;
    let rows: Vec<Vec<f64>> = (0..w.rows()).map(|r| w.row(r).to_vec()).collect();
    pairwise_cosine(
        (0..w.rows()).map(EntityLabel::Expert).collect(),
        &rows,
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn expert(up: &[&[f64]]) -> Expert {
        let up = Matrix::from_rows(&up.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let down = up.transpose();
        Expert::new(up.clone(), up, down).unwrap()
    }

    #[test]
    fn cosine_reference_values() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        let v = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let err = cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("undefined similarity"));
    }

    #[test]
    fn scaled_expert_is_fully_similar() {
        let a = expert(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let mut b = a.clone();
        b.w_up = a.w_up.scale(2.0);
        let ents = [(EntityLabel::Expert(0), &a), (EntityLabel::Expert(1), &b)];
        let s = matrix_level_sim_experts(&ents, WhichMatrix::Up).unwrap();
        assert!((s.get(0, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn averaging_ignores_neuron_position() {
        let a = expert(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = expert(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let ents = [(EntityLabel::Expert(0), &a), (EntityLabel::Expert(1), &b)];
        let flat = matrix_level_sim_experts(&ents, WhichMatrix::Act).unwrap();
        let avg = neuron_average_sim_experts(&ents, WhichMatrix::Act).unwrap();
        assert_eq!(flat.get(0, 1).unwrap(), 0.0);
        assert!((avg.get(0, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn averaging_can_reverse_expert_vs_reference_order() {
        // Two experts holding the same neurons in swapped slots, and a
        // reference that matches expert 0 position-wise.
        let e1 = expert(&[&[1.0, 0.0], &[0.0, 0.2]]);
        let e2 = expert(&[&[0.0, 0.2], &[1.0, 0.0]]);
        let f = expert(&[&[1.0, 0.1], &[0.1, -0.5]]);
        let ents = [
            (EntityLabel::Expert(0), &e1),
            (EntityLabel::Expert(1), &e2),
            (EntityLabel::Reference, &f),
        ];
        let flat = matrix_level_sim_experts(&ents, WhichMatrix::Up).unwrap();
        assert!(flat.get(0, 1).unwrap() < flat.get(0, 2).unwrap());
        let avg = neuron_average_sim_experts(&ents, WhichMatrix::Up).unwrap();
        assert!(avg.get(0, 1).unwrap() > avg.get(0, 2).unwrap());
        assert!(avg.s_ee().unwrap() > avg.s_ef().unwrap());
    }

    #[test]
    fn down_average_uses_columns() {
        let mut e = Expert::zeros(2, 3);
        e.w_down = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(neuron_average(&e, WhichMatrix::Down), vec![2.0, 5.0]);
    }

    #[test]
    fn summary_statistics() {
        let labels = vec![
            EntityLabel::Expert(0),
            EntityLabel::Expert(1),
            EntityLabel::Reference,
        ];
        let vectors = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let s = pairwise_cosine(labels, &vectors, false).unwrap();
        let c = 1.0 / 2f64.sqrt();
        assert!((s.s_ee().unwrap() - c).abs() < 1e-12);
        assert!((s.s_ef().unwrap() - (0.0 + c) / 2.0).abs() < 1e-12);
        assert_eq!(s.expert_upper_triangle().len(), 1);
    }

    #[test]
    fn zero_vectors_mask_or_fail() {
        let labels = vec![EntityLabel::Expert(0), EntityLabel::Expert(1)];
        let vectors = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert!(pairwise_cosine(labels.clone(), &vectors, false).is_err());
        let s = pairwise_cosine(labels, &vectors, true).unwrap();
        assert_eq!(s.get(0, 1), None);
        assert_eq!(s.get(0, 0), Some(1.0));
    }
}
