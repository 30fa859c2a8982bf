use super::{Activation, Expert, GateParams, GatingOrder, LayerWeights, ModelConfig, MoeModel};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::store::Checkpoint;

pub const RMSNORM_EPS: f64 = 1e-6;

pub fn activation_fn(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Silu => x / (1.0 + (-x).exp()),
        Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    }
}

/// `y = W_down((W_up x) ⊙ σ(W_act x))`, also returning the intermediate
/// state `σ(W_act x)`.
pub fn expert_forward(e: &Expert, x: &[f64], kind: Activation) -> Result<(Vec<f64>, Vec<f64>)> {
    let up = e.w_up.matvec(x)?;
    let inter: Vec<f64> = e
        .w_act
        .matvec(x)?
        .into_iter()
        .map(|v| activation_fn(kind, v))
        .collect();
    let gated: Vec<f64> = up.iter().zip(&inter).map(|(u, a)| u * a).collect();
    let y = e.w_down.matvec(&gated)?;
    Ok((y, inter))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Indices of the `k` largest keys, largest first; ties go to the lower index.
fn top_k(keys: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub logits: Vec<f64>,
    /// Post-normalization score per expert; zero for unselected experts.
    pub scores: Vec<f64>,
    /// Selected experts, highest score first.
    pub selected: Vec<usize>,
}

/// Applies top-k and softmax to raw logits in the given order.
pub fn gate_select(logits: &[f64], k: usize, order: GatingOrder) -> Result<GateOutput> {
    let n = logits.len();
    if k > n || k == 0 {
        return Err(Error::TopKTooLarge { k, n });
    }
    let mut scores = vec![0.0; n];
    let selected = match order {
        GatingOrder::TopkThenSoftmax => {
            let selected = top_k(logits, k);
            let picked: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
            for (&i, p) in selected.iter().zip(softmax(&picked)) {
                scores[i] = p;
            }
            selected
        }
        GatingOrder::SoftmaxThenTopk => {
            let probs = softmax(logits);
            let selected = top_k(&probs, k);
            for &i in &selected {
                scores[i] = probs[i];
            }
            selected
        }
    };
    Ok(GateOutput {
        logits: logits.to_vec(),
        scores,
        selected,
    })
}

pub fn gate_forward(g: &GateParams, x: &[f64], k: usize, order: GatingOrder) -> Result<GateOutput> {
    gate_select(&g.w_g.matvec(x)?, k, order)
}

/// RMS normalization without a learned scale.
pub fn rmsnorm(x: &[f64]) -> Vec<f64> {
    let ms = dot(x, x) / x.len().max(1) as f64;
    let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

/// One layer evaluated with the model's native routing.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPass {
    /// Input to the experts (normalized `z_in` when prenorm is on).
    pub h: Vec<f64>,
    pub gate: GateOutput,
    /// Outputs of the selected experts, parallel to `gate.selected`.
    pub selected_outputs: Vec<Vec<f64>>,
    pub shared_outputs: Vec<Vec<f64>>,
    pub z_out: Vec<f64>,
}

/// Output of a dense layer's gate-free routing: one expert, weight 1.
pub(crate) fn dense_gate() -> GateOutput {
    GateOutput {
        logits: vec![0.0],
        scores: vec![1.0],
        selected: vec![0],
    }
}

pub(crate) fn layer_input(x: &[f64], config: &ModelConfig) -> Vec<f64> {
    if config.use_prenorm {
        rmsnorm(x)
    } else {
        x.to_vec()
    }
}

/// Residual combination `x + Σ score·out + Σ shared`, accumulated in
/// selection order then shared-index order.
pub(crate) fn combine(
    x: &[f64],
    gate: &GateOutput,
    selected_outputs: &[Vec<f64>],
    shared_outputs: &[Vec<f64>],
) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (&i, out) in gate.selected.iter().zip(selected_outputs) {
        axpy(&mut y, gate.scores[i], out);
    }
    for out in shared_outputs {
        axpy(&mut y, 1.0, out);
    }
    x.iter().zip(&y).map(|(a, b)| a + b).collect()
}

pub fn moe_layer_forward(
    layer: &LayerWeights,
    x: &[f64],
    config: &ModelConfig,
) -> Result<LayerPass> {
    if x.len() != config.d_hid {
        return Err(Error::DimensionMismatch {
            expected: config.d_hid,
            actual: x.len(),
        });
    }
    let h = layer_input(x, config);
    let act = config.activation;
    let (gate, selected_outputs, shared_outputs) = match layer {
        LayerWeights::Dense(ffn) => (dense_gate(), vec![ffn.forward(&h, act)?.0], Vec::new()),
        LayerWeights::Moe {
            gate,
            experts,
            shared,
        } => {
            let k = config.top_k.min(experts.len());
            let g = gate_forward(gate, &h, k, config.gating_order)?;
            let sel = g
                .selected
                .iter()
                .map(|&i| experts[i].forward(&h, act).map(|r| r.0))
                .collect::<Result<Vec<_>>>()?;
            let sh = shared
                .iter()
                .map(|e| e.forward(&h, act).map(|r| r.0))
                .collect::<Result<Vec<_>>>()?;
            (g, sel, sh)
        }
    };
    let z_out = combine(x, &gate, &selected_outputs, &shared_outputs);
    Ok(LayerPass {
        h,
        gate,
        selected_outputs,
        shared_outputs,
        z_out,
    })
}

/// Stage-one record for a token: its embedding and every layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub token_id: usize,
    pub embedding: Vec<f64>,
    /// `z_1 ..= z_L`.
    pub layer_outputs: Vec<Vec<f64>>,
}

impl ForwardRecord {
    /// Input to layer `i`: `z_{i-1}`, or the embedding for the first layer.
    pub fn layer_input(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.embedding
        } else {
            &self.layer_outputs[i - 1]
        }
    }

    /// Final hidden state (the embedding for a 0-layer model).
    pub fn output(&self) -> &[f64] {
        self.layer_outputs.last().unwrap_or(&self.embedding)
    }
}

impl MoeModel {
    pub fn forward_token(&self, token: usize) -> Result<ForwardRecord> {
        let embedding = self.embedding(token)?;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut x = embedding.clone();
        for layer in &self.layers {
            x = moe_layer_forward(layer, &x, &self.config)?.z_out;
            layer_outputs.push(x.clone());
        }
        Ok(ForwardRecord {
            token_id: token,
            embedding,
            layer_outputs,
        })
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<ForwardRecord>> {
        tokens.iter().map(|&t| self.forward_token(t)).collect()
    }
}

/// Runs every token through the model with native top-k and records all
/// layer outputs. Tokens are independent (no attention).
pub fn model_forward(ckpt: &Checkpoint, tokens: &[usize]) -> Result<Vec<ForwardRecord>> {
    MoeModel::from_checkpoint(ckpt)?.forward(tokens)
}
