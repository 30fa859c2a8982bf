//! Minimal MoE engine: experts, gates, residual layers and the two-stage
//! all-expert tracing protocol.

mod config;
mod corpus;
mod forward;
mod trace;

pub use config::{Activation, GatingOrder, ModelConfig, WhichMatrix};
pub use corpus::Corpus;
pub use forward::{
    activation_fn, expert_forward, gate_forward, gate_select, model_forward, moe_layer_forward,
    rmsnorm, softmax, ForwardRecord, GateOutput, LayerPass, RMSNORM_EPS,
};
pub use trace::{trace_all_experts, LayerTrace, TokenTrace};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::store::Checkpoint;

/// A LLaMA-style gated feed-forward block.
///
/// Neuron `i` is the triple (`w_up` row `i`, `w_act` row `i`, `w_down`
/// column `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w_up: Matrix,
    pub w_act: Matrix,
    pub w_down: Matrix,
}

impl Expert {
    pub fn new(w_up: Matrix, w_act: Matrix, w_down: Matrix) -> Result<Self> {
        let [m, h] = w_up.shape();
        if w_act.shape() != [m, h] {
            return Err(Error::DimensionMismatch {
                expected: m * h,
                actual: w_act.rows() * w_act.cols(),
            });
        }
        if w_down.shape() != [h, m] {
            return Err(Error::DimensionMismatch {
                expected: h * m,
                actual: w_down.rows() * w_down.cols(),
            });
        }
        Ok(Self {
            w_up,
            w_act,
            w_down,
        })
    }

    pub fn zeros(d_hid: usize, d_mid: usize) -> Self {
        Self {
            w_up: Matrix::zeros(d_mid, d_hid),
            w_act: Matrix::zeros(d_mid, d_hid),
            w_down: Matrix::zeros(d_hid, d_mid),
        }
    }

    fn load(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        Self::new(
            ckpt.matrix(&format!("{prefix}.w_up"))?,
            ckpt.matrix(&format!("{prefix}.w_act"))?,
            ckpt.matrix(&format!("{prefix}.w_down"))?,
        )
    }

    pub fn d_hid(&self) -> usize {
        self.w_up.cols()
    }

    pub fn d_mid(&self) -> usize {
        self.w_up.rows()
    }

    pub fn matrix(&self, which: WhichMatrix) -> &Matrix {
        match which {
            WhichMatrix::Up => &self.w_up,
            WhichMatrix::Act => &self.w_act,
            WhichMatrix::Down => &self.w_down,
        }
    }

    /// The `d_mid` neuron vectors of one projection: rows of `w_up` /
    /// `w_act`, columns of `w_down`. Each has length `d_hid`.
    pub fn neuron_vectors(&self, which: WhichMatrix) -> Vec<Vec<f64>> {
        match which {
            WhichMatrix::Up | WhichMatrix::Act => {
                let m = self.matrix(which);
                (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
            }
            WhichMatrix::Down => (0..self.w_down.cols())
                .map(|c| self.w_down.col(c))
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64], kind: Activation) -> Result<(Vec<f64>, Vec<f64>)> {
        expert_forward(self, x, kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w_g: Matrix,
}

impl GateParams {
    pub fn num_experts(&self) -> usize {
        self.w_g.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Dense(Expert),
    Moe {
        gate: GateParams,
        experts: Vec<Expert>,
        shared: Vec<Expert>,
    },
}

impl LayerWeights {
    /// Routed expert count; 1 for dense layers.
    pub fn num_experts(&self) -> usize {
        match self {
            LayerWeights::Dense(_) => 1,
            LayerWeights::Moe { experts, .. } => experts.len(),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, LayerWeights::Dense(_))
    }

    /// Routed experts, or the single FFN of a dense layer.
    pub fn routed(&self) -> &[Expert] {
        match self {
            LayerWeights::Dense(e) => std::slice::from_ref(e),
            LayerWeights::Moe { experts, .. } => experts,
        }
    }

    pub fn shared(&self) -> &[Expert] {
        match self {
            LayerWeights::Dense(_) => &[],
            LayerWeights::Moe { shared, .. } => shared,
        }
    }

    pub fn gate(&self) -> Option<&GateParams> {
        match self {
            LayerWeights::Dense(_) => None,
            LayerWeights::Moe { gate, .. } => Some(gate),
        }
    }
}

/// A checkpoint widened to `f64` and arranged by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
}

impl MoeModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config().clone();
        let embed = ckpt.matrix("embed.weight")?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            if config.is_dense(i) {
                layers.push(LayerWeights::Dense(Expert::load(
                    ckpt,
                    &format!("layers.{i}.ffn"),
                )?));
                continue;
            }
            let gate = GateParams {
                w_g: ckpt.matrix(&format!("layers.{i}.gate.weight"))?,
            };
            let experts = (0..config.experts_per_layer[i])
                .map(|e| Expert::load(ckpt, &format!("layers.{i}.experts.{e}")))
                .collect::<Result<Vec<_>>>()?;
            let shared = (0..config.shared_per_layer[i])
                .map(|s| Expert::load(ckpt, &format!("layers.{i}.shared.{s}")))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerWeights::Moe {
                gate,
                experts,
                shared,
            });
        }
        Ok(Self {
            config,
            embed,
            layers,
        })
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.layers.get(layer).ok_or(Error::LayerOutOfRange {
            layer,
            num_layers: self.layers.len(),
        })
    }

    pub fn embedding(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.embed.rows() {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.embed.rows(),
            });
        }
        Ok(self.embed.row(token).to_vec())
    }
}
