//! Two-stage tracing.
//!
//! Stage one runs each token through the model with its native top-k and
//! records `z_1..z_L`. Stage two revisits every layer on its own, feeds it the
//! recorded input `z_{i-1}` and evaluates *all* routed experts there, while
//! the gate decision stays the native one.

use rayon::prelude::*;

use super::forward::{combine, dense_gate, layer_input};
use super::{gate_forward, LayerWeights, MoeModel};
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::store::Checkpoint;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub z_in: Vec<f64>,
    pub z_out: Vec<f64>,
    /// Expert input (normalized `z_in` when prenorm is on).
    pub h: Vec<f64>,
    /// One output per routed expert, all evaluated.
    pub expert_outputs: Vec<Vec<f64>>,
    /// `σ(W_act h)` per routed expert.
    pub intermediates: Vec<Vec<f64>>,
    pub shared_outputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    /// Native post-normalization scores, zero for unselected experts.
    pub gate_scores: Vec<f64>,
    pub selected: Vec<usize>,
    /// Output of the dense reference FFN on `h`, when one was supplied.
    pub reference_output: Option<Vec<f64>>,
}

impl LayerTrace {
    pub fn num_experts(&self) -> usize {
        self.expert_outputs.len()
    }

    /// `z_in + Σ score·out + Σ shared`, rebuilt from the recorded pieces.
    pub fn recombine(&self) -> Vec<f64> {
        let gate = super::GateOutput {
            logits: self.logits.clone(),
            scores: self.gate_scores.clone(),
            selected: self.selected.clone(),
        };
        let selected: Vec<Vec<f64>> = self
            .selected
            .iter()
            .map(|&i| self.expert_outputs[i].clone())
            .collect();
        combine(&self.z_in, &gate, &selected, &self.shared_outputs)
    }

    /// Relative error `‖recombine − z_out‖ / ‖z_out‖`.
    pub fn consistency_error(&self) -> f64 {
        let r = self.recombine();
        let diff: Vec<f64> = r.iter().zip(&self.z_out).map(|(a, b)| a - b).collect();
        norm(&diff) / norm(&self.z_out).max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    pub token_id: usize,
    pub per_layer: Vec<LayerTrace>,
}

impl MoeModel {
    fn trace_layer(
        &self,
        i: usize,
        z_in: &[f64],
        z_out: &[f64],
        reference: Option<&MoeModel>,
    ) -> Result<LayerTrace> {
        let cfg = &self.config;
        let h = layer_input(z_in, cfg);
        let layer = &self.layers[i];
        let gate = match layer {
            LayerWeights::Dense(_) => dense_gate(),
            LayerWeights::Moe { gate, experts, .. } => {
                gate_forward(gate, &h, cfg.top_k.min(experts.len()), cfg.gating_order)?
            }
        };
        let (expert_outputs, intermediates): (Vec<_>, Vec<_>) = layer
            .routed()
            .iter()
            .map(|e| e.forward(&h, cfg.activation))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let shared_outputs = layer
            .shared()
            .iter()
            .map(|e| e.forward(&h, cfg.activation).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        let reference_output = match reference {
            None => None,
            Some(r) => match r.layers.get(i) {
                Some(LayerWeights::Dense(ffn)) => Some(ffn.forward(&h, r.config.activation)?.0),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "reference model has no dense layer {i}"
                    )))
                }
            },
        };
        Ok(LayerTrace {
            z_in: z_in.to_vec(),
            z_out: z_out.to_vec(),
            h,
            expert_outputs,
            intermediates,
            shared_outputs,
            logits: gate.logits,
            gate_scores: gate.scores,
            selected: gate.selected,
            reference_output,
        })
    }

    pub fn trace_token(&self, token: usize, reference: Option<&MoeModel>) -> Result<TokenTrace> {
        let record = self.forward_token(token)?;
        let per_layer = (0..self.layers.len())
            .map(|i| {
                self.trace_layer(
                    i,
                    record.layer_input(i),
                    &record.layer_outputs[i],
                    reference,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenTrace {
            token_id: token,
            per_layer,
        })
    }

    /// Traces tokens in parallel; results keep token order and are identical
    /// to a sequential run.
    pub fn trace(&self, tokens: &[usize], reference: Option<&MoeModel>) -> Result<Vec<TokenTrace>> {
        if let Some(r) = reference {
            if r.config.d_hid != self.config.d_hid || r.config.d_mid != self.config.d_mid {
                return Err(Error::InvalidArgument(
                    "reference model dimensions differ from the traced model".into(),
                ));
            }
        }
        tokens
            .par_iter()
            .map(|&t| self.trace_token(t, reference))
            .collect()
    }
}

pub fn trace_all_experts(ckpt: &Checkpoint, tokens: &[usize]) -> Result<Vec<TokenTrace>> {
    MoeModel::from_checkpoint(ckpt)?.trace(tokens, None)
}
