use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Gelu,
}

/// Where the softmax sits relative to top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingOrder {
    /// Select k logits, then softmax over the selected set (Mixtral style).
    TopkThenSoftmax,
    /// Softmax over all experts, then keep the k largest without
    /// renormalizing (DeepSeek / Grok style).
    SoftmaxThenTopk,
}

/// Which of the three expert projections an analysis looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhichMatrix {
    Up,
    Act,
    Down,
}

impl WhichMatrix {
    pub const ALL: [WhichMatrix; 3] = [WhichMatrix::Up, WhichMatrix::Act, WhichMatrix::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            WhichMatrix::Up => "up",
            WhichMatrix::Act => "act",
            WhichMatrix::Down => "down",
        }
    }
}

impl std::fmt::Display for WhichMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for WhichMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(WhichMatrix::Up),
            "act" => Ok(WhichMatrix::Act),
            "down" => Ok(WhichMatrix::Down),
            other => Err(Error::InvalidArgument(format!(
                "unknown matrix `{other}` (expected up|act|down)"
            ))),
        }
    }
}

fn default_prenorm() -> bool {
    true
}

/// Architecture hyperparameters. A layer with exactly one expert is a dense
/// FFN layer: it has no gate and stores its weights under `ffn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub experts_per_layer: Vec<usize>,
    pub shared_per_layer: Vec<usize>,
    pub top_k: usize,
    pub d_hid: usize,
    pub d_mid: usize,
    pub vocab: usize,
    pub activation: Activation,
    pub gating_order: GatingOrder,
    #[serde(default = "default_prenorm")]
    pub use_prenorm: bool,
}

impl ModelConfig {
    /// Uniform MoE stack: every layer has `experts` routed experts and
    /// `shared` shared experts.
    pub fn uniform(
        num_layers: usize,
        experts: usize,
        shared: usize,
        top_k: usize,
        d_hid: usize,
        d_mid: usize,
        vocab: usize,
    ) -> Self {
        Self {
            num_layers,
            experts_per_layer: vec![experts; num_layers],
            shared_per_layer: vec![shared; num_layers],
            top_k,
            d_hid,
            d_mid,
            vocab,
            activation: Activation::Silu,
            gating_order: GatingOrder::TopkThenSoftmax,
            use_prenorm: true,
        }
    }

    pub fn is_dense(&self, layer: usize) -> bool {
        self.experts_per_layer[layer] == 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.experts_per_layer.len() != self.num_layers {
            return bad(format!(
                "experts_per_layer has {} entries for {} layers",
                self.experts_per_layer.len(),
                self.num_layers
            ));
        }
        if self.shared_per_layer.len() != self.num_layers {
            return bad(format!(
                "shared_per_layer has {} entries for {} layers",
                self.shared_per_layer.len(),
                self.num_layers
            ));
        }
        if self.top_k == 0 || self.d_hid == 0 || self.d_mid == 0 || self.vocab == 0 {
            return bad("top_k, d_hid, d_mid and vocab must be positive".into());
        }
        for (i, (&n, &s)) in self
            .experts_per_layer
            .iter()
            .zip(&self.shared_per_layer)
            .enumerate()
        {
            if n == 0 {
                return bad(format!("layer {i} has zero experts"));
            }
            if n == 1 && s != 0 {
                return bad(format!("dense layer {i} cannot have shared experts"));
            }
            if n > 1 && self.top_k > n {
                return bad(format!(
                    "top_k {} exceeds {} experts in layer {i}",
                    self.top_k, n
                ));
            }
        }
        Ok(())
    }

    /// Every tensor name the container must hold, with its shape.
    pub fn required_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (h, m) = (self.d_hid, self.d_mid);
        let mut out = vec![("embed.weight".to_string(), vec![self.vocab, h])];
        let push_ffn = |prefix: String, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{prefix}.w_up"), vec![m, h]));
            out.push((format!("{prefix}.w_act"), vec![m, h]));
            out.push((format!("{prefix}.w_down"), vec![h, m]));
        };
        for i in 0..self.num_layers {
            let n = self.experts_per_layer[i];
            if n == 1 {
                push_ffn(format!("layers.{i}.ffn"), &mut out);
                continue;
            }
            out.push((format!("layers.{i}.gate.weight"), vec![n, h]));
            for e in 0..n {
                push_ffn(format!("layers.{i}.experts.{e}"), &mut out);
            }
            for s in 0..self.shared_per_layer[i] {
                push_ffn(format!("layers.{i}.shared.{s}"), &mut out);
            }
        }
        out
    }
}
