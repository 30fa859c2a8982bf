//! Synthetic checkpoints with controlled expert initialization.
//!
//! Randomness: every tensor draws from its own ChaCha20 stream, keyed by
//! `SHA-256("moe-lens/synth/v1\0" ‖ seed as u64 LE ‖ stream name)`. Stream
//! names are tensor names, with suffixes for auxiliary draws (`#noise`,
//! `#perm`). Normal variates come from `rand_distr::StandardNormal` in `f64`
//! and are rounded to `f32` once at the end, so the same `SynthSpec` always
//! yields the same bytes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Expert, ModelConfig};
use crate::store::{Checkpoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    /// Independent Gaussian weights everywhere.
    Scratch,
    /// Every routed expert is a shared base FFN plus independent noise.
    Upcycled,
    /// Routed experts are neuron permutations of expert 0.
    PermutedClone,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(SynthMode::Scratch),
            "upcycled" => Ok(SynthMode::Upcycled),
            "permuted_clone" | "permuted-clone" => Ok(SynthMode::PermutedClone),
            other => Err(Error::InvalidArgument(format!(
                "unknown synth mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub config: ModelConfig,
    pub mode: SynthMode,
    pub seed: u64,
    pub init_std: f64,
    /// Noise std as a multiple of `init_std`; upcycled mode only.
    pub upcycle_noise_std: f64,
}

impl SynthSpec {
    pub fn new(config: ModelConfig, mode: SynthMode, seed: u64) -> Self {
        Self {
            config,
            mode,
            seed,
            init_std: 0.02,
            upcycle_noise_std: 0.0,
        }
    }

    fn validate(&self, expected: SynthMode) -> Result<()> {
        self.config.validate()?;
        if self.mode != expected {
            return Err(Error::InvalidArgument(format!(
                "synth mode {:?} does not match {expected:?} generator",
                self.mode
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidArgument("init_std must be positive".into()));
        }
        if !(self.upcycle_noise_std >= 0.0 && self.upcycle_noise_std.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise std must be nonnegative".into(),
            ));
        }
        if self.mode != SynthMode::Upcycled && self.upcycle_noise_std != 0.0 {
            return Err(Error::InvalidArgument(
                "noise std only applies to upcycled mode".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub model: Checkpoint,
    /// Dense model holding the base FFNs (upcycled mode only).
    pub reference: Option<Checkpoint>,
}

pub fn stream(seed: u64, name: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"moe-lens/synth/v1\0");
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

fn gaussian(seed: u64, name: &str, n: usize, std: f64) -> Vec<f64> {
    let mut rng = stream(seed, name);
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn gaussian_tensor(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: gaussian(seed, name, n, std)
            .into_iter()
            .map(|v| v as f32)
            .collect(),
    }
}

fn scratch_map(config: &ModelConfig, seed: u64, std: f64) -> BTreeMap<String, Tensor> {
    config
        .required_tensors()
        .into_iter()
        .map(|(name, shape)| {
            let t = gaussian_tensor(seed, &name, &shape, std);
            (name, t)
        })
        .collect()
}

fn insert_expert(map: &mut BTreeMap<String, Tensor>, prefix: &str, e: &Expert) {
    map.insert(format!("{prefix}.w_up"), Tensor::from_matrix(&e.w_up));
    map.insert(format!("{prefix}.w_act"), Tensor::from_matrix(&e.w_act));
    map.insert(format!("{prefix}.w_down"), Tensor::from_matrix(&e.w_down));
}

fn tensor_matrix(t: &Tensor) -> Matrix {
    Matrix::from_vec(
        t.shape[0],
        t.shape[1],
        t.data.iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("tensor shape matches data")
}

fn expert_from_map(map: &BTreeMap<String, Tensor>, prefix: &str) -> Expert {
    Expert {
        w_up: tensor_matrix(&map[&format!("{prefix}.w_up")]),
        w_act: tensor_matrix(&map[&format!("{prefix}.w_act")]),
        w_down: tensor_matrix(&map[&format!("{prefix}.w_down")]),
    }
}

pub fn synth_scratch(spec: &SynthSpec) -> Result<Checkpoint> {
    spec.validate(SynthMode::Scratch)?;
    Checkpoint::from_tensors(
        spec.config.clone(),
        &scratch_map(&spec.config, spec.seed, spec.init_std),
    )
}

/// Config of the dense reference model paired with an upcycled model.
pub fn reference_config(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        experts_per_layer: vec![1; config.num_layers],
        shared_per_layer: vec![0; config.num_layers],
        top_k: 1,
        ..config.clone()
    }
}

/// Returns the upcycled model and the dense reference holding each layer's
/// base FFN.
pub fn synth_upcycled(spec: &SynthSpec) -> Result<(Checkpoint, Checkpoint)> {
    spec.validate(SynthMode::Upcycled)?;
    let cfg = &spec.config;
    let ref_cfg = reference_config(cfg);
    let mut model = scratch_map(cfg, spec.seed, spec.init_std);
    let reference = scratch_map(&ref_cfg, spec.seed, spec.init_std);
    let noise_std = spec.upcycle_noise_std * spec.init_std;

    for i in 0..cfg.num_layers {
        let base_prefix = format!("layers.{i}.ffn");
        if cfg.is_dense(i) {
            continue;
        }
        for n in 0..cfg.experts_per_layer[i] {
            for part in ["w_up", "w_act", "w_down"] {
                let base = &reference[&format!("{base_prefix}.{part}")];
                let name = format!("layers.{i}.experts.{n}.{part}");
                let data = if noise_std == 0.0 {
                    base.data.clone()
                } else {
                    let noise = gaussian(
                        spec.seed,
                        &format!("{name}#noise"),
                        base.data.len(),
                        noise_std,
                    );
                    base.data
                        .iter()
                        .zip(noise)
                        .map(|(&b, e)| (f64::from(b) + e) as f32)
                        .collect()
                };
                model.insert(name, Tensor::new(base.shape.clone(), data)?);
            }
        }
    }
    Ok((
        Checkpoint::from_tensors(cfg.clone(), &model)?,
        Checkpoint::from_tensors(ref_cfg, &reference)?,
    ))
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} for {n} neurons",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidPermutation(format!(
                "{perm:?} is not a bijection on 0..{n}"
            )));
        }
    }
    Ok(())
}

/// Moves neuron `i` of `base` to slot `permutation[i]` in all three
/// projections, giving a functionally identical expert.
pub fn synth_permuted_clone(base: &Expert, permutation: &[usize]) -> Result<Expert> {
    let (h, m) = (base.d_hid(), base.d_mid());
    check_permutation(permutation, m)?;
    let mut out = Expert::zeros(h, m);
    for (i, &p) in permutation.iter().enumerate() {
        for c in 0..h {
            out.w_up.set(p, c, base.w_up.get(i, c));
            out.w_act.set(p, c, base.w_act.get(i, c));
            out.w_down.set(c, p, base.w_down.get(c, i));
        }
    }
    Ok(out)
}

pub fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    check_permutation(perm, perm.len())?;
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(inv)
}

pub fn random_permutation(seed: u64, name: &str, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, name));
    perm
}

/// Expert 0 of each MoE layer is scratch; every other routed expert is a
/// random neuron permutation of it.
pub fn synth_permuted(spec: &SynthSpec) -> Result<Checkpoint> {
    spec.validate(SynthMode::PermutedClone)?;
    let cfg = &spec.config;
    let mut map = scratch_map(cfg, spec.seed, spec.init_std);
    for i in 0..cfg.num_layers {
        if cfg.is_dense(i) {
            continue;
        }
        let base = expert_from_map(&map, &format!("layers.{i}.experts.0"));
        for n in 1..cfg.experts_per_layer[i] {
            let prefix = format!("layers.{i}.experts.{n}");
            let perm = random_permutation(spec.seed, &format!("{prefix}#perm"), cfg.d_mid);
            insert_expert(&mut map, &prefix, &synth_permuted_clone(&base, &perm)?);
        }
    }
    Checkpoint::from_tensors(cfg.clone(), &map)
}

pub fn synth(spec: &SynthSpec) -> Result<SynthOutput> {
    match spec.mode {
        SynthMode::Scratch => Ok(SynthOutput {
            model: synth_scratch(spec)?,
            reference: None,
        }),
        SynthMode::Upcycled => {
            let (model, reference) = synth_upcycled(spec)?;
            Ok(SynthOutput {
                model,
                reference: Some(reference),
            })
        }
        SynthMode::PermutedClone => Ok(SynthOutput {
            model: synth_permuted(spec)?,
            reference: None,
        }),
    }
}

/// Model whose gate logits are a positive multiple of each expert's output
/// norm for every token.
///
/// Per layer, expert `n` is a shared scratch base with `W_down` scaled by
/// `n + 1`, so `‖E_n(h)‖ = (n + 1)‖E_base(h)‖`. Hidden coordinate 0 is pinned
/// to 1 in the embedding and no expert writes to it, so with gate row
/// `n = (n + 1)·e_0` the logits are `(n + 1)·h_0` with `h_0 > 0`.
pub fn synth_norm_routed(config: &ModelConfig, seed: u64, init_std: f64) -> Result<Checkpoint> {
    config.validate()?;
    if config.shared_per_layer.iter().any(|&s| s != 0) {
        return Err(Error::InvalidArgument(
            "norm-routed models have no shared experts".into(),
        ));
    }
    let mut map = scratch_map(config, seed, init_std);
    let embed = map.get_mut("embed.weight").expect("required tensor");
    for row in embed.data.chunks_mut(config.d_hid) {
        row[0] = 1.0;
    }
    for i in 0..config.num_layers {
        let n_exp = config.experts_per_layer[i];
        let mut base = expert_from_map(
            &map,
            &if n_exp == 1 {
                format!("layers.{i}.ffn")
            } else {
                format!("layers.{i}.experts.0")
            },
        );
        for c in 0..config.d_mid {
            base.w_down.set(0, c, 0.0);
        }
        if n_exp == 1 {
            insert_expert(&mut map, &format!("layers.{i}.ffn"), &base);
            continue;
        }
        for n in 0..n_exp {
            let e = Expert {
                w_down: base.w_down.scale((n + 1) as f64),
                ..base.clone()
            };
            insert_expert(&mut map, &format!("layers.{i}.experts.{n}"), &e);
        }
        let mut gate = Matrix::zeros(n_exp, config.d_hid);
        for n in 0..n_exp {
            gate.set(n, 0, (n + 1) as f64);
        }
        map.insert(
            format!("layers.{i}.gate.weight"),
            Tensor::from_matrix(&gate),
        );
    }
    Checkpoint::from_tensors(config.clone(), &map)
}

/// Replaces every gate row `n` with the neuron average (row mean) of expert
/// `n`'s `W_act`.
pub fn tie_gate_to_act_means(ckpt: &Checkpoint) -> Result<Checkpoint> {
    let cfg = ckpt.config().clone();
    let mut map = ckpt.to_tensor_map();
    for i in 0..cfg.num_layers {
        if cfg.is_dense(i) {
            continue;
        }
        let n_exp = cfg.experts_per_layer[i];
        let mut gate = Matrix::zeros(n_exp, cfg.d_hid);
        for n in 0..n_exp {
            let act = ckpt.matrix(&format!("layers.{i}.experts.{n}.w_act"))?;
            for c in 0..cfg.d_hid {
                let mean = act.col(c).iter().sum::<f64>() / act.rows() as f64;
                gate.set(n, c, mean);
            }
        }
        map.insert(
            format!("layers.{i}.gate.weight"),
            Tensor::from_matrix(&gate),
        );
    }
    Checkpoint::from_tensors(cfg, &map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: SynthMode, seed: u64) -> SynthSpec {
        SynthSpec::new(ModelConfig::uniform(2, 4, 1, 2, 8, 16, 10), mode, seed)
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_scratch(&spec(SynthMode::Scratch, 3)).unwrap();
        let b = synth_scratch(&spec(SynthMode::Scratch, 3)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = synth_scratch(&spec(SynthMode::Scratch, 4)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn zero_noise_upcycling_copies_base() {
        let (m, r) = synth_upcycled(&spec(SynthMode::Upcycled, 1)).unwrap();
        let base = r.get_tensor("layers.1.ffn.w_act").unwrap().to_tensor();
        for n in 0..4 {
            let e = m
                .get_tensor(&format!("layers.1.experts.{n}.w_act"))
                .unwrap()
                .to_tensor();
            assert_eq!(e, base);
        }
        assert_eq!(
            m.get_tensor("embed.weight").unwrap().to_tensor(),
            r.get_tensor("embed.weight").unwrap().to_tensor()
        );
    }

    #[test]
    fn mode_mismatch_rejected() {
        assert!(synth_scratch(&spec(SynthMode::Upcycled, 1)).is_err());
        let mut s = spec(SynthMode::Scratch, 1);
        s.upcycle_noise_std = 0.5;
        assert!(synth_scratch(&s).is_err());
    }

    #[test]
    fn permutation_helpers() {
        let base = expert_from_map(
            &scratch_map(&ModelConfig::uniform(1, 2, 0, 1, 3, 5, 2), 9, 1.0),
            "layers.0.experts.0",
        );
        let ident: Vec<usize> = (0..5).collect();
        assert_eq!(synth_permuted_clone(&base, &ident).unwrap(), base);
        let p = vec![2, 0, 4, 1, 3];
        let once = synth_permuted_clone(&base, &p).unwrap();
        assert_ne!(once, base);
        let back = synth_permuted_clone(&once, &invert_permutation(&p).unwrap()).unwrap();
        assert_eq!(back, base);
        assert!(synth_permuted_clone(&base, &[0, 0, 1, 2, 3]).is_err());
        assert!(synth_permuted_clone(&base, &[0, 1]).is_err());
    }

    #[test]
    fn stream_names_are_independent() {
        let a = gaussian(1, "a", 4, 1.0);
        let b = gaussian(1, "b", 4, 1.0);
        assert_ne!(a, b);
        assert_eq!(a, gaussian(1, "a", 4, 1.0));
    }
}
