use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use moe_lens_core::analysis::similarity::{flatten, layer_entities};
use moe_lens_core::analysis::{
    aggregate_r2, gate_embedding_sim, gate_expert_regression, matrix_level_sim, mean_tau,
    neuron_average_sim, pca_project, reorder_layer,
};
use moe_lens_core::dynamics::{
    activation_ratio, avg_output_sim, intermediate_heatmap, output_sim_per_token,
    rank_count_matrix, routing_pattern,
};
use moe_lens_core::linalg::norm;
use moe_lens_core::report::{format_value, Cell, Provenance, Table};
use moe_lens_core::synth::{synth, synth_norm_routed, tie_gate_to_act_means};
use moe_lens_core::{
    read_checkpoint, Activation, Checkpoint, Corpus, Error, GatingOrder, ModelConfig, MoeModel,
    SynthMode, SynthSpec, TokenTrace, WhichMatrix,
};

use crate::output::{command_line, Sink};
use crate::{
    Act, Command, DynArgs, LayerSel, Mode, ModelArgs, Order, PcaArgs, ReportArgs, SynthArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => run_synth(&a),
        Command::MatrixSim(a) => {
            let mut l = Loaded::open(&a.base, a.reference.as_deref())?;
            similarity(&mut l, a.which, SimKind::Matrix)
        }
        Command::NeuronAvgSim(a) => {
            let mut l = Loaded::open(&a.base, a.reference.as_deref())?;
            similarity(&mut l, a.which, SimKind::NeuronAvg)
        }
        Command::Reorder(a) => reorder(&mut Loaded::open(&a.base, None)?, a.which),
        Command::GateSim(a) => gate_sim(&mut Loaded::open(&a, None)?),
        Command::GateCorr(a) => gate_corr(&mut Loaded::open(&a.base, None)?, a.which),
        Command::Pca(a) => {
            let mut l = Loaded::open(&a.sim.base, a.sim.reference.as_deref())?;
            pca(&mut l, a.sim.which, &PcaOpts::from(&a))
        }
        Command::Trace(a) => {
            let (mut l, traces) = traced(&a.dyn_args)?;
            trace(&mut l, &traces, a.k_override.is_some())
        }
        Command::OutSim(a) => {
            let (mut l, traces) = traced(&a)?;
            out_sim(&mut l, &traces)
        }
        Command::AvgOutSim(a) => {
            let (mut l, traces) = traced(&a)?;
            avg_out_sim(&mut l, &traces)
        }
        Command::NormRank(a) => {
            let (mut l, traces) = traced(&a)?;
            norm_rank(&mut l, &traces)
        }
        Command::ActRatio(a) => {
            let (mut l, traces) = traced(&a.dyn_args)?;
            act_ratio(&mut l, &traces, a.threshold)
        }
        Command::RouteLog(a) => {
            let (mut l, traces) = traced(&a)?;
            route_log(&mut l, &traces)
        }
        Command::Report(a) => report(&a),
    }
}

struct Loaded {
    model: MoeModel,
    reference: Option<MoeModel>,
    layer: LayerSel,
    sink: Sink,
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

impl Loaded {
    fn open(args: &ModelArgs, reference: Option<&Path>) -> Result<Self> {
        let ckpt = load_checkpoint(&args.model)?;
        let model = MoeModel::from_checkpoint(&ckpt)?;
        let reference = match reference {
            Some(p) => Some(MoeModel::from_checkpoint(&load_checkpoint(p)?)?),
            None => None,
        };
        let sink = Sink::for_checkpoint(&args.out.out, args.out.cell, &ckpt)?;
        if let LayerSel::One(i) = args.layer {
            if i >= model.config.num_layers {
                return Err(Error::LayerOutOfRange {
                    layer: i,
                    num_layers: model.config.num_layers,
                }
                .into());
            }
        }
        Ok(Self {
            model,
            reference,
            layer: args.layer,
            sink,
        })
    }

    /// Selected layers; `all` means every MoE layer, or every layer when
    /// `include_dense` is set.
    fn layers(&self, include_dense: bool) -> Result<Vec<usize>> {
        match self.layer {
            LayerSel::One(i) => Ok(vec![i]),
            LayerSel::All => {
                let cfg = &self.model.config;
                let v: Vec<usize> = (0..cfg.num_layers)
                    .filter(|&i| include_dense || !cfg.is_dense(i))
                    .collect();
                if v.is_empty() {
                    bail!(
                        "model has no {} layers",
                        if include_dense { "" } else { "MoE" }
                    );
                }
                Ok(v)
            }
        }
    }
}

fn whiches(which: Option<WhichMatrix>) -> Vec<WhichMatrix> {
    which.map_or_else(|| WhichMatrix::ALL.to_vec(), |w| vec![w])
}

fn opt_cell(v: Option<f64>) -> Cell {
    v.into()
}

#[derive(Clone, Copy)]
enum SimKind {
    Matrix,
    NeuronAvg,
}

fn similarity(l: &mut Loaded, which: Option<WhichMatrix>, kind: SimKind) -> Result<()> {
    let prefix = match kind {
        SimKind::Matrix => "matrix_sim",
        SimKind::NeuronAvg => "neuron_avg_sim",
    };
    let mut summary = Table::new(["layer", "which", "S_ee", "S_ef"]);
    for i in l.layers(false)? {
        for w in whiches(which) {
            let m = match kind {
                SimKind::Matrix => matrix_level_sim(&l.model, i, w, l.reference.as_ref())?,
                SimKind::NeuronAvg => neuron_average_sim(&l.model, i, w, l.reference.as_ref())?,
            };
            l.sink.similarity(&format!("{prefix}_L{i}_{w}"), &m)?;
            summary.push(vec![
                i.into(),
                w.as_str().into(),
                opt_cell(m.s_ee()),
                opt_cell(m.s_ef()),
            ]);
        }
    }
    l.sink.csv(&format!("{prefix}_summary.csv"), &summary)
}

fn joined(values: impl IntoIterator<Item = String>) -> String {
    values.into_iter().collect::<Vec<_>>().join(" ")
}

fn reorder(l: &mut Loaded, which: Option<WhichMatrix>) -> Result<()> {
    let mut summary = Table::new([
        "which",
        "pairs",
        "mean_tau",
        "mean_sim_before",
        "mean_sim_after",
    ]);
    for w in whiches(which) {
        let mut all = Vec::new();
        for i in l.layers(false)? {
            let reports = reorder_layer(&l.model, i, w)?;
            let mut t = Table::new([
                "expert_a",
                "expert_b",
                "sim_before",
                "sim_after",
                "tau",
                "assignment_total",
                "permutation",
            ]);
            for r in &reports {
                t.push(vec![
                    r.pair.0.into(),
                    r.pair.1.into(),
                    r.sim_before.into(),
                    r.sim_after.into(),
                    r.tau.into(),
                    r.assignment_total.into(),
                    joined(r.permutation.iter().map(usize::to_string)).into(),
                ]);
            }
            l.sink.csv(&format!("reorder_L{i}_{w}.csv"), &t)?;
            all.extend(reports);
        }
        let mean = |f: fn(&moe_lens_core::ReorderReport) -> f64| {
            all.iter().map(f).sum::<f64>() / all.len() as f64
        };
        summary.push(vec![
            w.as_str().into(),
            all.len().into(),
            mean_tau(&all)?.into(),
            mean(|r| r.sim_before).into(),
            mean(|r| r.sim_after).into(),
        ]);
    }
    l.sink.csv("reorder_summary.csv", &summary)
}

fn gate_sim(l: &mut Loaded) -> Result<()> {
    for i in l.layers(false)? {
        let m = gate_embedding_sim(&l.model, i)?;
        l.sink.similarity(&format!("gate_sim_L{i}"), &m)?;
    }
    Ok(())
}

fn gate_corr(l: &mut Loaded, which: Option<WhichMatrix>) -> Result<()> {
    let layers = l.layers(false)?;
    for w in whiches(which) {
        let mut t = Table::new(["layer", "R", "R2"]);
        let mut reports = Vec::new();
        for &i in &layers {
            let r = gate_expert_regression(&l.model, i, w)?;
            t.push(vec![i.into(), r.r.into(), r.r2.into()]);
            let n = l.model.layer(i)?.num_experts();
            let mut pairs = Table::new(["expert_a", "expert_b", "gate_sim", "expert_sim"]);
            let idx = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b)));
            for ((a, b), (x, y)) in idx.zip(&r.pairs) {
                pairs.push(vec![a.into(), b.into(), (*x).into(), (*y).into()]);
            }
            l.sink
                .csv(&format!("gate_corr_pairs_L{i}_{w}.csv"), &pairs)?;
            reports.push(r);
        }
        t.push(vec![
            "R2_avg".into(),
            Cell::Empty,
            aggregate_r2(&reports)?.into(),
        ]);
        l.sink.csv(&format!("gate_corr_{w}.csv"), &t)?;
    }
    Ok(())
}

struct PcaOpts {
    dims: usize,
    eps: f64,
    min_pts: usize,
    standardize: bool,
}

impl From<&PcaArgs> for PcaOpts {
    fn from(a: &PcaArgs) -> Self {
        Self {
            dims: a.dims.into(),
            eps: a.eps,
            min_pts: a.min_pts,
            standardize: !a.no_standardize,
        }
    }
}

fn pca(l: &mut Loaded, which: Option<WhichMatrix>, opts: &PcaOpts) -> Result<()> {
    for i in l.layers(false)? {
        for w in whiches(which) {
            let entities = layer_entities(&l.model, i, l.reference.as_ref())?;
            let vectors: Vec<Vec<f64>> = entities.iter().map(|(_, e)| flatten(e, w)).collect();
            let mut proj = pca_project(&vectors, opts.dims, opts.standardize)?;
            proj.labels = entities
                .iter()
                .map(|(label, _)| label.to_string())
                .collect();
            let outliers = proj
                .clone()
                .remove_outliers(opts.eps, opts.min_pts)?
                .outliers;

            let mut header = vec!["label".to_string()];
            header.extend((1..=opts.dims).map(|c| format!("pc{c}")));
            header.push("outlier".into());
            let mut t = Table::new(header);
            for (label, p) in proj.labels.iter().zip(&proj.points) {
                let mut row = vec![Cell::from(label.as_str())];
                row.extend(p.iter().map(|&v| Cell::from(v)));
                row.push(usize::from(outliers.contains(label)).into());
                t.push(row);
            }
            l.sink.csv(&format!("pca_L{i}_{w}.csv"), &t)?;

            let mut var = Table::new(["component", "explained_variance"]);
            for (c, v) in proj.explained_variance.iter().enumerate() {
                var.push(vec![(c + 1).into(), (*v).into()]);
            }
            l.sink.csv(&format!("pca_variance_L{i}_{w}.csv"), &var)?;
        }
    }
    Ok(())
}

fn read_tokens(path: &Path, vocab: usize) -> Result<Vec<usize>> {
    let corpus =
        Corpus::read(path, vocab).with_context(|| format!("reading corpus {}", path.display()))?;
    let tokens = corpus.tokens();
    if tokens.is_empty() {
        bail!("corpus {} contains no tokens", path.display());
    }
    Ok(tokens)
}

fn traced(a: &DynArgs) -> Result<(Loaded, Vec<TokenTrace>)> {
    let l = Loaded::open(&a.base, a.reference.as_deref())?;
    let tokens = read_tokens(&a.corpus, l.model.config.vocab)?;
    let traces = l.model.trace(&tokens, l.reference.as_ref())?;
    Ok((l, traces))
}

fn trace(l: &mut Loaded, traces: &[TokenTrace], all_experts: bool) -> Result<()> {
    let layers = l.layers(true)?;
    let mut t = Table::new([
        "position",
        "token",
        "layer",
        "selected",
        "scores",
        "z_norm",
        "recombine_error",
    ]);
    let mut per_expert = Table::new([
        "position",
        "token",
        "layer",
        "expert",
        "selected",
        "logit",
        "gate_score",
        "output_norm",
    ]);
    for (pos, tt) in traces.iter().enumerate() {
        for &i in &layers {
            let lt = &tt.per_layer[i];
            t.push(vec![
                pos.into(),
                tt.token_id.into(),
                i.into(),
                joined(lt.selected.iter().map(usize::to_string)).into(),
                joined(lt.selected.iter().map(|&e| format_value(lt.gate_scores[e]))).into(),
                norm(&lt.z_out).into(),
                lt.consistency_error().into(),
            ]);
            for (e, out) in lt.expert_outputs.iter().enumerate() {
                per_expert.push(vec![
                    pos.into(),
                    tt.token_id.into(),
                    i.into(),
                    e.into(),
                    usize::from(lt.selected.contains(&e)).into(),
                    lt.logits.get(e).copied().into(),
                    lt.gate_scores[e].into(),
                    norm(out).into(),
                ]);
            }
        }
    }
    l.sink.csv("trace.csv", &t)?;
    if all_experts {
        l.sink.csv("trace_experts.csv", &per_expert)?;
    }
    Ok(())
}

fn out_sim(l: &mut Loaded, traces: &[TokenTrace]) -> Result<()> {
    let layers = l.layers(false)?;
    for (pos, tt) in traces.iter().enumerate() {
        for &i in &layers {
            let m = output_sim_per_token(tt, i)?;
            l.sink.similarity(&format!("out_sim_T{pos}_L{i}"), &m)?;
        }
    }
    Ok(())
}

fn avg_out_sim(l: &mut Loaded, traces: &[TokenTrace]) -> Result<()> {
    let mut summary = Table::new(["layer", "S_ee", "S_ef"]);
    for i in l.layers(false)? {
        let m = avg_output_sim(traces, i)?;
        l.sink.similarity(&format!("avg_out_sim_L{i}"), &m)?;
        summary.push(vec![i.into(), opt_cell(m.s_ee()), opt_cell(m.s_ef())]);
    }
    l.sink.csv("avg_out_sim_summary.csv", &summary)
}

fn norm_rank(l: &mut Loaded, traces: &[TokenTrace]) -> Result<()> {
    let rc = rank_count_matrix(traces, &l.layers(false)?)?;
    let mut header = vec!["norm_rank".to_string()];
    header.extend((1..=rc.n).map(|r| r.to_string()));
    let mut t = Table::new(header);
    for (i, row) in rc.counts.iter().enumerate() {
        let mut cells = vec![Cell::from(i + 1)];
        cells.extend(row.iter().map(|&c| Cell::from(c)));
        t.push(cells);
    }
    l.sink.csv("norm_rank.csv", &t)?;
    let values: Vec<Vec<Option<f64>>> = rc
        .counts
        .iter()
        .map(|r| r.iter().map(|&c| Some(c as f64)).collect())
        .collect();
    let max = rc.counts.iter().flatten().copied().max().unwrap_or(0) as f64;
    l.sink.heatmap("norm_rank.ppm", &values, (0.0, max))
}

fn act_ratio(l: &mut Loaded, traces: &[TokenTrace], threshold: f64) -> Result<()> {
    let layers = l.layers(true)?;
    let picked: Vec<TokenTrace> = traces
        .iter()
        .map(|t| TokenTrace {
            token_id: t.token_id,
            per_layer: layers.iter().map(|&i| t.per_layer[i].clone()).collect(),
        })
        .collect();
    let ratio = activation_ratio(&picked, threshold)?;
    let mut t = Table::new(["layer", "expert", "ratio"]);
    for (&i, row) in layers.iter().zip(&ratio.per_expert) {
        for (e, r) in row.iter().enumerate() {
            t.push(vec![i.into(), e.into(), (*r).into()]);
        }
    }
    t.push(vec!["all".into(), Cell::Empty, ratio.overall.into()]);
    l.sink.csv("act_ratio.csv", &t)?;

    // Magnitudes for the first token of the corpus.
    for (k, &i) in layers.iter().enumerate() {
        let m = intermediate_heatmap(&picked[0], k)?;
        let mut header = vec!["expert".to_string()];
        header.extend((0..m.cols()).map(|c| c.to_string()));
        let mut table = Table::new(header);
        let mut values = Vec::new();
        for e in 0..m.rows() {
            let mut row = vec![Cell::from(e)];
            row.extend(m.row(e).iter().map(|&v| Cell::from(v)));
            table.push(row);
            values.push(m.row(e).iter().map(|&v| Some(v)).collect::<Vec<_>>());
        }
        let max = m.as_slice().iter().copied().fold(0.0, f64::max);
        l.sink.csv(&format!("intermediate_L{i}.csv"), &table)?;
        l.sink
            .heatmap(&format!("intermediate_L{i}.ppm"), &values, (0.0, max))?;
    }
    Ok(())
}

fn route_log(l: &mut Loaded, traces: &[TokenTrace]) -> Result<()> {
    let layers = l.layers(false)?;
    let mut t = Table::new(["position", "token", "layer", "rank", "expert", "score"]);
    for e in routing_pattern(traces)
        .entries
        .iter()
        .filter(|e| layers.contains(&e.layer))
    {
        for (rank, &(expert, score)) in e.choices.iter().enumerate() {
            t.push(vec![
                e.position.into(),
                e.token_id.into(),
                e.layer.into(),
                (rank + 1).into(),
                expert.into(),
                score.into(),
            ]);
        }
    }
    l.sink.csv("route_log.csv", &t)
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut l = Loaded::open(&a.base, a.reference.as_deref())?;
    similarity(&mut l, None, SimKind::Matrix)?;
    similarity(&mut l, None, SimKind::NeuronAvg)?;
    gate_sim(&mut l)?;
    gate_corr(&mut l, None)?;
    reorder(&mut l, None)?;
    let opts = PcaOpts {
        dims: a.dims.into(),
        eps: a.eps,
        min_pts: a.min_pts,
        standardize: true,
    };
    pca(&mut l, None, &opts)?;
    if let Some(corpus) = &a.corpus {
        let tokens = read_tokens(corpus, l.model.config.vocab)?;
        let traces = l.model.trace(&tokens, l.reference.as_ref())?;
        trace(&mut l, &traces, true)?;
        avg_out_sim(&mut l, &traces)?;
        norm_rank(&mut l, &traces)?;
        act_ratio(&mut l, &traces, a.threshold)?;
        route_log(&mut l, &traces)?;
    }
    let mut index = Table::new(["artifact"]);
    for p in &l.sink.written {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        index.push(vec![name.into()]);
    }
    l.sink.csv("report_index.csv", &index)
}

fn per_layer(values: &[usize], layers: usize, flag: &str) -> Result<Vec<usize>> {
    match values.len() {
        1 => Ok(vec![values[0]; layers]),
        n if n == layers => Ok(values.to_vec()),
        n => bail!("{flag} lists {n} values for {layers} layers"),
    }
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let seed = a
        .seed
        .ok_or_else(|| anyhow!("--seed is required; synth never picks a seed on its own"))?;
    let config = ModelConfig {
        num_layers: a.layers,
        experts_per_layer: per_layer(&a.experts, a.layers, "--experts")?,
        shared_per_layer: per_layer(&a.shared, a.layers, "--shared")?,
        top_k: a.top_k,
        d_hid: a.d_hid,
        d_mid: a.d_mid,
        vocab: a.vocab,
        activation: match a.activation {
            Act::Silu => Activation::Silu,
            Act::Gelu => Activation::Gelu,
        },
        gating_order: match a.gating_order {
            Order::TopkThenSoftmax => GatingOrder::TopkThenSoftmax,
            Order::SoftmaxThenTopk => GatingOrder::SoftmaxThenTopk,
        },
        use_prenorm: !a.no_prenorm,
    };
    config.validate()?;
    let (mut model, reference) = match a.mode {
        Mode::NormRouted => {
            if a.noise != 0.0 {
                bail!("--noise only applies to upcycled mode");
            }
            (synth_norm_routed(&config, seed, a.init_std)?, None)
        }
        m => {
            let mode = match m {
                Mode::Scratch => SynthMode::Scratch,
                Mode::Upcycled => SynthMode::Upcycled,
                _ => SynthMode::PermutedClone,
            };
            let spec = SynthSpec {
                init_std: a.init_std,
                upcycle_noise_std: a.noise,
                ..SynthSpec::new(config, mode, seed)
            };
            let out = synth(&spec)?;
            (out.model, out.reference)
        }
    };
    if a.gate_from_act {
        model = tie_gate_to_act_means(&model)?;
    }
    let sink = Sink::new(
        &a.out.out,
        a.out.cell,
        Provenance {
            command: command_line(),
            checkpoint_digest: None,
            seed: Some(seed),
        },
    )?;
    for (name, ckpt) in std::iter::once(("model.moel", &model))
        .chain(reference.iter().map(|r| ("reference.moel", r)))
    {
        let path = sink.path(name);
        ckpt.write(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("{}\tsha256:{}", path.display(), ckpt.digest());
    }
    Ok(())
}
