//! End-to-end network simulation: every layer (or fused pair) is lowered,
//! executed on seeded random operands and optionally checked against the
//! reference operators. Layers run back to back, so network cycles and
//! energy are the sums over layers.

use hyvit_core::cost::{evaluate_network, map_network, NetworkCost};
use hyvit_core::fusion::{network_fusion_analysis_with, FusedPair, FusionSearch};
use hyvit_core::golden::{ref_layer, QTensor};
use hyvit_core::cost::vector_operands;
use hyvit_core::sim::lower::{simulate_fused, simulate_layer, FusedData, FusedRun, LayerData};
use hyvit_core::sim::RunResult;
use hyvit_core::{ArchConfig, CostBreakdown, LayerSpec, Level, NetworkGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub seed: u64,
    pub fusion: bool,
    pub check_golden: bool,
    pub search: FusionSearch,
}

impl SimOptions {
    pub fn new(arch: &ArchConfig) -> Self {
        SimOptions { seed: 0, fusion: true, check_golden: false, search: FusionSearch::defaults(arch) }
    }
}

/// One executed program: a layer or a fused pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSim {
    pub name: String,
    /// Project layer when this row ran a fused pair.
    pub fused_with: Option<String>,
    pub macs: u64,
    pub cycles: u64,
    /// Cost-model steady-state and end-to-end cycles for the same program.
    pub model_cycles: u64,
    pub model_latency: u64,
    pub energy_pj: f64,
    pub dram_bytes: u64,
    pub sram_bytes: u64,
    pub instructions: usize,
    /// `Some(pass)` when checked against the reference operators.
    pub golden: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSim {
    pub network: String,
    pub fusion: bool,
    pub seed: u64,
    pub clock_hz: u64,
    pub layers: Vec<LayerSim>,
    pub cycles: u64,
    pub model_cycles: u64,
    pub macs: u64,
    pub energy_pj: f64,
}

impl NetworkSim {
    pub fn fps(&self) -> f64 {
        self.clock_hz as f64 / self.cycles as f64
    }

    pub fn power_w(&self) -> f64 {
        self.energy_pj * 1e-12 * self.fps()
    }

    pub fn fps_per_w(&self) -> f64 {
        self.fps() / self.power_w()
    }

    pub fn golden_pass(&self) -> Option<bool> {
        let checked: Vec<bool> = self.layers.iter().filter_map(|l| l.golden).collect();
        (!checked.is_empty()).then(|| checked.iter().all(|&p| p))
    }
}

fn random_tensor(r: &mut ChaCha8Rng, l: &LayerSpec) -> QTensor {
    let s = l.input_shape();
    let v: Vec<i8> = (0..s.elements()).map(|_| r.gen()).collect();
    QTensor::from_i8(s, &v).expect("shape and data agree")
}

fn random_weights(r: &mut ChaCha8Rng, l: &LayerSpec) -> Vec<i8> {
    if l.kind.is_mac() {
        (0..l.weight_elements()).map(|_| r.gen()).collect()
    } else {
        Vec::new()
    }
}

fn layer_data(r: &mut ChaCha8Rng, l: &LayerSpec) -> LayerData {
    let n = if l.kind.is_mac() { 1 } else { vector_operands(l).max(1) };
    let inputs = (0..n).map(|_| random_tensor(r, l)).collect();
    LayerData { inputs, weights: random_weights(r, l) }
}

fn reference(l: &LayerSpec, d: &LayerData) -> Result<QTensor> {
    let ins: Vec<&QTensor> = d.inputs.iter().collect();
    Ok(ref_layer(l, &ins, l.kind.is_mac().then_some(d.weights.as_slice()))?)
}

/// Execute a fused pair with the homes the network placement gives it.
pub fn run_fused(f: &FusedPair, cost: &NetworkCost, r: &mut ChaCha8Rng, check: bool, arch: &ArchConfig) -> Result<(FusedRun, Option<QTensor>)> {
    let (e, p) = (&f.ib.pw_expand, &f.ib.pw_project);
    let data = FusedData { input: random_tensor(r, e), w_expand: random_weights(r, e), w_project: random_weights(r, p) };
    let input = cost.homes[f.pair.expand].inputs[0];
    let output = cost.homes[f.pair.project].output;
    let run = simulate_fused(&f.ib, &f.plan, input, output, &data, arch)?;
    let want = if check {
        let t = reference(e, &LayerData { inputs: vec![data.input.clone()], weights: data.w_expand.clone() })?;
        Some(reference(p, &LayerData { inputs: vec![t], weights: data.w_project.clone() })?)
    } else {
        None
    };
    Ok((run, want))
}

fn row(name: &str, fused_with: Option<String>, c: &CostBreakdown, res: &RunResult, golden: Option<bool>, arch: &ArchConfig) -> LayerSim {
    LayerSim {
        name: name.to_string(),
        fused_with,
        macs: res.macs,
        cycles: res.cycles,
        model_cycles: c.total_cycles(),
        model_latency: c.latency_cycles(),
        energy_pj: res.energy_pj(arch),
        dram_bytes: res.traffic.level(Level::Dram),
        sram_bytes: res.traffic.level(Level::Sram),
        instructions: res.instructions,
        golden,
    }
}

/// Map the network (with or without fusion) and return its model cost and
/// the fused pairs in effect.
pub fn plan(net: &NetworkGraph, arch: &ArchConfig, opts: &SimOptions) -> Result<(NetworkCost, Vec<FusedPair>)> {
    if opts.fusion {
        let rep = network_fusion_analysis_with(net, arch, &opts.search)?;
        Ok((rep.fused, rep.pairs))
    } else {
        let s = &opts.search;
        let m = map_network(net, arch, s.policy, s.objective, s.budget, &[])?;
        Ok((evaluate_network(net, &m, arch, &[])?, Vec::new()))
    }
}

/// Simulate every program of the network in order; `sink` sees each run.
pub fn simulate_network(
    net: &NetworkGraph,
    arch: &ArchConfig,
    opts: &SimOptions,
    mut sink: impl FnMut(&LayerSim, &RunResult) -> Result<()>,
) -> Result<NetworkSim> {
    let (cost, pairs) = plan(net, arch, opts)?;
    let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut layers = Vec::new();
    for lc in &cost.layers {
        let l = &net.nodes[lc.node].layer;
        let out = if let Some(f) = pairs.iter().find(|f| f.pair.expand == lc.node) {
            let (run, want) = run_fused(f, &cost, &mut r, opts.check_golden, arch)?;
            let golden = want.map(|w| w == run.output);
            let project = net.nodes[f.pair.project].layer.name.clone();
            (row(&l.name, Some(project), &lc.cost, &run.result, golden, arch), run.result)
        } else if lc.fused_with.is_some() {
            continue;
        } else {
            let data = layer_data(&mut r, l);
            let run = simulate_layer(l, lc.mapping.as_ref(), &cost.homes[lc.node], &data, arch)?;
            let golden = if opts.check_golden { Some(reference(l, &data)? == run.output) } else { None };
            (row(&l.name, None, &lc.cost, &run.result, golden, arch), run.result)
        };
        sink(&out.0, &out.1)?;
        layers.push(out.0);
    }
    Ok(NetworkSim {
        network: net.name.clone(),
        fusion: opts.fusion,
        seed: opts.seed,
        clock_hz: arch.clock_hz,
        cycles: layers.iter().map(|l| l.cycles).sum(),
        model_cycles: cost.total.total_cycles(),
        macs: layers.iter().map(|l| l.macs).sum(),
        energy_pj: layers.iter().map(|l| l.energy_pj).sum(),
        layers,
    })
}
