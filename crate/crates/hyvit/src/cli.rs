//! Command-line driver. `run` parses arguments, executes one command and
//! returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{load_arch, load_network};
use crate::error::{Error, Result};
use crate::image::{read_image, sidecar_path, write_image, RunSummary, TraceWriter};
use crate::netsim::{simulate_network, SimOptions};
use crate::report::{cost_rows, policy_name, total_row, Comparison, ExploreReport, FuseReport, ReportDir, SimRow, SimSummary, REPORT_DIR_ENV, REPORT_SCHEMA};
use hyvit_core::cost::{calibrate_energy, evaluate_network, map_network, DataflowPolicy};
use hyvit_core::fusion::{network_fusion_analysis_with, FusionSearch};
use hyvit_core::{ArchConfig, NetworkGraph, Objective};

/// Calibration target of the built-in architecture, TOPS/W.
const DEFAULT_TOPS_PER_W: f64 = 1.39;

#[derive(Parser)]
#[command(name = "hyvit", version, about = "Mapping exploration, layer fusion and simulation for a reconfigurable 16x16 PE array")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Network config.
    network: PathBuf,
    /// Architecture config; built-in defaults calibrated to 1.39 TOPS/W when omitted.
    arch: Option<PathBuf>,
    /// Report directory.
    #[arg(long, env = REPORT_DIR_ENV, default_value = "reports")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Obj::Edp)]
    objective: Obj,
    /// Temporal mappings tried per layer.
    #[arg(long, default_value_t = 2000)]
    budget: usize,
    /// Keep LayerNorm and Softmax as separate layers instead of folding
    /// them into their producer's write-back.
    #[arg(long)]
    separate_norm: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Map every layer and compare the fixed and reconfigurable arrays.
    Explore {
        #[command(flatten)]
        common: Common,
        /// Dataflow set of the per-layer report.
        #[arg(long, value_enum, default_value_t = Flow::Reconfigurable)]
        dataflow: Flow,
    },
    /// Plan depth-first execution of every inverted bottleneck.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// SRAM bytes a fused pair may hold (default: the weight region).
        #[arg(long)]
        sram_budget: Option<u64>,
    },
    /// Lower and execute the whole network on seeded random operands.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Compare every layer against the reference operators.
        #[arg(long)]
        check_golden: bool,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        fusion: Switch,
        /// Also write the concatenated access trace.
        #[arg(long)]
        trace: bool,
    },
    /// Execute one program (assembly text or `.bin` words) on a DRAM image.
    Run {
        program: PathBuf,
        /// Flat DRAM image; its `.json` sidecar is copied to the output image.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long, env = REPORT_DIR_ENV, default_value = "reports")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Obj {
    Energy,
    Latency,
    Edp,
}

impl From<Obj> for Objective {
    fn from(o: Obj) -> Self {
        match o {
            Obj::Energy => Objective::Energy,
            Obj::Latency => Objective::Latency,
            Obj::Edp => Objective::Edp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Flow {
    Fixed,
    Reconfigurable,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Switch {
    On,
    Off,
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

fn arch(p: Option<&Path>) -> Result<ArchConfig> {
    match p {
        Some(p) => load_arch(&read_text(p)?).map_err(|e| in_file(p, e)),
        None => Ok(calibrate_energy(&ArchConfig::default(), DEFAULT_TOPS_PER_W)?),
    }
}

fn in_file(p: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", p.display()) },
        e => e,
    }
}

fn inputs(c: &Common) -> Result<(NetworkGraph, ArchConfig, ReportDir)> {
    let text = read_text(&c.network)?;
    let arch = arch(c.arch.as_deref())?;
    let mut net = load_network(&text).map_err(|e| in_file(&c.network, e))?;
    if !c.separate_norm {
        net = net.fuse_normalization();
    }
    Ok((net, arch, ReportDir::create(&c.out)?))
}

fn search(c: &Common, arch: &ArchConfig) -> FusionSearch {
    FusionSearch { objective: c.objective.into(), budget: c.budget, ..FusionSearch::defaults(arch) }
}

fn explore(c: &Common, flow: Flow) -> Result<bool> {
    let (net, arch, dir) = inputs(c)?;
    let obj: Objective = c.objective.into();
    let cost = |p| -> Result<_> {
        let m = map_network(&net, &arch, p, obj, c.budget, &[])?;
        Ok(evaluate_network(&net, &m, &arch, &[])?)
    };
    let fixed = cost(DataflowPolicy::Fixed)?;
    let reconf = cost(DataflowPolicy::Reconfigurable)?;
    let cmp = Comparison::new(&net, obj.name(), &fixed, &reconf);
    let (policy, chosen) = match flow {
        Flow::Fixed => (DataflowPolicy::Fixed, &fixed),
        Flow::Reconfigurable => (DataflowPolicy::Reconfigurable, &reconf),
    };
    let rows = cost_rows(&net, chosen, &arch);
    dir.csv("explore_layers.csv", &rows)?;
    dir.csv("explore_comparison.csv", std::slice::from_ref(&cmp))?;
    let mappings: String = chosen.layers.iter().filter_map(|l| l.mapping.as_ref().map(|m| format!("{} {m}\n", l.name))).collect();
    dir.text("explore_mappings.txt", &mappings)?;
    let rep = ExploreReport {
        schema: REPORT_SCHEMA,
        network: net.name.clone(),
        objective: obj.name().into(),
        dataflow: policy_name(policy).into(),
        comparison: cmp.clone(),
        total: total_row(&net.name, chosen, &arch),
        layers: rows,
    };
    dir.json("explore.json", &rep)?;
    println!("{}: {} layers, {} MACs", net.name, net.nodes.len(), net.total_macs());
    println!(
        "cycles fixed {} reconfigurable {}: latency saving {:.1}%",
        cmp.fixed_cycles,
        cmp.reconfigurable_cycles,
        100.0 * cmp.latency_saving
    );
    println!("depthwise cycles fixed {} reconfigurable {}: {:.2}x", cmp.fixed_dw_cycles, cmp.reconfigurable_dw_cycles, cmp.dw_speedup);
    println!("reports in {}", dir.0.display());
    Ok(true)
}

fn fuse(c: &Common, sram_budget: Option<u64>) -> Result<bool> {
    let (net, arch, dir) = inputs(c)?;
    let mut s = search(c, &arch);
    if let Some(b) = sram_budget {
        s.sram_budget = b;
    }
    let r = network_fusion_analysis_with(&net, &arch, &s)?;
    let rep = FuseReport::new(&r);
    dir.csv("fuse_ibs.csv", &rep.ibs)?;
    dir.text("fuse_plans.txt", &rep.plans_text())?;
    dir.json("fuse.json", &rep)?;
    let sm = &rep.summary;
    println!("{}: {} inverted bottlenecks, {} fused, {} fall back to sequential layers", sm.network, sm.ibs, sm.feasible, sm.fallback);
    for i in &rep.ibs {
        if i.feasible {
            println!("  {} -> {}: {} (saves {} DRAM bytes)", i.expand, i.project, i.plan, i.dram_bytes_saved);
        } else {
            println!("  {} -> {}: fallback, {}", i.expand, i.project, i.fallback_reason);
        }
    }
    println!(
        "IB share of unfused DRAM traffic {:.1}%, DRAM bytes saved {}, energy {:.4e} -> {:.4e} pJ ({:.1}% reduction at {} pJ/B)",
        100.0 * sm.ib_dram_share,
        sm.dram_bytes_saved,
        sm.unfused_energy_pj,
        sm.fused_energy_pj,
        100.0 * sm.energy_reduction,
        sm.dram_pj_per_byte
    );
    println!("reports in {}", dir.0.display());
    Ok(true)
}

fn simulate(c: &Common, seed: u64, check_golden: bool, fusion: Switch, trace: bool) -> Result<bool> {
    let (net, arch, dir) = inputs(c)?;
    let opts = SimOptions { seed, fusion: fusion == Switch::On, check_golden, search: search(c, &arch) };
    let mut tw = if trace { Some(TraceWriter::create(&dir.path("simulate_trace.csv"))?) } else { None };
    let mut offset = 0;
    let sim = simulate_network(&net, &arch, &opts, |row, res| {
        if let Some(w) = tw.as_mut() {
            w.write(&res.trace, offset)?;
        }
        offset += res.cycles;
        if let Some(pass) = row.golden {
            println!("  {:24} {}", row.name, if pass { "PASS" } else { "FAIL" });
        }
        Ok(())
    })?;
    if let Some(w) = tw {
        w.finish()?;
    }
    let sum = SimSummary::from(&sim);
    dir.csv::<SimRow>("simulate_layers.csv", &sum.layers)?;
    dir.json("simulate.json", &sum)?;
    println!(
        "{}: {} cycles ({} modeled), {:.2} FPS, {:.2} mW, {:.1} FPS/W, fusion {}",
        sum.network,
        sum.cycles,
        sum.model_cycles,
        sum.fps,
        1e3 * sum.power_w,
        sum.fps_per_w,
        if sum.fusion { "on" } else { "off" }
    );
    if check_golden {
        println!("golden check: {} of {} programs failed", sum.golden_failed, sum.golden_checked);
    }
    println!("reports in {}", dir.0.display());
    Ok(sum.golden_failed == 0)
}

fn run_program(program: &Path, image: Option<&Path>, arch_path: Option<&Path>, out: &Path) -> Result<bool> {
    let arch = arch(arch_path)?;
    let words = if program.extension().is_some_and(|e| e == "bin") {
        let b = fs::read(program).map_err(|e| Error::io(program, e))?;
        if b.len() % 4 != 0 {
            return Err(Error::parse(1, format!("{}: length is not a whole number of 32-bit words", program.display())));
        }
        b.chunks_exact(4).map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]])).collect()
    } else {
        hyvit_core::sim::assemble(&read_text(program)?)?
    };
    let (dram, side) = match image {
        Some(p) => {
            let (b, s) = read_image(p)?;
            (b, s.tensors)
        }
        None => (Vec::new(), Vec::new()),
    };
    let res = hyvit_core::sim::run(&words, dram, &arch)?;
    let dir = ReportDir::create(out)?;
    let mut tw = TraceWriter::create(&dir.path("run_trace.csv"))?;
    tw.write(&res.trace, 0)?;
    tw.finish()?;
    dir.json("run.json", &RunSummary::new(&res, &arch))?;
    let img = dir.path("dram_out.bin");
    write_image(&img, &res.dram, side)?;
    println!("{} instructions, {} cycles, {} MACs; final image {} ({})", res.instructions, res.cycles, res.macs, img.display(), sidecar_path(&img).display());
    Ok(true)
}

/// Exit codes: 0 success, 1 a requested check failed, 2 usage or file
/// error, 3 invalid config or a model error.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    let r = match &cli.cmd {
        Cmd::Explore { common, dataflow } => explore(common, *dataflow),
        Cmd::Fuse { common, sram_budget } => fuse(common, *sram_budget),
        Cmd::Simulate { common, seed, check_golden, fusion, trace } => simulate(common, *seed, *check_golden, *fusion, *trace),
        Cmd::Run { program, image, arch, out } => run_program(program, image.as_deref(), arch.as_deref(), out),
    };
    match r {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } => 2,
                _ => 3,
            }
        }
    }
}
