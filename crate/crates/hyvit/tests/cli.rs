//! End-to-end runs of the `hyvit` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hyvit::config::{canonical, load_network};
use hyvit::image::{read_image, tensor_at, write_image, TensorPlacement};
use hyvit_core::cost::{search_mapping_in, NodeHomes, Objective};
use hyvit_core::golden::{ref_layer, QTensor};
use hyvit_core::mapping::Homes;
use hyvit_core::sim::disassemble;
use hyvit_core::sim::lower::{lower_layer, place_layer, stage_image};
use hyvit_core::workload::{build_edgenext_s, Requant, EDGENEXT_S_CHANNELS};
use hyvit_core::{ArchConfig, Dataflow, LayerSpec, Level, PostOp};
use serde_json::Value;

fn data(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(file)
}

fn hyvit(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyvit")).args(args).arg("--out").arg(out).env_remove("HYVIT_REPORT_DIR").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_network_file_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let o = hyvit(&["explore", "no/such/net.cfg"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no/such/net.cfg"));
}

#[test]
fn invalid_config_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.cfg");
    fs::write(&cfg, "version = 1\nnetwork = bad\n[layer a]\nkind = pwconv\ndims = K=4 C=4\nshape = 3\n").unwrap();
    let o = hyvit(&["explore", cfg.to_str().unwrap()], d.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 6"));
}

#[test]
fn single_layer_explore_reports_one_row() {
    let d = tempfile::tempdir().unwrap();
    let o = hyvit(&["explore", data("single_pw.cfg").to_str().unwrap()], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("explore_layers.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let j = json(&d.path().join("explore.json"));
    assert_eq!(j["schema"], "hyvit.report.v1");
    assert_eq!(j["layers"].as_array().unwrap().len(), 1);
    assert_eq!(fs::read_to_string(d.path().join("explore_mappings.txt")).unwrap().lines().count(), 1);
}

#[test]
fn network_without_bottlenecks_saves_nothing() {
    let d = tempfile::tempdir().unwrap();
    let o = hyvit(&["fuse", data("no_ib.cfg").to_str().unwrap()], d.path());
    assert!(o.status.success());
    let s = &json(&d.path().join("fuse.json"))["summary"];
    assert_eq!(s["ibs"], 0);
    assert_eq!(s["dram_bytes_saved"], 0);
    assert_eq!(s["energy_saved_pj"].as_f64(), Some(0.0));
    assert_eq!(s["unfused_cycles"], s["fused_cycles"]);
}

#[test]
fn tiny_fusion_budget_falls_back_everywhere() {
    let d = tempfile::tempdir().unwrap();
    let o = hyvit(&["fuse", data("tiny.cfg").to_str().unwrap(), "--sram-budget", "1"], d.path());
    assert!(o.status.success());
    let s = &json(&d.path().join("fuse.json"))["summary"];
    let n = s["ibs"].as_u64().unwrap();
    assert!(n > 0);
    assert_eq!(s["feasible"], 0);
    assert_eq!(s["fallback"].as_u64(), Some(n));
    assert_eq!(s["dram_bytes_saved"], 0);
    let plans = fs::read_to_string(d.path().join("fuse_plans.txt")).unwrap();
    assert_eq!(plans.lines().count() as u64, n);
    assert!(plans.lines().all(|l| l.contains(" fallback: ")), "{plans}");
    assert_eq!(stdout(&o).matches("fallback").count() as u64, n);
}

#[test]
fn tiny_network_passes_the_golden_check() {
    let d = tempfile::tempdir().unwrap();
    for fusion in ["on", "off"] {
        let o = hyvit(&["simulate", data("tiny.cfg").to_str().unwrap(), "--check-golden", "--fusion", fusion], d.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let out = stdout(&o);
        assert!(out.contains("PASS") && !out.contains("FAIL"), "{out}");
        let j = json(&d.path().join("simulate.json"));
        assert_eq!(j["schema"], "hyvit.report.v1");
        assert_eq!(j["golden_failed"], 0);
        assert!(j["golden_checked"].as_u64().unwrap() > 0);
        assert_eq!(j["fusion"], fusion == "on");
    }
}

#[test]
fn same_seed_same_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = hyvit(&["simulate", data("tiny.cfg").to_str().unwrap(), "--seed", "7", "--trace"], d.path());
        assert!(o.status.success());
    }
    for f in ["simulate_trace.csv", "simulate.json", "simulate_layers.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let trace = fs::read_to_string(a.path().join("simulate_trace.csv")).unwrap();
    assert!(trace.starts_with("cycle,unit,event,level,operand,dir,bytes,addr\n"));
}

#[test]
fn report_dir_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_hyvit"))
        .args(["explore", data("single_pw.cfg").to_str().unwrap()])
        .env("HYVIT_REPORT_DIR", &dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.join("explore.json").exists());
}

#[test]
fn shipped_network_is_the_canonical_builder_output() {
    let text = fs::read_to_string(data("edgenext_s.cfg")).unwrap();
    let want = canonical(build_edgenext_s(256, &EDGENEXT_S_CHANNELS).unwrap());
    assert_eq!(load_network(&text).unwrap(), want);
}

#[test]
fn run_executes_an_assembled_program_on_an_image() {
    let d = tempfile::tempdir().unwrap();
    let arch = ArchConfig::default();
    let l = LayerSpec::pw("pw", 24, 20, 5, 6).with_post_ops(vec![PostOp::Requantize(Requant { mult: 5, shift: 7 })]);
    let homes = Homes { input: Level::Dram, weight: Level::Dram, output: Level::Dram };
    let (m, _) = search_mapping_in(&l, &arch, Objective::Latency, 50, homes, &[Dataflow::CK]).unwrap();
    let nh = NodeHomes { inputs: vec![Level::Dram], weight: Level::Dram, output: Level::Dram };
    let place = place_layer(&l, &nh, Some(&m), &arch).unwrap();
    let prog = lower_layer(&l, &m, &place, &arch).unwrap();
    let s = l.input_shape();
    let input = QTensor::from_i8(s, &(0..s.elements()).map(|v| (v * 37 % 251) as i8).collect::<Vec<_>>()).unwrap();
    let weights: Vec<i8> = (0..l.weight_elements()).map(|v| (v * 11 % 127) as i8 - 60).collect();
    let data = hyvit_core::sim::lower::LayerData { inputs: vec![input.clone()], weights: weights.clone() };
    let img = stage_image(&l, &place, &data).unwrap();
    assert!(img.sram.is_empty());
    let o_shape = l.output_shape();
    let out = TensorPlacement {
        name: "out".into(),
        level: "dram".into(),
        addr: place.output.addr as u64,
        shape: [o_shape.b, o_shape.x, o_shape.y, o_shape.c],
        bits: 8,
    };
    let mut dram = img.dram.clone();
    dram.resize(dram.len().max((out.addr + out.bytes()) as usize), 0);
    let (asm, bin) = (d.path().join("pw.asm"), d.path().join("dram.bin"));
    fs::write(&asm, disassemble(&prog)).unwrap();
    write_image(&bin, &dram, vec![out.clone()]).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hyvit"))
        .args(["run", asm.to_str().unwrap(), "--image", bin.to_str().unwrap(), "--out"])
        .arg(d.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (bytes, side) = read_image(&d.path().join("dram_out.bin")).unwrap();
    assert_eq!(side.tensors, vec![out.clone()]);
    let want = ref_layer(&l, &[&input], Some(&weights)).unwrap();
    assert_eq!(tensor_at(&bytes, &out).unwrap(), want);
    let j = json(&d.path().join("run.json"));
    assert_eq!(j["macs"].as_u64(), Some(l.weight_elements() * 30));
}
