//! Frozen single-layer regression fixtures. Each directory under
//! `tests/fixtures` holds a one-layer network, its operands and the expected
//! output; both the reference operators and the simulator must reproduce it.
//! Set `HYVIT_REGEN_FIXTURES=1` to rewrite them from a fixed seed.

use std::fs;
use std::path::{Path, PathBuf};

use hyvit::config::{load_network, write_network};
use hyvit::image::{read_image, read_tensor, tensor_at, write_image, write_tensor, TensorPlacement};
use hyvit_core::cost::{search_mapping_in, vector_operands, NodeHomes, Objective};
use hyvit_core::golden::{ref_layer, QTensor};
use hyvit_core::mapping::Homes;
use hyvit_core::sim::lower::{simulate_layer, LayerData};
use hyvit_core::workload::{BlockTag, NormParams, Requant, SoftmaxParams};
use hyvit_core::{ArchConfig, Dataflow, LayerKind, LayerSpec, Level, NetworkGraph, PostOp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: [&str; 5] = ["conv3x3", "dw5x5", "pw_layernorm", "gemm_softmax", "add"];

fn dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn layer(name: &str, r: &mut ChaCha8Rng) -> LayerSpec {
    let rq = PostOp::Requantize(Requant { mult: 23, shift: 11 });
    match name {
        "conv3x3" => LayerSpec::conv("conv3x3", 6, 10, 3, 7, 5).with_post_ops(vec![rq]),
        "dw5x5" => LayerSpec::dw("dw5x5", 12, 5, 6, 6).with_post_ops(vec![PostOp::Requantize(Requant { mult: 41, shift: 9 })]),
        "pw_layernorm" => LayerSpec::pw("pw_layernorm", 16, 24, 4, 3).with_post_ops(vec![PostOp::LayerNorm(NormParams {
            gamma: (0..24).map(|_| r.gen_range(-700..=700)).collect(),
            beta: (0..24).map(|_| r.gen_range(-30..=30)).collect(),
        })]),
        "gemm_softmax" => LayerSpec::gemm("gemm_softmax", 1, 9, 20, 9).with_post_ops(vec![PostOp::Softmax(SoftmaxParams { mult: 9, shift: 8 })]),
        "add" => LayerSpec::vector("add", LayerKind::ElementwiseAdd, 10, 5, 4),
        _ => unreachable!(),
    }
}

fn operands(l: &LayerSpec) -> usize {
    if l.kind.is_mac() { 1 } else { vector_operands(l) }
}

fn regenerate(name: &str) {
    let mut r = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let l = layer(name, &mut r);
    let d = dir(name);
    fs::create_dir_all(&d).unwrap();
    let mut g = NetworkGraph::new(name);
    g.add(l.clone(), BlockTag::CNN);
    fs::write(d.join("layer.cfg"), write_network(&g)).unwrap();
    let s = l.input_shape();
    let inputs: Vec<QTensor> =
        (0..operands(&l)).map(|_| QTensor::from_i8(s, &(0..s.elements()).map(|_| r.gen()).collect::<Vec<_>>()).unwrap()).collect();
    for (i, t) in inputs.iter().enumerate() {
        write_tensor(&d.join(format!("input{i}.bin")), &format!("input{i}"), t).unwrap();
    }
    let ins: Vec<&QTensor> = inputs.iter().collect();
    let weights: Option<Vec<i8>> = l.kind.is_mac().then(|| (0..l.weight_elements()).map(|_| r.gen()).collect());
    if let Some(w) = &weights {
        let p = TensorPlacement { name: "weights".into(), level: "dram".into(), addr: 0, shape: [1, 1, 1, w.len() as u32], bits: 8 };
        write_image(&d.join("weights.bin"), &w.iter().map(|&v| v as u8).collect::<Vec<_>>(), vec![p]).unwrap();
    }
    let out = ref_layer(&l, &ins, weights.as_deref()).unwrap();
    write_tensor(&d.join("output.bin"), "output", &out).unwrap();
}

struct Fixture {
    layer: LayerSpec,
    data: LayerData,
    output: QTensor,
}

fn load(name: &str) -> Fixture {
    let d = dir(name);
    let g = load_network(&fs::read_to_string(d.join("layer.cfg")).unwrap()).unwrap();
    let layer = g.nodes[0].layer.clone();
    let inputs = (0..operands(&layer)).map(|i| read_tensor(&d.join(format!("input{i}.bin"))).unwrap()).collect();
    let weights = if layer.kind.is_mac() {
        let (bytes, side) = read_image(&d.join("weights.bin")).unwrap();
        tensor_at(&bytes, &side.tensors[0]).unwrap().data.iter().map(|&v| v as i8).collect()
    } else {
        Vec::new()
    };
    Fixture { layer, data: LayerData { inputs, weights }, output: read_tensor(&d.join("output.bin")).unwrap() }
}

#[test]
fn fixtures_are_reproduced() {
    if std::env::var("HYVIT_REGEN_FIXTURES").is_ok_and(|v| v == "1") {
        NAMES.iter().for_each(|n| regenerate(n));
    }
    let arch = ArchConfig::default();
    let all_dram = Homes { input: Level::Dram, weight: Level::Dram, output: Level::Dram };
    for name in NAMES {
        let f = load(name);
        let l = &f.layer;
        let ins: Vec<&QTensor> = f.data.inputs.iter().collect();
        let weights = l.kind.is_mac().then_some(f.data.weights.as_slice());
        assert_eq!(ref_layer(l, &ins, weights).unwrap(), f.output, "{name}: reference operator");
        let nh = NodeHomes { inputs: vec![Level::Dram; operands(l)], weight: Level::Dram, output: Level::Dram };
        if !l.kind.is_mac() {
            assert_eq!(simulate_layer(l, None, &nh, &f.data, &arch).unwrap().output, f.output, "{name}: simulator");
            continue;
        }
        for df in Dataflow::ALL.into_iter().filter(|df| df.supports(l, &arch)) {
            let (m, _) = search_mapping_in(l, &arch, Objective::Edp, 200, all_dram, &[df]).unwrap();
            assert_eq!(simulate_layer(l, Some(&m), &nh, &f.data, &arch).unwrap().output, f.output, "{name}: simulator under {m}");
        }
    }
}
