//! Text formats for networks and architectures.
//!
//! Both are line oriented: `key = value`, `#` starts a comment, blank lines
//! are ignored. A network file opens with `version` and `network` keys and
//! then lists layers, each starting with a `[layer NAME]` header. See
//! `docs/formats.md` for the full schema.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use hyvit_core::workload::{ActKind, BlockTag, NormParams, Requant, SoftmaxParams};
use hyvit_core::{ArchConfig, Dim, Dims, LayerKind, LayerSpec, NetworkGraph, PostOp};
use hyvit_core::workload::Operand;

use crate::error::{Error, Result};

pub const NETWORK_FORMAT_VERSION: u32 = 1;

/// `key = value` lines with their 1-based numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn key_value(line: usize, l: &str) -> Result<(&str, &str)> {
    let (k, v) = l.split_once('=').ok_or_else(|| Error::parse(line, format!("expected `key = value`, got `{l}`")))?;
    Ok((k.trim(), v.trim()))
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::parse(line, format!("`{key}`: cannot parse `{v}`")))
}

fn parse_post_op(line: usize, tok: &str) -> Result<PostOp> {
    let mut parts = tok.split(':');
    let head = parts.next().unwrap_or("");
    let rest: Vec<&str> = parts.collect();
    let bad = || Error::parse(line, format!("malformed post-op `{tok}`"));
    let pair = |rest: &[&str]| -> Result<(i32, u8)> {
        match rest {
            [m, s] => Ok((m.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    };
    match head {
        "requant" => {
            let (mult, shift) = pair(&rest)?;
            Ok(PostOp::Requantize(Requant { mult, shift }))
        }
        "softmax" => {
            let (mult, shift) = pair(&rest)?;
            Ok(PostOp::Softmax(SoftmaxParams { mult, shift }))
        }
        "layernorm" => {
            let mut p = NormParams::default();
            for field in rest {
                let (k, v) = field.split_once('=').ok_or_else(bad)?;
                let vals = v.split(',').map(|x| x.parse::<i16>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
                match k {
                    "g" => p.gamma = vals,
                    "b" => p.beta = vals,
                    _ => return Err(bad()),
                }
            }
            Ok(PostOp::LayerNorm(p))
        }
        _ => match ActKind::parse(head) {
            Some(a) if rest.is_empty() => Ok(PostOp::Activation(a)),
            _ => Err(Error::parse(line, format!("unknown post-op `{tok}`"))),
        },
    }
}

fn write_post_op(op: &PostOp) -> String {
    let list = |v: &[i16]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    match op {
        PostOp::Requantize(r) => format!("requant:{}:{}", r.mult, r.shift),
        PostOp::Softmax(s) => format!("softmax:{}:{}", s.mult, s.shift),
        PostOp::Activation(a) => a.name().to_string(),
        PostOp::LayerNorm(p) => {
            let mut s = "layernorm".to_string();
            if !p.gamma.is_empty() {
                s += &format!(":g={}", list(&p.gamma));
            }
            if !p.beta.is_empty() {
                s += &format!(":b={}", list(&p.beta));
            }
            s
        }
    }
}

struct Pending {
    line: usize,
    layer: LayerSpec,
    tag: Option<BlockTag>,
    dims_seen: bool,
    kind_seen: bool,
    inputs: Vec<(usize, String, Operand, bool)>,
    keys: BTreeSet<String>,
}

/// Parse and validate a network config.
pub fn load_network(text: &str) -> Result<NetworkGraph> {
    let mut name = None;
    let mut version = None;
    let mut layers: Vec<Pending> = Vec::new();
    for (ln, l) in lines(text) {
        if let Some(h) = l.strip_prefix('[') {
            let h = h.strip_suffix(']').ok_or_else(|| Error::parse(ln, "unterminated section header"))?;
            let lname = h.strip_prefix("layer").map(str::trim).filter(|n| !n.is_empty() && !n.contains(char::is_whitespace));
            let lname = lname.ok_or_else(|| Error::parse(ln, format!("expected `[layer NAME]`, got `[{h}]`")))?;
            layers.push(Pending {
                line: ln,
                layer: LayerSpec::new(lname, LayerKind::PWConv, Dims::default()),
                tag: None,
                dims_seen: false,
                kind_seen: false,
                inputs: Vec::new(),
                keys: BTreeSet::new(),
            });
            continue;
        }
        let (k, v) = key_value(ln, l)?;
        let Some(p) = layers.last_mut() else {
            match k {
                "version" => {
                    let n: u32 = num(ln, k, v)?;
                    if n != NETWORK_FORMAT_VERSION {
                        return Err(Error::parse(ln, format!("unsupported format version {n}")));
                    }
                    version = Some(n);
                }
                "network" => name = Some(v.to_string()),
                _ => return Err(Error::parse(ln, format!("unknown key `{k}` (expected `version` or `network`)"))),
            }
            continue;
        };
        if !p.keys.insert(k.to_string()) {
            return Err(Error::parse(ln, format!("duplicate key `{k}`")));
        }
        match k {
            "kind" => {
                p.layer.kind = LayerKind::parse(v).ok_or_else(|| Error::parse(ln, format!("unknown layer kind `{v}`")))?;
                p.kind_seen = true;
            }
            "dims" => {
                for tok in v.split_whitespace() {
                    let (d, n) = tok.split_once('=').ok_or_else(|| Error::parse(ln, format!("expected DIM=N, got `{tok}`")))?;
                    let d = Dim::parse(d).ok_or_else(|| Error::parse(ln, format!("unknown dimension `{d}`")))?;
                    p.layer.dims.set(d, num(ln, k, n)?);
                }
                p.dims_seen = true;
            }
            "stride" => {
                let s: Vec<u32> = v.split_whitespace().map(|t| num(ln, k, t)).collect::<Result<_>>()?;
                p.layer.stride = match s[..] {
                    [a] => (a, a),
                    [a, b] => (a, b),
                    _ => return Err(Error::parse(ln, "stride takes one or two integers")),
                };
            }
            "post_ops" => p.layer.post_ops = v.split_whitespace().map(|t| parse_post_op(ln, t)).collect::<Result<_>>()?,
            "tag" => p.tag = Some(BlockTag::parse(v).ok_or_else(|| Error::parse(ln, format!("unknown tag `{v}`")))?),
            "dynamic_weights" => p.layer.dynamic_weights = num(ln, k, v)?,
            "inputs" => {
                for tok in v.split_whitespace() {
                    let (op, from) = tok.split_once(':').ok_or_else(|| Error::parse(ln, format!("expected OPERAND:LAYER, got `{tok}`")))?;
                    let op = match op {
                        "I" => Operand::I,
                        "W" => Operand::W,
                        _ => return Err(Error::parse(ln, format!("operand must be I or W, got `{op}`"))),
                    };
                    let (from, view) = match from.strip_suffix('~') {
                        Some(f) => (f, true),
                        None => (from, false),
                    };
                    p.inputs.push((ln, from.to_string(), op, view));
                }
            }
            _ => return Err(Error::parse(ln, format!("unknown layer key `{k}`"))),
        }
    }
    let name = name.ok_or_else(|| Error::parse(1, "missing `network` key"))?;
    if version.is_none() {
        return Err(Error::parse(1, "missing `version` key"));
    }
    let mut g = NetworkGraph::new(name);
    for p in &layers {
        for (what, ok) in [("kind", p.kind_seen), ("dims", p.dims_seen), ("tag", p.tag.is_some())] {
            if !ok {
                return Err(Error::parse(p.line, format!("layer `{}` is missing `{what}`", p.layer.name)));
            }
        }
        if g.find(&p.layer.name).is_some() {
            return Err(Error::parse(p.line, format!("duplicate layer `{}`", p.layer.name)));
        }
        let to = g.add(p.layer.clone(), p.tag.unwrap());
        for (ln, from, op, view) in &p.inputs {
            let f = g.find(from).ok_or_else(|| Error::parse(*ln, format!("input `{from}` is not an earlier layer")))?;
            g.connect(f, to, *op, *view);
        }
    }
    g.validate()?;
    Ok(g)
}

/// Edge order grouped by consumer, the order `load_network` produces.
pub fn canonical(mut g: NetworkGraph) -> NetworkGraph {
    g.edges.sort_by_key(|e| e.to);
    g
}

/// Serialize a graph; `load_network` reads it back to `canonical(g)`.
pub fn write_network(g: &NetworkGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "version = {NETWORK_FORMAT_VERSION}\nnetwork = {}", g.name);
    for (i, n) in g.nodes.iter().enumerate() {
        let l = &n.layer;
        let _ = writeln!(s, "\n[layer {}]", l.name);
        let _ = writeln!(s, "kind = {}", l.kind.name());
        let dims: Vec<String> = Dim::ALL.iter().map(|&d| format!("{d}={}", l.dims.get(d))).collect();
        let _ = writeln!(s, "dims = {}", dims.join(" "));
        if l.stride != (1, 1) {
            let _ = writeln!(s, "stride = {} {}", l.stride.0, l.stride.1);
        }
        if !l.post_ops.is_empty() {
            let ops: Vec<String> = l.post_ops.iter().map(write_post_op).collect();
            let _ = writeln!(s, "post_ops = {}", ops.join(" "));
        }
        if l.dynamic_weights {
            let _ = writeln!(s, "dynamic_weights = true");
        }
        let _ = writeln!(s, "tag = {}", n.tag.name());
        let ins: Vec<String> = g
            .producers(i)
            .map(|e| format!("{}:{}{}", e.operand.name(), g.nodes[e.from].layer.name, if e.view { "~" } else { "" }))
            .collect();
        if !ins.is_empty() {
            let _ = writeln!(s, "inputs = {}", ins.join(" "));
        }
    }
    s
}

/// Architecture file. `calibrate_tops_per_w`, when present, rescales the
/// on-chip energies after all other keys are applied.
pub fn load_arch(text: &str) -> Result<ArchConfig> {
    let mut a = ArchConfig::default();
    let mut seen = BTreeSet::new();
    let mut calibrate = None;
    for (ln, l) in lines(text) {
        let (k, v) = key_value(ln, l)?;
        if !seen.insert(k.to_string()) {
            return Err(Error::parse(ln, format!("duplicate key `{k}`")));
        }
        let e = &mut a.energy;
        match k {
            "rows" => a.rows = num(ln, k, v)?,
            "cols" => a.cols = num(ln, k, v)?,
            "clock_hz" => a.clock_hz = num(ln, k, v)?,
            "input_mem_bytes" => a.input_mem_bytes = num(ln, k, v)?,
            "output_rf_bytes" => a.output_rf_bytes = num(ln, k, v)?,
            "weight_reg_bytes" => a.weight_reg_bytes = num(ln, k, v)?,
            "sram_bytes" => a.sram_bytes = num(ln, k, v)?,
            "sram_weight_bytes" => a.sram_weight_bytes = num(ln, k, v)?,
            "dram_bus_bits" => a.dram_bus_bits = num(ln, k, v)?,
            "sram_port_bits" => a.sram_port_bits = num(ln, k, v)?,
            "line_buffer_entries" => a.line_buffer_entries = num(ln, k, v)?,
            "ppe_lanes" => a.ppe_lanes = num(ln, k, v)?,
            "watchdog_cycles" => a.watchdog_cycles = num(ln, k, v)?,
            "energy.mac" => e.mac = num(ln, k, v)?,
            "energy.weight_reg" => e.weight_reg = num(ln, k, v)?,
            "energy.input_mem" => e.input_mem = num(ln, k, v)?,
            "energy.output_rf" => e.output_rf = num(ln, k, v)?,
            "energy.sram" => e.sram = num(ln, k, v)?,
            "energy.dram" => e.dram = num(ln, k, v)?,
            "calibrate_tops_per_w" => calibrate = Some(num::<f64>(ln, k, v)?),
            _ => return Err(Error::parse(ln, format!("unknown architecture key `{k}`"))),
        }
    }
    a.validate()?;
    if let Some(t) = calibrate {
        a = hyvit_core::cost::calibrate_energy(&a, t)?;
    }
    Ok(a)
}

pub fn write_arch(a: &ArchConfig) -> String {
    let e = &a.energy;
    format!(
        "rows = {}\ncols = {}\nclock_hz = {}\ninput_mem_bytes = {}\noutput_rf_bytes = {}\nweight_reg_bytes = {}\n\
         sram_bytes = {}\nsram_weight_bytes = {}\ndram_bus_bits = {}\nsram_port_bits = {}\nline_buffer_entries = {}\n\
         ppe_lanes = {}\nwatchdog_cycles = {}\nenergy.mac = {:?}\nenergy.weight_reg = {:?}\nenergy.input_mem = {:?}\n\
         energy.output_rf = {:?}\nenergy.sram = {:?}\nenergy.dram = {:?}\n",
        a.rows,
        a.cols,
        a.clock_hz,
        a.input_mem_bytes,
        a.output_rf_bytes,
        a.weight_reg_bytes,
        a.sram_bytes,
        a.sram_weight_bytes,
        a.dram_bus_bits,
        a.sram_port_bits,
        a.line_buffer_entries,
        a.ppe_lanes,
        a.watchdog_cycles,
        e.mac,
        e.weight_reg,
        e.input_mem,
        e.output_rf,
        e.sram,
        e.dram
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use hyvit_core::workload::{build_edgenext, build_edgenext_s, EdgeNextConfig, EDGENEXT_S_CHANNELS};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

        #[test]
        fn network_text_round_trips(r in 1u32..=2, ch in prop::array::uniform4(1u32..=3)) {
            let cfg = EdgeNextConfig {
                resolution: 32 * r,
                channels: [8 * ch[0], 8 * ch[1], 8 * ch[2], 8 * ch[3]],
                depths: [1, 1, 2, 1],
                classes: 10,
                ..EdgeNextConfig::small()
            };
            let g = canonical(build_edgenext(&cfg).unwrap());
            let text = write_network(&g);
            let back = load_network(&text).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(write_network(&back), text);
        }
    }

    #[test]
    fn single_pw_config_is_one_node() {
        let g = load_network("version = 1\nnetwork = one\n[layer p]\nkind = pwconv\ndims = K=8 C=4 OX=2 OY=2\ntag = CNN\n").unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.nodes[0].layer, LayerSpec::pw("p", 4, 8, 2, 2));
    }

    #[test]
    fn depthwise_with_k_not_c_names_the_invariant() {
        let e = load_network("version = 1\nnetwork = bad\n[layer d]\nkind = dwconv\ndims = K=8 C=4 OX=2 OY=2 FX=3 FY=3\ntag = CNN\n").unwrap_err();
        assert!(e.to_string().contains("K = C"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_line() {
        let e = load_network("version = 1\nnetwork = n\n[layer p]\nkind = pwconv\ncolour = red\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 5, .. }), "{e}");
        assert!(load_arch("rows = 16\nbanana = 1\n").is_err());
    }

    #[test]
    fn edgenext_round_trips() {
        let g = canonical(build_edgenext_s(256, &EDGENEXT_S_CHANNELS).unwrap());
        let text = write_network(&g);
        let back = load_network(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(write_network(&back), text);
    }

    #[test]
    fn arch_round_trips() {
        let mut a = ArchConfig::default();
        a.energy.sram = 1.2345;
        a.sram_bytes = 1 << 20;
        assert_eq!(load_arch(&write_arch(&a)).unwrap(), a);
    }
}
