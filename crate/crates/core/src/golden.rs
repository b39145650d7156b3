//! Straight-line integer reference for every operator and post-op.
//!
//! Activations are laid out `[b][x][y][c]`. Weights: Conv/PW `[k][c][fy][fx]`,
//! DW `[c][fy][fx]`, GeMM `[k][c]` (static) or `[b][k][c]` (dynamic).
//! Nothing here is shared with the simulator datapath.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::workload::{
    ActKind, LayerKind, LayerSpec, NormParams, PostOp, Requant, SoftmaxParams, TensorShape, EXP2_NEG_Q16, RSQRT_SEED_Q16,
};

/// Quantized tensor holding 8-bit codes or 32-bit accumulators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QTensor {
    pub shape: TensorShape,
    /// 8 or 32.
    pub bits: u8,
    pub data: Vec<i32>,
}

impl QTensor {
    pub fn new(shape: TensorShape, bits: u8, data: Vec<i32>) -> Result<Self> {
        let t = QTensor { shape, bits, data };
        t.validate()?;
        Ok(t)
    }

    pub fn zeros(shape: TensorShape, bits: u8) -> Self {
        QTensor { shape, bits, data: vec![0; shape.elements() as usize] }
    }

    pub fn from_i8(shape: TensorShape, data: &[i8]) -> Result<Self> {
        QTensor::new(shape, 8, data.iter().map(|&v| v as i32).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() as u64 != self.shape.elements() {
            return Err(Error::Shape(format!("{} elements for shape of {}", self.data.len(), self.shape.elements())));
        }
        match self.bits {
            32 => Ok(()),
            8 if self.data.iter().all(|&v| (-128..=127).contains(&v)) => Ok(()),
            8 => Err(Error::Shape("8-bit tensor holds out-of-range values".into())),
            b => Err(Error::Shape(format!("unsupported element width {b}"))),
        }
    }

    pub fn at(&self, b: u32, x: u32, y: u32, c: u32) -> i32 {
        let s = &self.shape;
        self.data[(((b * s.x + x) * s.y + y) * s.c + c) as usize]
    }

    /// The data as bytes (8-bit) or little-endian words (32-bit).
    pub fn to_bytes(&self) -> Vec<u8> {
        if self.bits == 8 {
            self.data.iter().map(|&v| v as i8 as u8).collect()
        } else {
            self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
        }
    }
}

fn sat32(v: i64) -> i32 {
    v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

fn sat8(v: i128) -> i32 {
    v.clamp(-128, 127) as i32
}

/// `x / 2^k`, rounded half away from zero.
fn shr_round(x: i128, k: u32) -> i128 {
    if k == 0 {
        return x;
    }
    let m = (x.unsigned_abs() + (1u128 << (k - 1))) >> k;
    if x < 0 {
        -(m as i128)
    } else {
        m as i128
    }
}

/// `x / d` for `d > 0`, rounded half away from zero.
fn div_round(x: i128, d: i128) -> i128 {
    let m = (x.unsigned_abs() * 2 + d as u128) / (2 * d as u128);
    if x < 0 {
        -(m as i128)
    } else {
        m as i128
    }
}

fn check_input(layer: &LayerSpec, input: &QTensor) -> Result<()> {
    let want = layer.input_shape();
    if input.shape != want {
        return Err(Error::Shape(format!("`{}` expects input {:?}, got {:?}", layer.name, want, input.shape)));
    }
    Ok(())
}

fn check_weights(layer: &LayerSpec, w: &[i8]) -> Result<()> {
    let n = layer.weight_elements();
    if w.len() as u64 != n {
        return Err(Error::Shape(format!("`{}` expects {n} weights, got {}", layer.name, w.len())));
    }
    Ok(())
}

/// Dense or depthwise convolution with zero padding.
fn conv_core(layer: &LayerSpec, input: &QTensor, w: &[i8], depthwise: bool) -> Result<QTensor> {
    check_input(layer, input)?;
    check_weights(layer, w)?;
    let d = layer.dims;
    let (sx, sy) = layer.stride;
    let (px, py) = layer.padding();
    let ins = input.shape;
    let out = layer.output_shape();
    let mut o = QTensor::zeros(out, 32);
    let mut i = 0;
    for b in 0..d.b {
        for ox in 0..d.ox {
            for oy in 0..d.oy {
                for k in 0..out.c {
                    let mut acc: i64 = 0;
                    let cs = if depthwise { k..k + 1 } else { 0..d.c };
                    for c in cs {
                        for fy in 0..d.fy {
                            for fx in 0..d.fx {
                                let ix = (ox * sx + fx) as i64 - px as i64;
                                let iy = (oy * sy + fy) as i64 - py as i64;
                                if ix < 0 || iy < 0 || ix >= ins.x as i64 || iy >= ins.y as i64 {
                                    continue;
                                }
                                let a = input.at(b, ix as u32, iy as u32, c) as i64;
                                let wi = if depthwise {
                                    (c * d.fy + fy) * d.fx + fx
                                } else {
                                    ((k * d.c + c) * d.fy + fy) * d.fx + fx
                                };
                                acc += a * w[wi as usize] as i64;
                            }
                        }
                    }
                    o.data[i] = sat32(acc);
                    i += 1;
                }
            }
        }
    }
    Ok(o)
}

pub fn ref_conv2d(input: &QTensor, w: &[i8], layer: &LayerSpec) -> Result<QTensor> {
    if layer.kind != LayerKind::Conv2D {
        return Err(Error::Shape(format!("`{}` is not a dense convolution", layer.name)));
    }
    conv_core(layer, input, w, false)
}

pub fn ref_dwconv(input: &QTensor, w: &[i8], layer: &LayerSpec) -> Result<QTensor> {
    if layer.kind != LayerKind::DWConv2D {
        return Err(Error::Shape(format!("`{}` is not depthwise", layer.name)));
    }
    conv_core(layer, input, w, true)
}

pub fn ref_pwconv(input: &QTensor, w: &[i8], layer: &LayerSpec) -> Result<QTensor> {
    if layer.kind != LayerKind::PWConv {
        return Err(Error::Shape(format!("`{}` is not pointwise", layer.name)));
    }
    conv_core(layer, input, w, false)
}

/// `out[b][m][k] = sum_c in[b][m][c] * w[(b)][k][c]`.
pub fn ref_gemm(input: &QTensor, w: &[i8], layer: &LayerSpec) -> Result<QTensor> {
    if layer.kind != LayerKind::GeMM {
        return Err(Error::Shape(format!("`{}` is not a matrix multiply", layer.name)));
    }
    check_input(layer, input)?;
    check_weights(layer, w)?;
    let d = layer.dims;
    let mut o = QTensor::zeros(layer.output_shape(), 32);
    let mut i = 0;
    for b in 0..d.b {
        let wb = if layer.dynamic_weights { (b * d.k * d.c) as usize } else { 0 };
        for m in 0..d.ox {
            for k in 0..d.k {
                let mut acc: i64 = 0;
                for c in 0..d.c {
                    acc += input.at(b, m, 0, c) as i64 * w[wb + (k * d.c + c) as usize] as i64;
                }
                o.data[i] = sat32(acc);
                i += 1;
            }
        }
    }
    Ok(o)
}

pub fn ref_add(a: &QTensor, b: &QTensor, layer: &LayerSpec) -> Result<QTensor> {
    check_input(layer, a)?;
    check_input(layer, b)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| sat32(x as i64 + y as i64)).collect();
    Ok(QTensor { shape: layer.output_shape(), bits: 32, data })
}

fn requantize(v: &mut [i128], r: &Requant) -> Result<()> {
    if r.shift > 31 {
        return Err(Error::PostProc(format!("requantize shift {} outside 0..=31", r.shift)));
    }
    for x in v.iter_mut() {
        *x = sat8(shr_round(*x * r.mult as i128, r.shift as u32)) as i128;
    }
    Ok(())
}

fn activation(v: &mut [i128], a: ActKind) {
    for x in v.iter_mut() {
        *x = match a {
            ActKind::Relu => (*x).max(0),
            // Hard-sigmoid gate with one LSB read as 1/32.
            ActKind::Gelu => {
                let gate = (*x * 9 + 512).clamp(0, 1024);
                shr_round(*x * gate, 10)
            }
        };
    }
}

/// `(g, e)` with `1/sqrt(var) ~= g * 2^-e`, `g` in Q16.
fn inv_sqrt(var: u128) -> (u128, u32) {
    // Bring var to n * 2^s with n in [2^28, 2^30) and s even.
    let bits = 128 - var.leading_zeros() as i32;
    let mut s = bits - 30;
    if s % 2 != 0 {
        s += 1;
    }
    let n = if s >= 0 { var >> s } else { var << (-s) };
    let mut g = RSQRT_SEED_Q16[(n >> 26) as usize - 4] as u128;
    for _ in 0..2 {
        let t = (n * g * g) >> 30;
        g = (g * ((3u128 << 32) - t.min(3u128 << 32))) >> 33;
    }
    (g, (31 + s / 2) as u32)
}

fn layer_norm(v: &mut [i128], p: &NormParams) -> Result<()> {
    let c = v.len();
    for (what, len) in [("gamma", p.gamma.len()), ("beta", p.beta.len())] {
        if len != 0 && len != c {
            return Err(Error::PostProc(format!("layernorm {what} has {len} entries for {c} channels")));
        }
    }
    // Deviations scaled by C keep the mean exact: D = C*x - sum(x), and
    // (x - mean) / std = D / sqrt(sum(D^2) / C).
    let n = c as i128;
    let sum: i128 = v.iter().sum();
    let dev: Vec<i128> = v.iter().map(|x| n * x - sum).collect();
    let sq: i128 = dev.iter().map(|d| d * d).sum();
    let var = div_round(sq, n);
    if var == 0 {
        for (i, x) in v.iter_mut().enumerate() {
            *x = sat8(p.beta_at(i) as i128) as i128;
        }
        return Ok(());
    }
    let (g, e) = inv_sqrt(var as u128);
    for (i, x) in v.iter_mut().enumerate() {
        let y = shr_round(dev[i] * g as i128 * p.gamma_at(i) as i128, e + 8) + p.beta_at(i) as i128;
        *x = sat8(y) as i128;
    }
    Ok(())
}

fn softmax(v: &mut [i128], p: &SoftmaxParams) -> Result<()> {
    if p.shift > 31 {
        return Err(Error::PostProc(format!("softmax shift {} outside 0..=31", p.shift)));
    }
    if p.mult < 0 {
        return Err(Error::PostProc("softmax multiplier must be non-negative".into()));
    }
    let m = *v.iter().max().unwrap();
    let mut e = vec![0u64; v.len()];
    for (i, x) in v.iter().enumerate() {
        let u = -shr_round((*x - m) * p.mult as i128, p.shift as u32);
        let (n, f) = ((u >> 8) as u64, (u & 255) as u32);
        let (seg, frac) = ((f >> 4) as usize, f & 15);
        let hi = EXP2_NEG_Q16[seg];
        let lo = EXP2_NEG_Q16[seg + 1];
        let q = (hi - (((hi - lo) * frac + 8) >> 4)) as u64;
        e[i] = if n == 0 {
            q
        } else if n > 20 {
            0
        } else {
            (q + (1 << (n - 1))) >> n
        };
    }
    let sum: u64 = e.iter().sum();
    let k = 64 - sum.leading_zeros();
    let r = ((1u128 << (k + 15)) + sum as u128 / 2) / sum as u128;
    for (x, ei) in v.iter_mut().zip(e) {
        let num = ei as u128 * r * 127;
        *x = ((num + (1u128 << (k + 14))) >> (k + 15)) as i128;
    }
    Ok(())
}

/// Apply a post-op chain to one channel vector.
pub fn ref_postprocess(vector: &[i32], ops: &[PostOp]) -> Result<Vec<i32>> {
    if vector.is_empty() {
        return Err(Error::PostProc("empty channel vector".into()));
    }
    let mut v: Vec<i128> = vector.iter().map(|&x| x as i128).collect();
    for op in ops {
        match op {
            PostOp::Requantize(r) => requantize(&mut v, r)?,
            PostOp::Activation(a) => activation(&mut v, *a),
            PostOp::LayerNorm(p) => layer_norm(&mut v, p)?,
            PostOp::Softmax(p) => softmax(&mut v, p)?,
        }
    }
    Ok(v.into_iter().map(|x| x.clamp(i32::MIN as i128, i32::MAX as i128) as i32).collect())
}

/// Apply `ops` to every pixel's channel vector. The result is 8-bit when the
/// chain narrows or `force8` is set, else 32-bit.
pub fn ref_apply_post(acc: &QTensor, ops: &[PostOp], force8: bool) -> Result<QTensor> {
    let c = acc.shape.c as usize;
    let narrow = force8 || ops.iter().any(|o| o.narrows());
    let mut data = Vec::with_capacity(acc.data.len());
    for px in acc.data.chunks(c) {
        let out = ref_postprocess(px, ops)?;
        data.extend(out.into_iter().map(|x| if narrow { x.clamp(-128, 127) } else { x }));
    }
    Ok(QTensor { shape: acc.shape, bits: if narrow { 8 } else { 32 }, data })
}

/// Full layer including its post-op chain. `inputs` holds one tensor (two for
/// an elementwise add); `weights` is required for MAC layers.
pub fn ref_layer(layer: &LayerSpec, inputs: &[&QTensor], weights: Option<&[i8]>) -> Result<QTensor> {
    let need = if layer.kind == LayerKind::ElementwiseAdd { 2 } else { 1 };
    if inputs.len() != need {
        return Err(Error::Shape(format!("`{}` takes {need} inputs, got {}", layer.name, inputs.len())));
    }
    let w = || weights.ok_or_else(|| Error::Shape(format!("`{}` needs weights", layer.name)));
    let acc = match layer.kind {
        LayerKind::Conv2D => ref_conv2d(inputs[0], w()?, layer)?,
        LayerKind::DWConv2D => ref_dwconv(inputs[0], w()?, layer)?,
        LayerKind::PWConv => ref_pwconv(inputs[0], w()?, layer)?,
        LayerKind::GeMM => ref_gemm(inputs[0], w()?, layer)?,
        LayerKind::ElementwiseAdd => ref_add(inputs[0], inputs[1], layer)?,
        LayerKind::LayerNorm | LayerKind::Softmax | LayerKind::Activation => {
            check_input(layer, inputs[0])?;
            QTensor { shape: inputs[0].shape, bits: 32, data: inputs[0].data.clone() }
        }
    };
    ref_apply_post(&acc, &layer.post_ops, !layer.kind.is_mac())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_i8(r: &mut ChaCha8Rng, n: u64) -> Vec<i8> {
        (0..n).map(|_| r.gen()).collect()
    }

    #[test]
    fn scalar_conv() {
        let l = LayerSpec::conv("c", 1, 1, 1, 1, 1);
        let x = QTensor::from_i8(l.input_shape(), &[3]).unwrap();
        assert_eq!(ref_conv2d(&x, &[5], &l).unwrap().data, vec![15]);
    }

    #[test]
    fn depthwise_interior_sums_kernel() {
        let l = LayerSpec::dw("dw", 4, 3, 5, 5);
        let x = QTensor::from_i8(l.input_shape(), &[1; 100]).unwrap();
        let o = ref_dwconv(&x, &[1; 36], &l).unwrap();
        for c in 0..4 {
            assert_eq!(o.at(0, 2, 2, c), 9);
            assert_eq!(o.at(0, 0, 0, c), 4);
        }
    }

    #[test]
    fn pointwise_equals_gemm() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (c, k, x, y) = (r.gen_range(1..20), r.gen_range(1..20), r.gen_range(1..6), r.gen_range(1..6));
            let pw = LayerSpec::pw("pw", c, k, x, y);
            let gm = LayerSpec::new("g", LayerKind::GeMM, Dims { c, k, ox: x * y, ..Dims::default() });
            let inp = rand_i8(&mut r, pw.input_shape().elements());
            let w = rand_i8(&mut r, pw.weight_elements());
            let a = ref_pwconv(&QTensor::from_i8(pw.input_shape(), &inp).unwrap(), &w, &pw).unwrap();
            let b = ref_gemm(&QTensor::from_i8(gm.input_shape(), &inp).unwrap(), &w, &gm).unwrap();
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn strided_conv_matches_window_sum() {
        let l = LayerSpec::conv("s", 2, 3, 4, 2, 2).with_stride(4);
        assert_eq!(l.input_shape(), TensorShape::new(1, 8, 8, 2));
        let x = QTensor::from_i8(l.input_shape(), &[1; 128]).unwrap();
        let o = ref_conv2d(&x, &vec![1; l.weight_elements() as usize], &l).unwrap();
        assert!(o.data.iter().all(|&v| v == 32));
    }

    #[test]
    fn requantize_rounds_half_away() {
        let r = PostOp::Requantize(Requant { mult: 1, shift: 1 });
        assert_eq!(ref_postprocess(&[3, -3, 1000, -1000], &[r]).unwrap(), vec![2, -2, 127, -128]);
        let bad = PostOp::Requantize(Requant { mult: 1, shift: 32 });
        assert!(ref_postprocess(&[1], &[bad]).is_err());
        assert!(ref_postprocess(&[], &[]).is_err());
    }

    #[test]
    fn constant_vector_layernorm_yields_bias() {
        let p = NormParams { gamma: vec![300; 8], beta: (0..8).map(|i| i * 3 - 7).collect() };
        let out = ref_postprocess(&[42; 8], &[PostOp::LayerNorm(p.clone())]).unwrap();
        assert_eq!(out, p.beta.iter().map(|&b| b as i32).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_softmax_splits_evenly() {
        let out = ref_postprocess(&[5; 4], &[PostOp::Softmax(SoftmaxParams { mult: 1, shift: 0 })]).unwrap();
        assert_eq!(out, vec![32; 4]);
    }

    #[test]
    fn inv_sqrt_is_accurate() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let v: u128 = r.gen_range(1..u64::MAX as u128) >> r.gen_range(0..60);
            let (g, e) = inv_sqrt(v.max(1));
            let got = g as f64 / 2f64.powi(e as i32);
            let want = 1.0 / (v.max(1) as f64).sqrt();
            assert!((got / want - 1.0).abs() < 1e-4, "{v}: {got} vs {want}");
        }
    }

    #[test]
    fn layernorm_within_one_lsb_of_float() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let c = r.gen_range(2..=320usize);
            let sigma = 2f64.powf(r.gen_range(0.0..20.0));
            let center: f64 = r.gen_range(-1e6..1e6);
            let x: Vec<i32> = (0..c).map(|_| (center + sigma * r.gen_range(-1.7..1.7)) as i32).collect();
            let gamma: Vec<i16> = (0..c).map(|_| r.gen_range(64..=8192)).collect();
            let beta: Vec<i16> = (0..c).map(|_| r.gen_range(-40..=40)).collect();
            let p = NormParams { gamma: gamma.clone(), beta: beta.clone() };
            let got = ref_postprocess(&x, &[PostOp::LayerNorm(p)]).unwrap();
            let mu = x.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = x.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / c as f64;
            for i in 0..c {
                let want = if var == 0.0 {
                    beta[i] as f64
                } else {
                    (x[i] as f64 - mu) / var.sqrt() * gamma[i] as f64 / 256.0 + beta[i] as f64
                };
                let want = want.round().clamp(-128.0, 127.0);
                worst = worst.max((got[i] as f64 - want).abs());
            }
        }
        assert!(worst <= 1.0, "worst {worst}");
    }

    #[test]
    fn softmax_within_one_lsb_of_float() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let c = r.gen_range(1..=257usize);
            let mult = r.gen_range(1..=4096);
            let shift = r.gen_range(0..=12u8);
            let span = r.gen_range(1..=100_000);
            let x: Vec<i32> = (0..c).map(|_| r.gen_range(-span..=span)).collect();
            let got = ref_postprocess(&x, &[PostOp::Softmax(SoftmaxParams { mult, shift })]).unwrap();
            let m = *x.iter().max().unwrap() as f64;
            let z: Vec<f64> = x.iter().map(|&v| (v as f64 - m) * mult as f64 / 2f64.powi(shift as i32) / 256.0).collect();
            let s: f64 = z.iter().map(|&z| 2f64.powf(z)).sum();
            for i in 0..c {
                let want = (127.0 * 2f64.powf(z[i]) / s).round();
                worst = worst.max((got[i] as f64 - want).abs());
            }
        }
        assert!(worst <= 1.0, "worst {worst}");
    }

    #[test]
    fn gelu_gate_limits() {
        let g = [PostOp::Activation(ActKind::Gelu)];
        assert_eq!(ref_postprocess(&[1000, -1000, 0], &g).unwrap(), vec![1000, 0, 0]);
        let out = ref_postprocess(&[-20, 20], &g).unwrap();
        assert!(out[0] < 0 && out[0] > -20 && out[1] > 0 && out[1] < 20);
    }

    #[test]
    fn layer_chain_narrows() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let l = LayerSpec::pw("pw", 8, 8, 2, 2).with_post_ops(vec![PostOp::Requantize(Requant { mult: 3, shift: 5 })]);
        let x = QTensor::from_i8(l.input_shape(), &rand_i8(&mut r, 32)).unwrap();
        let w = rand_i8(&mut r, 64);
        let o = ref_layer(&l, &[&x], Some(&w)).unwrap();
        assert_eq!(o.bits, 8);
        let acc = ref_pwconv(&x, &w, &l).unwrap();
        for (a, q) in acc.data.iter().zip(&o.data) {
            assert_eq!(*q as i64, ((*a as i64 * 3 + if *a >= 0 { 16 } else { -16 }) / 32).clamp(-128, 127));
        }
    }
}
