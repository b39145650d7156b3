//! Post-processing engine datapath: line buffer, statistics unit and
//! requantizer, operating on one channel vector at a time.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::workload::{ActKind, EXP2_NEG_Q16, RSQRT_SEED_Q16};

use super::isa::PpOp;

/// Round-half-away arithmetic shift right.
fn rsh(x: i128, k: u32) -> i128 {
    if k == 0 {
        x
    } else if x >= 0 {
        (x + (1i128 << (k - 1))) >> k
    } else {
        -((-x + (1i128 << (k - 1))) >> k)
    }
}

fn clamp8(x: i128) -> i128 {
    if x > 127 {
        127
    } else if x < -128 {
        -128
    } else {
        x
    }
}

/// Parameters the engine fetches for a LayerNorm pass.
pub struct NormTable<'a> {
    /// `len` Q8 gammas followed by `len` betas.
    pub raw: &'a [i16],
}

fn normalize(lb: &mut [i128], tab: &NormTable<'_>) {
    let n = lb.len();
    let mut total = 0i128;
    for &v in lb.iter() {
        total += v;
    }
    let mut energy = 0i128;
    for v in lb.iter_mut() {
        *v = *v * n as i128 - total;
        energy += *v * *v;
    }
    // Rounded mean square of the scaled deviations.
    let ms = (energy * 2 + n as i128) / (2 * n as i128);
    let (gamma, beta) = tab.raw.split_at(n);
    if ms == 0 {
        for (i, v) in lb.iter_mut().enumerate() {
            *v = clamp8(beta[i] as i128);
        }
        return;
    }
    // Normalize ms to m * 4^e with m in [2^28, 2^30).
    let mut m = ms as u128;
    let mut e: i32 = 0;
    while m >= 1 << 30 {
        m >>= 2;
        e += 1;
    }
    while m < 1 << 28 {
        m <<= 2;
        e -= 1;
    }
    let mut y = RSQRT_SEED_Q16[(m >> 26) as usize - 4] as u128;
    for _ in 0..2 {
        let sq = (m * y * y) >> 30;
        let three = 3u128 << 32;
        y = (y * (three - if sq > three { three } else { sq })) >> 33;
    }
    let sh = (31 + e) as u32 + 8;
    for (i, v) in lb.iter_mut().enumerate() {
        *v = clamp8(rsh(*v * y as i128 * gamma[i] as i128, sh) + beta[i] as i128);
    }
}

fn exp_normalize(lb: &mut [i128], mult: i32, shift: u8) {
    let top = lb.iter().copied().fold(i128::MIN, i128::max);
    let mut ex: Vec<u64> = Vec::with_capacity(lb.len());
    let mut acc = 0u64;
    for &v in lb.iter() {
        let z = -rsh((v - top) * mult as i128, shift as u32);
        let int = z >> 8;
        let frac = (z & 0xff) as u32;
        let a = EXP2_NEG_Q16[(frac / 16) as usize];
        let b = EXP2_NEG_Q16[(frac / 16) as usize + 1];
        let mant = (a - ((a - b) * (frac % 16) + 8) / 16) as u64;
        let p = match int {
            0 => mant,
            1..=20 => (mant + (1u64 << (int - 1))) >> int,
            _ => 0,
        };
        acc += p;
        ex.push(p);
    }
    let bits = 64 - acc.leading_zeros();
    let recip = ((1u128 << (bits + 15)) + (acc as u128 >> 1)) / acc as u128;
    for (v, p) in lb.iter_mut().zip(ex) {
        *v = ((p as u128 * recip * 127 + (1u128 << (bits + 14))) >> (bits + 15)) as i128;
    }
}

/// Run the op chain over one vector. `norm` supplies LayerNorm tables in chain order.
pub fn postprocess(vector: &[i32], ops: &[PpOp], norm: &[NormTable<'_>]) -> Result<Vec<i32>> {
    if vector.is_empty() {
        return Err(Error::PostProc("empty channel vector".into()));
    }
    let mut lb: Vec<i128> = vector.iter().map(|&v| v as i128).collect();
    let mut tables = norm.iter();
    for op in ops {
        match *op {
            PpOp::Requant { mult, shift } => {
                if shift > 31 {
                    return Err(Error::PostProc(format!("requantize shift {shift} outside 0..=31")));
                }
                for v in lb.iter_mut() {
                    *v = clamp8(rsh(*v * mult as i128, shift as u32));
                }
            }
            PpOp::Act(ActKind::Relu) => {
                for v in lb.iter_mut() {
                    if *v < 0 {
                        *v = 0;
                    }
                }
            }
            PpOp::Act(ActKind::Gelu) => {
                for v in lb.iter_mut() {
                    let g = (9 * *v + 512).clamp(0, 1024);
                    *v = rsh(*v * g, 10);
                }
            }
            PpOp::LayerNorm { .. } => {
                let t = tables.next().ok_or_else(|| Error::PostProc("missing layernorm parameters".into()))?;
                if t.raw.len() != 2 * lb.len() {
                    return Err(Error::PostProc(format!("layernorm table for {} channels, vector has {}", t.raw.len() / 2, lb.len())));
                }
                normalize(&mut lb, t);
            }
            PpOp::Softmax { mult, shift } => {
                if shift > 31 || mult < 0 {
                    return Err(Error::PostProc(format!("softmax scale {mult}>>{shift} out of range")));
                }
                exp_normalize(&mut lb, mult, shift);
            }
        }
    }
    Ok(lb.into_iter().map(|v| v.clamp(i32::MIN as i128, i32::MAX as i128) as i32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::golden::ref_postprocess;
    use crate::workload::{NormParams, PostOp, Requant, SoftmaxParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_reference_on_random_chains() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3000 {
            let n = r.gen_range(1..=300);
            let x: Vec<i32> = (0..n).map(|_| r.gen_range(-(1 << 24)..(1 << 24)) >> r.gen_range(0..24)).collect();
            let gamma: Vec<i16> = (0..n).map(|_| r.gen_range(-4096..4096)).collect();
            let beta: Vec<i16> = (0..n).map(|_| r.gen_range(-200..200)).collect();
            let raw: Vec<i16> = gamma.iter().chain(&beta).copied().collect();
            let (mult, shift) = (r.gen_range(0..5000), r.gen_range(0..20u8));
            let pick = r.gen_range(0..4);
            let (ops, refs) = match pick {
                0 => (vec![PpOp::Requant { mult, shift }], vec![PostOp::Requantize(Requant { mult, shift })]),
                1 => (
                    vec![PpOp::Act(ActKind::Gelu), PpOp::Requant { mult, shift }],
                    vec![PostOp::Activation(ActKind::Gelu), PostOp::Requantize(Requant { mult, shift })],
                ),
                2 => (vec![PpOp::LayerNorm { params: 0 }], vec![PostOp::LayerNorm(NormParams { gamma, beta })]),
                _ => (vec![PpOp::Softmax { mult, shift }], vec![PostOp::Softmax(SoftmaxParams { mult, shift })]),
            };
            let got = postprocess(&x, &ops, &[NormTable { raw: &raw }]).unwrap();
            assert_eq!(got, ref_postprocess(&x, &refs).unwrap(), "chain {pick} on {x:?}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(postprocess(&[], &[], &[]).is_err());
        assert!(postprocess(&[1], &[PpOp::Requant { mult: 1, shift: 40 }], &[]).is_err());
        assert!(postprocess(&[1], &[PpOp::LayerNorm { params: 0 }], &[]).is_err());
    }
}
