//! Small integer helpers shared by the cost model and the mapping enumerator.

use alloc::vec::Vec;

#[inline]
pub fn ceil_div(a: u64, b: u64) -> u64 {
    debug_assert!(b > 0);
    a.div_ceil(b)
}

/// Bus beats needed to move `bytes` over a `width_bits` wide channel.
#[inline]
pub fn beats(bytes: u64, width_bits: u32) -> u64 {
    ceil_div(bytes * 8, width_bits as u64)
}

/// Candidate tile sizes for a loop of extent `n`: powers of two below `n`,
/// the exact divisors of `n`, and `n` itself. Sorted ascending, deduplicated.
pub fn tile_candidates(n: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut p = 1u32;
    while p < n {
        out.push(p);
        p <<= 1;
    }
    let mut d = 1u32;
    while d * d <= n {
        if n.is_multiple_of(d) {
            out.push(d);
            out.push(n / d);
        }
        d += 1;
    }
    out.push(n);
    out.sort_unstable();
    out.dedup();
    out
}

/// Tiles of a loop of extent `n` split in steps of `tile`: `(extent, count)` pairs.
pub fn tile_classes(n: u32, tile: u32) -> [(u32, u32); 2] {
    let full = n / tile;
    let rem = n % tile;
    [(tile, full), (rem, if rem > 0 { 1 } else { 0 })]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidates_include_pow2_divisors_and_full() {
        assert_eq!(tile_candidates(12), alloc::vec![1, 2, 3, 4, 6, 8, 12]);
        assert_eq!(tile_candidates(1), alloc::vec![1]);
    }

    #[test]
    fn beats_round_up() {
        assert_eq!(beats(16, 128), 1);
        assert_eq!(beats(17, 128), 2);
        assert_eq!(beats(0, 128), 0);
    }
}
