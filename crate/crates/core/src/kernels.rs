//! Dot product with a fixed summation order.
//!
//! Lane `l` accumulates elements `l, l + 32, l + 64, ...`; the lanes are then
//! folded pairwise and the tail is added last. The AVX path performs the same
//! per-lane operations in the same order and never fuses multiply-add, so both
//! paths return bit-identical results.

const LANES: usize = 32;

type Block = [f32; 8];

#[inline(always)]
fn mul_add(acc: &mut Block, x: &[f32], y: &[f32]) {
    let x: &Block = x.try_into().unwrap();
    let y: &Block = y.try_into().unwrap();
    for l in 0..8 {
        acc[l] += x[l] * y[l];
    }
}

#[inline(always)]
fn add(acc: &mut Block, other: &Block) {
    for l in 0..8 {
        acc[l] += other[l];
    }
}

#[inline(always)]
fn fold(acc: [Block; 4]) -> f32 {
    // pairwise: 32 -> 16 -> 8 -> 4 -> 2 -> 1
    let [mut a0, mut a1, a2, a3] = acc;
    add(&mut a0, &a2);
    add(&mut a1, &a3);
    add(&mut a0, &a1);
    let mut h = [a0[0] + a0[4], a0[1] + a0[5], a0[2] + a0[6], a0[3] + a0[7]];
    h[0] += h[2];
    h[1] += h[3];
    h[0] + h[1]
}

#[inline(always)]
fn tail(a: &[f32], b: &[f32]) -> f32 {
    let mut t = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        t += x * y;
    }
    t
}

fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    // lane r * 8 + l of the 32 is acc[r][l]
    let mut acc = [[0.0f32; 8]; 4];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        mul_add(&mut acc[0], &x[0..8], &y[0..8]);
        mul_add(&mut acc[1], &x[8..16], &y[8..16]);
        mul_add(&mut acc[2], &x[16..24], &y[16..24]);
        mul_add(&mut acc[3], &x[24..32], &y[24..32]);
    }
    fold(acc) + tail(ta, tb)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn dot_avx(a: &[f32], b: &[f32]) -> f32 {
    use std::arch::x86_64::*;

    let n = a.len().min(b.len()) / LANES * LANES;
    let (pa, pb) = (a.as_ptr(), b.as_ptr());
    let mut acc = [_mm256_setzero_ps(); 4];
    let mut i = 0;
    while i < n {
        for (r, lane) in acc.iter_mut().enumerate() {
            // separate multiply and add, matching the scalar path bit for bit
            let prod = _mm256_mul_ps(
                _mm256_loadu_ps(pa.add(i + 8 * r)),
                _mm256_loadu_ps(pb.add(i + 8 * r)),
            );
            *lane = _mm256_add_ps(*lane, prod);
        }
        i += LANES;
    }
    let mut blocks = [[0.0f32; 8]; 4];
    for (out, lane) in blocks.iter_mut().zip(acc) {
        _mm256_storeu_ps(out.as_mut_ptr(), lane);
    }
    fold(blocks) + tail(&a[n..], &b[n..])
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked just above.
        return unsafe { dot_avx(a, b) };
    }
    dot_lanes(a, b)
}
