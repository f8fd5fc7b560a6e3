//! Dense vector kernels shared by the search and matching loops.
//!
//! Products are taken in f32 and summed in f64 over eight independent lanes so
//! the loop vectorizes without reassociating a single accumulator.

const LANES: usize = 8;

/// Dot product of two equal-length slices, accumulated in f64.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let a_chunks = a.chunks_exact(LANES);
    let b_chunks = b.chunks_exact(LANES);
    let a_tail = a_chunks.remainder();
    let b_tail = b_chunks.remainder();
    for (x, y) in a_chunks.zip(b_chunks) {
        for l in 0..LANES {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in a_tail.iter().zip(b_tail) {
        tail += f64::from(*x) * f64::from(*y);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}
