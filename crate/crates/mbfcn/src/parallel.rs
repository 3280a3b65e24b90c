//! Deterministic data parallelism: work splits over disjoint output chunks,
//! each written by exactly one task with a fixed internal order, so results
//! are bit-identical to the serial path regardless of scheduling.

use rayon::prelude::*;

/// Below this element count the rayon dispatch overhead outweighs the win.
const PAR_THRESHOLD: usize = 1 << 13;

pub fn for_each_plane<E: Send, F>(data: &mut [E], plane: usize, f: F)
where
    F: Fn(usize, &mut [E]) + Sync,
{
    if plane == 0 || data.is_empty() {
        return;
    }
    if data.len() >= PAR_THRESHOLD && data.len() / plane > 1 {
        data.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    } else {
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            f(i, chunk);
        }
    }
}

/// Paired variant for tasks that fill two aligned outputs (e.g. per-channel
/// weight and bias gradients).
pub fn for_each_plane_pair<A: Send, B: Send, F>(
    a: &mut [A],
    a_chunk: usize,
    b: &mut [B],
    b_chunk: usize,
    f: F,
) where
    F: Fn(usize, &mut [A], &mut [B]) + Sync,
{
    if a_chunk == 0 || b_chunk == 0 || a.is_empty() {
        return;
    }
    if a.len() >= PAR_THRESHOLD && a.len() / a_chunk > 1 {
        a.par_chunks_mut(a_chunk)
            .zip(b.par_chunks_mut(b_chunk))
            .enumerate()
            .for_each(|(i, (ca, cb))| f(i, ca, cb));
    } else {
        for (i, (ca, cb)) in a.chunks_mut(a_chunk).zip(b.chunks_mut(b_chunk)).enumerate() {
            f(i, ca, cb);
        }
    }
}
