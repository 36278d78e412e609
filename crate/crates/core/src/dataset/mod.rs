//! Shard storage, clip extraction, source mixing, and deterministic
//! parallel dataset builds.

pub mod clip;
pub mod sampler;
pub mod shard;

pub use clip::{
    extract_clip, extract_triplet_clip, sample_clip_spec, ClipError, ClipSpec, DEFAULT_CLIP_LEN,
    DEFAULT_STRIDES,
};
pub use sampler::{MixedSampler, SamplerError, SourceLabel};
pub use shard::{
    read_shard, scan_shard, shard_bytes, write_shard, RecordSummary, ShardError,
    MAX_INSTRUCTION_BYTES, SHARD_MAGIC, SHARD_VERSION,
};

pub use crate::numkit::derive_seed;

/// Generate `count` records with `workers` threads, each record produced
/// from its index alone. Output order is by index, so the result is
/// byte-identical for any worker count; on failure the lowest failing index
/// wins, keeping errors deterministic too.
pub fn generate_indexed<T, E, F>(
    count: usize,
    workers: usize,
    gen: F,
) -> Result<Vec<T>, (usize, E)>
where
    F: Fn(usize) -> Result<T, E> + Sync,
    T: Send,
    E: Send,
{
    let workers = workers.max(1);
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut slots: Vec<Option<Result<T, E>>> = (0..count).map(|_| None).collect();
    let chunk = count.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slice) in slots.chunks_mut(chunk).enumerate() {
            let gen = &gen;
            scope.spawn(move || {
                for (offset, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(gen(w * chunk + offset));
                }
            });
        }
    });
    let mut out = Vec::with_capacity(count);
    for (index, slot) in slots.into_iter().enumerate() {
        match slot.expect("every slot filled by its worker") {
            Ok(t) => out.push(t),
            Err(e) => return Err((index, e)),
        }
    }
    Ok(out)
}
