//! Deterministic parallel sampling.
//!
//! Work is cut into fixed-size chunks, each with its own ChaCha stream keyed
//! by `(seed, chunk index)`. Chunks run on the rayon pool and results come
//! back in chunk order, so output does not depend on the number of workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const DEFAULT_CHUNK: usize = 4096;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs `job(rng, start, len)` over `total` items split into chunks and
/// returns the per-chunk results in order.
pub fn par_chunks<T, F>(seed: u64, total: usize, chunk: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize, usize) -> T + Sync,
{
    let chunk = chunk.max(1);
    let n_chunks = total.div_ceil(chunk);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * chunk;
            let len = chunk.min(total - start);
            let mut rng = stream(seed, c as u64);
            job(&mut rng, start, len)
        })
        .collect()
}

/// Derives an independent seed for a named sub-task.
pub fn subseed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the master seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.rotate_left(17);
    for byte in tag.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ (h >> 29)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sum_uniforms(threads: usize) -> Vec<f64> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            par_chunks(42, 10_000, 333, |rng, _, len| {
                (0..len).map(|_| rng.gen::<f64>()).sum::<f64>()
            })
        })
    }

    #[test]
    fn independent_of_worker_count() {
        assert_eq!(sum_uniforms(1), sum_uniforms(4));
    }

    #[test]
    fn chunks_cover_range() {
        let spans = par_chunks(1, 1000, 300, |_, start, len| (start, len));
        assert_eq!(spans, vec![(0, 300), (300, 300), (600, 300), (900, 100)]);
        assert!(par_chunks(1, 0, 300, |_, s, _| s).is_empty());
    }

    #[test]
    fn subseeds_differ() {
        assert_ne!(subseed(7, "tails"), subseed(7, "ld"));
        assert_ne!(subseed(7, "tails"), subseed(8, "tails"));
    }
}
