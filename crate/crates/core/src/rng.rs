//! Seed derivation. Every random stream in a run is keyed by the run seed
//! plus a purpose tag and indices, so results do not depend on the order in
//! which streams are consumed.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    ClientUpdate = 2,
    Integrate = 3,
    Latency = 4,
    Straggler = 5,
    RandomPick = 6,
    FedAvg = 7,
    Data = 8,
    Corrupt = 9,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ stream as u64);
    h = splitmix(h ^ a);
    splitmix(h ^ b.rotate_left(17))
}

pub fn rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        let a = derive(7, Stream::ClientUpdate, 0, 0);
        assert_ne!(a, derive(7, Stream::Integrate, 0, 0));
        assert_ne!(a, derive(7, Stream::ClientUpdate, 1, 0));
        assert_ne!(a, derive(7, Stream::ClientUpdate, 0, 1));
        assert_eq!(a, derive(7, Stream::ClientUpdate, 0, 0));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = rng(1);
        let mut p = permutation(50, &mut r);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
