//! Random inputs for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcmf::fused_kernel::{RecurrentInput, ReservoirTerm};
use rcmf::reservoir::SharedFixed;
use rcmf::{Tensor, TernaryMatrix, Variant};

/// `rows × cols` trits at the given density, with a positive scale.
pub fn random_ternary(rows: usize, cols: usize, density: f64, seed: u64) -> TernaryMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trits = (0..rows * cols)
        .map(|_| match rng.random_bool(density) {
            false => 0,
            true if rng.random_bool(0.5) => 1,
            true => -1,
        })
        .collect();
    TernaryMatrix::from_trits(rows, cols, trits, 0.5).expect("valid shape")
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("valid shape")
}

/// Owned buffers behind a [`RecurrentInput`].
pub struct RecurrentCase {
    pub f_pre: Vec<f32>,
    pub c_pre: Vec<f32>,
    pub gamma: Vec<f32>,
    pub h0: Vec<f32>,
    pub reservoir: Option<ReservoirTerm>,
}

impl RecurrentCase {
    pub fn new(dim: usize, steps: usize, variant: Variant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let (f_pre, c_pre) = (draw(steps * dim), draw(steps * dim));
        let gamma = draw(dim).into_iter().map(|g| 0.5 + 0.2 * g).collect();
        let h0 = vec![0.0; dim];
        let reservoir = match variant {
            Variant::Base => None,
            v => Some(
                SharedFixed::generate(v, dim, 0.85, seed)
                    .expect("reservoir")
                    .reservoir(),
            ),
        };
        Self {
            f_pre,
            c_pre,
            gamma,
            h0,
            reservoir,
        }
    }

    pub fn input(&self) -> RecurrentInput<'_, f32> {
        RecurrentInput {
            f_pre: &self.f_pre,
            c_pre: &self.c_pre,
            gamma: &self.gamma,
            h0: &self.h0,
            reservoir: self.reservoir.as_ref(),
        }
    }
}
