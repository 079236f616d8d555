//! Fixed ternary matrices shared by every layer, spectral radius estimation
//! and a leaky-integrator echo state cell built from the same pieces.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fused_kernel::ReservoirTerm;
use crate::layers::Variant;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::ternary::{quantize_absmean, ternary_matmul, TernaryMatrix};

/// Fraction of zero entries in the recurrent reservoir matrix.
pub const DEFAULT_SPARSITY: f64 = 0.85;

/// Default relative tolerance of [`spectral_radius`].
pub const SPECTRAL_TOL: f64 = 1e-3;
pub const SPECTRAL_MAX_ITER: usize = 400_000;

/// Anything below this is treated as a nilpotent (unusable) reservoir.
const MIN_RADIUS: f64 = 1e-9;
const MAX_REDRAWS: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReservoirSpec {
    pub dim: usize,
    pub sparsity: f64,
    pub seed: u64,
}

/// SplitMix64 finalizer; derives independent sub-seeds from one config seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Each entry is 0 with probability `sparsity`, otherwise ±1 with equal odds; β = 1.
pub fn gen_sparse_ternary(spec: &ReservoirSpec) -> Result<TernaryMatrix> {
    if spec.dim == 0 {
        return Err(Error::InvalidArgument("reservoir dimension must be ≥ 1".into()));
    }
    if !(0.0..1.0).contains(&spec.sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity must lie in [0, 1), got {} (a fully sparse reservoir has no spectral radius to scale by)",
            spec.sparsity
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let trits = (0..spec.dim * spec.dim)
        .map(|_| {
            if rng.random_bool(spec.sparsity) {
                0
            } else if rng.random_bool(0.5) {
                1
            } else {
                -1
            }
        })
        .collect();
    TernaryMatrix::from_trits(spec.dim, spec.dim, trits, 1.0)
}

/// Xavier-uniform d×d sample, absmean-quantized. Used for the fixed gate matrices.
pub fn gen_fixed_dense_ternary(dim: usize, seed: u64) -> Result<TernaryMatrix> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (2 * dim) as f64).sqrt();
    let data = (0..dim * dim).map(|_| rng.random_range(-bound..bound)).collect();
    quantize_absmean(&Tensor::<f64>::new(vec![dim, dim], data)?)
}

fn matvec(t: &TernaryMatrix, v: &[f64], out: &mut [f64]) {
    // column-vector convention: out = W v
    let d = t.cols();
    let s = t.scale();
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (&x, &w) in v.iter().zip(&t.trits()[r * d..(r + 1) * d]) {
            if w > 0 {
                acc += x;
            } else if w < 0 {
                acc -= x;
            }
        }
        *o = acc * s;
    }
}

/// Largest eigenvalue magnitude of a square ternary matrix.
///
/// Gelfand's formula `ρ = lim ‖Wᵏv‖^{1/k}`, evaluated on the log scale over
/// the second half of the iterate history so the start-up transient drops
/// out, with renormalization every step. Three seeded random starts; the
/// largest estimate wins. Returns 0 for nilpotent matrices.
pub fn spectral_radius(t: &TernaryMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    if t.rows() != t.cols() {
        return Err(Error::InvalidArgument("spectral radius of a non-square matrix".into()));
    }
    if t.nonzero_count() == 0 {
        return Err(Error::InvalidArgument("spectral radius of an all-zero matrix".into()));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let d = t.rows();
    let mut best = 0.0f64;
    for restart in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x5EED_5EED, restart));
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut w = vec![0.0; d];
        // log_norms[k] = ln ‖W^k v₀‖ (with ‖v₀‖ = 1)
        let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n0);
        let mut log_norms = vec![0.0f64];
        let check_every = 128;
        let mut history: Vec<f64> = Vec::new();
        let mut estimate = None;
        for k in 1..=max_iter {
            matvec(t, &v, &mut w);
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                estimate = Some(0.0);
                break;
            }
            log_norms.push(log_norms[k - 1] + n.ln());
            for (a, b) in v.iter_mut().zip(&w) {
                *a = b / n;
            }
            if k % check_every == 0 && k >= 4 * check_every {
                let half = k / 2;
                let rho = ((log_norms[k] - log_norms[half]) / (k - half) as f64).exp();
                let quarter = k / 4;
                let rho_half = ((log_norms[half] - log_norms[quarter]) / (half - quarter) as f64).exp();
                history.push(rho);
                // windows [k/4, k/2] and [k/2, k] agree and the last few checks are steady
                let steady = history.len() >= 4
                    && history[history.len() - 4..]
                        .iter()
                        .all(|h| (h - rho).abs() <= 0.05 * tol * rho);
                if steady && (rho - rho_half).abs() <= 0.25 * tol * rho {
                    estimate = Some(rho);
                    break;
                }
            }
        }
        match estimate {
            Some(e) => best = best.max(e),
            None => {
                return Err(Error::NoConvergence {
                    iterations: max_iter,
                    last_estimate: history.last().copied().unwrap_or(0.0),
                })
            }
        }
    }
    Ok(best)
}

/// The fixed matrices shared by all layers: W̄_c and W̄_r for rc, plus W̄_f
/// and W̄_g for grc. Exactly one instance of each regardless of depth.
#[derive(Clone, Debug)]
pub struct SharedFixed {
    pub w_c: Arc<TernaryMatrix>,
    pub w_r: Arc<TernaryMatrix>,
    pub w_f: Option<Arc<TernaryMatrix>>,
    pub w_g: Option<Arc<TernaryMatrix>>,
    lambda_max: f64,
}

impl SharedFixed {
    /// Draw the fixed matrices for `variant` from `seed`. A reservoir whose
    /// spectral radius is (numerically) zero is redrawn from the next seed.
    pub fn generate(variant: Variant, dim: usize, sparsity: f64, seed: u64) -> Result<Self> {
        if variant == Variant::Base {
            return Err(Error::InvalidArgument(
                "the base variant has no shared fixed matrices".into(),
            ));
        }
        let w_c = Arc::new(gen_fixed_dense_ternary(dim, derive_seed(seed, 1))?);
        let (w_f, w_g) = if variant == Variant::Grc {
            (
                Some(Arc::new(gen_fixed_dense_ternary(dim, derive_seed(seed, 2))?)),
                Some(Arc::new(gen_fixed_dense_ternary(dim, derive_seed(seed, 3))?)),
            )
        } else {
            (None, None)
        };
        for draw in 0..MAX_REDRAWS {
            let w_r = gen_sparse_ternary(&ReservoirSpec {
                dim,
                sparsity,
                seed: derive_seed(seed, 100 + draw),
            })?;
            if w_r.nonzero_count() == 0 {
                continue;
            }
            let lambda = spectral_radius(&w_r, SPECTRAL_TOL, SPECTRAL_MAX_ITER)?;
            if lambda > MIN_RADIUS {
                return Self::from_parts(w_c, Arc::new(w_r), w_f, w_g, lambda);
            }
        }
        Err(Error::InvalidArgument(format!(
            "no reservoir with nonzero spectral radius after {MAX_REDRAWS} draws (d={dim}, sparsity={sparsity})"
        )))
    }

    pub fn from_parts(
        w_c: Arc<TernaryMatrix>,
        w_r: Arc<TernaryMatrix>,
        w_f: Option<Arc<TernaryMatrix>>,
        w_g: Option<Arc<TernaryMatrix>>,
        lambda_max: f64,
    ) -> Result<Self> {
        let d = w_c.rows();
        let square = |m: &TernaryMatrix| m.rows() == d && m.cols() == d;
        if !square(&w_c)
            || !square(&w_r)
            || w_f.as_deref().is_some_and(|m| !square(m))
            || w_g.as_deref().is_some_and(|m| !square(m))
        {
            return Err(Error::InvalidArgument("shared fixed matrices must all be d×d".into()));
        }
        if w_f.is_some() != w_g.is_some() {
            return Err(Error::InvalidArgument("W̄_f and W̄_g are fixed together".into()));
        }
        if !(lambda_max > 0.0 && lambda_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "λ_max must be positive, got {lambda_max}"
            )));
        }
        Ok(Self {
            w_c,
            w_r,
            w_f,
            w_g,
            lambda_max,
        })
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn variant(&self) -> Variant {
        if self.w_f.is_some() {
            Variant::Grc
        } else {
            Variant::Rc
        }
    }

    pub fn reservoir(&self) -> ReservoirTerm {
        ReservoirTerm::new(self.w_r.clone(), self.lambda_max).expect("validated at construction")
    }

    /// All stored matrices with their checkpoint names.
    pub fn matrices(&self) -> Vec<(&'static str, &Arc<TernaryMatrix>)> {
        let mut out = vec![("w_c", &self.w_c), ("w_r", &self.w_r)];
        if let (Some(f), Some(g)) = (&self.w_f, &self.w_g) {
            out.push(("w_f", f));
            out.push(("w_g", g));
        }
        out
    }
}

/// Parameters of the leaky-integrator echo state cell.
#[derive(Clone, Debug)]
pub struct LiEsnParams<F> {
    pub w_in: Arc<TernaryMatrix>,
    pub w_r: Arc<TernaryMatrix>,
    pub lambda_max: f64,
    /// Target spectral radius after scaling (1 reproduces `W̄_r / λ_max`).
    pub radius: f64,
    pub b_c: Vec<F>,
    pub leak: f64,
    pub w_out: Arc<TernaryMatrix>,
    pub b_out: Vec<F>,
}

/// One step of the ternary LI-ESN:
/// `c = tanh(x ⊛ W̄_c + h ⊛ (radius · W̄_r/λ) + b_c)`, `h' = f h + (1 − f) c`,
/// `o = h' ⊛ W_o + b_o`.
pub fn li_esn_step<F: Real>(x: &[F], h_prev: &[F], p: &LiEsnParams<F>) -> Result<(Vec<F>, Vec<F>)> {
    if p.lambda_max.is_nan() || p.lambda_max <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "λ_max must be positive, got {}",
            p.lambda_max
        )));
    }
    if !(0.0..=1.0).contains(&p.leak) {
        return Err(Error::InvalidArgument(format!(
            "leak must lie in [0, 1], got {}",
            p.leak
        )));
    }
    let d = p.w_r.rows();
    if h_prev.len() != d
        || p.b_c.len() != d
        || p.w_in.cols() != d
        || p.w_out.rows() != d
        || p.b_out.len() != p.w_out.cols()
    {
        return Err(Error::InvalidArgument("LI-ESN shapes are inconsistent".into()));
    }
    let input = ternary_matmul(&Tensor::vector(x.to_vec()), &p.w_in)?;
    let recur = ternary_matmul(&Tensor::vector(h_prev.to_vec()), &p.w_r)?;
    let k = F::lit(p.radius / p.lambda_max);
    let f = F::lit(p.leak);
    let h: Vec<F> = (0..d)
        .map(|j| {
            let c = (input.data()[j] + recur.data()[j] * k + p.b_c[j]).tanh();
            f * h_prev[j] + (F::one() - f) * c
        })
        .collect();
    let o = ternary_matmul(&Tensor::vector(h.clone()), &p.w_out)?;
    let out = o.data().iter().zip(&p.b_out).map(|(&a, &b)| a + b).collect();
    Ok((out, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sparsity_has_no_zeros() {
        let m = gen_sparse_ternary(&ReservoirSpec {
            dim: 20,
            sparsity: 0.0,
            seed: 1,
        })
        .unwrap();
        assert_eq!(m.nonzero_count(), 400);
        assert_eq!(m.scale(), 1.0);
    }

    #[test]
    fn full_sparsity_rejected() {
        let spec = ReservoirSpec {
            dim: 4,
            sparsity: 1.0,
            seed: 0,
        };
        assert!(gen_sparse_ternary(&spec).is_err());
    }

    #[test]
    fn sparse_nonzero_count_within_three_sigma() {
        let m = gen_sparse_ternary(&ReservoirSpec {
            dim: 1000,
            sparsity: 0.85,
            seed: 7,
        })
        .unwrap();
        let n = 1e6;
        let mean = 0.15 * n;
        let sigma = (n * 0.15 * 0.85f64).sqrt();
        assert!((m.nonzero_count() as f64 - mean).abs() <= 3.0 * sigma);
        // sign balance, same 3σ bound on a fair coin over the nonzeros
        let plus = m.trits().iter().filter(|&&t| t == 1).count() as f64;
        let nz = m.nonzero_count() as f64;
        assert!((plus - nz / 2.0).abs() <= 3.0 * (nz * 0.25).sqrt());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ReservoirSpec {
            dim: 32,
            sparsity: 0.85,
            seed: 99,
        };
        assert_eq!(gen_sparse_ternary(&spec).unwrap(), gen_sparse_ternary(&spec).unwrap());
        assert_eq!(
            gen_fixed_dense_ternary(16, 3).unwrap(),
            gen_fixed_dense_ternary(16, 3).unwrap()
        );
    }

    #[test]
    fn dense_fixed_uses_all_three_trits() {
        let m = gen_fixed_dense_ternary(8, 5).unwrap();
        for v in [-1, 0, 1] {
            assert!(m.trits().contains(&v));
        }
        assert!(m.scale() > 0.0);
    }

    #[test]
    fn radius_of_identity_and_permutation() {
        let mut eye = vec![0i8; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1;
        }
        let id = TernaryMatrix::from_trits(4, 4, eye, 1.0).unwrap();
        assert!((spectral_radius(&id, 1e-3, 100_000).unwrap() - 1.0).abs() < 1e-6);

        let mut perm = vec![0i8; 25];
        for (i, j) in [(0, 3), (1, 0), (2, 4), (3, 1), (4, 2)] {
            perm[i * 5 + j] = -1;
        }
        let p = TernaryMatrix::from_trits(5, 5, perm, 1.0).unwrap();
        assert!((spectral_radius(&p, 1e-3, 100_000).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn radius_of_nilpotent_is_zero() {
        // strictly upper triangular
        let m = TernaryMatrix::from_trits(3, 3, vec![0, 1, -1, 0, 0, 1, 0, 0, 0], 1.0).unwrap();
        assert_eq!(spectral_radius(&m, 1e-3, 1000).unwrap(), 0.0);
    }

    #[test]
    fn radius_errors() {
        let z = TernaryMatrix::zeros(3, 3).unwrap();
        assert!(spectral_radius(&z, 1e-3, 10).is_err());
        let m = gen_sparse_ternary(&ReservoirSpec {
            dim: 16,
            sparsity: 0.5,
            seed: 2,
        })
        .unwrap();
        match spectral_radius(&m, 1e-3, 3) {
            Err(Error::NoConvergence { iterations, .. }) => assert_eq!(iterations, 3),
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn shared_fixed_counts() {
        let rc = SharedFixed::generate(Variant::Rc, 8, 0.85, 3).unwrap();
        assert_eq!(rc.matrices().len(), 2);
        assert!(rc.lambda_max() > 0.0);
        let grc = SharedFixed::generate(Variant::Grc, 8, 0.85, 3).unwrap();
        assert_eq!(grc.matrices().len(), 4);
        assert!(SharedFixed::generate(Variant::Base, 8, 0.85, 3).is_err());
        // one-dimensional reservoirs are redrawn until the single entry is nonzero
        let tiny = SharedFixed::generate(Variant::Rc, 1, 0.85, 0).unwrap();
        assert!((tiny.lambda_max() - 1.0).abs() < 1e-9);
    }

    fn identity(d: usize) -> Arc<TernaryMatrix> {
        let mut t = vec![0i8; d * d];
        for i in 0..d {
            t[i * d + i] = 1;
        }
        Arc::new(TernaryMatrix::from_trits(d, d, t, 1.0).unwrap())
    }

    #[test]
    fn li_esn_origin_is_fixed_point() {
        let p = LiEsnParams::<f64> {
            w_in: identity(3),
            w_r: identity(3),
            lambda_max: 1.0,
            radius: 1.0,
            b_c: vec![0.0; 3],
            leak: 0.3,
            w_out: identity(3),
            b_out: vec![0.5, -0.5, 2.0],
        };
        let (o, h) = li_esn_step(&[0.0; 3], &[0.0; 3], &p).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(o, vec![0.5, -0.5, 2.0]);
    }

    #[test]
    fn li_esn_full_leak_keeps_state() {
        let p = LiEsnParams::<f64> {
            w_in: identity(2),
            w_r: identity(2),
            lambda_max: 1.0,
            radius: 1.0,
            b_c: vec![0.3, 0.1],
            leak: 1.0,
            w_out: identity(2),
            b_out: vec![0.0; 2],
        };
        let (_, h) = li_esn_step(&[5.0, -3.0], &[0.25, -0.75], &p).unwrap();
        assert_eq!(h, vec![0.25, -0.75]);
    }

    #[test]
    #[allow(clippy::neg_multiply)]
    fn li_esn_scalar_oracle() {
        let w_in = Arc::new(TernaryMatrix::from_trits(2, 2, vec![1, -1, 0, 1], 0.5).unwrap());
        let w_r = Arc::new(TernaryMatrix::from_trits(2, 2, vec![0, 1, -1, 1], 1.0).unwrap());
        let w_out = Arc::new(TernaryMatrix::from_trits(2, 2, vec![-1, 0, 1, 1], 2.0).unwrap());
        let p = LiEsnParams::<f64> {
            w_in,
            w_r,
            lambda_max: 1.5,
            radius: 1.0,
            b_c: vec![0.1, -0.2],
            leak: 0.25,
            w_out,
            b_out: vec![0.05, 0.0],
        };
        let (x, hp) = ([0.8, -0.4], [0.3, 0.6]);
        // row-vector convention: (x ⊛ W)_j = Σ_i x_i W_ij
        let u0 = 0.5 * (x[0] * 1.0 + x[1] * 0.0);
        let u1 = 0.5 * (x[0] * -1.0 + x[1] * 1.0);
        let r0 = (hp[0] * 0.0 + hp[1] * -1.0) / 1.5;
        let r1 = (hp[0] * 1.0 + hp[1] * 1.0) / 1.5;
        let c0 = (u0 + r0 + 0.1f64).tanh();
        let c1 = (u1 + r1 - 0.2f64).tanh();
        let h0 = 0.25 * hp[0] + 0.75 * c0;
        let h1 = 0.25 * hp[1] + 0.75 * c1;
        let o0 = 2.0 * (h0 * -1.0 + h1 * 1.0) + 0.05;
        let o1 = 2.0 * (h0 * 0.0 + h1 * 1.0);
        let (o, h) = li_esn_step(&x, &hp, &p).unwrap();
        assert!((h[0] - h0).abs() < 1e-12 && (h[1] - h1).abs() < 1e-12);
        assert!((o[0] - o0).abs() < 1e-12 && (o[1] - o1).abs() < 1e-12);
    }

    #[test]
    fn li_esn_rejects_bad_lambda() {
        let p = LiEsnParams::<f64> {
            w_in: identity(1),
            w_r: identity(1),
            lambda_max: 0.0,
            radius: 1.0,
            b_c: vec![0.0],
            leak: 0.5,
            w_out: identity(1),
            b_out: vec![0.0],
        };
        assert!(li_esn_step(&[0.0], &[0.0], &p).is_err());
    }
}
