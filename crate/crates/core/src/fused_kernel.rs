//! The MLGRU state recurrence as a single fused traversal, alongside a
//! two-pass reference that materializes the gate buffers between passes.
//!
//! Gate projections (`x ⊛ W_f + b_f`, `x ⊛ W_c + b_c`) are computed outside
//! both kernels. Per timestep the kernels evaluate
//!
//! ```text
//! f  = σ(f_pre)
//! f' = γ + (1 − γ) ⊙ f
//! c  = τ(c_pre)                       (base)
//! c  = τ(c_pre + h_{t−1} ⊛ W_r / λ)   (with a reservoir)
//! h  = f' ⊙ h_{t−1} + (1 − f') ⊙ c
//! ```
//!
//! Traffic is counted in size-d vector buffer transfers. Reads of the
//! reservoir matrix and λ are not counted; they are not per-timestep state.

use std::ops::{Add, AddAssign};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, silu, silu_grad};
use crate::error::{Error, Result};
use crate::layers::Variant;
use crate::real::Real;
use crate::reservoir::{gen_sparse_ternary, spectral_radius, ReservoirSpec};
use crate::ternary::{ternary_row_into, TernaryMatrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrafficCounter {
    pub reads: u64,
    pub writes: u64,
    pub kernel_launches: u64,
}

impl TrafficCounter {
    pub fn total(&self) -> u64 {
        self.reads + self.writes
    }
}

impl AddAssign for TrafficCounter {
    fn add_assign(&mut self, o: Self) {
        self.reads += o.reads;
        self.writes += o.writes;
        self.kernel_launches += o.kernel_launches;
    }
}

impl Add for TrafficCounter {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

/// `h ⊛ W_r / λ` with a fixed ternary reservoir.
#[derive(Clone, Debug)]
pub struct ReservoirTerm {
    matrix: Arc<TernaryMatrix>,
    lambda_max: f64,
}

impl ReservoirTerm {
    pub fn new(matrix: Arc<TernaryMatrix>, lambda_max: f64) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::InvalidArgument("reservoir matrix must be square".into()));
        }
        if !(lambda_max > 0.0 && lambda_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reservoir scaling needs λ_max > 0, got {lambda_max}"
            )));
        }
        Ok(Self { matrix, lambda_max })
    }

    pub fn matrix(&self) -> &Arc<TernaryMatrix> {
        &self.matrix
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// Overall multiplier applied to the raw trit sums.
    pub fn coefficient(&self) -> f64 {
        self.matrix.scale() / self.lambda_max
    }

    /// `out = h ⊛ W_r / λ`.
    pub fn apply<F: Real>(&self, h: &[F], out: &mut [F]) {
        out.iter_mut().for_each(|v| *v = F::zero());
        ternary_row_into(h, &self.matrix, out);
        let k = F::lit(self.coefficient());
        out.iter_mut().for_each(|v| *v = *v * k);
    }

    /// `out = g ⊛ (W_r / λ)ᵀ`, the adjoint of [`apply`](Self::apply).
    pub fn apply_transposed<F: Real>(&self, g: &[F], out: &mut [F]) {
        let d = self.dim();
        let k = F::lit(self.coefficient());
        let trits = self.matrix.trits();
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = F::zero();
            for (&gv, &t) in g.iter().zip(&trits[r * d..(r + 1) * d]) {
                if t > 0 {
                    s = s + gv;
                } else if t < 0 {
                    s = s - gv;
                }
            }
            *o = s * k;
        }
    }
}

/// One sequence worth of pre-projected gate inputs (T×d, row-major).
pub struct RecurrentInput<'a, F> {
    pub f_pre: &'a [F],
    pub c_pre: &'a [F],
    pub gamma: &'a [F],
    pub h0: &'a [F],
    pub reservoir: Option<&'a ReservoirTerm>,
}

impl<F: Real> RecurrentInput<'_, F> {
    fn dims(&self) -> Result<(usize, usize)> {
        let d = self.gamma.len();
        if d == 0 || self.h0.len() != d || self.f_pre.len() != self.c_pre.len() || !self.f_pre.len().is_multiple_of(d) {
            return Err(Error::InvalidArgument(format!(
                "recurrent input lengths f={} c={} γ={} h0={} are inconsistent",
                self.f_pre.len(),
                self.c_pre.len(),
                d,
                self.h0.len()
            )));
        }
        if let Some(r) = self.reservoir {
            if r.dim() != d {
                return Err(Error::InvalidArgument(format!(
                    "reservoir is {}-dimensional, state is {d}",
                    r.dim()
                )));
            }
        }
        Ok((self.f_pre.len() / d, d))
    }
}

#[inline]
fn state_update<F: Real>(gamma: F, f: F, c: F, h_prev: F) -> F {
    let fl = gamma + (F::one() - gamma) * f;
    fl * h_prev + (F::one() - fl) * c
}

/// Single traversal; f_t and c_t never leave registers.
pub fn fused_recurrent<F: Real>(input: &RecurrentInput<F>) -> Result<(Vec<F>, TrafficCounter)> {
    let (steps, d) = input.dims()?;
    let mut counter = TrafficCounter {
        kernel_launches: 1,
        // γ and h0 are loaded once per launch
        reads: 2,
        writes: 0,
    };
    let mut h_seq = vec![F::zero(); steps * d];
    let mut h_prev = input.h0.to_vec();
    let mut res = vec![F::zero(); d];
    for t in 0..steps {
        let fp = &input.f_pre[t * d..(t + 1) * d];
        let cp = &input.c_pre[t * d..(t + 1) * d];
        counter.reads += 2;
        let h = &mut h_seq[t * d..(t + 1) * d];
        match input.reservoir {
            Some(r) => {
                r.apply(&h_prev, &mut res);
                for j in 0..d {
                    let c = silu(cp[j] + res[j]);
                    h[j] = state_update(input.gamma[j], sigmoid(fp[j]), c, h_prev[j]);
                }
            }
            None => {
                for j in 0..d {
                    h[j] = state_update(input.gamma[j], sigmoid(fp[j]), silu(cp[j]), h_prev[j]);
                }
            }
        }
        counter.writes += 1;
        h_prev.copy_from_slice(h);
    }
    Ok((h_seq, counter))
}

/// Two passes: the first writes f_t and c_t (or the non-recurrent part of
/// c_t when a reservoir is present) for every t, the second reads them back.
pub fn unfused_recurrent<F: Real>(input: &RecurrentInput<F>) -> Result<(Vec<F>, TrafficCounter)> {
    let (steps, d) = input.dims()?;
    let mut counter = TrafficCounter::default();

    // pass 1: gate activations
    counter.kernel_launches += 1;
    let mut f_buf = vec![F::zero(); steps * d];
    let mut c_buf = vec![F::zero(); steps * d];
    for t in 0..steps {
        let s = t * d..(t + 1) * d;
        counter.reads += 2;
        for ((f, c), (&fp, &cp)) in f_buf[s.clone()]
            .iter_mut()
            .zip(&mut c_buf[s.clone()])
            .zip(input.f_pre[s.clone()].iter().zip(&input.c_pre[s]))
        {
            *f = sigmoid(fp);
            *c = if input.reservoir.is_some() { cp } else { silu(cp) };
        }
        counter.writes += 2;
    }

    // pass 2: lower bound and state update
    counter.kernel_launches += 1;
    counter.reads += 2;
    let mut h_seq = vec![F::zero(); steps * d];
    let mut h_prev = input.h0.to_vec();
    let mut res = vec![F::zero(); d];
    for t in 0..steps {
        let s = t * d..(t + 1) * d;
        let (fb, cb) = (&f_buf[s.clone()], &c_buf[s.clone()]);
        counter.reads += 2;
        let h = &mut h_seq[s];
        match input.reservoir {
            Some(r) => {
                r.apply(&h_prev, &mut res);
                for j in 0..d {
                    h[j] = state_update(input.gamma[j], fb[j], silu(cb[j] + res[j]), h_prev[j]);
                }
            }
            None => {
                for j in 0..d {
                    h[j] = state_update(input.gamma[j], fb[j], cb[j], h_prev[j]);
                }
            }
        }
        counter.writes += 1;
        h_prev.copy_from_slice(h);
    }
    Ok((h_seq, counter))
}

pub struct RecurrentGrads<F> {
    pub f_pre: Vec<F>,
    pub c_pre: Vec<F>,
    pub gamma: Vec<F>,
    pub h0: Vec<F>,
}

/// Backpropagation through time for one sequence. Gate activations are
/// recomputed from the pre-activations and the stored states.
pub fn recurrent_backward<F: Real>(input: &RecurrentInput<F>, h_seq: &[F], grad_h: &[F]) -> Result<RecurrentGrads<F>> {
    let (steps, d) = input.dims()?;
    if h_seq.len() != steps * d || grad_h.len() != steps * d {
        return Err(Error::InvalidArgument(
            "state/gradient length mismatch in recurrent_backward".into(),
        ));
    }
    let one = F::one();
    let mut gf = vec![F::zero(); steps * d];
    let mut gc = vec![F::zero(); steps * d];
    let mut gg = vec![F::zero(); d];
    let mut carry = vec![F::zero(); d];
    let mut res = vec![F::zero(); d];
    let mut dz = vec![F::zero(); d];
    let mut back = vec![F::zero(); d];
    for t in (0..steps).rev() {
        let h_prev = if t == 0 { input.h0 } else { &h_seq[(t - 1) * d..t * d] };
        let fp = &input.f_pre[t * d..(t + 1) * d];
        let cp = &input.c_pre[t * d..(t + 1) * d];
        if let Some(r) = input.reservoir {
            r.apply(h_prev, &mut res);
        }
        for j in 0..d {
            let dh = grad_h[t * d + j] + carry[j];
            let f = sigmoid(fp[j]);
            let gamma = input.gamma[j];
            let fl = gamma + (one - gamma) * f;
            let z = if input.reservoir.is_some() {
                cp[j] + res[j]
            } else {
                cp[j]
            };
            let c = silu(z);
            let dfl = dh * (h_prev[j] - c);
            let dc = dh * (one - fl);
            carry[j] = dh * fl;
            dz[j] = dc * silu_grad(z);
            gc[t * d + j] = dz[j];
            gf[t * d + j] = dfl * (one - gamma) * f * (one - f);
            gg[j] = gg[j] + dfl * (one - f);
        }
        if let Some(r) = input.reservoir {
            r.apply_transposed(&dz, &mut back);
            for j in 0..d {
                carry[j] = carry[j] + back[j];
            }
        }
    }
    Ok(RecurrentGrads {
        f_pre: gf,
        c_pre: gc,
        gamma: gg,
        h0: carry,
    })
}

/// Timing and traffic for one (d, T, variant) configuration.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub dim: usize,
    pub steps: usize,
    pub variant: Variant,
    pub wall_ns_fused: u128,
    pub wall_ns_unfused: u128,
    pub traffic_fused: TrafficCounter,
    pub traffic_unfused: TrafficCounter,
}

pub const BENCH_CSV_HEADER: &str = "d,T,variant,impl,wall_ns_median,reads,writes,launches";

impl BenchReport {
    pub fn csv_rows(&self) -> [String; 2] {
        let row = |name: &str, ns: u128, c: &TrafficCounter| {
            format!(
                "{},{},{},{},{},{},{},{}",
                self.dim, self.steps, self.variant, name, ns, c.reads, c.writes, c.kernel_launches
            )
        };
        [
            row("fused", self.wall_ns_fused, &self.traffic_fused),
            row("unfused", self.wall_ns_unfused, &self.traffic_unfused),
        ]
    }
}

fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

/// Median-of-`repetitions` wall time of both traversals on seeded random
/// inputs, plus their exact traffic counts.
pub fn bench_recurrent(
    dim: usize,
    steps: usize,
    repetitions: usize,
    variant: Variant,
    seed: u64,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 repetitions, got {repetitions}"
        )));
    }
    if dim == 0 || steps == 0 {
        return Err(Error::InvalidArgument("bench needs d ≥ 1 and T ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let f_pre = sample(steps * dim);
    let c_pre = sample(steps * dim);
    let gamma: Vec<f32> = sample(dim).into_iter().map(|g| (g.abs() / 2.5).min(0.99)).collect();
    let h0 = vec![0.0f32; dim];
    let reservoir = match variant {
        Variant::Base => None,
        Variant::Rc | Variant::Grc => {
            let m = gen_sparse_ternary(&ReservoirSpec {
                dim,
                sparsity: 0.85,
                seed,
            })?;
            let lambda = spectral_radius(&m, 1e-3, 200_000).unwrap_or(1.0).max(1e-3);
            Some(ReservoirTerm::new(Arc::new(m), lambda)?)
        }
    };
    let input = RecurrentInput {
        f_pre: &f_pre,
        c_pre: &c_pre,
        gamma: &gamma,
        h0: &h0,
        reservoir: reservoir.as_ref(),
    };
    let mut fused_ns = Vec::with_capacity(repetitions);
    let mut unfused_ns = Vec::with_capacity(repetitions);
    let mut traffic_fused = TrafficCounter::default();
    let mut traffic_unfused = TrafficCounter::default();
    for _ in 0..repetitions {
        let t0 = Instant::now();
        let (h, c) = fused_recurrent(&input)?;
        fused_ns.push(t0.elapsed().as_nanos());
        std::hint::black_box(h);
        traffic_fused = c;

        let t0 = Instant::now();
        let (h, c) = unfused_recurrent(&input)?;
        unfused_ns.push(t0.elapsed().as_nanos());
        std::hint::black_box(h);
        traffic_unfused = c;
    }
    Ok(BenchReport {
        dim,
        steps,
        variant,
        wall_ns_fused: median(fused_ns),
        wall_ns_unfused: median(unfused_ns),
        traffic_fused,
        traffic_unfused,
    })
}
