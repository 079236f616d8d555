//! Ternary weights: absmean quantization, 2-bit packing, add/sub-only
//! matmul and the straight-through estimator used for quantization-aware
//! training.
//!
//! Packed layout: row-major, four trits per byte, trit `i` of a byte in bits
//! `2i..2i+2` (little-endian within the byte). Codes: `00` → 0, `01` → +1,
//! `10` → −1; `11` is invalid. Unused high bits of the last byte are zero.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Floor for the absmean scale so an all-zero matrix quantizes to zeros.
pub const SCALE_EPS: f64 = 1e-8;

/// Matrices with fewer nonzero trits than this fraction use the index-list kernel.
const SPARSE_DENSITY: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct TernaryMatrix {
    rows: usize,
    cols: usize,
    packed: Vec<u8>,
    scale: f64,
    // decoded views, derived from `packed`
    trits: Vec<i8>,
    sparse_rows: Option<Vec<Vec<(u32, i8)>>>,
}

impl PartialEq for TernaryMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.scale.to_bits() == other.scale.to_bits()
            && self.packed == other.packed
    }
}

fn encode(t: i8) -> u8 {
    match t {
        0 => 0b00,
        1 => 0b01,
        -1 => 0b10,
        _ => unreachable!("validated trit"),
    }
}

pub fn pack_trits(trits: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; trits.len().div_ceil(4)];
    for (i, &t) in trits.iter().enumerate() {
        out[i / 4] |= encode(t) << (2 * (i % 4));
    }
    out
}

/// Inverse of [`pack_trits`]; fails on code `11` or nonzero padding bits.
pub fn unpack_trits(packed: &[u8], count: usize) -> Result<Vec<i8>> {
    if packed.len() != count.div_ceil(4) {
        return Err(Error::InvalidArgument(format!(
            "{} packed bytes cannot hold exactly {count} trits",
            packed.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..packed.len() * 4 {
        let code = (packed[i / 4] >> (2 * (i % 4))) & 0b11;
        if i >= count {
            if code != 0 {
                return Err(Error::InvalidArgument("nonzero padding bits in trit payload".into()));
            }
            continue;
        }
        out.push(match code {
            0b00 => 0,
            0b01 => 1,
            0b10 => -1,
            _ => return Err(Error::InvalidArgument(format!("forbidden trit code 0b11 at index {i}"))),
        });
    }
    Ok(out)
}

impl TernaryMatrix {
    pub fn from_trits(rows: usize, cols: usize, trits: Vec<i8>, scale: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                shape: vec![rows, cols],
                reason: "ternary matrix extents must be positive".into(),
            });
        }
        if trits.len() != rows * cols {
            return Err(Error::InvalidShape {
                shape: vec![rows, cols],
                reason: format!("got {} trits", trits.len()),
            });
        }
        if let Some(bad) = trits.iter().find(|t| !(-1..=1).contains(*t)) {
            return Err(Error::InvalidArgument(format!("{bad} is not a trit")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        let packed = pack_trits(&trits);
        Ok(Self::assemble(rows, cols, packed, trits, scale))
    }

    pub fn from_packed(rows: usize, cols: usize, packed: Vec<u8>, scale: f64) -> Result<Self> {
        let trits = unpack_trits(&packed, rows * cols)?;
        Self::from_trits(rows, cols, trits, scale)
    }

    fn assemble(rows: usize, cols: usize, packed: Vec<u8>, trits: Vec<i8>, scale: f64) -> Self {
        let nnz = trits.iter().filter(|&&t| t != 0).count();
        let sparse_rows = ((nnz as f64) < SPARSE_DENSITY * (rows * cols) as f64).then(|| {
            trits
                .chunks_exact(cols)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|(_, &t)| t != 0)
                        .map(|(j, &t)| (j as u32, t))
                        .collect()
                })
                .collect()
        });
        Self {
            rows,
            cols,
            packed,
            scale,
            trits,
            sparse_rows,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_trits(rows, cols, vec![0; rows * cols], 1.0)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn trits(&self) -> &[i8] {
        &self.trits
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.trits[r * self.cols + c]
    }

    pub fn nonzero_count(&self) -> usize {
        self.trits.iter().filter(|&&t| t != 0).count()
    }

    /// Same trits, different scale.
    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        Self::from_trits(self.rows, self.cols, self.trits.clone(), scale)
    }

    /// `scale · trits` as a dense tensor.
    pub fn dequantize<F: Real>(&self) -> Tensor<F> {
        let s = F::lit(self.scale);
        let data = self.trits.iter().map(|&t| F::lit(t as f64) * s).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("shape checked at construction")
    }
}

/// Absmean ternary quantization: `β = max(mean|W|, ε)`, `t = clip(round(W/β), −1, 1)`.
pub fn quantize_absmean<F: Real>(w: &Tensor<F>) -> Result<TernaryMatrix> {
    if !w.all_finite() {
        return Err(Error::NonFinite { op: "quantize_absmean" });
    }
    let n = w.numel() as f64;
    let mean_abs = w.data().iter().map(|x| x.as_f64().abs()).sum::<f64>() / n;
    let scale = mean_abs.max(SCALE_EPS);
    let trits = w
        .data()
        .iter()
        .map(|x| (x.as_f64() / scale).round().clamp(-1.0, 1.0) as i8)
        .collect();
    TernaryMatrix::from_trits(w.rows(), w.cols(), trits, scale)
}

/// Information content of `n` trits in bits (`n · log₂3`).
///
/// This is a reporting quantity; runtime storage uses 2 bits per trit.
pub fn trit_memory_bits(n: u64) -> f64 {
    n as f64 * 3f64.log2()
}

fn check_inner(x: &Tensor<impl Real>, inner: usize, t: &TernaryMatrix, op: &'static str) -> Result<()> {
    if x.cols() != inner {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: vec![t.rows, t.cols],
        });
    }
    Ok(())
}

fn out_shape(x_shape: &[usize], last: usize) -> Vec<usize> {
    match x_shape.len() {
        0 | 1 => vec![last],
        n => {
            let mut s = x_shape[..n - 1].to_vec();
            s.push(last);
            s
        }
    }
}

#[inline]
fn accumulate_dense<F: Real>(acc: &mut [F], trits: &[i8], xv: F) {
    let neg = -xv;
    let zero = F::zero();
    for (a, &t) in acc.iter_mut().zip(trits) {
        let v = if t > 0 {
            xv
        } else if t < 0 {
            neg
        } else {
            zero
        };
        *a = *a + v;
    }
}

#[inline]
fn accumulate_sparse<F: Real>(acc: &mut [F], entries: &[(u32, i8)], xv: F) {
    for &(j, t) in entries {
        let a = &mut acc[j as usize];
        *a = if t > 0 { *a + xv } else { *a - xv };
    }
}

/// Accumulate `x · trits` for one input row into `acc` (unscaled).
pub(crate) fn ternary_row_into<F: Real>(x: &[F], t: &TernaryMatrix, acc: &mut [F]) {
    let c = t.cols;
    match &t.sparse_rows {
        Some(rows) => {
            for (&xv, entries) in x.iter().zip(rows) {
                if xv != F::zero() {
                    accumulate_sparse(acc, entries, xv);
                }
            }
        }
        None => {
            for (r, &xv) in x.iter().enumerate() {
                if xv != F::zero() {
                    accumulate_dense(acc, &t.trits[r * c..(r + 1) * c], xv);
                }
            }
        }
    }
}

/// `y = β · (x · T)` using only additions and subtractions of `x` entries.
///
/// `x` is m×r (or a length-r vector); the result is m×c (or length c).
pub fn ternary_matmul<F: Real>(x: &Tensor<F>, t: &TernaryMatrix) -> Result<Tensor<F>> {
    check_inner(x, t.rows, t, "ternary_matmul")?;
    let (m, c) = (x.rows(), t.cols);
    let mut out = vec![F::zero(); m * c];
    let scale = F::lit(t.scale);
    for (xr, yr) in x.data().chunks_exact(t.rows).zip(out.chunks_exact_mut(c)) {
        ternary_row_into(xr, t, yr);
        if t.scale != 1.0 {
            yr.iter_mut().for_each(|y| *y = *y * scale);
        }
    }
    Tensor::new(out_shape(x.shape(), c), out)
}

/// Straightforward branchy kernel; the reference the fast paths are tested against.
pub fn ternary_matmul_reference<F: Real>(x: &Tensor<F>, t: &TernaryMatrix) -> Result<Tensor<F>> {
    check_inner(x, t.rows, t, "ternary_matmul")?;
    let (m, c) = (x.rows(), t.cols);
    let mut out = vec![F::zero(); m * c];
    for i in 0..m {
        for r in 0..t.rows {
            let xv = x.data()[i * t.rows + r];
            if xv == F::zero() {
                continue;
            }
            for j in 0..c {
                match t.get(r, j) {
                    1 => out[i * c + j] = out[i * c + j] + xv,
                    -1 => out[i * c + j] = out[i * c + j] - xv,
                    _ => {}
                }
            }
        }
    }
    if t.scale != 1.0 {
        let s = F::lit(t.scale);
        out.iter_mut().for_each(|y| *y = *y * s);
    }
    Tensor::new(out_shape(x.shape(), c), out)
}

#[inline]
fn signed_sum<F: Real>(g: &[F], trits: &[i8]) -> F {
    let mut lanes = [F::zero(); 8];
    let mut gc = g.chunks_exact(8);
    let mut tc = trits.chunks_exact(8);
    for (gs, ts) in (&mut gc).zip(&mut tc) {
        for k in 0..8 {
            let v = if ts[k] > 0 {
                gs[k]
            } else if ts[k] < 0 {
                -gs[k]
            } else {
                F::zero()
            };
            lanes[k] = lanes[k] + v;
        }
    }
    let mut tail = F::zero();
    for (&gv, &t) in gc.remainder().iter().zip(tc.remainder()) {
        if t > 0 {
            tail = tail + gv;
        } else if t < 0 {
            tail = tail - gv;
        }
    }
    let pair = |a: F, b: F| a + b;
    let s4 = [
        pair(lanes[0], lanes[4]),
        pair(lanes[1], lanes[5]),
        pair(lanes[2], lanes[6]),
        pair(lanes[3], lanes[7]),
    ];
    (s4[0] + s4[2]) + (s4[1] + s4[3]) + tail
}

/// `y = β · (g · Tᵀ)`: g is m×c, result m×r. Add/sub only.
pub fn ternary_matmul_transposed<F: Real>(g: &Tensor<F>, t: &TernaryMatrix) -> Result<Tensor<F>> {
    check_inner(g, t.cols, t, "ternary_matmul_transposed")?;
    let (m, r, c) = (g.rows(), t.rows, t.cols);
    let scale = F::lit(t.scale);
    let mut out = vec![F::zero(); m * r];
    for (gr, yr) in g.data().chunks_exact(c).zip(out.chunks_exact_mut(r)) {
        for (k, y) in yr.iter_mut().enumerate() {
            *y = signed_sum(gr, &t.trits[k * c..(k + 1) * c]) * scale;
        }
    }
    Tensor::new(out_shape(g.shape(), r), out)
}

/// Straight-through estimator for `y = x ⊛ quantize(latent)`.
///
/// `grad_latent = xᵀ · grad_out`, zeroed where `|latent / β| > 1`;
/// `grad_x = grad_out · (β T)ᵀ`.
pub fn ste_backward<F: Real>(
    grad_out: &Tensor<F>,
    x: &Tensor<F>,
    t: &TernaryMatrix,
    latent: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if latent.rows() != t.rows || latent.cols() != t.cols {
        return Err(Error::ShapeMismatch {
            op: "ste_backward",
            left: latent.shape().to_vec(),
            right: vec![t.rows, t.cols],
        });
    }
    check_inner(x, t.rows, t, "ste_backward")?;
    if grad_out.cols() != t.cols || grad_out.rows() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "ste_backward",
            left: grad_out.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let grad_x = ternary_matmul_transposed(grad_out, t)?;
    let grad_latent = latent_grad(grad_out, x, t, latent)?;
    Ok((grad_x, grad_latent))
}

pub(crate) fn latent_grad<F: Real>(
    grad_out: &Tensor<F>,
    x: &Tensor<F>,
    t: &TernaryMatrix,
    latent: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (m, r, c) = (x.rows(), t.rows, t.cols);
    let mut gw = vec![F::zero(); r * c];
    F::gemm(r, m, c, x.data(), true, grad_out.data(), false, &mut gw, F::zero());
    let inv = 1.0 / t.scale;
    for (g, w) in gw.iter_mut().zip(latent.data()) {
        if (w.as_f64() * inv).abs() > 1.0 {
            *g = F::zero();
        }
    }
    Tensor::new(vec![r, c], gw)
}

/// How trainable linears see their weights in the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuantMode {
    /// Quantized trits (quantization-aware training and inference).
    #[default]
    Ternary,
    /// Latent weights used directly; for gradient checking only.
    Bypass,
}

/// A ternary projection. Trainable layers own a latent full-precision
/// parameter and re-quantize it before every forward; frozen layers hold a
/// fixed matrix (possibly shared between layers) and no latent.
#[derive(Clone, Debug)]
pub struct QuantizedLinear {
    latent: Option<ParamId>,
    cached: Arc<TernaryMatrix>,
}

impl QuantizedLinear {
    /// Xavier-uniform latent of shape `rows × cols`, quantized once.
    pub fn trainable<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| F::lit(rng.random_range(-bound..bound)))
            .collect();
        let latent = Tensor::new(vec![rows, cols], data)?;
        let cached = Arc::new(quantize_absmean(&latent)?);
        let id = store.add(name, latent, true);
        Ok(Self {
            latent: Some(id),
            cached,
        })
    }

    pub fn frozen(matrix: Arc<TernaryMatrix>) -> Self {
        Self {
            latent: None,
            cached: matrix,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.latent.is_none()
    }

    pub fn latent(&self) -> Option<ParamId> {
        self.latent
    }

    pub fn cached(&self) -> &Arc<TernaryMatrix> {
        &self.cached
    }

    pub fn rows(&self) -> usize {
        self.cached.rows
    }

    pub fn cols(&self) -> usize {
        self.cached.cols
    }

    /// Re-quantize from the latent. No-op for frozen layers.
    pub fn refresh<F: Real>(&mut self, store: &ParamStore<F>) -> Result<()> {
        if let Some(id) = self.latent {
            self.cached = Arc::new(quantize_absmean(&store.get(id).latent)?);
        }
        Ok(())
    }

    /// Record `x ⊛ W (+ bias)` on the tape.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        bias: Option<Var>,
        mode: QuantMode,
    ) -> Result<Var> {
        match (self.latent, mode) {
            (Some(id), QuantMode::Bypass) => {
                let w = tape.param(store, id);
                tape.dense_linear(x, w, bias)
            }
            (Some(id), QuantMode::Ternary) => {
                let w = tape.param(store, id);
                tape.ternary_linear(x, self.cached.clone(), Some(w), bias)
            }
            (None, _) => tape.ternary_linear(x, self.cached.clone(), None, bias),
        }
    }

    /// Plain (tape-free) `x ⊛ W`.
    pub fn apply<F: Real>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        ternary_matmul(x, &self.cached)
    }

    pub fn ste_backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grad_out: &Tensor<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let id = self.latent.ok_or(Error::FrozenBackward)?;
        ste_backward(grad_out, x, &self.cached, &store.get(id).latent)
    }
}
