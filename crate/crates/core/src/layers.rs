//! Model equations: cumax lower bounds, MLGRU (base / rc / grc), GLU,
//! RMSNorm, pre-norm block wiring and the full language model.
//!
//! Every linear map is a [`QuantizedLinear`] applied to row vectors
//! (`x ⊛ W` with `W` stored `in × out`). Two forward paths share the same
//! parameters: a tape path used for training, processing a batch of whole
//! sequences, and a plain step-wise path used for inference and as an oracle.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{rmsnorm_rows, sigmoid, silu, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::fused_kernel::ReservoirTerm;
use crate::real::Real;
use crate::reservoir::{derive_seed, SharedFixed, DEFAULT_SPARSITY};
use crate::tensor::Tensor;
use crate::ternary::{QuantMode, QuantizedLinear, TernaryMatrix};

pub const RMS_EPS: f64 = 1e-6;
pub const DEFAULT_CONTEXT: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Base,
    Rc,
    Grc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Rc, Variant::Grc];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Rc => "rc",
            Variant::Grc => "grc",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" => Ok(Variant::Base),
            "rc" => Ok(Variant::Rc),
            "grc" => Ok(Variant::Grc),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected base, rc or grc)"
            ))),
        }
    }
}

/// `⌈8d/3⌉` rounded up to a multiple of 8.
pub fn default_glu_dim(d: usize) -> usize {
    (8 * d).div_ceil(3).div_ceil(8) * 8
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub glu_dim: usize,
    pub context_size: usize,
    pub variant: Variant,
    pub sparsity: f64,
    pub seed: u64,
    pub reservoir_seed: u64,
}

impl ModelConfig {
    pub fn new(d: usize, n_layers: usize, vocab: usize, variant: Variant) -> Self {
        Self {
            d,
            n_layers,
            vocab,
            glu_dim: default_glu_dim(d),
            context_size: DEFAULT_CONTEXT,
            variant,
            sparsity: DEFAULT_SPARSITY,
            seed: 0,
            reservoir_seed: 1,
        }
    }

    /// d=1024, N=24, vocab 32000: the scale whose counts line up with the
    /// published model sizes.
    pub fn reference_scale(variant: Variant) -> Self {
        Self::new(1024, 24, 32000, variant)
    }

    /// Byte-level model small enough to train on a laptop CPU.
    pub fn desk(variant: Variant) -> Self {
        Self::new(64, 2, crate::train::tokenizer::VOCAB_SIZE, variant)
    }

    pub fn tiny(variant: Variant) -> Self {
        Self {
            glu_dim: 12,
            context_size: 16,
            ..Self::new(4, 2, 8, variant)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("vocab", self.vocab),
            ("glu_dim", self.glu_dim),
            ("context_size", self.context_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.glu_dim < self.d {
            return Err(Error::Config(format!(
                "glu_dim ({}) must be at least d ({})",
                self.glu_dim, self.d
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "sparsity must lie in [0, 1), got {}",
                self.sparsity
            )));
        }
        Ok(())
    }
}

/// `γ = cumsum(softmax(Γ, axis 0)) − row 0`, one row of lower bounds per layer.
pub fn cumax<F: Real>(gamma: &Tensor<F>) -> Result<Tensor<F>> {
    if gamma.shape().len() != 2 || gamma.rows() == 0 {
        return Err(Error::InvalidShape {
            shape: gamma.shape().to_vec(),
            reason: "cumax expects an N×d matrix with N ≥ 1".into(),
        });
    }
    let mut tape = Tape::new();
    let g = tape.constant(gamma.clone());
    let out = cumax_tape(&mut tape, g)?;
    Ok(tape.value(out).clone())
}

pub fn cumax_tape<F: Real>(tape: &mut Tape<F>, gamma: Var) -> Result<Var> {
    let p = tape.softmax_axis0(gamma)?;
    let c = tape.cumsum_axis0(p)?;
    tape.sub_row0(c)
}

/// Plain row-wise RMS normalization.
pub fn rmsnorm<F: Real>(x: &Tensor<F>, gain: &[F], eps: f64) -> Result<Tensor<F>> {
    if x.cols() != gain.len() {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm",
            left: x.shape().to_vec(),
            right: vec![gain.len()],
        });
    }
    let (out, _) = rmsnorm_rows(x.data(), gain, eps);
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Clone, Debug)]
pub struct MLGRUParams {
    pub w_f: QuantizedLinear,
    pub w_c: QuantizedLinear,
    pub w_g: QuantizedLinear,
    pub w_o: QuantizedLinear,
    pub b_f: ParamId,
    pub b_c: ParamId,
    pub b_g: ParamId,
    pub b_o: ParamId,
    pub reservoir: Option<ReservoirTerm>,
}

impl MLGRUParams {
    pub fn variant(&self) -> Variant {
        match (self.reservoir.is_some(), self.w_f.is_frozen()) {
            (false, _) => Variant::Base,
            (true, false) => Variant::Rc,
            (true, true) => Variant::Grc,
        }
    }

    fn linears(&self) -> [&QuantizedLinear; 4] {
        [&self.w_f, &self.w_c, &self.w_g, &self.w_o]
    }

    fn linears_mut(&mut self) -> [&mut QuantizedLinear; 4] {
        [&mut self.w_f, &mut self.w_c, &mut self.w_g, &mut self.w_o]
    }
}

#[derive(Clone, Debug)]
pub struct GLUParams {
    pub w_s: QuantizedLinear,
    pub w_u: QuantizedLinear,
    pub w_q: QuantizedLinear,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm_mixer: ParamId,
    pub norm_channel: ParamId,
    pub mlgru: MLGRUParams,
    pub glu: GLUParams,
}

fn vec_tensor<F: Real>(x: &[F]) -> Tensor<F> {
    Tensor::vector(x.to_vec())
}

fn add_in_place<F: Real>(a: &mut [F], b: &[F]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + y;
    }
}

/// One MLGRU timestep on plain vectors. Returns `(o_t, h_t)`.
pub fn mlgru_step<F: Real>(
    store: &ParamStore<F>,
    p: &MLGRUParams,
    x: &[F],
    h_prev: &[F],
    gamma_k: &[F],
) -> Result<(Vec<F>, Vec<F>)> {
    let d = p.w_f.cols();
    if x.len() != p.w_f.rows() || h_prev.len() != d || gamma_k.len() != d {
        return Err(Error::InvalidArgument(format!(
            "mlgru_step: x={} h={} γ={} for a {}→{d} layer",
            x.len(),
            h_prev.len(),
            gamma_k.len(),
            p.w_f.rows()
        )));
    }
    let xt = vec_tensor(x);
    let bias = |id: ParamId| store.get(id).latent.data();
    let mut f_pre = p.w_f.apply(&xt)?.into_data();
    add_in_place(&mut f_pre, bias(p.b_f));
    let mut c_pre = p.w_c.apply(&xt)?.into_data();
    add_in_place(&mut c_pre, bias(p.b_c));
    if let Some(r) = &p.reservoir {
        let mut res = vec![F::zero(); d];
        r.apply(h_prev, &mut res);
        add_in_place(&mut c_pre, &res);
    }
    let h: Vec<F> = (0..d)
        .map(|j| {
            let f = sigmoid(f_pre[j]);
            let fl = gamma_k[j] + (F::one() - gamma_k[j]) * f;
            fl * h_prev[j] + (F::one() - fl) * silu(c_pre[j])
        })
        .collect();
    let mut g_pre = p.w_g.apply(&xt)?.into_data();
    add_in_place(&mut g_pre, bias(p.b_g));
    let gh: Vec<F> = g_pre.iter().zip(&h).map(|(&g, &hv)| sigmoid(g) * hv).collect();
    let mut o = p.w_o.apply(&vec_tensor(&gh))?.into_data();
    add_in_place(&mut o, bias(p.b_o));
    Ok((o, h))
}

/// `q = (silu(χ ⊛ W_s) ⊙ (χ ⊛ W_u)) ⊛ W_q`, row-wise.
pub fn glu_forward<F: Real>(chi: &Tensor<F>, p: &GLUParams) -> Result<Tensor<F>> {
    let s = p.w_s.apply(chi)?;
    let u = p.w_u.apply(chi)?;
    let data = s.data().iter().zip(u.data()).map(|(&s, &u)| silu(s) * u).collect();
    p.w_q.apply(&Tensor::new(u.shape().to_vec(), data)?)
}

/// Pre-norm block over one sequence (T×d), threading the MLGRU state from
/// `h0`. Returns the outputs and the final state.
pub fn block_forward<F: Real>(
    store: &ParamStore<F>,
    block: &BlockParams,
    x_seq: &Tensor<F>,
    gamma_k: &[F],
    h0: &[F],
) -> Result<(Tensor<F>, Vec<F>)> {
    let d = h0.len();
    if x_seq.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "block_forward",
            left: x_seq.shape().to_vec(),
            right: vec![d],
        });
    }
    let gain1 = store.get(block.norm_mixer).latent.data();
    let gain2 = store.get(block.norm_channel).latent.data();
    let normed = rmsnorm(x_seq, gain1, RMS_EPS)?;
    let mut h = h0.to_vec();
    let mut a = Vec::with_capacity(x_seq.numel());
    for t in 0..x_seq.rows() {
        let (o, h_next) = mlgru_step(store, &block.mlgru, normed.row(t), &h, gamma_k)?;
        h = h_next;
        a.extend(x_seq.row(t).iter().zip(&o).map(|(&x, &o)| x + o));
    }
    let a = Tensor::new(vec![x_seq.rows(), d], a)?;
    let q = glu_forward(&rmsnorm(&a, gain2, RMS_EPS)?, &block.glu)?;
    let y = a.data().iter().zip(q.data()).map(|(&a, &q)| a + q).collect();
    Ok((Tensor::new(a.shape().to_vec(), y)?, h))
}

/// One logical tensor of a model, for accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub numel: usize,
    pub ternary: bool,
    pub trainable: bool,
}

/// Per-layer recurrent state for step-wise decoding.
#[derive(Clone, Debug)]
pub struct DecodeState<F> {
    pub h: Vec<Vec<F>>,
}

#[derive(Clone, Debug)]
pub struct Model<F: Real = f32> {
    config: ModelConfig,
    pub params: ParamStore<F>,
    shared: Option<SharedFixed>,
    embed: ParamId,
    blocks: Vec<BlockParams>,
    gamma: Option<ParamId>,
    final_norm: ParamId,
    head: QuantizedLinear,
    quant_mode: QuantMode,
    gamma_cache: Tensor<F>,
}

impl<F: Real> Model<F> {
    /// Fresh model; fixed matrices are drawn from `config.reservoir_seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let shared = match config.variant {
            Variant::Base => None,
            // nothing to share without layers
            _ if config.n_layers == 0 => None,
            v => Some(SharedFixed::generate(
                v,
                config.d,
                config.sparsity,
                config.reservoir_seed,
            )?),
        };
        Self::with_shared(config, shared)
    }

    /// Fresh model using the given fixed matrices (checkpoint loading and
    /// controlled experiments).
    pub fn with_shared(config: &ModelConfig, shared: Option<SharedFixed>) -> Result<Self> {
        config.validate()?;
        match (&shared, config.variant) {
            (None, Variant::Base) => {}
            (None, _) if config.n_layers == 0 => {}
            (Some(s), v) if v != Variant::Base => {
                if s.variant() != v {
                    return Err(Error::Config(format!("{v} model given {} fixed matrices", s.variant())));
                }
                if s.w_c.rows() != config.d {
                    return Err(Error::Config(format!(
                        "fixed matrices are {}-dimensional, model is {}",
                        s.w_c.rows(),
                        config.d
                    )));
                }
            }
            (None, v) => return Err(Error::Config(format!("{v} model needs shared fixed matrices"))),
            (Some(_), _) => return Err(Error::Config("base model cannot take shared fixed matrices".into())),
        }
        let (d, l, n) = (config.d, config.glu_dim, config.n_layers);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
        let mut params = ParamStore::new();

        let bound = 3f64.sqrt();
        let embed_data = (0..config.vocab * d)
            .map(|_| F::lit(rng.random_range(-bound..bound)))
            .collect();
        let embed = params.add("embed", Tensor::new(vec![config.vocab, d], embed_data)?, true);
        let gamma = (n > 0).then(|| params.add("gamma", Tensor::zeros(&[n, d]), true));

        let mut blocks = Vec::with_capacity(n);
        for k in 0..n {
            let name = |s: &str| format!("blocks.{k}.{s}");
            let norm_mixer = params.add(name("norm_mixer"), Tensor::full(&[d], F::one()), true);
            let norm_channel = params.add(name("norm_channel"), Tensor::full(&[d], F::one()), true);
            let fixed = |m: &Option<Arc<TernaryMatrix>>| m.clone().map(QuantizedLinear::frozen);
            let w_f = match shared.as_ref().and_then(|s| fixed(&s.w_f)) {
                Some(q) => q,
                None => QuantizedLinear::trainable(&mut params, &name("mlgru.w_f"), d, d, &mut rng)?,
            };
            let w_c = match &shared {
                Some(s) => QuantizedLinear::frozen(s.w_c.clone()),
                None => QuantizedLinear::trainable(&mut params, &name("mlgru.w_c"), d, d, &mut rng)?,
            };
            let w_g = match shared.as_ref().and_then(|s| fixed(&s.w_g)) {
                Some(q) => q,
                None => QuantizedLinear::trainable(&mut params, &name("mlgru.w_g"), d, d, &mut rng)?,
            };
            let w_o = QuantizedLinear::trainable(&mut params, &name("mlgru.w_o"), d, d, &mut rng)?;
            let mut bias = |s: &str| params.add(name(s), Tensor::zeros(&[d]), true);
            let (b_f, b_c, b_g, b_o) = (
                bias("mlgru.b_f"),
                bias("mlgru.b_c"),
                bias("mlgru.b_g"),
                bias("mlgru.b_o"),
            );
            let reservoir = shared.as_ref().map(|s| s.reservoir());
            let glu = GLUParams {
                w_s: QuantizedLinear::trainable(&mut params, &name("glu.w_s"), d, l, &mut rng)?,
                w_u: QuantizedLinear::trainable(&mut params, &name("glu.w_u"), d, l, &mut rng)?,
                w_q: QuantizedLinear::trainable(&mut params, &name("glu.w_q"), l, d, &mut rng)?,
            };
            blocks.push(BlockParams {
                norm_mixer,
                norm_channel,
                mlgru: MLGRUParams {
                    w_f,
                    w_c,
                    w_g,
                    w_o,
                    b_f,
                    b_c,
                    b_g,
                    b_o,
                    reservoir,
                },
                glu,
            });
        }
        let final_norm = params.add("final_norm", Tensor::full(&[d], F::one()), true);
        let head = QuantizedLinear::trainable(&mut params, "head", d, config.vocab, &mut rng)?;
        let mut model = Self {
            config: config.clone(),
            params,
            shared,
            embed,
            blocks,
            gamma,
            final_norm,
            head,
            quant_mode: QuantMode::Ternary,
            gamma_cache: Tensor::zeros(&[n.max(1), d]),
        };
        model.refresh_quantized()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn shared(&self) -> Option<&SharedFixed> {
        self.shared.as_ref()
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn head(&self) -> &QuantizedLinear {
        &self.head
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    pub fn gamma_id(&self) -> Option<ParamId> {
        self.gamma
    }

    pub fn final_norm_id(&self) -> ParamId {
        self.final_norm
    }

    pub fn quant_mode(&self) -> QuantMode {
        self.quant_mode
    }

    pub fn set_quant_mode(&mut self, mode: QuantMode) {
        self.quant_mode = mode;
    }

    /// Cached lower bounds used at inference.
    pub fn gamma_cache(&self) -> &Tensor<F> {
        &self.gamma_cache
    }

    fn trainable_linears_mut(&mut self) -> Vec<&mut QuantizedLinear> {
        let mut out: Vec<&mut QuantizedLinear> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.mlgru.linears_mut());
            out.extend([&mut b.glu.w_s, &mut b.glu.w_u, &mut b.glu.w_q]);
        }
        out.push(&mut self.head);
        out
    }

    /// All linear maps in layer order (frozen ones included, once per role).
    pub fn linears(&self) -> Vec<&QuantizedLinear> {
        let mut out: Vec<&QuantizedLinear> = Vec::new();
        for b in &self.blocks {
            out.extend(b.mlgru.linears());
            out.extend([&b.glu.w_s, &b.glu.w_u, &b.glu.w_q]);
        }
        out.push(&self.head);
        out
    }

    /// Re-quantize every trainable linear and recompute the cached γ. Call
    /// after any change to the latent parameters.
    pub fn refresh_quantized(&mut self) -> Result<()> {
        let store = std::mem::take(&mut self.params);
        let result = self
            .trainable_linears_mut()
            .into_iter()
            .try_for_each(|q| q.refresh(&store));
        self.params = store;
        result?;
        if let Some(g) = self.gamma {
            self.gamma_cache = cumax(&self.params.get(g).latent)?;
        }
        Ok(())
    }

    /// Copy latents from `other` wherever a parameter of the same name and
    /// shape exists, then refresh. Returns the number of tensors copied.
    pub fn copy_matching_params(&mut self, other: &Model<F>) -> Result<usize> {
        let mut copied = 0;
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.get(id).name.clone();
            if let Some(src) = other.params.find(&name) {
                let src = &other.params.get(src).latent;
                if src.shape() == self.params.get(id).latent.shape() {
                    self.params.get_mut(id).latent = src.clone();
                    copied += 1;
                }
            }
        }
        self.refresh_quantized()?;
        Ok(copied)
    }

    /// Number of distinct storage instances behind the frozen matrices.
    pub fn fixed_storage_instances(&self) -> usize {
        let mut seen = HashSet::new();
        for b in &self.blocks {
            for q in b.mlgru.linears() {
                if q.is_frozen() {
                    seen.insert(Arc::as_ptr(q.cached()) as usize);
                }
            }
            if let Some(r) = &b.mlgru.reservoir {
                seen.insert(Arc::as_ptr(r.matrix()) as usize);
            }
        }
        seen.len()
    }

    /// Every allocated tensor. Shared fixed matrices are listed once under
    /// `shared.*`.
    pub fn tensor_inventory(&self) -> Vec<TensorEntry> {
        let ternary: HashSet<ParamId> = self.linears().iter().filter_map(|q| q.latent()).collect();
        let mut out: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(id, p)| TensorEntry {
                name: p.name.clone(),
                numel: p.latent.numel(),
                ternary: ternary.contains(&id),
                trainable: p.trainable(),
            })
            .collect();
        if let Some(s) = &self.shared {
            for (name, m) in s.matrices() {
                out.push(TensorEntry {
                    name: format!("shared.{name}"),
                    numel: m.rows() * m.cols(),
                    ternary: true,
                    trainable: false,
                });
            }
        }
        out
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            }),
            None => Ok(()),
        }
    }

    /// Record the forward pass for `batch` sequences of equal length laid out
    /// back to back in `tokens`; returns logits (B·T × vocab).
    pub fn forward_tape(&self, tape: &mut Tape<F>, tokens: &[usize], batch: usize) -> Result<Var> {
        self.check_tokens(tokens)?;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::InvalidArgument(format!(
                "{} tokens do not form {batch} equal sequences",
                tokens.len()
            )));
        }
        let store = &self.params;
        let mode = self.quant_mode;
        let table = tape.param(store, self.embed);
        let mut x = tape.embedding(table, tokens)?;
        let gamma = match self.gamma {
            Some(id) => {
                let g = tape.param(store, id);
                Some(cumax_tape(tape, g)?)
            }
            None => None,
        };
        for (k, b) in self.blocks.iter().enumerate() {
            let gamma = gamma.expect("blocks imply Γ");
            let p = &b.mlgru;
            let gamma_k = tape.row(gamma, k)?;
            let g1 = tape.param(store, b.norm_mixer);
            let n1 = tape.rmsnorm(x, g1, RMS_EPS)?;
            let bf = tape.param(store, p.b_f);
            let f_pre = p.w_f.forward(tape, store, n1, Some(bf), mode)?;
            let bc = tape.param(store, p.b_c);
            let c_pre = p.w_c.forward(tape, store, n1, Some(bc), mode)?;
            let h = tape.recurrence(f_pre, c_pre, gamma_k, p.reservoir.clone(), batch)?;
            let bg = tape.param(store, p.b_g);
            let g_pre = p.w_g.forward(tape, store, n1, Some(bg), mode)?;
            let g = tape.sigmoid(g_pre)?;
            let gh = tape.mul(g, h)?;
            let bo = tape.param(store, p.b_o);
            let o = p.w_o.forward(tape, store, gh, Some(bo), mode)?;
            let a = tape.add(x, o)?;

            let g2 = tape.param(store, b.norm_channel);
            let n2 = tape.rmsnorm(a, g2, RMS_EPS)?;
            let s = b.glu.w_s.forward(tape, store, n2, None, mode)?;
            let u = b.glu.w_u.forward(tape, store, n2, None, mode)?;
            let s = tape.silu(s)?;
            let gated = tape.mul(s, u)?;
            let q = b.glu.w_q.forward(tape, store, gated, None, mode)?;
            x = tape.add(a, q)?;
        }
        let gf = tape.param(store, self.final_norm);
        let normed = tape.rmsnorm(x, gf, RMS_EPS)?;
        self.head.forward(tape, store, normed, None, mode)
    }

    /// Mean next-token loss: `inputs` and `targets` are `batch` sequences each.
    pub fn loss_tape(&self, tape: &mut Tape<F>, inputs: &[usize], targets: &[usize], batch: usize) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let logits = self.forward_tape(tape, inputs, batch)?;
        tape.cross_entropy(logits, targets)
    }

    /// Step-wise inference over one sequence using the cached γ. Returns T×vocab logits.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("forward of an empty sequence".into()));
        }
        let d = self.config.d;
        let table = &self.params.get(self.embed).latent;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            x.extend_from_slice(table.row(t));
        }
        let mut x = Tensor::new(vec![tokens.len(), d], x)?;
        for (k, b) in self.blocks.iter().enumerate() {
            let (y, _) = block_forward(&self.params, b, &x, self.gamma_cache.row(k), &vec![F::zero(); d])?;
            x = y;
        }
        let normed = rmsnorm(&x, self.params.get(self.final_norm).latent.data(), RMS_EPS)?;
        self.head.apply(&normed)
    }

    pub fn decode_state(&self) -> DecodeState<F> {
        DecodeState {
            h: vec![vec![F::zero(); self.config.d]; self.blocks.len()],
        }
    }

    /// Advance `state` by one token and return the next-token logits.
    pub fn decode_step(&self, state: &mut DecodeState<F>, token: usize) -> Result<Vec<F>> {
        self.check_tokens(&[token])?;
        if state.h.len() != self.blocks.len() {
            return Err(Error::InvalidArgument(
                "decode state belongs to a different model".into(),
            ));
        }
        let mut x = Tensor::vector(self.params.get(self.embed).latent.row(token).to_vec());
        for (k, b) in self.blocks.iter().enumerate() {
            let (y, h) = block_forward(&self.params, b, &x, self.gamma_cache.row(k), &state.h[k])?;
            state.h[k] = h;
            x = y;
        }
        let normed = rmsnorm(&x, self.params.get(self.final_norm).latent.data(), RMS_EPS)?;
        Ok(self.head.apply(&normed)?.into_data())
    }
}
