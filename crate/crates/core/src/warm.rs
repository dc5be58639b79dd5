//! Attention-based prototype generation with whitening and coloring.
//!
//! For each class the support features are mapped into an aligned space
//! (ZCA whitening for the full module), a pool of learnable tokens attends to
//! them through a single cross-attention layer with a residual connection,
//! and the attended tokens are mapped back with the inverse transform
//! (coloring). The aligned-space statistics depend only on the frozen
//! features, so the backward pass treats them as constants.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::episode::{split_fg_bg, Episode, BACKGROUND};
use crate::error::{Error, Result};
use crate::linalg::sqrt_and_inv_sqrt;
use crate::matrix::{softmax_rows, Matrix};
use crate::rng::Rng;

/// Default clamp applied to covariance eigenvalues before taking `±½` powers.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Mean, covariance and the two half powers of the covariance of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub inv_sqrt: Matrix,
    pub sqrt: Matrix,
    pub eps: f64,
}

/// Column means and unbiased covariance (divisor `L − 1`) of `features`,
/// together with `Σ^{-½}` and `Σ^{½}` on the eps-clamped spectrum.
pub fn compute_stats(features: &Matrix, eps: f64) -> Result<WhitenStats> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::InsufficientPoints(n));
    }
    let mean = features.col_means();
    let centered = features.sub_row_vector(&mean);
    let mut cov = centered.t_matmul(&centered);
    cov.scale_assign(1.0 / (n - 1) as f64);
    let (sqrt, inv_sqrt) = sqrt_and_inv_sqrt(&cov, eps)?;
    Ok(WhitenStats { mean, cov, inv_sqrt, sqrt, eps })
}

/// ZCA whitening `(F − 1μᵀ) · Σ^{-½}`.
pub fn whiten(features: &Matrix, stats: &WhitenStats) -> Result<Matrix> {
    check_dim(features.cols(), stats.mean.len(), "whiten")?;
    Ok(features.sub_row_vector(&stats.mean).matmul(&stats.inv_sqrt))
}

/// Coloring `P̃ · Σ^{½} + 1μᵀ`, the inverse of [`whiten`].
pub fn color(attended: &Matrix, stats: &WhitenStats) -> Result<Matrix> {
    check_dim(attended.cols(), stats.mean.len(), "color")?;
    Ok(attended.matmul(&stats.sqrt).add_row_vector(&stats.mean))
}

fn check_dim(got: usize, want: usize, what: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: features have D={got}, statistics have D={want}")))
    }
}

/// How support features are aligned before attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Alignment {
    /// Raw features.
    None,
    /// Mean subtraction.
    Center,
    /// Mean subtraction and per-channel unit variance.
    Normalize,
    /// ZCA whitening.
    Whiten,
}

/// An alignment together with whether its inverse is applied to the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Variant {
    pub alignment: Alignment,
    pub restore: bool,
}

impl Variant {
    pub const WARM: Variant = Variant { alignment: Alignment::Whiten, restore: true };
    pub const NAIVE: Variant = Variant { alignment: Alignment::None, restore: false };

    /// The seven alignment/restoration combinations of the component ablation,
    /// in table order.
    pub const ABLATION_GRID: [Variant; 7] = [
        Variant::NAIVE,
        Variant { alignment: Alignment::Center, restore: false },
        Variant { alignment: Alignment::Normalize, restore: false },
        Variant { alignment: Alignment::Whiten, restore: false },
        Variant { alignment: Alignment::Center, restore: true },
        Variant { alignment: Alignment::Normalize, restore: true },
        Variant::WARM,
    ];

    pub fn provenance(self) -> Provenance {
        match (self.alignment, self.restore) {
            (Alignment::None, _) => Provenance::Naive,
            (Alignment::Whiten, true) => Provenance::Warm,
            (Alignment::Whiten, false) => Provenance::WhitenedNoRestore,
            (Alignment::Center, restore) => Provenance::Centered { restore },
            (Alignment::Normalize, restore) => Provenance::Normalized { restore },
        }
    }

    /// Short name such as `warm`, `naive` or `center+restore`.
    pub fn name(self) -> &'static str {
        match (self.alignment, self.restore) {
            (Alignment::None, _) => "naive",
            (Alignment::Center, false) => "center",
            (Alignment::Normalize, false) => "normalize",
            (Alignment::Whiten, false) => "whiten",
            (Alignment::Center, true) => "center+restore",
            (Alignment::Normalize, true) => "normalize+restore",
            (Alignment::Whiten, true) => "warm",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        let s = s.trim();
        let alias = match s {
            "whiten+restore" => Some(Variant::WARM),
            _ => None,
        };
        alias.or_else(|| Variant::ABLATION_GRID.into_iter().find(|v| v.name() == s))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a prototype set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Warm,
    Naive,
    Fps,
    Centered { restore: bool },
    Normalized { restore: bool },
    WhitenedNoRestore,
}

/// Per-class prototype matrices. Index `0` is background, `n + 1` is way `n`,
/// matching episode-local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub classes: Vec<Matrix>,
    pub provenance: Provenance,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes.first().map_or(0, Matrix::cols)
    }
}

/// Element-wise mean of per-shot prototype sets.
pub fn average_shots(sets: &[PrototypeSet]) -> Result<PrototypeSet> {
    let first = sets.first().ok_or_else(|| Error::Argument("no prototype sets to average".into()))?;
    for s in &sets[1..] {
        if s.provenance != first.provenance {
            return Err(Error::Argument("cannot average prototype sets of different provenance".into()));
        }
        let same = s.classes.len() == first.classes.len()
            && s.classes.iter().zip(&first.classes).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Shape("prototype sets differ in shape".into()));
        }
    }
    let k = sets.len() as f64;
    let classes = (0..first.classes.len())
        .map(|c| {
            let mut acc = first.classes[c].clone();
            for s in &sets[1..] {
                acc.add_assign(&s.classes[c]);
            }
            acc.scale(1.0 / k)
        })
        .collect();
    Ok(PrototypeSet { classes, provenance: first.provenance })
}

/// Learnable tokens and the query/key/value projections.
///
/// Token rows are grouped into pools of `m` rows: one pool per foreground way
/// followed by a single background pool. Projections act on row vectors as
/// `x · W (+ b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmParams {
    pub tokens: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// Optional `(b_q, b_k, b_v)`.
    pub biases: Option<[Vec<f64>; 3]>,
    pub tokens_per_class: usize,
    /// Divide logits by `√D`.
    pub scale_logits: bool,
}

/// Initialization knobs for [`WarmParams::init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub token_std: f64,
    /// Std of the noise added to the identity projections.
    pub proj_noise_std: f64,
    pub use_bias: bool,
    pub scale_logits: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { token_std: 0.02, proj_noise_std: 0.02, use_bias: false, scale_logits: false }
    }
}

impl WarmParams {
    /// Tokens `N(0, token_std²)`; projections identity plus `N(0, proj_noise_std²)`.
    pub fn init(dim: usize, tokens_per_class: usize, n_way: usize, cfg: InitConfig, rng: &mut Rng) -> Self {
        let pools = n_way + 1;
        let mut tokens = Matrix::zeros(pools * tokens_per_class, dim);
        tokens.as_mut_slice().iter_mut().for_each(|v| *v = cfg.token_std * rng.gaussian());
        let mut proj = || {
            let mut w = Matrix::identity(dim);
            w.as_mut_slice().iter_mut().for_each(|v| *v += cfg.proj_noise_std * rng.gaussian());
            w
        };
        let (wq, wk, wv) = (proj(), proj(), proj());
        let biases = cfg.use_bias.then(|| [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]]);
        Self { tokens, wq, wk, wv, biases, tokens_per_class, scale_logits: cfg.scale_logits }
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn num_pools(&self) -> usize {
        self.tokens.rows() / self.tokens_per_class.max(1)
    }

    /// Number of foreground ways these parameters serve.
    pub fn n_way(&self) -> usize {
        self.num_pools().saturating_sub(1)
    }

    /// Token pool serving prototype class `class` (0 = background).
    pub fn pool_index(&self, class: usize) -> usize {
        if class == BACKGROUND as usize {
            self.num_pools() - 1
        } else {
            class - 1
        }
    }

    pub fn pool(&self, class: usize) -> Matrix {
        let m = self.tokens_per_class;
        let start = self.pool_index(class) * m;
        let idx: Vec<usize> = (start..start + m).collect();
        self.tokens.select_rows(&idx)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.tokens_per_class == 0 || self.tokens.rows() % self.tokens_per_class != 0 || self.num_pools() < 2 {
            return Err(Error::Shape(format!(
                "{} token rows do not form at least two pools of {}",
                self.tokens.rows(),
                self.tokens_per_class
            )));
        }
        for (name, w) in [("W_q", &self.wq), ("W_k", &self.wk), ("W_v", &self.wv)] {
            if w.shape() != (d, d) {
                return Err(Error::Shape(format!("{name} is {:?}, expected {d}x{d}", w.shape())));
            }
            w.ensure_finite(name)?;
        }
        self.tokens.ensure_finite("tokens")?;
        if let Some(b) = &self.biases {
            if b.iter().any(|v| v.len() != d || v.iter().any(|x| !x.is_finite())) {
                return Err(Error::Shape("bias vectors must be finite with length D".into()));
            }
        }
        Ok(())
    }

    fn project(&self, x: &Matrix, w: &Matrix, bias: usize) -> Matrix {
        let y = x.matmul(w);
        match &self.biases {
            Some(b) => y.add_row_vector(&b[bias]),
            None => y,
        }
    }

    fn logit_scale(&self) -> f64 {
        if self.scale_logits {
            1.0 / libm::sqrt(self.dim() as f64)
        } else {
            1.0
        }
    }

    /// Flattened view of every learnable value (tokens, W_q, W_k, W_v, biases).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in [&self.tokens, &self.wq, &self.wk, &self.wv] {
            out.extend_from_slice(m.as_slice());
        }
        if let Some(b) = &self.biases {
            b.iter().for_each(|v| out.extend_from_slice(v));
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) for parameters of the same shape.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut p = self.clone();
        let mut off = 0;
        for m in [&mut p.tokens, &mut p.wq, &mut p.wk, &mut p.wv] {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        if let Some(b) = &mut p.biases {
            for v in b.iter_mut() {
                let n = v.len();
                v.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        assert_eq!(off, flat.len(), "flat parameter vector has the wrong length");
        p
    }
}

/// Attention weights and attended values of one token pool.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub attended: Matrix,
    pub weights: Matrix,
}

/// Intermediate values of one attention call, kept for the backward pass.
#[derive(Debug, Clone)]
struct AttentionTrace {
    queries_in: Matrix,
    keys_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

fn attend(queries_in: &Matrix, keys_in: &Matrix, params: &WarmParams) -> Result<(AttentionOutput, AttentionTrace)> {
    if keys_in.rows() == 0 {
        return Err(Error::EmptyKeys);
    }
    let d = params.dim();
    if queries_in.cols() != d || keys_in.cols() != d {
        return Err(Error::Shape(format!(
            "attention inputs have D={} and D={}, projections expect D={d}",
            queries_in.cols(),
            keys_in.cols()
        )));
    }
    let q = params.project(queries_in, &params.wq, 0);
    let k = params.project(keys_in, &params.wk, 1);
    let v = params.project(keys_in, &params.wv, 2);
    let mut logits = q.matmul_t(&k);
    logits.scale_assign(params.logit_scale());
    logits.ensure_finite("attention logits")?;
    let weights = softmax_rows(&logits);
    let attended = weights.matmul(&v);
    let trace = AttentionTrace { queries_in: queries_in.clone(), keys_in: keys_in.clone(), q, k, v };
    Ok((AttentionOutput { attended, weights }, trace))
}

/// Single-head cross-attention `softmax(W_q(X) W_k(Y)ᵀ) · W_v(Y)`.
pub fn cross_attention(queries_in: &Matrix, keys_in: &Matrix, params: &WarmParams) -> Result<AttentionOutput> {
    attend(queries_in, keys_in, params).map(|(out, _)| out)
}

/// Affine alignment of one class: `Z = (F − shift) · forward`, restored by
/// `P = P̃ · inverse + shift`.
#[derive(Debug, Clone)]
struct AlignMap {
    shift: Option<Vec<f64>>,
    forward: Option<Matrix>,
    inverse: Option<Matrix>,
}

impl AlignMap {
    fn build(features: &Matrix, alignment: Alignment, eps: f64) -> Result<(Self, Option<WhitenStats>)> {
        let none = AlignMap { shift: None, forward: None, inverse: None };
        Ok(match alignment {
            Alignment::None => (none, None),
            Alignment::Center => {
                if features.rows() == 0 {
                    return Err(Error::InsufficientPoints(0));
                }
                (AlignMap { shift: Some(features.col_means()), ..none }, None)
            }
            Alignment::Normalize => {
                let s = compute_stats(features, eps)?;
                let sd: Vec<f64> = s.cov.diag().iter().map(|v| libm::sqrt(v.max(eps))).collect();
                let inv: Vec<f64> = sd.iter().map(|v| 1.0 / v).collect();
                let map = AlignMap {
                    shift: Some(s.mean.clone()),
                    forward: Some(Matrix::from_diag(&inv)),
                    inverse: Some(Matrix::from_diag(&sd)),
                };
                (map, Some(s))
            }
            Alignment::Whiten => {
                let s = compute_stats(features, eps)?;
                let map = AlignMap {
                    shift: Some(s.mean.clone()),
                    forward: Some(s.inv_sqrt.clone()),
                    inverse: Some(s.sqrt.clone()),
                };
                (map, Some(s))
            }
        })
    }

    fn apply(&self, f: &Matrix) -> Matrix {
        let centered = match &self.shift {
            Some(mu) => f.sub_row_vector(mu),
            None => f.clone(),
        };
        match &self.forward {
            Some(w) => centered.matmul(w),
            None => centered,
        }
    }

    fn restore(&self, p: &Matrix) -> Matrix {
        let scaled = match &self.inverse {
            Some(w) => p.matmul(w),
            None => p.clone(),
        };
        match &self.shift {
            Some(mu) => scaled.add_row_vector(mu),
            None => scaled,
        }
    }

    /// Pulls a gradient on the restored output back to the attended tokens.
    fn restore_backward(&self, g: &Matrix) -> Matrix {
        match &self.inverse {
            Some(w) => g.matmul_t(w),
            None => g.clone(),
        }
    }
}

/// Forward pass of one class: everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ClassTrace {
    class: usize,
    restore: Option<AlignMap>,
    attention: AttentionTrace,
    pub output: AttentionOutput,
    pub stats: Option<WhitenStats>,
}

impl ClassTrace {
    /// Prototype class this trace belongs to.
    pub fn class(&self) -> usize {
        self.class
    }

    /// Support features after alignment, as fed to the key projection.
    pub fn aligned_keys(&self) -> &Matrix {
        &self.attention.keys_in
    }
}

/// Prototypes of several classes plus the recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub prototypes: PrototypeSet,
    pub classes: Vec<ClassTrace>,
}

/// Runs one variant for the classes of a single support cloud.
///
/// `class_features[i]` are the support rows of prototype class `class_ids[i]`
/// (0 = background, `n + 1` = way `n`); each class attends with its own token
/// pool. The returned set holds one entry per listed class, in order.
pub fn forward_classes(
    params: &WarmParams,
    class_ids: &[usize],
    class_features: &[&Matrix],
    variant: Variant,
    eps: f64,
) -> Result<ForwardTrace> {
    if class_ids.len() != class_features.len() {
        return Err(Error::Shape("one feature matrix per class is required".into()));
    }
    let mut classes = Vec::with_capacity(class_ids.len());
    let mut protos = Vec::with_capacity(class_ids.len());
    for (&class, &features) in class_ids.iter().zip(class_features) {
        if features.rows() == 0 {
            return Err(Error::EmptyClass(class));
        }
        if params.pool_index(class) >= params.num_pools() {
            return Err(Error::Argument(format!("no token pool for class {class}")));
        }
        let (map, stats) = AlignMap::build(features, variant.alignment, eps)?;
        let aligned = map.apply(features);
        let pool = params.pool(class);
        let (output, attention) = attend(&pool, &aligned, params)?;
        let attended = pool.add(&output.attended);
        let (proto, restore) = if variant.restore && variant.alignment != Alignment::None {
            (map.restore(&attended), Some(map))
        } else {
            (attended, None)
        };
        proto.ensure_finite("prototypes")?;
        protos.push(proto);
        classes.push(ClassTrace { class, restore, attention, output, stats });
    }
    Ok(ForwardTrace { prototypes: PrototypeSet { classes: protos, provenance: variant.provenance() }, classes })
}

/// Full module on a 1-way support split: prototypes for `[BG, FG]`.
pub fn warm_forward(params: &WarmParams, fg: &Matrix, bg: &Matrix, eps: f64) -> Result<ForwardTrace> {
    forward_classes(params, &[0, 1], &[bg, fg], Variant::WARM, eps)
}

/// Plain cross-attention with residual, no alignment.
pub fn naive_forward(params: &WarmParams, fg: &Matrix, bg: &Matrix) -> Result<ForwardTrace> {
    forward_classes(params, &[0, 1], &[bg, fg], Variant::NAIVE, DEFAULT_EPS)
}

/// Any alignment/restoration combination on a 1-way support split.
pub fn ablation_forward(params: &WarmParams, fg: &Matrix, bg: &Matrix, variant: Variant, eps: f64) -> Result<ForwardTrace> {
    forward_classes(params, &[0, 1], &[bg, fg], variant, eps)
}

/// Gradients for every learnable value of [`WarmParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tokens: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub biases: Option<[Vec<f64>; 3]>,
}

impl ParamGrads {
    pub fn zeros_like(params: &WarmParams) -> Self {
        let d = params.dim();
        Self {
            tokens: Matrix::zeros(params.tokens.rows(), d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            biases: params.biases.as_ref().map(|_| [vec![0.0; d], vec![0.0; d], vec![0.0; d]]),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        self.tokens.add_assign(&other.tokens);
        self.wq.add_assign(&other.wq);
        self.wk.add_assign(&other.wk);
        self.wv.add_assign(&other.wv);
        if let (Some(a), Some(b)) = (&mut self.biases, &other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
            }
        }
    }

    /// Same layout as [`WarmParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in [&self.tokens, &self.wq, &self.wk, &self.wv] {
            out.extend_from_slice(m.as_slice());
        }
        if let Some(b) = &self.biases {
            b.iter().for_each(|v| out.extend_from_slice(v));
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.to_flat().iter().map(|v| v * v).sum())
    }
}

/// Reverse-mode pass through [`forward_classes`].
///
/// `proto_grads[i]` is the loss gradient with respect to the prototypes of
/// `trace.classes[i]`. Gradients of all classes are summed.
pub fn warm_backward(params: &WarmParams, trace: &ForwardTrace, proto_grads: &[Matrix]) -> Result<ParamGrads> {
    let mut grads = ParamGrads::zeros_like(params);
    backward_into(params, trace, proto_grads, &mut grads)?;
    Ok(grads)
}

/// Like [`warm_backward`] but accumulates into existing gradients.
pub fn backward_into(params: &WarmParams, trace: &ForwardTrace, proto_grads: &[Matrix], grads: &mut ParamGrads) -> Result<()> {
    if proto_grads.len() != trace.classes.len() {
        return Err(Error::Usage(format!(
            "{} prototype gradients for a trace of {} classes",
            proto_grads.len(),
            trace.classes.len()
        )));
    }
    let m = params.tokens_per_class;
    let scale = params.logit_scale();
    for (ct, g) in trace.classes.iter().zip(proto_grads) {
        if g.shape() != ct.output.attended.shape() {
            return Err(Error::Shape(format!("prototype gradient {:?} vs {:?}", g.shape(), ct.output.attended.shape())));
        }
        let at = &ct.attention;
        let a = &ct.output.weights;
        let d_tilde = match &ct.restore {
            Some(map) => map.restore_backward(g),
            None => g.clone(),
        };
        // residual: P̃ = P0 + A·V
        let mut d_tokens = d_tilde.clone();
        let d_a = d_tilde.matmul_t(&at.v);
        let d_v = a.t_matmul(&d_tilde);
        // softmax Jacobian, row by row
        let mut d_s = Matrix::zeros(a.rows(), a.cols());
        for i in 0..a.rows() {
            let (ar, dar) = (a.row(i), d_a.row(i));
            let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
            for (j, o) in d_s.row_mut(i).iter_mut().enumerate() {
                *o = ar[j] * (dar[j] - inner) * scale;
            }
        }
        let d_q = d_s.matmul(&at.k);
        let d_k = d_s.t_matmul(&at.q);
        grads.wq.add_assign(&at.queries_in.t_matmul(&d_q));
        grads.wk.add_assign(&at.keys_in.t_matmul(&d_k));
        grads.wv.add_assign(&at.keys_in.t_matmul(&d_v));
        d_tokens.add_assign(&d_q.matmul_t(&params.wq));
        if let Some(b) = &mut grads.biases {
            for (acc, src) in b.iter_mut().zip([&d_q, &d_k, &d_v]) {
                acc.iter_mut().zip(src.col_sums()).for_each(|(x, y)| *x += y);
            }
        }
        let start = params.pool_index(ct.class) * m;
        for r in 0..m {
            for (x, y) in grads.tokens.row_mut(start + r).iter_mut().zip(d_tokens.row(r)) {
                *x += y;
            }
        }
    }
    Ok(())
}

/// Prototypes for a whole episode plus the traces needed for backward.
///
/// Every support cloud `(n, k)` yields foreground prototypes for way `n` and
/// background prototypes from its remaining points. Foreground prototypes are
/// averaged over the `K` shots of their way, background prototypes over all
/// `N·K` support clouds.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    pub prototypes: PrototypeSet,
    /// One trace per support cloud, classes ordered `[BG, FG]`.
    pub clouds: Vec<ForwardTrace>,
    /// Prototype class of the foreground half of each cloud trace.
    pub cloud_way: Vec<usize>,
    n_way: usize,
    k_shot: usize,
}

impl EpisodeForward {
    pub fn run(params: &WarmParams, episode: &Episode, variant: Variant, eps: f64) -> Result<Self> {
        episode.validate()?;
        if params.n_way() != episode.n_way {
            return Err(Error::Shape(format!(
                "parameters serve {} ways, episode has {}",
                params.n_way(),
                episode.n_way
            )));
        }
        if params.dim() != episode.dim() {
            return Err(Error::Shape(format!("parameters have D={}, episode has D={}", params.dim(), episode.dim())));
        }
        let (n, k) = (episode.n_way, episode.k_shot);
        let mut clouds = Vec::with_capacity(n * k);
        let mut cloud_way = Vec::with_capacity(n * k);
        for way in 0..n {
            for shot in 0..k {
                let class = way + 1;
                let split = split_fg_bg(episode.support_cloud(way, shot), class as u32)?;
                if split.bg_is_empty() {
                    return Err(Error::EmptyClass(BACKGROUND as usize));
                }
                clouds.push(forward_classes(params, &[0, class], &[&split.bg, &split.fg], variant, eps)?);
                cloud_way.push(class);
            }
        }
        let d = params.dim();
        let m = params.tokens_per_class;
        let mut classes = vec![Matrix::zeros(m, d); n + 1];
        for (t, &class) in clouds.iter().zip(&cloud_way) {
            classes[0].add_assign(&t.prototypes.classes[0]);
            classes[class].add_assign(&t.prototypes.classes[1]);
        }
        classes[0].scale_assign(1.0 / (n * k) as f64);
        for c in classes.iter_mut().skip(1) {
            c.scale_assign(1.0 / k as f64);
        }
        let prototypes = PrototypeSet { classes, provenance: variant.provenance() };
        Ok(Self { prototypes, clouds, cloud_way, n_way: n, k_shot: k })
    }

    /// Pulls per-class prototype gradients back through shot averaging and
    /// every cloud's forward pass.
    pub fn backward(&self, params: &WarmParams, proto_grads: &[Matrix]) -> Result<ParamGrads> {
        if proto_grads.len() != self.n_way + 1 {
            return Err(Error::Usage(format!("{} class gradients for {} classes", proto_grads.len(), self.n_way + 1)));
        }
        let bg = proto_grads[0].scale(1.0 / (self.n_way * self.k_shot) as f64);
        let mut grads = ParamGrads::zeros_like(params);
        for (t, &class) in self.clouds.iter().zip(&self.cloud_way) {
            let fg = proto_grads[class].scale(1.0 / self.k_shot as f64);
            backward_into(params, t, &[bg.clone(), fg], &mut grads)?;
        }
        Ok(grads)
    }

    /// Attention weights of every (cloud, class) pair.
    pub fn attention_maps(&self) -> impl Iterator<Item = &Matrix> {
        self.clouds.iter().flat_map(|t| t.classes.iter().map(|c| &c.output.weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gaussian()).collect()).unwrap()
    }

    fn params(d: usize, m: usize, rng: &mut Rng) -> WarmParams {
        let p = WarmParams::init(d, m, 1, InitConfig { token_std: 0.5, proj_noise_std: 0.3, ..Default::default() }, rng);
        p.validate().unwrap();
        p
    }

    #[test]
    fn stats_examples() {
        let s = compute_stats(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), DEFAULT_EPS).unwrap();
        assert_eq!(s.mean, vec![2.0, 3.0]);

        let f = m(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let s = compute_stats(&f, DEFAULT_EPS).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert!(s.cov.sub(&Matrix::from_diag(&[2.0 / 3.0, 2.0 / 3.0])).max_abs() < 1e-15);
        let z = whiten(&f, &s).unwrap();
        assert!(z.sub(&f.scale(libm::sqrt(1.5))).max_abs() < 1e-12);
        let mut ztz = z.t_matmul(&z);
        ztz.scale_assign(1.0 / 3.0);
        assert!(ztz.sub(&Matrix::identity(2)).max_abs() < 1e-12);

        assert!(matches!(compute_stats(&m(&[&[1.0]]), DEFAULT_EPS), Err(Error::InsufficientPoints(1))));
    }

    #[test]
    fn constant_rows_hit_the_clamp() {
        let f = m(&[&[2.0, 5.0], &[2.0, 5.0], &[2.0, 5.0]]);
        let s = compute_stats(&f, 1e-4).unwrap();
        assert_eq!(s.cov.max_abs(), 0.0);
        assert!(s.inv_sqrt.sub(&Matrix::identity(2).scale(100.0)).max_abs() < 1e-9);
    }

    #[test]
    fn color_examples() {
        let s = WhitenStats {
            mean: vec![0.0; 2],
            cov: Matrix::identity(2),
            inv_sqrt: Matrix::identity(2),
            sqrt: Matrix::identity(2),
            eps: DEFAULT_EPS,
        };
        let p = m(&[&[1.0, -2.0]]);
        assert_eq!(color(&p, &s).unwrap(), p);
        assert_eq!(whiten(&p, &s).unwrap(), p);

        let s = compute_stats(&m(&[&[1.0, 0.0], &[3.0, 1.0], &[2.0, 5.0]]), DEFAULT_EPS).unwrap();
        let c = color(&Matrix::zeros(3, 2), &s).unwrap();
        for r in c.row_iter() {
            assert_eq!(r, s.mean.as_slice());
        }
        assert!(color(&Matrix::zeros(1, 3), &s).is_err());
    }

    #[test]
    fn singleton_attention() {
        let mut rng = Rng::new(1);
        let p = params(3, 1, &mut rng);
        let key = m(&[&[1.0, 2.0, 3.0]]);
        let out = cross_attention(&random(1, 3, &mut rng), &key, &p).unwrap();
        assert_eq!(out.weights.as_slice(), &[1.0]);
        assert!(out.attended.sub(&key.matmul(&p.wv)).max_abs() < 1e-12);
        assert!(matches!(cross_attention(&key, &Matrix::zeros(0, 3), &p), Err(Error::EmptyKeys)));
    }

    #[test]
    fn zero_logits_average_values() {
        let mut rng = Rng::new(2);
        let mut p = params(3, 2, &mut rng);
        p.wq = Matrix::zeros(3, 3);
        p.wk = Matrix::zeros(3, 3);
        let keys = random(5, 3, &mut rng);
        let out = cross_attention(&random(2, 3, &mut rng), &keys, &p).unwrap();
        assert!(out.weights.as_slice().iter().all(|&w| (w - 0.2).abs() < 1e-15));
        let mean = keys.matmul(&p.wv).col_means();
        for r in out.attended.row_iter() {
            assert!(r.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn attention_matches_definition() {
        let mut rng = Rng::new(3);
        let p = params(4, 3, &mut rng);
        let x = random(3, 4, &mut rng);
        let y = random(6, 4, &mut rng);
        let out = cross_attention(&x, &y, &p).unwrap();
        // definition, spelled out entry by entry
        let q = x.matmul(&p.wq);
        let k = y.matmul(&p.wk);
        let v = y.matmul(&p.wv);
        for i in 0..3 {
            let logits: Vec<f64> = (0..6).map(|j| (0..4).map(|t| q[(i, t)] * k[(j, t)]).sum()).collect();
            let z: f64 = logits.iter().map(|l| libm::exp(*l)).sum();
            let w: Vec<f64> = logits.iter().map(|l| libm::exp(*l) / z).collect();
            let s: f64 = out.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for t in 0..4 {
                let expect: f64 = (0..6).map(|j| w[j] * v[(j, t)]).sum();
                assert!((out.attended[(i, t)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_projections_isolate_coloring() {
        let mut rng = Rng::new(4);
        let mut p = params(3, 2, &mut rng);
        p.wq = Matrix::zeros(3, 3);
        p.wk = Matrix::zeros(3, 3);
        p.wv = Matrix::zeros(3, 3);
        let fg = random(6, 3, &mut rng);
        let bg = random(7, 3, &mut rng);
        let t = warm_forward(&p, &fg, &bg, DEFAULT_EPS).unwrap();
        for (i, f) in [(0usize, &bg), (1, &fg)] {
            let s = compute_stats(f, DEFAULT_EPS).unwrap();
            let expect = color(&p.pool(i), &s).unwrap();
            assert!(t.prototypes.classes[i].sub(&expect).max_abs() < 1e-12);
        }
    }

    #[test]
    fn naive_examples() {
        let mut rng = Rng::new(5);
        let mut p = params(3, 2, &mut rng);
        let fg = random(4, 3, &mut rng);
        let bg = random(4, 3, &mut rng);

        let single = m(&[&[1.0, -1.0, 2.0]]);
        let t = naive_forward(&p, &single, &bg).unwrap();
        let expect = p.pool(1).add_row_vector(single.matmul(&p.wv).row(0));
        assert!(t.prototypes.classes[1].sub(&expect).max_abs() < 1e-12);

        p.wv = Matrix::zeros(3, 3);
        let t = naive_forward(&p, &fg, &bg).unwrap();
        assert_eq!(t.prototypes.classes[1], p.pool(1));
        assert_eq!(t.prototypes.classes[0], p.pool(0));
        assert_eq!(t.prototypes.provenance, Provenance::Naive);
    }

    #[test]
    fn whiten_restore_variant_is_warm() {
        let mut rng = Rng::new(6);
        let p = params(3, 2, &mut rng);
        let fg = random(6, 3, &mut rng);
        let bg = random(8, 3, &mut rng);
        let a = warm_forward(&p, &fg, &bg, DEFAULT_EPS).unwrap().prototypes;
        let b = ablation_forward(&p, &fg, &bg, Variant::WARM, DEFAULT_EPS).unwrap().prototypes;
        assert_eq!(a, b);
    }

    #[test]
    fn centering_zero_mean_data_is_naive() {
        let mut rng = Rng::new(7);
        let p = params(2, 2, &mut rng);
        let fg = m(&[&[1.0, 2.0], &[-1.0, -2.0], &[3.0, 0.5], &[-3.0, -0.5]]);
        let bg = m(&[&[0.5, 0.0], &[-0.5, 0.0]]);
        let center = Variant { alignment: Alignment::Center, restore: true };
        let a = ablation_forward(&p, &fg, &bg, center, DEFAULT_EPS).unwrap().prototypes;
        let b = naive_forward(&p, &fg, &bg).unwrap().prototypes;
        for (x, y) in a.classes.iter().zip(&b.classes) {
            assert!(x.sub(y).max_abs() < 1e-12);
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ABLATION_GRID {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("whiten+restore"), Some(Variant::WARM));
        assert_eq!(Variant::parse("bogus"), None);
    }

    #[test]
    fn average_shots_examples() {
        let a = PrototypeSet { classes: vec![m(&[&[1.0, 2.0]]), m(&[&[3.0, -4.0]])], provenance: Provenance::Warm };
        assert_eq!(average_shots(&[a.clone()]).unwrap(), a);
        assert_eq!(average_shots(&[a.clone(), a.clone()]).unwrap(), a);
        let neg = PrototypeSet { classes: a.classes.iter().map(|c| c.scale(-1.0)).collect(), ..a.clone() };
        let z = average_shots(&[a.clone(), neg]).unwrap();
        assert!(z.classes.iter().all(|c| c.max_abs() == 0.0));
        let other = PrototypeSet { provenance: Provenance::Naive, ..a.clone() };
        assert!(average_shots(&[a.clone(), other]).is_err());
        assert!(average_shots(&[]).is_err());
    }

    #[test]
    fn zero_gradient_gives_zero_grads() {
        let mut rng = Rng::new(8);
        let p = params(3, 2, &mut rng);
        let fg = random(5, 3, &mut rng);
        let bg = random(5, 3, &mut rng);
        let t = warm_forward(&p, &fg, &bg, DEFAULT_EPS).unwrap();
        let g = warm_backward(&p, &t, &[Matrix::zeros(2, 3), Matrix::zeros(2, 3)]).unwrap();
        assert_eq!(g.l2_norm(), 0.0);
        assert!(matches!(warm_backward(&p, &t, &[Matrix::zeros(2, 3)]), Err(Error::Usage(_))));
    }

    #[test]
    fn value_path_closed_form() {
        // W_q = W_k = 0 keeps A uniform, so P = (P0 + 1·z̄ᵀW_v)·Σ^½ + 1μᵀ is
        // linear in W_v and dL/dW_v = z̄ (1ᵀ G Σ^½) for L = <G, P>.
        let mut rng = Rng::new(9);
        let mut p = params(3, 2, &mut rng);
        p.wq = Matrix::zeros(3, 3);
        p.wk = Matrix::zeros(3, 3);
        let fg = random(6, 3, &mut rng);
        let bg = random(6, 3, &mut rng);
        let t = warm_forward(&p, &fg, &bg, DEFAULT_EPS).unwrap();
        let g_fg = random(2, 3, &mut rng);
        let grads = warm_backward(&p, &t, &[Matrix::zeros(2, 3), g_fg.clone()]).unwrap();

        let s = compute_stats(&fg, DEFAULT_EPS).unwrap();
        let zbar = whiten(&fg, &s).unwrap().col_means();
        let colsum = Matrix::from_vec(1, 3, g_fg.matmul(&s.sqrt).col_sums()).unwrap();
        let zbar = Matrix::from_vec(3, 1, zbar).unwrap();
        let expect = zbar.matmul(&colsum);
        assert!(grads.wv.sub(&expect).max_abs() < 1e-12);
        // projected queries and keys are identically zero
        assert!(grads.wq.max_abs() < 1e-12);
        assert!(grads.wk.max_abs() < 1e-12);
    }
}
