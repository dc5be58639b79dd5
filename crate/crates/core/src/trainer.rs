//! Episodic meta-training of the prototype generator.

use alloc::format;
use alloc::vec::Vec;

use crate::episode::{split_fg_bg, Benchmark, Episode, Split, BACKGROUND};
use crate::error::{Error, Result};
use crate::losses::{margin_loss_grad, simplification_loss_grad, total_loss, LossReport, DEFAULT_LAMBDA};
use crate::matrix::Matrix;
use crate::optim::{adamw_step, OptimizerState};
use crate::rng::Rng;
use crate::warm::{EpisodeForward, InitConfig, ParamGrads, Variant, WarmParams, DEFAULT_EPS};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Fractions of `epochs` after which the learning rate is decayed.
    pub lr_milestones: Vec<f64>,
    pub lambda: f64,
    /// Optional hinge margin; the objective uses none by default.
    pub margin: f64,
    pub eps: f64,
    pub tokens_per_class: usize,
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub variant: Variant,
    pub token_init_std: f64,
    pub proj_init_noise: f64,
    pub use_bias: bool,
    pub scale_logits: bool,
    /// Rescale the gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            episodes_per_epoch: 100,
            lr: 5e-3,
            weight_decay: 0.01,
            lr_decay_factor: 0.1,
            lr_milestones: alloc::vec![0.6, 0.8],
            lambda: DEFAULT_LAMBDA,
            margin: 0.0,
            eps: DEFAULT_EPS,
            tokens_per_class: 100,
            seed: 0,
            n_way: 1,
            k_shot: 1,
            variant: Variant::WARM,
            token_init_std: 0.02,
            proj_init_noise: 0.02,
            use_bias: false,
            scale_logits: false,
            max_grad_norm: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Long schedule: 10 epochs of 400 episodes at lr 1e-4.
    pub fn long_schedule() -> Self {
        Self { epochs: 10, episodes_per_epoch: 400, lr: 1e-4, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(&m) = self.lr_milestones.iter().find(|&&m| !(m > 0.0 && m < 1.0)) {
            return bad(format!("lr milestone {m} must lie strictly inside (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.tokens_per_class == 0 || self.n_way == 0 || self.k_shot == 0 {
            return bad("tokens_per_class, n_way and k_shot must be positive".into());
        }
        if !(self.lambda >= 0.0) || !(self.margin >= 0.0) {
            return bad("lambda and margin must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("moment decay rates must lie in [0, 1) and adam_eps must be positive".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return bad(format!("max_grad_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn init_config(&self) -> InitConfig {
        InitConfig {
            token_std: self.token_init_std,
            proj_noise_std: self.proj_init_noise,
            use_bias: self.use_bias,
            scale_logits: self.scale_logits,
        }
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &m in &self.lr_milestones {
            if epoch as f64 >= m * self.epochs as f64 {
                lr *= self.lr_decay_factor;
            }
        }
        lr
    }

    pub fn total_episodes(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }
}

/// Initial parameters for `cfg` at feature dimension `dim`.
pub fn init_params(cfg: &TrainConfig, dim: usize) -> WarmParams {
    let mut rng = Rng::new(cfg.seed);
    WarmParams::init(dim, cfg.tokens_per_class, cfg.n_way, cfg.init_config(), &mut rng)
}

/// Mixes a stream tag into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Seed of training episode `index`: a per-run base plus the index.
pub fn train_episode_seed(train_seed: u64, index: usize) -> u64 {
    derive_seed(train_seed, TRAIN_STREAM).wrapping_add(index as u64)
}

/// Evaluation episodes over the novel classes, `base + i` seeded.
pub fn eval_episodes(bench: &Benchmark, count: usize, seed: u64) -> Result<Vec<Episode>> {
    let base = derive_seed(seed, EVAL_STREAM);
    (0..count).map(|i| bench.episode(Split::Novel, &mut Rng::new(base.wrapping_add(i as u64)))).collect()
}

/// Support rows of every prototype class: background rows of all support
/// clouds, and the foreground rows of each way across its shots.
pub fn class_support_features(episode: &Episode) -> Result<Vec<Matrix>> {
    let mut bg = Vec::new();
    let mut fg = Vec::new();
    for way in 0..episode.n_way {
        let mut shots = Vec::new();
        for shot in 0..episode.k_shot {
            let s = split_fg_bg(episode.support_cloud(way, shot), way as u32 + 1)?;
            shots.push(s.fg);
            bg.push(s.bg);
        }
        fg.push(Matrix::vstack(&shots.iter().collect::<Vec<_>>())?);
    }
    let mut out = Vec::with_capacity(episode.n_way + 1);
    out.push(Matrix::vstack(&bg.iter().collect::<Vec<_>>())?);
    out.extend(fg);
    if out[0].rows() == 0 {
        return Err(Error::EmptyClass(BACKGROUND as usize));
    }
    Ok(out)
}

/// Loss of one episode and its gradient with respect to each class's prototypes.
pub fn episode_objective(
    episode: &Episode,
    prototypes: &crate::warm::PrototypeSet,
    lambda: f64,
    margin: f64,
) -> Result<(LossReport, Vec<Matrix>)> {
    let mut margin_total = 0.0;
    let mut grads: Vec<Matrix> = prototypes.classes.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    for q in &episode.query {
        let (l, g) = margin_loss_grad(&q.features, &q.labels, prototypes, margin)?;
        margin_total += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b));
    }
    let support = class_support_features(episode)?;
    let (sim, sim_grads) = simplification_loss_grad(&support.iter().collect::<Vec<_>>(), prototypes)?;
    grads.iter_mut().zip(&sim_grads).for_each(|(a, b)| a.add_assign(&b.scale(lambda)));
    Ok((total_loss(margin_total, sim, lambda), grads))
}

/// Total loss and parameter gradients for one episode.
pub fn loss_and_grads(
    params: &WarmParams,
    episode: &Episode,
    variant: Variant,
    eps: f64,
    lambda: f64,
    margin: f64,
) -> Result<(LossReport, ParamGrads)> {
    let fwd = EpisodeForward::run(params, episode, variant, eps)?;
    let (report, proto_grads) = episode_objective(episode, &fwd.prototypes, lambda, margin)?;
    let grads = fwd.backward(params, &proto_grads)?;
    Ok((report, grads))
}

/// Mean total loss of `params` over the first `count` training episodes of
/// `cfg`, without updating anything. Comparing two parameter sets on the
/// same episodes removes the episode-to-episode variation of the log.
pub fn replay_loss(cfg: &TrainConfig, bench: &Benchmark, params: &WarmParams, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(Error::Argument("replay over zero episodes".into()));
    }
    let mut total = 0.0;
    for idx in 0..count {
        let episode = bench.episode(Split::Base, &mut Rng::new(train_episode_seed(cfg.seed, idx)))?;
        let fwd = EpisodeForward::run(params, &episode, cfg.variant, cfg.eps)?;
        total += episode_objective(&episode, &fwd.prototypes, cfg.lambda, cfg.margin)?.0.total;
    }
    Ok(total / count as f64)
}

/// Elapsed wall time source for the training log.
pub trait Clock {
    fn elapsed_ms(&self) -> u64;
}

/// Always reports zero, keeping logs reproducible byte for byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn elapsed_ms(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub episode_idx: usize,
    pub loss_margin: f64,
    pub loss_sim: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: WarmParams,
    pub optimizer: OptimizerState,
    pub log: Vec<TrainLogRecord>,
}

/// One optimizer step per episode over base-class episodes of `bench`.
pub fn train(cfg: &TrainConfig, bench: &Benchmark, clock: &dyn Clock) -> Result<TrainOutcome> {
    cfg.validate()?;
    let gen = bench.config();
    if gen.n_way != cfg.n_way || gen.k_shot != cfg.k_shot {
        return Err(Error::Config(format!(
            "trainer expects {}-way {}-shot, generator produces {}-way {}-shot",
            cfg.n_way, cfg.k_shot, gen.n_way, gen.k_shot
        )));
    }
    let mut params = init_params(cfg, gen.feature_dim);
    let mut opt = OptimizerState::for_params(&params);
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.eps = cfg.adam_eps;
    let mut flat = params.to_flat();
    let mut log = Vec::with_capacity(cfg.total_episodes());

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for e in 0..cfg.episodes_per_epoch {
            let idx = epoch * cfg.episodes_per_epoch + e;
            let seed = train_episode_seed(cfg.seed, idx);
            let episode = bench.episode(Split::Base, &mut Rng::new(seed))?;
            if let Some(c) = episode.class_ids.iter().find(|c| !gen.base_classes.contains(c)) {
                return Err(Error::Usage(format!("training episode {idx} uses non-base class {c}")));
            }
            let (report, grads) = loss_and_grads(&params, &episode, cfg.variant, cfg.eps, cfg.lambda, cfg.margin)
                .map_err(|e| Error::Numeric(format!("episode {idx} (seed {seed}): {e}")))?;
            let mut g = grads.to_flat();
            let grad_norm = libm::sqrt(g.iter().map(|v| v * v).sum());
            if !report.total.is_finite() || !grad_norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} or gradient norm {grad_norm} at episode {idx} (seed {seed})",
                    report.total
                )));
            }
            if let Some(c) = cfg.max_grad_norm {
                if grad_norm > c {
                    g.iter_mut().for_each(|v| *v *= c / grad_norm);
                }
            }
            adamw_step(&mut flat, &g, &mut opt, lr, cfg.weight_decay);
            params = params.with_flat(&flat);
            log.push(TrainLogRecord {
                episode_idx: idx,
                loss_margin: report.margin,
                loss_sim: report.simplification,
                loss_total: report.total,
                grad_norm,
                lr,
                wall_ms: clock.elapsed_ms(),
            });
        }
    }
    Ok(TrainOutcome { params, optimizer: opt, log })
}
