//! Synthetic N-way K-shot episodes.
//!
//! Each benchmark fixes one center per semantic class and per distractor
//! class. A cloud draws a fresh instance center around its class center and
//! scatters points around it through an instance-specific lower-triangular
//! mixing map, so channel correlations differ from instance to instance.
//! Background is a mixture of a few distractor classes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Local label of background points.
pub const BACKGROUND: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub features: Matrix,
    /// Episode-local labels: `0` is background, `n + 1` is way `n`.
    pub labels: Vec<u32>,
}

impl PointCloud {
    pub fn new(features: Matrix, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                labels.len(),
                features.rows()
            )));
        }
        features.ensure_finite("point features")?;
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// Support clouds ordered way-major: cloud `(n, k)` sits at `n * k_shot + k`.
    pub support: Vec<PointCloud>,
    pub query: Vec<PointCloud>,
    /// Global class id of each way.
    pub class_ids: Vec<u32>,
}

impl Episode {
    pub fn support_cloud(&self, way: usize, shot: usize) -> &PointCloud {
        &self.support[way * self.k_shot + shot]
    }

    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, PointCloud::dim)
    }

    /// Checks the structural invariants (counts, label ranges, matching dims).
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::Argument("episode needs n_way >= 1 and k_shot >= 1".into()));
        }
        if self.support.len() != self.n_way * self.k_shot {
            return Err(Error::Shape(format!(
                "{} support clouds for {}-way {}-shot",
                self.support.len(),
                self.n_way,
                self.k_shot
            )));
        }
        if self.class_ids.len() != self.n_way {
            return Err(Error::Shape(format!("{} class ids for {} ways", self.class_ids.len(), self.n_way)));
        }
        let d = self.dim();
        for cloud in self.support.iter().chain(&self.query) {
            if cloud.dim() != d {
                return Err(Error::Shape(format!("cloud with D={} in an episode with D={d}", cloud.dim())));
            }
            if let Some(&l) = cloud.labels.iter().find(|&&l| l as usize > self.n_way) {
                return Err(Error::Argument(format!("label {l} outside 0..={}", self.n_way)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    pub points_per_cloud: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub num_query: usize,
    /// Scale of the per-class centers.
    pub inter_class_scale: f64,
    /// Jitter of an instance center around its class center.
    pub intra_class_scale: f64,
    /// Scatter of points around their instance center.
    pub instance_spread: f64,
    /// Weight of the random triangular mixing map, in `[0, 1)`.
    pub channel_corr_strength: f64,
    pub base_classes: Vec<u32>,
    pub novel_classes: Vec<u32>,
    /// Size of the background distractor pool.
    pub num_distractors: usize,
    /// Distractor classes mixed into each cloud's background.
    pub distractors_per_cloud: usize,
    /// Minimum foreground points of each way in every cloud.
    pub min_fg_points: usize,
    /// Upper bound on the foreground share of a cloud (split across ways).
    pub max_fg_fraction: f64,
    /// Seeds the class and distractor centers.
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            points_per_cloud: 512,
            n_way: 1,
            k_shot: 1,
            num_query: 1,
            inter_class_scale: 10.0,
            intra_class_scale: 3.0,
            instance_spread: 2.0,
            channel_corr_strength: 0.8,
            base_classes: (0..6).collect(),
            novel_classes: (6..12).collect(),
            num_distractors: 8,
            distractors_per_cloud: 3,
            min_fg_points: 32,
            max_fg_fraction: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.n_way == 0 || self.k_shot == 0 || self.num_query == 0 {
            return bad("n_way, k_shot and num_query must be positive".into());
        }
        for (name, v) in [
            ("inter_class_scale", self.inter_class_scale),
            ("intra_class_scale", self.intra_class_scale),
            ("instance_spread", self.instance_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.channel_corr_strength) {
            return bad(format!("channel_corr_strength must lie in [0, 1), got {}", self.channel_corr_strength));
        }
        if let Some(c) = self.base_classes.iter().find(|c| self.novel_classes.contains(c)) {
            return bad(format!("class {c} is both a base and a novel class"));
        }
        for (name, set) in [("base_classes", &self.base_classes), ("novel_classes", &self.novel_classes)] {
            if set.len() < self.n_way {
                return bad(format!("{name} has {} classes, fewer than n_way={}", set.len(), self.n_way));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return bad(format!("{name} contains duplicates"));
            }
        }
        if self.distractors_per_cloud == 0 || self.distractors_per_cloud > self.num_distractors {
            return bad(format!(
                "distractors_per_cloud={} must lie in 1..={}",
                self.distractors_per_cloud, self.num_distractors
            ));
        }
        if !(self.max_fg_fraction > 0.0 && self.max_fg_fraction < 1.0) {
            return bad(format!("max_fg_fraction must lie in (0, 1), got {}", self.max_fg_fraction));
        }
        let fg_cap = self.fg_cap();
        if self.min_fg_points == 0 || fg_cap < self.min_fg_points {
            return bad(format!(
                "{} points per cloud cannot hold {} ways of at least {} foreground points",
                self.points_per_cloud, self.n_way, self.min_fg_points
            ));
        }
        if self.points_per_cloud <= self.n_way * fg_cap {
            return bad("no room left for background points".into());
        }
        Ok(())
    }

    /// Largest foreground count a single way may take in one cloud.
    fn fg_cap(&self) -> usize {
        let total = (self.max_fg_fraction * self.points_per_cloud as f64) as usize;
        total / self.n_way
    }

    fn num_class_centers(&self) -> usize {
        self.base_classes.iter().chain(&self.novel_classes).map(|&c| c as usize + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Base,
    Novel,
}

/// Fixed class geometry shared by every episode of one benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark {
    cfg: GeneratorConfig,
    class_centers: Matrix,
    distractor_centers: Matrix,
}

impl Benchmark {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        let mut rng = Rng::new(cfg.seed);
        let mut draw = |n: usize| {
            let data = (0..n * d).map(|_| cfg.inter_class_scale * rng.gaussian()).collect();
            Matrix::from_vec(n, d, data)
        };
        let class_centers = draw(cfg.num_class_centers())?;
        let distractor_centers = draw(cfg.num_distractors)?;
        Ok(Self { cfg, class_centers, distractor_centers })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn class_center(&self, class_id: u32) -> &[f64] {
        self.class_centers.row(class_id as usize)
    }

    pub fn classes(&self, split: Split) -> &[u32] {
        match split {
            Split::Base => &self.cfg.base_classes,
            Split::Novel => &self.cfg.novel_classes,
        }
    }

    /// Draws one episode over the classes of `split`.
    pub fn episode(&self, split: Split, rng: &mut Rng) -> Result<Episode> {
        let cfg = &self.cfg;
        let class_ids = rng.choose_distinct(self.classes(split), cfg.n_way);
        let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
        for (way, &class_id) in class_ids.iter().enumerate() {
            for _ in 0..cfg.k_shot {
                support.push(self.cloud(&[(class_id, way as u32 + 1)], rng)?);
            }
        }
        let ways: Vec<(u32, u32)> = class_ids.iter().enumerate().map(|(w, &c)| (c, w as u32 + 1)).collect();
        let query = (0..cfg.num_query).map(|_| self.cloud(&ways, rng)).collect::<Result<Vec<_>>>()?;
        Ok(Episode { n_way: cfg.n_way, k_shot: cfg.k_shot, support, query, class_ids })
    }

    /// A cloud holding one foreground instance per `(class id, label)` pair
    /// and a distractor mixture for the remaining points.
    fn cloud(&self, ways: &[(u32, u32)], rng: &mut Rng) -> Result<PointCloud> {
        let cfg = &self.cfg;
        let d = cfg.feature_dim;
        let l = cfg.points_per_cloud;
        let mut data = Vec::with_capacity(l * d);
        let mut labels = Vec::with_capacity(l);

        for &(class_id, label) in ways {
            let n = rng.range_inclusive(cfg.min_fg_points, self.cfg.fg_cap());
            self.instance(self.class_centers.row(class_id as usize), n, rng, &mut data);
            labels.extend(core::iter::repeat_n(label, n));
        }

        let n_bg = l - labels.len();
        let pool: Vec<usize> = (0..cfg.num_distractors).collect();
        let chosen = rng.choose_distinct(&pool, cfg.distractors_per_cloud);
        // random mixture proportions, each distractor keeps at least one point
        let mut counts = vec![1usize; chosen.len()];
        for _ in chosen.len()..n_bg {
            counts[rng.index(chosen.len())] += 1;
        }
        for (&dc, &n) in chosen.iter().zip(&counts) {
            self.instance(self.distractor_centers.row(dc), n, rng, &mut data);
        }
        labels.extend(core::iter::repeat_n(BACKGROUND, n_bg));

        let mut order: Vec<usize> = (0..l).collect();
        rng.shuffle(&mut order);
        let features = Matrix::from_vec(l, d, data)?.select_rows(&order);
        let labels = order.iter().map(|&i| labels[i]).collect();
        PointCloud::new(features, labels)
    }

    /// Appends `n` points of one instance of the class centred at `center`.
    fn instance(&self, center: &[f64], n: usize, rng: &mut Rng, out: &mut Vec<f64>) {
        let cfg = &self.cfg;
        let d = cfg.feature_dim;
        let inst_center: Vec<f64> = center.iter().map(|c| c + cfg.intra_class_scale * rng.gaussian()).collect();
        let mixing = triangular_mixing(d, cfg.channel_corr_strength, rng);
        let mut g = vec![0.0; d];
        for _ in 0..n {
            g.iter_mut().for_each(|v| *v = rng.gaussian());
            for i in 0..d {
                let row = mixing.row(i);
                let mixed: f64 = row[..=i].iter().zip(&g).map(|(a, b)| a * b).sum();
                out.push(inst_center[i] + cfg.instance_spread * mixed);
            }
        }
    }
}

/// `√(1−ρ)·I + √ρ·T` with `T` lower triangular, row `i` drawn `N(0, 1/(i+1))`
/// so each channel keeps roughly unit variance.
fn triangular_mixing(d: usize, strength: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    let (a, b) = (libm::sqrt(1.0 - strength), libm::sqrt(strength));
    for i in 0..d {
        let s = b / libm::sqrt((i + 1) as f64);
        for j in 0..=i {
            m[(i, j)] = s * rng.gaussian();
        }
        m[(i, i)] += a;
    }
    m
}

/// Draws one episode of `split` from a freshly built benchmark.
pub fn gen_episode(cfg: &GeneratorConfig, split: Split, rng: &mut Rng) -> Result<Episode> {
    Benchmark::new(cfg.clone())?.episode(split, rng)
}

/// Foreground and background rows of one support cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FgBgSplit {
    pub fg: Matrix,
    pub bg: Matrix,
}

impl FgBgSplit {
    pub fn bg_is_empty(&self) -> bool {
        self.bg.rows() == 0
    }
}

/// Partitions rows by `label == class_label`, keeping the original order.
pub fn split_fg_bg(cloud: &PointCloud, class_label: u32) -> Result<FgBgSplit> {
    let (fg_idx, bg_idx): (Vec<usize>, Vec<usize>) =
        (0..cloud.len()).partition(|&i| cloud.labels[i] == class_label);
    if fg_idx.is_empty() {
        return Err(Error::EmptyClass(class_label as usize));
    }
    Ok(FgBgSplit { fg: cloud.features.select_rows(&fg_idx), bg: cloud.features.select_rows(&bg_idx) })
}
