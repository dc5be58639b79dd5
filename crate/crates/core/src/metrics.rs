//! Segmentation and attention diagnostics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{dist, dot, Matrix};
use crate::warm::WarmParams;

/// Per-class true-positive / false-positive / false-negative counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    counts: BTreeMap<u32, [u64; 3]>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one labelling. Every class in `class_set` is tracked even when it
    /// never occurs, so absent classes are recognisable.
    pub fn add(&mut self, pred: &[u32], truth: &[u32], class_set: &[u32]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        for &c in class_set {
            self.counts.entry(c).or_default();
        }
        for (&p, &t) in pred.iter().zip(truth) {
            for c in [p, t] {
                if !self.counts.contains_key(&c) {
                    return Err(Error::Argument(format!("label {c} outside the class set")));
                }
            }
            if p == t {
                self.counts.get_mut(&p).unwrap()[0] += 1;
            } else {
                self.counts.get_mut(&p).unwrap()[1] += 1;
                self.counts.get_mut(&t).unwrap()[2] += 1;
            }
        }
        Ok(())
    }

    /// Same as [`add`](Self::add) after mapping both labellings through `map`.
    pub fn add_mapped(&mut self, pred: &[u32], truth: &[u32], map: &[u32]) -> Result<()> {
        let lookup = |l: &u32| {
            map.get(*l as usize).copied().ok_or_else(|| Error::Argument(format!("label {l} has no mapping")))
        };
        let p = pred.iter().map(lookup).collect::<Result<Vec<_>>>()?;
        let t = truth.iter().map(lookup).collect::<Result<Vec<_>>>()?;
        self.add(&p, &t, map)
    }

    /// IoU of every class seen in predictions or labels, and their mean.
    pub fn report(&self) -> Result<IouReport> {
        let per_class: Vec<(u32, f64)> = self
            .counts
            .iter()
            .filter(|(_, [tp, fp, fneg])| tp + fp + fneg > 0)
            .map(|(&c, &[tp, fp, fneg])| (c, tp as f64 / (tp + fp + fneg) as f64))
            .collect();
        if per_class.is_empty() {
            return Err(Error::UndefinedMetric("no class occurs in predictions or labels".into()));
        }
        let miou = per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64;
        Ok(IouReport { miou, per_class })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub miou: f64,
    /// `(class, IoU)` in ascending class order.
    pub per_class: Vec<(u32, f64)>,
}

/// Mean IoU of one labelling; classes absent from both sides are skipped.
pub fn miou(pred: &[u32], truth: &[u32], class_set: &[u32]) -> Result<IouReport> {
    let mut acc = IouAccumulator::new();
    acc.add(pred, truth, class_set)?;
    acc.report()
}

/// Foreground features of one episode together with their class.
#[derive(Debug, Clone, Copy)]
pub struct DispersionSample<'a> {
    pub class_id: u32,
    pub features: &'a Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispersion {
    /// Mean center distance over same-class pairs; `None` without such pairs.
    pub d_intra: Option<f64>,
    /// Mean center distance over different-class pairs.
    pub d_inter: Option<f64>,
    /// Mean point-to-center distance, averaged over samples.
    pub d_instance: f64,
}

pub fn dispersion_metrics(samples: &[DispersionSample<'_>]) -> Result<Dispersion> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("no samples".into()));
    }
    let means: Vec<Vec<f64>> = samples.iter().map(|s| s.features.col_means()).collect();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            let d = dist(&means[i], &means[j]);
            let bucket = if samples[i].class_id == samples[j].class_id { &mut intra } else { &mut inter };
            bucket.0 += d;
            bucket.1 += 1;
        }
    }
    let mut instance = 0.0;
    for (s, mu) in samples.iter().zip(&means) {
        if s.features.rows() == 0 {
            return Err(Error::EmptyClass(s.class_id as usize));
        }
        instance += s.features.row_iter().map(|r| dist(r, mu)).sum::<f64>() / s.features.rows() as f64;
    }
    let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
    Ok(Dispersion { d_intra: mean(intra), d_inter: mean(inter), d_instance: instance / samples.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entropy {
    pub value: f64,
    /// Set when there is a single key; the entropy is then 1 by convention.
    pub single_key: bool,
}

/// Mean over rows of `−Σ p ln p / ln L`.
pub fn attention_entropy(a: &Matrix) -> Result<Entropy> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::UndefinedMetric("empty attention map".into()));
    }
    if a.cols() == 1 {
        return Ok(Entropy { value: 1.0, single_key: true });
    }
    let norm = libm::log(a.cols() as f64);
    let total: f64 = a
        .row_iter()
        .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|&p| p * libm::log(p)).sum::<f64>() / norm)
        .sum();
    Ok(Entropy { value: total / a.rows() as f64, single_key: false })
}

/// `1 −` mean cosine similarity over distinct row pairs.
pub fn attention_diversity(a: &Matrix) -> Result<f64> {
    let m = a.rows();
    if m < 2 {
        return Err(Error::UndefinedMetric(format!("diversity needs at least 2 rows, got {m}")));
    }
    let norms: Vec<f64> = a.row_iter().map(|r| libm::sqrt(dot(r, r))).collect();
    let mut sim = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let denom = norms[i] * norms[j];
            if denom > 0.0 {
                sim += dot(a.row(i), a.row(j)) / denom;
            }
        }
    }
    Ok(1.0 - sim / (m * (m - 1) / 2) as f64)
}

/// Mean distance between every projected token `W_q(P0)_m` and every
/// projected key `W_k(F)_l`.
pub fn qk_distance(tokens: &Matrix, keys_in: &Matrix, params: &WarmParams) -> Result<f64> {
    if tokens.rows() == 0 || keys_in.rows() == 0 {
        return Err(Error::UndefinedMetric("query-key distance over an empty set".into()));
    }
    let mut q = tokens.matmul(&params.wq);
    let mut k = keys_in.matmul(&params.wk);
    if let Some(b) = &params.biases {
        q = q.add_row_vector(&b[0]);
        k = k.add_row_vector(&b[1]);
    }
    Ok(mean_pair_distance(&q, &k))
}

/// Mean distance over all row pairs of `a × b`.
pub fn mean_pair_distance(a: &Matrix, b: &Matrix) -> f64 {
    let mut total = 0.0;
    for x in a.row_iter() {
        for y in b.row_iter() {
            total += dist(x, y);
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// Everything reported for one experiment/batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    pub per_class_iou: Vec<(u32, f64)>,
    pub d_intra: Option<f64>,
    pub d_inter: Option<f64>,
    pub d_instance: f64,
    pub attn_entropy: f64,
    pub attn_diversity: f64,
    pub qk_dist: f64,
}
