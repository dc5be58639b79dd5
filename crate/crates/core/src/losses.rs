//! Nearest-prototype inference and the training objective.
//!
//! Every min/max is differentiated through its selected index (lowest index
//! on ties), the usual subgradient convention for distance losses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{dist, sq_dist, Matrix};
use crate::warm::PrototypeSet;

/// Default weight of the simplification term.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Distance from every query point to the nearest prototype of every class.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    /// `classes × points`.
    pub d: Matrix,
    /// Row index of the nearest prototype, `classes × points`.
    pub nearest: Vec<Vec<usize>>,
}

impl DistanceField {
    pub fn num_classes(&self) -> usize {
        self.d.rows()
    }

    pub fn num_points(&self) -> usize {
        self.d.cols()
    }

    /// Distance to the true class and to the closest other class (with that
    /// class's index) for point `l`.
    pub fn pos_neg(&self, l: usize, truth: u32) -> (f64, f64, usize) {
        let t = truth as usize;
        let mut neg = (f64::INFINITY, usize::MAX);
        for c in 0..self.num_classes() {
            if c != t && self.d[(c, l)] < neg.0 {
                neg = (self.d[(c, l)], c);
            }
        }
        (self.d[(t, l)], neg.0, neg.1)
    }
}

fn nearest_row(point: &[f64], rows: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, r) in rows.row_iter().enumerate() {
        let d = sq_dist(point, r);
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, libm::sqrt(best.1))
}

fn check_protos(protos: &PrototypeSet, dim: usize) -> Result<()> {
    if protos.classes.is_empty() {
        return Err(Error::Argument("prototype set has no classes".into()));
    }
    for (c, p) in protos.classes.iter().enumerate() {
        if p.rows() == 0 {
            return Err(Error::Argument(format!("class {c} has no prototypes")));
        }
        if p.cols() != dim {
            return Err(Error::Shape(format!("class {c} prototypes have D={}, features have D={dim}", p.cols())));
        }
    }
    Ok(())
}

pub fn point_distances(query: &Matrix, protos: &PrototypeSet) -> Result<DistanceField> {
    check_protos(protos, query.cols())?;
    let (c, l) = (protos.num_classes(), query.rows());
    let mut d = Matrix::zeros(c, l);
    let mut nearest = vec![vec![0; l]; c];
    for (ci, p) in protos.classes.iter().enumerate() {
        for (li, q) in query.row_iter().enumerate() {
            let (idx, dd) = nearest_row(q, p);
            d[(ci, li)] = dd;
            nearest[ci][li] = idx;
        }
    }
    Ok(DistanceField { d, nearest })
}

/// Class of minimal distance per point; ties go to the lower class.
pub fn predict(field: &DistanceField) -> Vec<u32> {
    (0..field.num_points())
        .map(|l| {
            let mut best = (0u32, f64::INFINITY);
            for c in 0..field.num_classes() {
                if field.d[(c, l)] < best.1 {
                    best = (c as u32, field.d[(c, l)]);
                }
            }
            best.0
        })
        .collect()
}

fn check_truth(field: &DistanceField, truth: &[u32]) -> Result<()> {
    if truth.len() != field.num_points() {
        return Err(Error::Shape(format!("{} labels for {} points", truth.len(), field.num_points())));
    }
    if field.num_classes() < 2 {
        return Err(Error::Argument("margin loss needs at least two classes".into()));
    }
    if let Some(&t) = truth.iter().find(|&&t| t as usize >= field.num_classes()) {
        return Err(Error::Argument(format!("label {t} has no prototypes")));
    }
    Ok(())
}

/// `Σ_l max(d_pos − d_neg + margin, 0)` with `d_neg` the closest other class.
pub fn margin_loss_with(field: &DistanceField, truth: &[u32], margin: f64) -> Result<f64> {
    check_truth(field, truth)?;
    Ok(truth
        .iter()
        .enumerate()
        .map(|(l, &t)| {
            let (pos, neg, _) = field.pos_neg(l, t);
            (pos - neg + margin).max(0.0)
        })
        .sum())
}

pub fn margin_loss(field: &DistanceField, truth: &[u32]) -> Result<f64> {
    margin_loss_with(field, truth, 0.0)
}

/// Adds `scale · ∂‖q − p‖/∂p` to `grad` (zero when the points coincide).
fn push_dist_grad(grad: &mut [f64], q: &[f64], p: &[f64], scale: f64) {
    let d = dist(q, p);
    if d > 0.0 {
        for ((g, &pi), &qi) in grad.iter_mut().zip(p).zip(q) {
            *g += scale * (pi - qi) / d;
        }
    }
}

/// Margin loss and its gradient with respect to every prototype matrix.
pub fn margin_loss_grad(
    query: &Matrix,
    truth: &[u32],
    protos: &PrototypeSet,
    margin: f64,
) -> Result<(f64, Vec<Matrix>)> {
    let field = point_distances(query, protos)?;
    check_truth(&field, truth)?;
    let mut grads: Vec<Matrix> = protos.classes.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    let mut loss = 0.0;
    for (l, &t) in truth.iter().enumerate() {
        let (pos, neg, neg_class) = field.pos_neg(l, t);
        let hinge = pos - neg + margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        let q = query.row(l);
        let t = t as usize;
        let pi = field.nearest[t][l];
        push_dist_grad(grads[t].row_mut(pi), q, protos.classes[t].row(pi), 1.0);
        let ni = field.nearest[neg_class][l];
        push_dist_grad(grads[neg_class].row_mut(ni), q, protos.classes[neg_class].row(ni), -1.0);
    }
    Ok((loss, grads))
}

/// Pairwise distances `features × prototypes`.
fn pair_dists(features: &Matrix, protos: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(features.rows(), protos.rows());
    for (i, f) in features.row_iter().enumerate() {
        for (j, p) in protos.row_iter().enumerate() {
            d[(i, j)] = dist(f, p);
        }
    }
    d
}

fn check_sim_inputs(class_features: &[&Matrix], protos: &PrototypeSet) -> Result<()> {
    if class_features.is_empty() || class_features.len() != protos.num_classes() {
        return Err(Error::Argument(format!(
            "{} feature sets for {} prototype classes",
            class_features.len(),
            protos.num_classes()
        )));
    }
    check_protos(protos, class_features[0].cols())?;
    for (c, f) in class_features.iter().enumerate() {
        if f.rows() == 0 {
            return Err(Error::EmptyClass(c));
        }
        if f.cols() != protos.dim() {
            return Err(Error::Shape(format!("class {c} features have D={}", f.cols())));
        }
    }
    Ok(())
}

/// Coverage loss averaged over classes: mean feature→nearest-prototype
/// distance, mean prototype→nearest-feature distance and the worst
/// prototype→nearest-feature distance.
pub fn simplification_loss(class_features: &[&Matrix], protos: &PrototypeSet) -> Result<f64> {
    simplification_loss_grad(class_features, protos).map(|(l, _)| l)
}

pub fn simplification_loss_grad(class_features: &[&Matrix], protos: &PrototypeSet) -> Result<(f64, Vec<Matrix>)> {
    check_sim_inputs(class_features, protos)?;
    let n_classes = protos.num_classes() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(protos.num_classes());
    for (f, p) in class_features.iter().zip(&protos.classes) {
        let d = pair_dists(f, p);
        let (lc, m) = (f.rows(), p.rows());
        let mut g = Matrix::zeros(m, p.cols());

        let mut feat_term = 0.0;
        for l in 0..lc {
            let (j, dd) = argmin(d.row(l));
            feat_term += dd;
            push_dist_grad(g.row_mut(j), f.row(l), p.row(j), 1.0 / (lc as f64 * n_classes));
        }
        feat_term /= lc as f64;

        let mut proto_term = 0.0;
        let mut worst = (0usize, 0usize, f64::NEG_INFINITY);
        for j in 0..m {
            let (l, dd) = argmin_col(&d, j);
            proto_term += dd;
            push_dist_grad(g.row_mut(j), f.row(l), p.row(j), 1.0 / (m as f64 * n_classes));
            if dd > worst.2 {
                worst = (j, l, dd);
            }
        }
        proto_term /= m as f64;
        let (wj, wl, wd) = worst;
        push_dist_grad(g.row_mut(wj), f.row(wl), p.row(wj), 1.0 / n_classes);

        total += feat_term + proto_term + wd;
        grads.push(g);
    }
    Ok((total / n_classes, grads))
}

fn argmin(v: &[f64]) -> (usize, f64) {
    v.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &x)| if x < b.1 { (i, x) } else { b })
}

fn argmin_col(m: &Matrix, j: usize) -> (usize, f64) {
    (0..m.rows()).fold((0, f64::INFINITY), |b, i| if m[(i, j)] < b.1 { (i, m[(i, j)]) } else { b })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub margin: f64,
    pub simplification: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn total_loss(margin: f64, simplification: f64, lambda: f64) -> LossReport {
    LossReport { margin, simplification, total: margin + lambda * simplification, lambda }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warm::Provenance;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn set(classes: Vec<Matrix>) -> PrototypeSet {
        PrototypeSet { classes, provenance: Provenance::Fps }
    }

    #[test]
    fn distance_examples() {
        let f = point_distances(&m(&[&[3.0, 4.0]]), &set(vec![m(&[&[0.0, 0.0]])])).unwrap();
        assert_eq!(f.d[(0, 0)], 5.0);
        let f = point_distances(&m(&[&[1.0, 1.0]]), &set(vec![m(&[&[7.0, 7.0], &[1.0, 1.0]])])).unwrap();
        assert_eq!(f.d[(0, 0)], 0.0);
        assert_eq!(f.nearest[0][0], 1);
        assert!(point_distances(&m(&[&[1.0]]), &set(vec![Matrix::zeros(0, 1)])).is_err());
    }

    #[test]
    fn predict_examples() {
        let field = DistanceField { d: m(&[&[1.0], &[2.0]]), nearest: vec![vec![0], vec![0]] };
        assert_eq!(predict(&field), vec![0]);
        let field = DistanceField { d: m(&[&[2.0], &[2.0]]), nearest: vec![vec![0], vec![0]] };
        assert_eq!(predict(&field), vec![0]);
    }

    #[test]
    fn margin_examples() {
        let field = DistanceField { d: m(&[&[1.0], &[2.0]]), nearest: vec![vec![0], vec![0]] };
        assert_eq!(margin_loss(&field, &[0]).unwrap(), 0.0);
        let field = DistanceField { d: m(&[&[2.0], &[1.0]]), nearest: vec![vec![0], vec![0]] };
        assert_eq!(margin_loss(&field, &[0]).unwrap(), 1.0);
        assert!(margin_loss(&field, &[2]).is_err());
        assert_eq!(margin_loss_with(&field, &[1], 0.5).unwrap(), 0.0);
        assert_eq!(margin_loss_with(&field, &[1], 1.5).unwrap(), 0.5);
    }

    #[test]
    fn simplification_single_pair() {
        // every term reduces to ‖f − p‖
        let f0 = m(&[&[0.0, 0.0]]);
        let f1 = m(&[&[1.0, 1.0]]);
        let p = set(vec![m(&[&[3.0, 4.0]]), m(&[&[1.0, 2.0]])]);
        let l = simplification_loss(&[&f0, &f1], &p).unwrap();
        assert!((l - (3.0 * 5.0 + 3.0 * 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn simplification_perfect_cover() {
        let f = m(&[&[0.0, 1.0], &[2.0, 3.0], &[-1.0, 0.5]]);
        let p = set(vec![m(&[&[-1.0, 0.5], &[0.0, 1.0], &[2.0, 3.0]])]);
        assert_eq!(simplification_loss(&[&f], &p).unwrap(), 0.0);
        assert!(simplification_loss(&[], &p).is_err());
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.5).total, 0.0);
        assert_eq!(total_loss(1.0, 2.0, 0.5).total, 2.0);
        assert_eq!(total_loss(1.0, 2.0, 0.0).total, 1.0);
    }
}
