//! Farthest point sampling in feature space and the nearest-prototype
//! baseline built on it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FpsResult {
    pub indices: Vec<usize>,
    pub subset: Matrix,
}

/// Greedy farthest point sampling starting from a uniformly drawn row.
pub fn farthest_point_sampling(features: &Matrix, count: usize, rng: &mut Rng) -> Result<FpsResult> {
    let n = features.rows();
    if count == 0 || count > n {
        return Err(Error::Argument(format!("cannot sample {count} of {n} points")));
    }
    let start = rng.index(n);
    farthest_point_sampling_from(features, count, start)
}

/// Farthest point sampling from a fixed first row.
///
/// Each step picks the row with the largest distance to its nearest
/// already-selected row; ties go to the smallest index. Squared distances are
/// compared, which preserves the argmax.
pub fn farthest_point_sampling_from(features: &Matrix, count: usize, start: usize) -> Result<FpsResult> {
    let n = features.rows();
    if count == 0 || count > n {
        return Err(Error::Argument(format!("cannot sample {count} of {n} points")));
    }
    if start >= n {
        return Err(Error::Argument(format!("start index {start} out of {n} points")));
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut indices = Vec::with_capacity(count);
    let mut current = start;
    loop {
        indices.push(current);
        selected[current] = true;
        if indices.len() == count {
            break;
        }
        let anchor = features.row(current);
        let mut best = None::<(usize, f64)>;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = sq_dist(features.row(i), anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            match best {
                Some((_, bd)) if min_d[i] <= bd => {}
                _ => best = Some((i, min_d[i])),
            }
        }
        current = best.expect("unselected rows remain").0;
    }
    let subset = features.select_rows(&indices);
    Ok(FpsResult { indices, subset })
}

/// Labels each query row with the class whose nearest prototype row is
/// closest. `prototypes[c]` holds the rows of class `c`; ties go to the lower
/// class.
pub fn min_dist_classify(query: &Matrix, prototypes: &[Matrix]) -> Result<Vec<u32>> {
    if prototypes.is_empty() {
        return Err(Error::Argument("no prototype classes".into()));
    }
    for (c, p) in prototypes.iter().enumerate() {
        if p.rows() == 0 {
            return Err(Error::Argument(format!("class {c} has no prototypes")));
        }
        if p.cols() != query.cols() {
            return Err(Error::Shape(format!("class {c} prototypes have D={}, query has D={}", p.cols(), query.cols())));
        }
    }
    Ok(query
        .row_iter()
        .map(|q| {
            let mut best = (0u32, f64::INFINITY);
            for (c, p) in prototypes.iter().enumerate() {
                let d = p.row_iter().map(|r| sq_dist(q, r)).fold(f64::INFINITY, f64::min);
                if d < best.1 {
                    best = (c as u32, d);
                }
            }
            best.0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn picks_farthest_from_start() {
        let f = col(&[0.0, 1.0, 10.0]);
        let r = farthest_point_sampling_from(&f, 2, 0).unwrap();
        assert_eq!(r.indices, vec![0, 2]);
        assert_eq!(r.subset.as_slice(), &[0.0, 10.0]);
    }

    #[test]
    fn exhaustion_is_a_permutation() {
        let f = col(&[3.0, -1.0, 4.0, 1.0, 5.0, 9.0]);
        let mut r = farthest_point_sampling(&f, 6, &mut Rng::new(1)).unwrap().indices;
        r.sort();
        assert_eq!(r, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        // rows 1 and 2 are both at distance 1 from row 0
        let f = col(&[0.0, 1.0, -1.0]);
        assert_eq!(farthest_point_sampling_from(&f, 2, 0).unwrap().indices, vec![0, 1]);
    }

    #[test]
    fn rejects_bad_counts() {
        let f = col(&[0.0, 1.0]);
        assert!(farthest_point_sampling(&f, 3, &mut Rng::new(0)).is_err());
        assert!(farthest_point_sampling(&f, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn classify_examples() {
        let protos = [col(&[0.0]), col(&[10.0])];
        assert_eq!(min_dist_classify(&col(&[1.0, 10.0, 5.0]), &protos).unwrap(), vec![0, 1, 0]);
        assert!(min_dist_classify(&col(&[1.0]), &[col(&[0.0]), Matrix::zeros(0, 1)]).is_err());
        assert!(min_dist_classify(&col(&[1.0]), &[]).is_err());
    }
}
