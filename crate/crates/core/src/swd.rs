//! Sliced 2-Wasserstein distance between point clouds.
//!
//! Both clouds are projected onto random unit directions; each 1-D pair of
//! projections is matched by rank after sorting and the squared gaps are
//! averaged. When the clouds differ in size the smaller sorted list is
//! linearly interpolated at the larger list's quantile positions, which is
//! plain rank matching when the sizes agree.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;

/// `count` unit directions in `dim` dimensions, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    dim: usize,
    seed: Option<u64>,
    directions: Vec<f64>,
}

impl ProjectionSet {
    /// Builds a set from explicit directions, normalising each to unit length.
    pub fn from_directions(dim: usize, directions: &[Vec<f64>]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("dim", "must be at least 1"));
        }
        if directions.is_empty() {
            return Err(Error::Empty("projection set"));
        }
        let mut flat = Vec::with_capacity(dim * directions.len());
        for d in directions {
            if d.len() != dim {
                return Err(Error::DimMismatch { what: "projection direction", expected: dim, got: d.len() });
            }
            let norm = libm::sqrt(d.iter().map(|x| x * x).sum());
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::arg("directions", "zero or non-finite direction"));
            }
            flat.extend(d.iter().map(|x| x / norm));
        }
        Ok(Self { dim, seed: None, directions: flat })
    }

    pub fn count(&self) -> usize {
        self.directions.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn direction(&self, l: usize) -> &[f64] {
        &self.directions[l * self.dim..][..self.dim]
    }
}

/// Draws `count` directions uniformly on the unit sphere of dimension `dim`
/// (normalised standard Gaussian samples).
pub fn sample_projections(count: usize, dim: usize, seed: u64) -> Result<ProjectionSet> {
    if count == 0 {
        return Err(Error::arg("count", "need at least one projection"));
    }
    if dim == 0 {
        return Err(Error::arg("dim", "must be at least 1"));
    }
    let mut r = rng::rng(seed);
    let mut directions = Vec::with_capacity(count * dim);
    let mut v = vec![0.0; dim];
    for _ in 0..count {
        loop {
            for x in v.iter_mut() {
                *x = r.sample(StandardNormal);
            }
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
            if norm > 1e-12 {
                directions.extend(v.iter().map(|x| x / norm));
                break;
            }
        }
    }
    Ok(ProjectionSet { dim, seed: Some(seed), directions })
}

/// A cloud of latent codes from one domain, one code per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    points: Vec<f64>,
    rows: usize,
    dim: usize,
    pub domain_tag: String,
}

impl EmbeddingBatch {
    pub fn new(points: Vec<f64>, dim: usize, domain_tag: impl Into<String>) -> Result<Self> {
        if dim == 0 || points.is_empty() {
            return Err(Error::Empty("embedding batch"));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch { what: "embedding payload", expected: dim, got: points.len() % dim });
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("points", "non-finite embedding value"));
        }
        Ok(Self { rows: points.len() / dim, points, dim, domain_tag: domain_tag.into() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..][..self.dim]
    }
}

/// Estimate plus its gradient with respect to every coordinate of both clouds.
pub(crate) struct SwdEval {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Cost and gradients of matching two ascending lists.
fn match_sorted(xs: &[f64], ys: &[f64], gx: &mut [f64], gy: &mut [f64]) -> f64 {
    if xs.len() == ys.len() {
        let n = xs.len() as f64;
        let mut cost = 0.0;
        for i in 0..xs.len() {
            let d = xs[i] - ys[i];
            cost += d * d;
            gx[i] = 2.0 * d / n;
            gy[i] = -2.0 * d / n;
        }
        return cost / n;
    }
    if xs.len() > ys.len() {
        return match_sorted(ys, xs, gy, gx);
    }
    // xs is the smaller list; interpolate it at each rank of ys.
    let (m, n) = (xs.len(), ys.len());
    gx.fill(0.0);
    let mut cost = 0.0;
    let nf = n as f64;
    for j in 0..n {
        let (lo, frac) = if m == 1 {
            (0, 0.0)
        } else {
            let num = j * (m - 1);
            (num / (n - 1), (num % (n - 1)) as f64 / (n - 1) as f64)
        };
        let hi = (lo + 1).min(m - 1);
        let q = xs[lo] * (1.0 - frac) + xs[hi] * frac;
        let d = q - ys[j];
        cost += d * d;
        gx[lo] += 2.0 * d * (1.0 - frac) / nf;
        gx[hi] += 2.0 * d * frac / nf;
        gy[j] = -2.0 * d / nf;
    }
    cost / nf
}

fn project_sorted(points: &[f64], rows: usize, dir: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let d = dir.len();
    let proj: Vec<f64> = (0..rows).map(|i| points[i * d..][..d].iter().zip(dir).map(|(x, w)| x * w).sum()).collect();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&i, &j| proj[i].total_cmp(&proj[j]));
    (order.iter().map(|&i| proj[i]).collect(), order)
}

pub(crate) fn swd_eval(a: &[f64], rows_a: usize, b: &[f64], rows_b: usize, proj: &ProjectionSet) -> SwdEval {
    let d = proj.dim();
    let l_count = proj.count();
    let mut grad_a = vec![0.0; a.len()];
    let mut grad_b = vec![0.0; b.len()];
    let mut ga = vec![0.0; rows_a];
    let mut gb = vec![0.0; rows_b];
    let mut total = 0.0;
    for l in 0..l_count {
        let dir = proj.direction(l);
        let (sa, oa) = project_sorted(a, rows_a, dir);
        let (sb, ob) = project_sorted(b, rows_b, dir);
        total += match_sorted(&sa, &sb, &mut ga, &mut gb);
        for (r, &i) in oa.iter().enumerate() {
            for k in 0..d {
                grad_a[i * d + k] += ga[r] * dir[k];
            }
        }
        for (r, &i) in ob.iter().enumerate() {
            for k in 0..d {
                grad_b[i * d + k] += gb[r] * dir[k];
            }
        }
    }
    let inv = 1.0 / l_count as f64;
    grad_a.iter_mut().for_each(|g| *g *= inv);
    grad_b.iter_mut().for_each(|g| *g *= inv);
    SwdEval { value: total * inv, grad_a, grad_b }
}

fn check_pair(dim_a: usize, dim_b: usize, proj: &ProjectionSet) -> Result<()> {
    if dim_a != dim_b {
        return Err(Error::DimMismatch { what: "embedding batches", expected: dim_a, got: dim_b });
    }
    if proj.dim() != dim_a {
        return Err(Error::DimMismatch { what: "projection dimension", expected: dim_a, got: proj.dim() });
    }
    Ok(())
}

/// Sliced squared 2-Wasserstein distance between two embedding batches.
pub fn swd2(a: &EmbeddingBatch, b: &EmbeddingBatch, proj: &ProjectionSet) -> Result<f64> {
    check_pair(a.dim, b.dim, proj)?;
    Ok(swd_eval(&a.points, a.rows, &b.points, b.rows, proj).value)
}

/// Differentiable form of [`swd2`] over two `[rows, dim]` matrices on a tape.
/// Gradients flow through the projections and the rank matching, with the
/// sorting permutation held fixed.
pub fn swd2_on_tape(tape: &mut Tape, a: Var, b: Var, proj: &ProjectionSet) -> Result<Var> {
    let (sa, sb) = (tape.value(a).shape().to_vec(), tape.value(b).shape().to_vec());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(Error::shape("swd2", &sa, &sb));
    }
    check_pair(sa[1], sb[1], proj)?;
    let ev = swd_eval(tape.value(a).data(), sa[0], tape.value(b).data(), sb[0], proj);
    Ok(tape.fused_scalar(ev.value, vec![(a, ev.grad_a), (b, ev.grad_b)]))
}

/// Exact squared 2-Wasserstein distance between two equal-size 1-D empirical
/// measures given as ascending lists: the mean squared rank-matched gap.
pub fn exact_w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { what: "1-D samples", expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Err(Error::Empty("1-D sample"));
    }
    for (name, s) in [("a", a), ("b", b)] {
        if s.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::arg(if name == "a" { "a" } else { "b" }, "must be sorted ascending"));
        }
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(points: &[f64], dim: usize) -> EmbeddingBatch {
        EmbeddingBatch::new(points.to_vec(), dim, "t").unwrap()
    }

    #[test]
    fn one_dimensional_direction_is_a_sign() {
        for seed in 0..20 {
            let p = sample_projections(1, 1, seed).unwrap();
            let v = p.direction(0)[0];
            assert!(v == 1.0 || v == -1.0);
        }
    }

    #[test]
    fn directions_are_unit_and_seeded() {
        let p = sample_projections(50, 8, 11).unwrap();
        assert_eq!(p.count(), 50);
        for l in 0..50 {
            let n: f64 = p.direction(l).iter().map(|x| x * x).sum();
            assert!((libm::sqrt(n) - 1.0).abs() < 1e-9);
        }
        assert_eq!(p, sample_projections(50, 8, 11).unwrap());
        assert_ne!(p, sample_projections(50, 8, 12).unwrap());
    }

    #[test]
    fn hand_matched_example() {
        let proj = ProjectionSet::from_directions(1, &[vec![1.0]]).unwrap();
        let v = swd2(&batch(&[0.0, 1.0], 1), &batch(&[2.0, 3.0], 1), &proj).unwrap();
        assert_eq!(v, 4.0);
        let v = swd2(&batch(&[1.0, 0.0], 1), &batch(&[3.0, 2.0], 1), &proj).unwrap();
        assert_eq!(v, 4.0);
    }

    #[test]
    fn identical_batches_are_at_distance_zero() {
        let proj = sample_projections(10, 3, 1).unwrap();
        let a = batch(&[0.1, 0.2, 0.3, -1.0, 2.0, 0.5], 3);
        assert_eq!(swd2(&a, &a, &proj).unwrap(), 0.0);
    }

    #[test]
    fn unequal_sizes_reduce_to_quantile_matching() {
        // One point against two: both ranks of the larger list meet the single atom.
        let proj = ProjectionSet::from_directions(1, &[vec![1.0]]).unwrap();
        let v = swd2(&batch(&[1.0], 1), &batch(&[0.0, 4.0], 1), &proj).unwrap();
        assert_eq!(v, (1.0 + 9.0) / 2.0);
        // Two against three: the middle rank sits halfway between 0 and 2.
        let v = swd2(&batch(&[0.0, 2.0], 1), &batch(&[0.0, 0.0, 2.0], 1), &proj).unwrap();
        assert_eq!(v, 1.0 / 3.0);
    }

    #[test]
    fn errors() {
        let proj = sample_projections(2, 2, 0).unwrap();
        let a = batch(&[0.0, 1.0], 2);
        let b = batch(&[0.0, 1.0, 2.0], 3);
        assert!(swd2(&a, &b, &proj).is_err());
        assert!(EmbeddingBatch::new(vec![], 2, "x").is_err());
        assert!(exact_w2_1d(&[0.0], &[0.0, 1.0]).is_err());
        assert!(exact_w2_1d(&[1.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn exact_1d_cases() {
        assert_eq!(exact_w2_1d(&[0.0], &[5.0]).unwrap(), 25.0);
        assert_eq!(exact_w2_1d(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }
}
