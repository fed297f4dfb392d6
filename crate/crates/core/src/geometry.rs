//! Point containers and brute-force neighborhood kernels.
//!
//! Distances are compared squared. Every kernel breaks ties toward the
//! lower index so results are reproducible bit for bit.

use crate::error::{Error, Result};
use crate::scalar::{cmp_primal, Scalar};

pub type Point<T> = [T; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    coords: Vec<Point<T>>,
    batch_id: Vec<usize>,
}

impl<T: Scalar> PointCloud<T> {
    /// A single-batch cloud.
    pub fn new(coords: Vec<Point<T>>) -> Result<Self> {
        let n = coords.len();
        Self::with_batches(coords, vec![0; n])
    }

    pub fn with_batches(coords: Vec<Point<T>>, batch_id: Vec<usize>) -> Result<Self> {
        if coords.len() != batch_id.len() {
            return Err(Error::shape("PointCloud batch ids", coords.len(), batch_id.len()));
        }
        if let Some(i) = coords.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(&max) = batch_id.iter().max() {
            let mut seen = vec![false; max + 1];
            for &b in &batch_id {
                seen[b] = true;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::InvalidCloud(format!(
                    "batch ids must be contiguous from 0; batch {missing} is empty"
                )));
            }
        }
        Ok(PointCloud { coords, batch_id })
    }

    pub fn coords(&self) -> &[Point<T>] {
        &self.coords
    }

    pub fn batch_ids(&self) -> &[usize] {
        &self.batch_id
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn num_batches(&self) -> usize {
        self.batch_id.iter().max().map_or(0, |m| m + 1)
    }

    /// Indices of the points belonging to `batch`, ascending.
    pub fn batch_indices(&self, batch: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.batch_id[i] == batch).collect()
    }

    /// The points of one batch as a standalone single-batch cloud.
    pub fn batch(&self, batch: usize) -> PointCloud<T> {
        let coords = self
            .batch_indices(batch)
            .into_iter()
            .map(|i| self.coords[i])
            .collect::<Vec<_>>();
        let n = coords.len();
        PointCloud {
            coords,
            batch_id: vec![0; n],
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> PointCloud<U> {
        PointCloud {
            coords: self.coords.iter().map(|p| p.map(&f)).collect(),
            batch_id: self.batch_id.clone(),
        }
    }
}

#[inline]
pub fn dist2<T: Scalar>(a: &Point<T>, b: &Point<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest point sampling from `start`.
///
/// Each pick maximizes the distance to the already selected set; equal
/// distances go to the lowest index. The cloud must hold a single batch.
pub fn farthest_point_sample<T: Scalar>(cloud: &PointCloud<T>, n: usize, start: usize) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("farthest_point_sample: cloud"));
    }
    if n > cloud.len() {
        return Err(Error::Size {
            what: "samples",
            requested: n,
            available: cloud.len(),
        });
    }
    if start >= cloud.len() {
        return Err(Error::param("start", format!("{start} out of range for {} points", cloud.len())));
    }
    if cloud.num_batches() > 1 {
        return Err(Error::param("cloud", "farthest point sampling expects a single batch"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    let pts = cloud.coords();
    let mut selected = Vec::with_capacity(n);
    let mut taken = vec![false; pts.len()];
    let mut min_d: Vec<f64> = vec![f64::INFINITY; pts.len()];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == n {
            break;
        }
        let c = pts[current];
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(p, &c).primal();
            if d < min_d[i] {
                min_d[i] = d;
            }
            if taken[i] {
                continue;
            }
            if best.is_none_or(|(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        // n <= len guarantees an untaken point exists here
        current = best.expect("untaken point").0;
    }
    Ok(selected)
}

/// `k` nearest reference points per query, ascending by distance.
///
/// With `batch_mask`, query `q` only sees references whose batch id equals
/// `batch_mask[q]`.
pub fn knn<T: Scalar>(
    queries: &[Point<T>],
    reference: &PointCloud<T>,
    k: usize,
    batch_mask: Option<&[usize]>,
) -> Result<Vec<Vec<usize>>> {
    if let Some(mask) = batch_mask {
        if mask.len() != queries.len() {
            return Err(Error::shape("knn batch mask", queries.len(), mask.len()));
        }
    }
    let refs = reference.coords();
    let ref_batch = reference.batch_ids();
    let mut out = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let mut cand: Vec<(T, usize)> = (0..refs.len())
            .filter(|&j| batch_mask.is_none_or(|m| ref_batch[j] == m[qi]))
            .map(|j| (dist2(q, &refs[j]), j))
            .collect();
        if k > cand.len() {
            return Err(Error::Size {
                what: "neighbors",
                requested: k,
                available: cand.len(),
            });
        }
        cand.sort_by(|a, b| cmp_primal(a.0, b.0).then(a.1.cmp(&b.1)));
        out.push(cand.into_iter().take(k).map(|(_, j)| j).collect());
    }
    Ok(out)
}

/// Up to `k_max` points within `radius` of each center, nearest first.
///
/// Under-full neighborhoods are padded with the first (nearest) in-radius
/// index. A center with nothing in range gets its nearest point repeated.
pub fn ball_query<T: Scalar>(
    centers: &[Point<T>],
    cloud: &PointCloud<T>,
    radius: T,
    k_max: usize,
    batch_mask: Option<&[usize]>,
) -> Result<Vec<Vec<usize>>> {
    if !(radius > T::zero()) {
        return Err(Error::param("radius", "must be positive"));
    }
    if k_max == 0 {
        return Err(Error::param("k_max", "must be at least 1"));
    }
    if let Some(mask) = batch_mask {
        if mask.len() != centers.len() {
            return Err(Error::shape("ball_query batch mask", centers.len(), mask.len()));
        }
    }
    let r2 = (radius * radius).primal();
    let pts = cloud.coords();
    let ids = cloud.batch_ids();
    let mut out = Vec::with_capacity(centers.len());
    for (ci, c) in centers.iter().enumerate() {
        let mut cand: Vec<(f64, usize)> = (0..pts.len())
            .filter(|&j| batch_mask.is_none_or(|m| ids[j] == m[ci]))
            .map(|j| (dist2(c, &pts[j]).primal(), j))
            .collect();
        if cand.is_empty() {
            return Err(Error::EmptyInput("ball_query: no candidate points in batch"));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let inside = cand.iter().take_while(|(d, _)| *d <= r2).count();
        let mut group: Vec<usize> = cand.iter().take(inside.min(k_max)).map(|&(_, j)| j).collect();
        let pad = cand[0].1;
        group.resize(k_max, pad);
        out.push(group);
    }
    Ok(out)
}
