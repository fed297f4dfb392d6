//! Tokenization of a raw cloud into the initial sequence: farthest point
//! centers, nearest-neighbor groups, a per-group embedder, a positional map
//! of the absolute center coordinates, curve ordering and a class token.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, Point, PointCloud};
use crate::hilbert::{serialize, HilbertConfig, SerializedOrder};
use crate::nn::Linear;
use crate::params::{join, Init, Parameters};
use crate::scalar::{gelu, Scalar};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedConfig {
    pub n_groups: usize,
    pub group_size: usize,
    pub dim: usize,
    /// Hidden width of the two-layer maps.
    pub hidden: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            n_groups: 128,
            group_size: 32,
            dim: 384,
            hidden: 128,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_groups", self.n_groups),
            ("group_size", self.group_size),
            ("dim", self.dim),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Maps one group, given relative to its center, to a `D`-wide feature.
pub trait GroupEmbedder<T: Scalar> {
    fn embed_group(&self, centered: &[Point<T>]) -> Result<Vec<T>>;
}

/// Two-layer map `in → hidden → D` with GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerMap<T> {
    pub first: Linear<T>,
    pub second: Linear<T>,
}

impl<T: Scalar> TwoLayerMap<T> {
    pub fn init(init: &Init, name: &str, inp: usize, hidden: usize, out: usize) -> Self {
        TwoLayerMap {
            first: Linear::init(init, &join(name, "first"), inp, hidden, true),
            second: Linear::init(init, &join(name, "second"), hidden, out, true),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        self.second.forward(&self.first.forward(x)?.map(gelu))
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> TwoLayerMap<U> {
        TwoLayerMap {
            first: self.first.map(f),
            second: self.second.map(f),
        }
    }
}

impl<T: Scalar> Parameters<T> for TwoLayerMap<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

/// Per-axis mean and max of the centered group, mapped to `D` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsEmbedder<T> {
    pub map: TwoLayerMap<T>,
}

impl<T: Scalar> StatsEmbedder<T> {
    pub fn init(init: &Init, name: &str, hidden: usize, dim: usize) -> Self {
        StatsEmbedder {
            map: TwoLayerMap::init(init, name, 6, hidden, dim),
        }
    }
}

pub fn group_statistics<T: Scalar>(centered: &[Point<T>]) -> Result<[T; 6]> {
    if centered.is_empty() {
        return Err(Error::EmptyInput("group_statistics: group"));
    }
    let k = T::count(centered.len());
    let mut s = [T::zero(); 6];
    for a in 0..3 {
        s[a] = centered.iter().map(|p| p[a]).sum::<T>() / k;
        s[a + 3] = centered.iter().map(|p| p[a]).fold(T::neg_infinity(), T::max);
    }
    Ok(s)
}

impl<T: Scalar> GroupEmbedder<T> for StatsEmbedder<T> {
    fn embed_group(&self, centered: &[Point<T>]) -> Result<Vec<T>> {
        let stats = group_statistics(centered)?;
        Ok(self.map.forward(&Mat::from_vec(1, 6, stats.to_vec())?)?.into_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams<T> {
    pub class_token: Vec<T>,
    pub group: StatsEmbedder<T>,
    pub position: TwoLayerMap<T>,
    pub config: EmbedConfig,
}

impl<T: Scalar> EmbedParams<T> {
    pub fn init(init: &Init, name: &str, config: EmbedConfig) -> Result<Self> {
        config.validate()?;
        Ok(EmbedParams {
            class_token: vec![T::zero(); config.dim],
            group: StatsEmbedder::init(init, &join(name, "group"), config.hidden, config.dim),
            position: TwoLayerMap::init(init, &join(name, "position"), 3, config.hidden, config.dim),
            config,
        })
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> EmbedParams<U> {
        EmbedParams {
            class_token: self.class_token.iter().map(|&v| f(v)).collect(),
            group: StatsEmbedder {
                map: self.group.map.map(f),
            },
            position: self.position.map(f),
            config: self.config,
        }
    }

    pub fn positional(&self, centers: &[Point<T>]) -> Result<Mat<T>> {
        let flat = centers.iter().flat_map(|p| p.iter().copied()).collect();
        self.position.forward(&Mat::from_vec(centers.len(), 3, flat)?)
    }
}

impl<T: Scalar> Parameters<T> for EmbedParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "class_token"), &[self.class_token.len()], &self.class_token);
        self.group.map.visit(&join(prefix, "group"), f);
        self.position.visit(&join(prefix, "position"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let len = self.class_token.len();
        f(&join(prefix, "class_token"), &[len], &mut self.class_token);
        self.group.map.visit_mut(&join(prefix, "group"), f);
        self.position.visit_mut(&join(prefix, "position"), f);
    }
}

/// One batch worth of tokens, already in curve order.
#[derive(Clone, Debug)]
pub struct Embedding<T> {
    /// `(N+1) × D`, class token at row 0.
    pub tokens: Mat<T>,
    /// Centers in sequence order.
    pub centers: Vec<Point<T>>,
    /// Rank of each sequence token; the identity since tokens are sorted.
    pub base_index: Vec<usize>,
    /// Curve order of the centers as sampled.
    pub order: SerializedOrder,
    /// Group members per sequence token, as indices into the canonical
    /// (lexicographically sorted) batch.
    pub groups: Vec<Vec<usize>>,
}

fn lexicographic<T: Scalar>(a: &Point<T>, b: &Point<T>) -> Ordering {
    (0..3)
        .map(|i| a[i].primal().total_cmp(&b[i].primal()))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Points sorted lexicographically, so sampling does not depend on the
/// input order.
pub fn canonical_order<T: Scalar>(points: &[Point<T>]) -> Vec<Point<T>> {
    let mut v = points.to_vec();
    v.sort_by(lexicographic);
    v
}

fn embed_batch<T: Scalar>(
    batch: &PointCloud<T>,
    params: &EmbedParams<T>,
    embedder: &dyn GroupEmbedder<T>,
    order: u32,
) -> Result<Embedding<T>> {
    let cfg = params.config;
    let cloud = PointCloud::new(canonical_order(batch.coords()))?;
    let pts = cloud.coords();
    let picked = farthest_point_sample(&cloud, cfg.n_groups, 0)?;
    let sampled: Vec<Point<T>> = picked.iter().map(|&i| pts[i]).collect();
    let ord = serialize(&sampled, &HilbertConfig::fit(&sampled, order)?)?;
    let centers: Vec<Point<T>> = ord.perm.iter().map(|&i| sampled[i]).collect();
    let groups = knn(&centers, &cloud, cfg.group_size, None)?;

    let mut feats = Mat::zeros(centers.len(), cfg.dim);
    for (r, (c, g)) in centers.iter().zip(&groups).enumerate() {
        let centered: Vec<Point<T>> = g.iter().map(|&j| [pts[j][0] - c[0], pts[j][1] - c[1], pts[j][2] - c[2]]).collect();
        let e = embedder.embed_group(&centered)?;
        if e.len() != cfg.dim {
            return Err(Error::shape("group embedding width", cfg.dim, e.len()));
        }
        feats.row_mut(r).copy_from_slice(&e);
    }
    let tokens = feats.add(&params.positional(&centers)?)?.prepend_row(&params.class_token)?;
    Ok(Embedding {
        tokens,
        base_index: (0..centers.len()).collect(),
        centers,
        order: ord,
        groups,
    })
}

/// Embeds every batch of `cloud` with the built-in statistics embedder.
pub fn embed<T: Scalar>(cloud: &PointCloud<T>, params: &EmbedParams<T>, order: u32) -> Result<Vec<Embedding<T>>> {
    embed_with(cloud, params, &params.group, order)
}

/// As [`embed`] with a caller-supplied group embedder.
pub fn embed_with<T: Scalar>(
    cloud: &PointCloud<T>,
    params: &EmbedParams<T>,
    embedder: &dyn GroupEmbedder<T>,
    order: u32,
) -> Result<Vec<Embedding<T>>> {
    params.config.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("embed: cloud"));
    }
    let need = params.config.n_groups.max(params.config.group_size);
    (0..cloud.num_batches())
        .map(|b| {
            let batch = cloud.batch(b);
            if batch.len() < need {
                return Err(Error::Size {
                    what: "points per batch",
                    requested: need,
                    available: batch.len(),
                });
            }
            embed_batch(&batch, params, embedder, order)
        })
        .collect()
}
