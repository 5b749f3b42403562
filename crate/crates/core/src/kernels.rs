//! Elementary node kernels and their weighted combinations over a hierarchy.
//!
//! Two combinations are supported for node weights `beta` on the simplex:
//!
//! * concatenation: `K(A, B) = sum_p beta_p k(psi_p(A), psi_p(B))`, only
//!   temporally aligned nodes are compared;
//! * averaging: `K(A, B) = sum_p sum_q beta_p beta_q k(psi_p(A), psi_q(B))`,
//!   every node of one video is compared with every node of the other.
//!
//! Both are positive semi-definite whenever the elementary kernel is.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::PooledTree;
use crate::linalg;
use crate::scalar::{ordered_sum, Scalar};

/// Pairs sampled by [`median_gamma`] at most.
pub const MEDIAN_SAMPLE_CAP: usize = 10_000;

/// Upper bound on cached elementary values before [`NodeKernelTable`]
/// falls back to computing them on demand.
pub const DEFAULT_CACHE_ENTRIES: usize = 1 << 25;

pub const GRAM_MAGIC: &[u8; 4] = b"GRM1";

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("vector dimensions differ: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("gram matrices are indexed by different video ids")]
    IdMismatch,
    #[error("fusion weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("rbf gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("gram file: {0}")]
    GramFile(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    /// Bandwidth of the rbf kernel `exp(-gamma |x - y|^2)`; ignored by `linear`.
    pub gamma: f64,
}

impl KernelConfig {
    pub fn rbf(gamma: f64) -> Self {
        Self {
            kind: KernelKind::Rbf,
            gamma,
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.kind == KernelKind::Rbf && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(KernelError::InvalidGamma(self.gamma));
        }
        Ok(())
    }

    #[inline]
    fn eval<F: Scalar>(&self, x: &[F], y: &[F]) -> F {
        match self.kind {
            KernelKind::Rbf => {
                let d2 = ordered_sum(x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)));
                (-F::lit(self.gamma) * d2).exp()
            }
            KernelKind::Linear => crate::scalar::dot(x, y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineVariant {
    #[serde(alias = "concat")]
    Concatenation,
    #[serde(alias = "avg")]
    Averaging,
}

impl CombineVariant {
    pub fn short_name(self) -> &'static str {
        match self {
            CombineVariant::Concatenation => "concat",
            CombineVariant::Averaging => "avg",
        }
    }
}

impl std::str::FromStr for CombineVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" | "concatenation" => Ok(CombineVariant::Concatenation),
            "avg" | "averaging" => Ok(CombineVariant::Averaging),
            other => Err(format!("unknown variant '{other}' (expected concat or avg)")),
        }
    }
}

/// Elementary kernel between two vectors.
pub fn elementary<F: Scalar>(x: &[F], y: &[F], cfg: &KernelConfig) -> Result<F, KernelError> {
    if x.len() != y.len() {
        return Err(KernelError::DimMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    Ok(cfg.eval(x, y))
}

/// Combines node-pair kernel values `node_k(p, q) = k(psi_p(A), psi_q(B))`.
///
/// Shared by the direct and the cached paths so both accumulate in the
/// same order and produce identical bits.
#[inline]
pub fn combine_with<F: Scalar>(beta: &[F], variant: CombineVariant, node_k: impl Fn(usize, usize) -> F) -> F {
    match variant {
        CombineVariant::Concatenation => ordered_sum(beta.iter().enumerate().map(|(p, &b)| b * node_k(p, p))),
        CombineVariant::Averaging => {
            let mut acc = F::zero();
            for (p, &bp) in beta.iter().enumerate() {
                for (q, &bq) in beta.iter().enumerate() {
                    acc = acc + bp * bq * node_k(p, q);
                }
            }
            acc
        }
    }
}

/// Gradient of the combined kernel with respect to `beta`.
#[inline]
pub fn grad_with<F: Scalar>(beta: &[F], variant: CombineVariant, node_k: impl Fn(usize, usize) -> F) -> Vec<F> {
    match variant {
        CombineVariant::Concatenation => (0..beta.len()).map(|p| node_k(p, p)).collect(),
        CombineVariant::Averaging => (0..beta.len())
            .map(|p| {
                ordered_sum(
                    beta.iter()
                        .enumerate()
                        .map(|(q, &bq)| bq * (node_k(p, q) + node_k(q, p))),
                )
            })
            .collect(),
    }
}

fn check_pair<F: Scalar>(a: &PooledTree<F>, b: &PooledTree<F>, beta: &[F]) -> Result<(), KernelError> {
    if !a.same_shape(b) {
        return Err(KernelError::ShapeMismatch(format!(
            "trees '{}' (depth {}, dim {}) and '{}' (depth {}, dim {})",
            a.video_id(),
            a.depth(),
            a.dim(),
            b.video_id(),
            b.depth(),
            b.dim()
        )));
    }
    if beta.len() != a.node_count() {
        return Err(KernelError::ShapeMismatch(format!(
            "{} weights for {} nodes",
            beta.len(),
            a.node_count()
        )));
    }
    Ok(())
}

pub fn combined_kernel<F: Scalar>(
    a: &PooledTree<F>,
    b: &PooledTree<F>,
    beta: &[F],
    variant: CombineVariant,
    cfg: &KernelConfig,
) -> Result<F, KernelError> {
    check_pair(a, b, beta)?;
    Ok(combine_with(beta, variant, |p, q| cfg.eval(a.node(p), b.node(q))))
}

pub fn kernel_grad_beta<F: Scalar>(
    a: &PooledTree<F>,
    b: &PooledTree<F>,
    beta: &[F],
    variant: CombineVariant,
    cfg: &KernelConfig,
) -> Result<Vec<F>, KernelError> {
    check_pair(a, b, beta)?;
    Ok(grad_with(beta, variant, |p, q| cfg.eval(a.node(p), b.node(q))))
}

fn check_homogeneous<F: Scalar>(trees: &[PooledTree<F>]) -> Result<(), KernelError> {
    if let Some(first) = trees.first() {
        if let Some(bad) = trees.iter().find(|t| !t.same_shape(first)) {
            return Err(KernelError::ShapeMismatch(format!(
                "tree '{}' does not match the shape of '{}'",
                bad.video_id(),
                first.video_id()
            )));
        }
    }
    Ok(())
}

/// Dense symmetric matrix of combined-kernel values.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<F> {
    ids: Vec<String>,
    data: Vec<F>,
}

impl<F: Scalar> GramMatrix<F> {
    pub fn from_fn(ids: Vec<String>, f: impl Fn(usize, usize) -> F + Sync) -> Self {
        let n = ids.len();
        let upper: Vec<Vec<F>> = (0..n)
            .into_par_iter()
            .map(|i| (i..n).map(|j| f(i, j)).collect())
            .collect();
        let mut data = vec![F::zero(); n * n];
        for (i, row) in upper.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                let j = i + off;
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self { ids, data }
    }

    /// Builds from a full row-major buffer; symmetry is checked to 1e-10.
    pub fn from_dense(ids: Vec<String>, data: Vec<F>) -> Result<Self, KernelError> {
        let n = ids.len();
        if data.len() != n * n {
            return Err(KernelError::ShapeMismatch(format!("{} values for {n} ids", data.len())));
        }
        for i in 0..n {
            for j in i + 1..n {
                if (data[i * n + j] - data[j * n + i]).abs() > F::lit(1e-10) {
                    return Err(KernelError::ShapeMismatch(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { ids, data })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.n() + j]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let n = self.n();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn scaled(&self, c: F) -> Self {
        Self {
            ids: self.ids.clone(),
            data: self.data.iter().map(|&v| v * c).collect(),
        }
    }

    /// Smallest eigenvalue, computed in `f64`.
    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.data, self.n())
    }

    /// GRM1 layout: magic, `u32` n, each id as `u32` byte length + UTF-8,
    /// then the `n(n+1)/2` upper-triangular entries row by row as `f64` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n();
        let mut out = Vec::new();
        out.extend_from_slice(GRAM_MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for i in 0..n {
            for j in i..n {
                out.extend_from_slice(&self.get(i, j).as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KernelError> {
        let bad = |m: &str| KernelError::GramFile(m.to_string());
        let mut pos = 0usize;
        let mut take = |len: usize| -> Result<&[u8], KernelError> {
            let s = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated"))?;
            pos += len;
            Ok(s)
        };
        if take(4)? != GRAM_MAGIC {
            return Err(bad("bad magic, expected GRM1"));
        }
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(take(len)?).map_err(|_| bad("id is not UTF-8"))?;
            ids.push(id.to_string());
        }
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            for j in i..n {
                let v = F::lit(f64::from_le_bytes(take(8)?.try_into().unwrap()));
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        if take(1).is_ok() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { ids, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), KernelError> {
        fs::write(path, self.to_bytes()).map_err(|source| KernelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, KernelError> {
        let bytes = fs::read(path).map_err(|source| KernelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Gram matrix of the combined kernel over a homogeneous tree set.
pub fn gram_matrix<F: Scalar>(
    trees: &[PooledTree<F>],
    beta: &[F],
    variant: CombineVariant,
    cfg: &KernelConfig,
) -> Result<GramMatrix<F>, KernelError> {
    check_homogeneous(trees)?;
    if let Some(t) = trees.first() {
        check_pair(t, t, beta)?;
    }
    let ids = trees.iter().map(|t| t.video_id().to_string()).collect();
    Ok(GramMatrix::from_fn(ids, |i, j| {
        combine_with(beta, variant, |p, q| cfg.eval(trees[i].node(p), trees[j].node(q)))
    }))
}

/// Kernel rows of `queries` against `reference` (`out[q][i] = K(query_q, ref_i)`).
pub fn kernel_rows<F: Scalar>(
    queries: &[PooledTree<F>],
    reference: &[PooledTree<F>],
    beta: &[F],
    variant: CombineVariant,
    cfg: &KernelConfig,
) -> Result<Vec<Vec<F>>, KernelError> {
    for q in queries {
        for r in reference {
            check_pair(q, r, beta)?;
        }
    }
    Ok(queries
        .par_iter()
        .map(|q| {
            reference
                .iter()
                .map(|r| combine_with(beta, variant, |p, s| cfg.eval(q.node(p), r.node(s))))
                .collect()
        })
        .collect())
}

/// Convex combination `w * ka + (1 - w) * km` of two Gram matrices.
pub fn fuse_kernels<F: Scalar>(ka: &GramMatrix<F>, km: &GramMatrix<F>, w: F) -> Result<GramMatrix<F>, KernelError> {
    if ka.ids != km.ids {
        return Err(KernelError::IdMismatch);
    }
    check_weight(w)?;
    Ok(GramMatrix {
        ids: ka.ids.clone(),
        data: fuse_values(&ka.data, &km.data, w),
    })
}

pub fn check_weight<F: Scalar>(w: F) -> Result<(), KernelError> {
    if !(w >= F::zero() && w <= F::one()) {
        return Err(KernelError::InvalidWeight(w.as_f64()));
    }
    Ok(())
}

pub fn fuse_values<F: Scalar>(a: &[F], m: &[F], w: F) -> Vec<F> {
    a.iter().zip(m).map(|(&x, &y)| w * x + (F::one() - w) * y).collect()
}

/// Median heuristic: `gamma = 1 / median(|psi_p(A) - psi_p(B)|^2)` over
/// same-node pairs of distinct trees, subsampled to [`MEDIAN_SAMPLE_CAP`].
pub fn median_gamma<F: Scalar>(trees: &[PooledTree<F>], seed: u64) -> Result<f64, KernelError> {
    if trees.len() < 2 {
        return Err(KernelError::DegenerateData(format!(
            "median heuristic needs at least 2 trees, got {}",
            trees.len()
        )));
    }
    check_homogeneous(trees)?;
    let n = trees.len();
    let nodes = trees[0].node_count();
    let pairs = n * (n - 1) / 2;
    let total = pairs * nodes;
    let sq_dist = |lin: usize| -> f64 {
        let (pair, node) = (lin / nodes, lin % nodes);
        let (i, j) = decode_pair(pair, n);
        let (a, b) = (trees[i].node(node), trees[j].node(node));
        a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let median = sampled_median(total, &mut rng, sq_dist);
    if !(median > 0.0) {
        return Err(KernelError::DegenerateData(
            "median squared node distance is zero".into(),
        ));
    }
    Ok(1.0 / median)
}

/// Median of `f` over `0..total`, subsampled to [`MEDIAN_SAMPLE_CAP`];
/// even counts average the two middle values.
fn sampled_median(total: usize, rng: &mut ChaCha8Rng, f: impl Fn(usize) -> f64) -> f64 {
    let mut d: Vec<f64> = if total <= MEDIAN_SAMPLE_CAP {
        (0..total).map(f).collect()
    } else {
        let mut picked = index::sample(rng, total, MEDIAN_SAMPLE_CAP).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(f).collect()
    };
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

/// How the rbf bandwidth treats the hierarchy levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Every node vector is first divided by the median distance of its
    /// own node, so all nodes share one kernel scale.
    #[default]
    Node,
    /// One bandwidth over raw node vectors.
    Shared,
}

impl std::str::FromStr for Bandwidth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "node" => Ok(Bandwidth::Node),
            "shared" => Ok(Bandwidth::Shared),
            other => Err(format!("unknown bandwidth '{other}' (expected node or shared)")),
        }
    }
}

/// Per-node factors `s_p = 1 / sqrt(median_p)`, `median_p` the median
/// squared distance between node `p` of distinct training trees. Scaled
/// trees are compared with a single rbf kernel, so every combined Gram
/// matrix stays positive semi-definite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeScaling {
    pub factors: Vec<f64>,
}

impl NodeScaling {
    pub fn identity(nodes: usize) -> Self {
        Self {
            factors: vec![1.0; nodes],
        }
    }

    /// A single node is left unscaled; nodes with zero median spread keep
    /// factor 1.
    pub fn fit<F: Scalar>(trees: &[PooledTree<F>], seed: u64) -> Result<Self, KernelError> {
        if trees.len() < 2 {
            return Err(KernelError::DegenerateData(format!(
                "node scaling needs at least 2 trees, got {}",
                trees.len()
            )));
        }
        check_homogeneous(trees)?;
        let n = trees.len();
        let nodes = trees[0].node_count();
        if nodes == 1 {
            return Ok(Self::identity(1));
        }
        let factors = (0..nodes)
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64);
                let median = sampled_median(n * (n - 1) / 2, &mut rng, |pair| {
                    let (i, j) = decode_pair(pair, n);
                    let (a, b) = (trees[i].node(p), trees[j].node(p));
                    a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum()
                });
                if median > 0.0 {
                    1.0 / median.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { factors })
    }

    pub fn apply<F: Scalar>(&self, tree: &PooledTree<F>) -> Result<PooledTree<F>, KernelError> {
        if tree.node_count() != self.factors.len() {
            return Err(KernelError::ShapeMismatch(format!(
                "{} scale factors for {} nodes",
                self.factors.len(),
                tree.node_count()
            )));
        }
        let dim = tree.dim();
        let values = tree
            .values()
            .chunks(dim)
            .zip(&self.factors)
            .flat_map(|(v, &s)| v.iter().map(move |&x| x * F::lit(s)))
            .collect();
        PooledTree::from_node_vectors(tree.video_id(), tree.stream(), tree.depth(), dim, values)
            .map_err(|e| KernelError::ShapeMismatch(e.to_string()))
    }

    pub fn apply_all<F: Scalar>(&self, trees: &[PooledTree<F>]) -> Result<Vec<PooledTree<F>>, KernelError> {
        trees.iter().map(|t| self.apply(t)).collect()
    }
}

/// Kernel settings fitted on training trees: optional node scaling and
/// the kernel applied to scaled trees.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSetup {
    pub scaling: Option<NodeScaling>,
    pub config: KernelConfig,
}

impl KernelSetup {
    /// `gamma = None` picks the median heuristic on the (scaled) training
    /// trees. Node scaling only applies to the rbf kernel.
    pub fn fit<F: Scalar>(
        train: &[PooledTree<F>],
        kind: KernelKind,
        gamma: Option<f64>,
        bandwidth: Bandwidth,
        seed: u64,
    ) -> Result<Self, KernelError> {
        if kind == KernelKind::Linear {
            return Ok(Self {
                scaling: None,
                config: KernelConfig::linear(),
            });
        }
        let scaling = match bandwidth {
            Bandwidth::Node => Some(NodeScaling::fit(train, seed)?),
            Bandwidth::Shared => None,
        };
        let gamma = match gamma {
            Some(g) => g,
            None => match &scaling {
                Some(s) => median_gamma(&s.apply_all(train)?, seed)?,
                None => median_gamma(train, seed)?,
            },
        };
        let config = KernelConfig::rbf(gamma);
        config.validate()?;
        Ok(Self { scaling, config })
    }

    pub fn prepare<F: Scalar>(&self, trees: &[PooledTree<F>]) -> Result<Vec<PooledTree<F>>, KernelError> {
        match &self.scaling {
            Some(s) => s.apply_all(trees),
            None => Ok(trees.to_vec()),
        }
    }
}

/// Maps a linear index over `i < j` pairs (row-major) back to `(i, j)`.
fn decode_pair(mut lin: usize, n: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - 1 - i;
        if lin < row {
            return (i, i + 1 + lin);
        }
        lin -= row;
    }
    unreachable!("pair index out of range")
}

/// Which node pairs a [`NodeKernelTable`] must answer for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeScope {
    /// Only `(p, p)`: enough for the concatenation variant.
    Aligned,
    /// Every `(p, q)`: required by the averaging variant.
    Cross,
}

impl From<CombineVariant> for NodeScope {
    fn from(v: CombineVariant) -> Self {
        match v {
            CombineVariant::Concatenation => NodeScope::Aligned,
            CombineVariant::Averaging => NodeScope::Cross,
        }
    }
}

/// Elementary kernels between the nodes of every pair of videos.
///
/// Node weights only re-weight these values, so they are computed once per
/// (tree set, kernel) and reused by every Gram rebuild and every weight
/// update. When the cache would exceed the entry budget the values are
/// recomputed from the trees on each access.
pub struct NodeKernelTable<F> {
    trees: Vec<PooledTree<F>>,
    cfg: KernelConfig,
    scope: NodeScope,
    nodes: usize,
    cache: Option<Vec<F>>,
}

impl<F: Scalar> NodeKernelTable<F> {
    pub fn build(trees: &[PooledTree<F>], cfg: &KernelConfig, scope: NodeScope) -> Result<Self, KernelError> {
        Self::build_with_budget(trees, cfg, scope, DEFAULT_CACHE_ENTRIES)
    }

    pub fn build_with_budget(
        trees: &[PooledTree<F>],
        cfg: &KernelConfig,
        scope: NodeScope,
        max_entries: usize,
    ) -> Result<Self, KernelError> {
        cfg.validate()?;
        check_homogeneous(trees)?;
        let n = trees.len();
        let nodes = trees.first().map_or(0, PooledTree::node_count);
        let block = match scope {
            NodeScope::Aligned => nodes,
            NodeScope::Cross => nodes * nodes,
        };
        let entries = n * (n + 1) / 2 * block;
        let mut table = Self {
            trees: trees.to_vec(),
            cfg: *cfg,
            scope,
            nodes,
            cache: None,
        };
        if entries <= max_entries {
            let rows: Vec<Vec<F>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut row = Vec::with_capacity((n - i) * block);
                    for j in i..n {
                        table.push_block(i, j, &mut row);
                    }
                    row
                })
                .collect();
            table.cache = Some(rows.concat());
        }
        Ok(table)
    }

    fn push_block(&self, i: usize, j: usize, out: &mut Vec<F>) {
        let (a, b) = (&self.trees[i], &self.trees[j]);
        match self.scope {
            NodeScope::Aligned => out.extend((0..self.nodes).map(|p| self.cfg.eval(a.node(p), b.node(p)))),
            NodeScope::Cross => {
                for p in 0..self.nodes {
                    out.extend((0..self.nodes).map(|q| self.cfg.eval(a.node(p), b.node(q))));
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn scope(&self) -> NodeScope {
        self.scope
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    pub fn trees(&self) -> &[PooledTree<F>] {
        &self.trees
    }

    pub fn kernel_config(&self) -> &KernelConfig {
        &self.cfg
    }

    fn block_offset(&self, i: usize, j: usize) -> usize {
        let n = self.trees.len();
        let block = match self.scope {
            NodeScope::Aligned => self.nodes,
            NodeScope::Cross => self.nodes * self.nodes,
        };
        // pairs (i', j') with i' < i, plus (i, i..j)
        (i * n - i * i.saturating_sub(1) / 2 + (j - i)) * block
    }

    /// Node kernels of videos `i <= j`: `k[p]` for an aligned table,
    /// `k[p * nodes + q]` for a cross table.
    pub fn block(&self, i: usize, j: usize) -> Cow<'_, [F]> {
        assert!(i <= j, "blocks are stored for i <= j");
        match &self.cache {
            Some(cache) => {
                let base = self.block_offset(i, j);
                let len = match self.scope {
                    NodeScope::Aligned => self.nodes,
                    NodeScope::Cross => self.nodes * self.nodes,
                };
                Cow::Borrowed(&cache[base..base + len])
            }
            None => {
                let mut out = Vec::new();
                self.push_block(i, j, &mut out);
                Cow::Owned(out)
            }
        }
    }

    /// `k(psi_p(V_i), psi_q(V_j))`. Panics for `p != q` on an aligned table.
    #[inline]
    pub fn node_kernel(&self, i: usize, j: usize, p: usize, q: usize) -> F {
        if self.scope == NodeScope::Aligned {
            assert_eq!(p, q, "aligned table only stores matching nodes");
        }
        // k(psi_p(V_i), psi_q(V_j)) = k(psi_q(V_j), psi_p(V_i))
        let (i, j, p, q) = if i <= j { (i, j, p, q) } else { (j, i, q, p) };
        match &self.cache {
            Some(cache) => {
                let base = self.block_offset(i, j);
                match self.scope {
                    NodeScope::Aligned => cache[base + p],
                    NodeScope::Cross => cache[base + p * self.nodes + q],
                }
            }
            None => self.cfg.eval(self.trees[i].node(p), self.trees[j].node(q)),
        }
    }

    fn check_beta(&self, beta: &[F], variant: CombineVariant) -> Result<(), KernelError> {
        if beta.len() != self.nodes {
            return Err(KernelError::ShapeMismatch(format!(
                "{} weights for {} nodes",
                beta.len(),
                self.nodes
            )));
        }
        if variant == CombineVariant::Averaging && self.scope == NodeScope::Aligned {
            return Err(KernelError::ShapeMismatch(
                "averaging needs a cross-node kernel table".into(),
            ));
        }
        Ok(())
    }

    pub fn combined(&self, i: usize, j: usize, beta: &[F], variant: CombineVariant) -> F {
        combine_with(beta, variant, |p, q| self.node_kernel(i, j, p, q))
    }

    pub fn grad_beta(&self, i: usize, j: usize, beta: &[F], variant: CombineVariant) -> Vec<F> {
        grad_with(beta, variant, |p, q| self.node_kernel(i, j, p, q))
    }

    pub fn gram(&self, beta: &[F], variant: CombineVariant) -> Result<GramMatrix<F>, KernelError> {
        self.check_beta(beta, variant)?;
        let ids = self.trees.iter().map(|t| t.video_id().to_string()).collect();
        Ok(GramMatrix::from_fn(ids, |i, j| self.combined(i, j, beta, variant)))
    }

    /// Elementary Gram matrix of node pair `(p, q)`: entry `(i, j)` is
    /// `k(psi_p(V_i), psi_q(V_j))`, row-major.
    pub fn node_gram(&self, p: usize, q: usize) -> Vec<F> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            out.extend((0..n).map(|j| self.node_kernel(i, j, p, q)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Stream;
    use rand::Rng;

    fn tree(id: &str, depth: usize, dim: usize, values: Vec<f64>) -> PooledTree<f64> {
        PooledTree::from_node_vectors(id, Stream::Appearance, depth, dim, values).unwrap()
    }

    fn random_trees(n: usize, depth: usize, dim: usize, seed: u64) -> Vec<PooledTree<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = (1 << depth) - 1;
        (0..n)
            .map(|i| {
                let v = (0..nodes * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                tree(&format!("v{i}"), depth, dim, v)
            })
            .collect()
    }

    fn random_simplex(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn elementary_values() {
        let rbf = KernelConfig::rbf(1.0);
        assert_eq!(
            elementary(&[0.3, -2.0], &[0.3, -2.0], &KernelConfig::rbf(7.5)).unwrap(),
            1.0
        );
        assert!((elementary(&[0.0], &[1.0], &rbf).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(
            elementary(&[1.0, 2.0], &[3.0, 4.0], &KernelConfig::linear()).unwrap(),
            11.0
        );
        assert!(matches!(
            elementary(&[1.0], &[1.0, 2.0], &rbf),
            Err(KernelError::DimMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn single_node_reduces_to_elementary() {
        let cfg = KernelConfig::rbf(0.7);
        let a = tree("a", 1, 2, vec![0.1, 0.4]);
        let b = tree("b", 1, 2, vec![-0.3, 0.2]);
        let expect = elementary(a.root(), b.root(), &cfg).unwrap();
        for v in [CombineVariant::Concatenation, CombineVariant::Averaging] {
            assert_eq!(combined_kernel(&a, &b, &[1.0], v, &cfg).unwrap(), expect);
        }
    }

    #[test]
    fn concatenation_is_weighted_mean_of_node_kernels() {
        let beta = [0.5, 0.5];
        let v = combine_with(&beta, CombineVariant::Concatenation, |p, _| [0.2, 0.6][p]);
        assert!((v - 0.4f64).abs() < 1e-15);
    }

    #[test]
    fn one_hot_averaging_matches_node_kernel() {
        let cfg = KernelConfig::rbf(0.5);
        let ts = random_trees(2, 2, 3, 1);
        for m in 0..3 {
            let mut beta = vec![0.0; 3];
            beta[m] = 1.0;
            let avg = combined_kernel(&ts[0], &ts[1], &beta, CombineVariant::Averaging, &cfg).unwrap();
            let cat = combined_kernel(&ts[0], &ts[1], &beta, CombineVariant::Concatenation, &cfg).unwrap();
            let node = elementary(ts[0].node(m), ts[1].node(m), &cfg).unwrap();
            assert_eq!(avg, node);
            assert_eq!(cat, node);
        }
    }

    #[test]
    fn shape_mismatch() {
        let cfg = KernelConfig::rbf(1.0);
        let a = tree("a", 1, 2, vec![0.0, 0.0]);
        let b = tree("b", 2, 2, vec![0.0; 6]);
        assert!(matches!(
            combined_kernel(&a, &b, &[1.0], CombineVariant::Averaging, &cfg),
            Err(KernelError::ShapeMismatch(_))
        ));
        assert!(combined_kernel(&a, &a, &[0.5, 0.5], CombineVariant::Averaging, &cfg).is_err());
    }

    #[test]
    fn gram_basics() {
        let cfg = KernelConfig::rbf(1.0);
        let ts = random_trees(1, 2, 2, 3);
        let g = gram_matrix(&ts, &[0.2, 0.3, 0.5], CombineVariant::Concatenation, &cfg).unwrap();
        assert_eq!(g.n(), 1);
        assert!((g.get(0, 0) - 1.0).abs() < 1e-15);

        let pair = vec![ts[0].clone(), ts[0].clone()];
        let g = gram_matrix(&pair, &[0.2, 0.3, 0.5], CombineVariant::Concatenation, &cfg).unwrap();
        let v = g.get(0, 0);
        assert!(g.data().iter().all(|&x| x == v));
        assert!(g.min_eigenvalue().abs() < 1e-12);
    }

    #[test]
    fn gram_is_psd_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = KernelConfig::rbf(0.8);
        for seed in 0..10 {
            let ts = random_trees(10, 3, 4, seed);
            let beta = random_simplex(7, &mut rng);
            for v in [CombineVariant::Concatenation, CombineVariant::Averaging] {
                let g = gram_matrix(&ts, &beta, v, &cfg).unwrap();
                assert!(g.min_eigenvalue() >= -1e-8);
                assert!(g.data().iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
            }
        }
    }

    #[test]
    fn concatenation_gradient_ignores_beta() {
        let cfg = KernelConfig::rbf(0.8);
        let ts = random_trees(2, 2, 2, 5);
        let g1 = kernel_grad_beta(&ts[0], &ts[1], &[1.0, 0.0, 0.0], CombineVariant::Concatenation, &cfg).unwrap();
        let g2 = kernel_grad_beta(&ts[0], &ts[1], &[0.2, 0.3, 0.5], CombineVariant::Concatenation, &cfg).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn averaging_gradient_at_one_hot() {
        let cfg = KernelConfig::rbf(0.8);
        let ts = random_trees(2, 2, 2, 6);
        let g = kernel_grad_beta(&ts[0], &ts[1], &[0.0, 1.0, 0.0], CombineVariant::Averaging, &cfg).unwrap();
        let node = elementary(ts[0].node(1), ts[1].node(1), &cfg).unwrap();
        assert!((g[1] - 2.0 * node).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = KernelConfig::rbf(0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        for seed in 0..20 {
            let ts = random_trees(2, 3, 3, 100 + seed);
            let beta = random_simplex(7, &mut rng);
            for v in [CombineVariant::Concatenation, CombineVariant::Averaging] {
                let g = kernel_grad_beta(&ts[0], &ts[1], &beta, v, &cfg).unwrap();
                for p in 0..7 {
                    let mut up = beta.clone();
                    let mut dn = beta.clone();
                    up[p] += h;
                    dn[p] -= h;
                    let fd = (combined_kernel(&ts[0], &ts[1], &up, v, &cfg).unwrap()
                        - combined_kernel(&ts[0], &ts[1], &dn, v, &cfg).unwrap())
                        / (2.0 * h);
                    assert!(
                        (fd - g[p]).abs() <= 1e-6 * g[p].abs().max(1.0),
                        "{v:?} node {p}: {fd} vs {}",
                        g[p]
                    );
                }
            }
        }
    }

    #[test]
    fn median_gamma_unit_distances() {
        let a = tree("a", 2, 1, vec![0.0, 1.0, 2.0]);
        let b = tree("b", 2, 1, vec![1.0, 2.0, 3.0]);
        assert_eq!(median_gamma(&[a.clone(), b], 0).unwrap(), 1.0);
        assert!(matches!(
            median_gamma(&[a.clone(), a.clone()], 0),
            Err(KernelError::DegenerateData(_))
        ));
        assert!(median_gamma(&[a], 0).is_err());
    }

    #[test]
    fn median_gamma_is_seeded() {
        let ts = random_trees(200, 2, 3, 8);
        let g1 = median_gamma(&ts, 42).unwrap();
        assert_eq!(g1, median_gamma(&ts, 42).unwrap());
        assert!(g1 > 0.0);
    }

    #[test]
    fn decode_pairs_in_order() {
        let n = 5;
        let mut lin = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(decode_pair(lin, n), (i, j));
                lin += 1;
            }
        }
    }

    #[test]
    fn fusion() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let ka = GramMatrix::<f64>::from_dense(ids.clone(), vec![1.0, 0.2, 0.2, 1.0]).unwrap();
        let km = GramMatrix::from_dense(ids, vec![1.0, 0.6, 0.6, 1.0]).unwrap();
        assert_eq!(fuse_kernels(&ka, &km, 1.0).unwrap(), ka);
        assert_eq!(fuse_kernels(&ka, &km, 0.0).unwrap(), km);
        assert!((fuse_kernels(&ka, &km, 0.5).unwrap().get(0, 1) - 0.4).abs() < 1e-15);
        assert!(matches!(
            fuse_kernels(&ka, &km, 1.5),
            Err(KernelError::InvalidWeight(_))
        ));
        let other = GramMatrix::from_dense(vec!["x".into(), "b".into()], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(fuse_kernels(&ka, &other, 0.5), Err(KernelError::IdMismatch)));
    }

    #[test]
    fn table_matches_direct_gram_bitwise() {
        let cfg = KernelConfig::rbf(0.9);
        let ts = random_trees(9, 3, 2, 21);
        let beta = [0.1, 0.2, 0.05, 0.15, 0.1, 0.3, 0.1];
        for v in [CombineVariant::Concatenation, CombineVariant::Averaging] {
            let direct = gram_matrix(&ts, &beta, v, &cfg).unwrap();
            for budget in [usize::MAX, 0] {
                let table = NodeKernelTable::build_with_budget(&ts, &cfg, v.into(), budget).unwrap();
                assert_eq!(table.is_cached(), budget > 0);
                assert_eq!(table.gram(&beta, v).unwrap(), direct);
            }
        }
    }

    #[test]
    fn table_node_kernels_are_transposed_across_pairs() {
        let cfg = KernelConfig::rbf(0.9);
        let ts = random_trees(4, 2, 2, 4);
        let table = NodeKernelTable::build(&ts, &cfg, NodeScope::Cross).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for p in 0..3 {
                    for q in 0..3 {
                        let direct = cfg.eval(ts[i].node(p), ts[j].node(q));
                        assert_eq!(table.node_kernel(i, j, p, q), direct);
                    }
                }
            }
        }
    }

    #[test]
    fn gram_file_roundtrip() {
        let cfg = KernelConfig::rbf(0.9);
        let ts = random_trees(5, 2, 2, 4);
        let g = gram_matrix(&ts, &[0.2, 0.3, 0.5], CombineVariant::Averaging, &cfg).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(bytes.len(), 8 + 5 * (4 + 2) + 15 * 8);
        assert_eq!(GramMatrix::<f64>::from_bytes(&bytes).unwrap(), g);
        assert!(GramMatrix::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn node_scaling_equalises_node_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trees: Vec<_> = (0..20)
            .map(|i| {
                // node p has spread ~ 10^p
                let v = (0..3 * 4)
                    .map(|k| rng.random_range(-1.0..1.0) * 10f64.powi(k / 4))
                    .collect();
                tree(&format!("v{i}"), 2, 4, v)
            })
            .collect();
        let s = NodeScaling::fit(&trees, 0).unwrap();
        assert!(s.factors[0] > s.factors[1] && s.factors[1] > s.factors[2]);
        let scaled = s.apply_all(&trees).unwrap();
        for p in 0..3 {
            let one: Vec<_> = scaled
                .iter()
                .map(|t| tree(t.video_id(), 1, 4, t.node(p).to_vec()))
                .collect();
            assert!((median_gamma(&one, 0).unwrap() - 1.0).abs() < 1e-9, "node {p}");
        }
        assert!(s.apply(&tree("x", 3, 4, vec![0.0; 28])).is_err());
    }

    #[test]
    fn single_node_is_not_scaled() {
        let trees: Vec<_> = (0..4)
            .map(|i| tree(&format!("v{i}"), 1, 2, vec![i as f64, 3.0 * i as f64]))
            .collect();
        let setup = KernelSetup::fit(&trees, KernelKind::Rbf, None, Bandwidth::Node, 0).unwrap();
        assert_eq!(setup.scaling, Some(NodeScaling::identity(1)));
        assert_eq!(setup.prepare(&trees).unwrap(), trees);
        let shared = KernelSetup::fit(&trees, KernelKind::Rbf, None, Bandwidth::Shared, 0).unwrap();
        assert_eq!(setup.config, shared.config);
        assert_eq!(shared.config.gamma, median_gamma(&trees, 0).unwrap());
        let fixed = KernelSetup::fit(&trees, KernelKind::Rbf, Some(0.3), Bandwidth::Node, 0).unwrap();
        assert_eq!(fixed.config.gamma, 0.3);
    }
}
