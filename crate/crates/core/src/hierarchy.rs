//! Dyadic temporal hierarchy and node-wise mean pooling.
//!
//! Level `l` (1-based) splits `[0, T)` into `2^(l-1)` intervals; node
//! `(l, k)` covers `[floor((k-1) T / 2^(l-1)), floor(k T / 2^(l-1)))`.
//! Every per-node vector in the crate uses the canonical order: level
//! first, then index within the level.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dataio::{Stream, StreamFeatureSequence};
use crate::scalar::Scalar;

/// Deepest supported hierarchy (255 nodes).
pub const MAX_DEPTH: usize = 8;

pub const TREE_MAGIC: &[u8; 4] = b"GPT1";

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("depth {depth} outside 1..={max}")]
    InvalidDepth { depth: usize, max: usize },
    #[error("{frames} frames cannot fill the {leaves} leaves of a depth-{depth} hierarchy")]
    InsufficientFrames { frames: usize, depth: usize, leaves: usize },
    #[error("tree container: {0}")]
    Container(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Node address: `level` in `1..=D`, `index` in `1..=2^(level-1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub level: usize,
    pub index: usize,
}

impl NodeId {
    /// Position in the canonical ordering.
    pub fn position(self) -> usize {
        (1 << (self.level - 1)) - 1 + (self.index - 1)
    }

    /// Artifact key, `"l:k"`.
    pub fn key(self) -> String {
        format!("{}:{}", self.level, self.index)
    }

    pub fn parse_key(key: &str) -> Option<Self> {
        let (l, k) = key.split_once(':')?;
        let id = NodeId {
            level: l.trim().parse().ok()?,
            index: k.trim().parse().ok()?,
        };
        (id.level >= 1 && id.index >= 1 && id.index <= 1 << (id.level - 1)).then_some(id)
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.level, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Hierarchy {
    depth: usize,
}

impl Hierarchy {
    pub fn new(depth: usize) -> Result<Self, HierarchyError> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(HierarchyError::InvalidDepth { depth, max: MAX_DEPTH });
        }
        Ok(Self { depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (1..=self.depth).flat_map(|level| (1..=1 << (level - 1)).map(move |index| NodeId { level, index }))
    }

    pub fn node(&self, position: usize) -> NodeId {
        let level = usize::BITS as usize - (position + 1).leading_zeros() as usize;
        NodeId {
            level,
            index: position + 2 - (1 << (level - 1)),
        }
    }

    /// Canonical positions of the nodes at one level.
    pub fn level_positions(&self, level: usize) -> std::ops::Range<usize> {
        let first = (1 << (level - 1)) - 1;
        first..first + (1 << (level - 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeInterval {
    pub node: NodeId,
    pub start: usize,
    pub end: usize,
}

impl NodeInterval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Frame intervals of every node, in canonical order.
pub fn build_intervals(frames: usize, depth: usize) -> Result<Vec<NodeInterval>, HierarchyError> {
    let h = Hierarchy::new(depth)?;
    if frames < h.leaf_count() {
        return Err(HierarchyError::InsufficientFrames {
            frames,
            depth,
            leaves: h.leaf_count(),
        });
    }
    Ok(h.nodes()
        .map(|node| {
            let parts = 1usize << (node.level - 1);
            NodeInterval {
                node,
                start: (node.index - 1) * frames / parts,
                end: node.index * frames / parts,
            }
        })
        .collect())
}

/// Optional normalisations. Both default to off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolOptions {
    /// Scale every frame vector to unit ℓ2 norm before pooling.
    pub frame_l2: bool,
    /// Scale every pooled node vector to unit ℓ2 norm.
    pub node_l2: bool,
}

/// Mean-pooled node vectors of one video and stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledTree<F> {
    video_id: String,
    stream: Stream,
    depth: usize,
    dim: usize,
    values: Vec<F>,
}

impl<F: Scalar> PooledTree<F> {
    pub fn from_node_vectors(
        video_id: impl Into<String>,
        stream: Stream,
        depth: usize,
        dim: usize,
        values: Vec<F>,
    ) -> Result<Self, HierarchyError> {
        let h = Hierarchy::new(depth)?;
        if dim == 0 || values.len() != h.node_count() * dim {
            return Err(HierarchyError::Container(format!(
                "expected {} node vectors of dim {dim}, got {} values",
                h.node_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HierarchyError::Container("non-finite node value".into()));
        }
        Ok(Self {
            video_id: video_id.into(),
            stream,
            depth,
            dim,
            values,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.values.len() / self.dim
    }

    /// Vector of the node at canonical position `pos`.
    pub fn node(&self, pos: usize) -> &[F] {
        &self.values[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn root(&self) -> &[F] {
        self.node(0)
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.depth == other.depth && self.dim == other.dim
    }

    /// Serialises to the GPT1 container: magic, `u32` node count, `u32`
    /// dim, then the node vectors as little-endian `f64` in canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.values.len());
        out.extend_from_slice(TREE_MAGIC);
        out.extend_from_slice(&(self.node_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], video_id: impl Into<String>, stream: Stream) -> Result<Self, HierarchyError> {
        let bad = |m: &str| HierarchyError::Container(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != TREE_MAGIC {
            return Err(bad("bad magic, expected GPT1"));
        }
        let nodes = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if !(nodes + 1).is_power_of_two() || nodes == 0 {
            return Err(bad("node count is not 2^D - 1"));
        }
        if bytes.len() != 12 + 8 * nodes * dim {
            return Err(bad("payload length does not match header"));
        }
        let values = bytes[12..]
            .chunks_exact(8)
            .map(|c| F::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let depth = (nodes + 1).trailing_zeros() as usize;
        Self::from_node_vectors(video_id, stream, depth, dim, values)
    }

    pub fn write(&self, path: &Path) -> Result<(), HierarchyError> {
        fs::write(path, self.to_bytes()).map_err(|source| HierarchyError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Mean-pools a sequence over every node of `h`.
pub fn pool_sequence<F: Scalar>(seq: &StreamFeatureSequence, h: &Hierarchy) -> Result<PooledTree<F>, HierarchyError> {
    pool_sequence_with(seq, h, PoolOptions::default())
}

pub fn pool_sequence_with<F: Scalar>(
    seq: &StreamFeatureSequence,
    h: &Hierarchy,
    opts: PoolOptions,
) -> Result<PooledTree<F>, HierarchyError> {
    let dim = seq.dim();
    let intervals = build_intervals(seq.frame_count(), h.depth())?;
    let frames: Vec<Vec<F>> = seq
        .frames()
        .map(|row| {
            let v: Vec<F> = row.iter().map(|&x| F::from_stored(x)).collect();
            if opts.frame_l2 {
                l2_normalized(v)
            } else {
                v
            }
        })
        .collect();

    let mut values = Vec::with_capacity(intervals.len() * dim);
    for iv in &intervals {
        let mut acc = vec![F::zero(); dim];
        for frame in &frames[iv.start..iv.end] {
            for (a, &x) in acc.iter_mut().zip(frame) {
                *a = *a + x;
            }
        }
        let count = F::lit(iv.len() as f64);
        let mean: Vec<F> = acc.into_iter().map(|a| a / count).collect();
        values.extend(if opts.node_l2 { l2_normalized(mean) } else { mean });
    }
    PooledTree::from_node_vectors(seq.video_id(), seq.stream(), h.depth(), dim, values)
}

fn l2_normalized<F: Scalar>(mut v: Vec<F>) -> Vec<F> {
    let norm = crate::scalar::dot(&v, &v).sqrt();
    if norm > F::zero() {
        v.iter_mut().for_each(|x| *x = *x / norm);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_1d(values: &[f32]) -> StreamFeatureSequence {
        StreamFeatureSequence::new("v", Stream::Appearance, 1, values.to_vec()).unwrap()
    }

    fn spans(iv: &[NodeInterval]) -> Vec<(usize, usize)> {
        iv.iter().map(|i| (i.start, i.end)).collect()
    }

    #[test]
    fn exact_division() {
        let iv = build_intervals(8, 3).unwrap();
        assert_eq!(spans(&iv), vec![(0, 8), (0, 4), (4, 8), (0, 2), (2, 4), (4, 6), (6, 8)]);
    }

    #[test]
    fn single_frame_single_node() {
        assert_eq!(spans(&build_intervals(1, 1).unwrap()), vec![(0, 1)]);
    }

    #[test]
    fn floor_rule() {
        // floor(7/2) = 3
        assert_eq!(spans(&build_intervals(7, 2).unwrap()), vec![(0, 7), (0, 3), (3, 7)]);
    }

    #[test]
    fn empty_leaf_is_an_error() {
        match build_intervals(3, 3) {
            Err(HierarchyError::InsufficientFrames { frames, depth, .. }) => {
                assert_eq!((frames, depth), (3, 3));
            }
            other => panic!("expected InsufficientFrames, got {other:?}"),
        }
        assert!(matches!(
            build_intervals(4, 0),
            Err(HierarchyError::InvalidDepth { .. })
        ));
    }

    #[test]
    fn node_positions_roundtrip() {
        let h = Hierarchy::new(5).unwrap();
        for (pos, node) in h.nodes().enumerate() {
            assert_eq!(node.position(), pos);
            assert_eq!(h.node(pos), node);
            assert_eq!(NodeId::parse_key(&node.key()), Some(node));
        }
        assert_eq!(h.nodes().count(), 31);
        assert_eq!(h.level_positions(3), 3..7);
        assert_eq!(NodeId::parse_key("2:3"), None);
    }

    #[test]
    fn pooled_means() {
        let h = Hierarchy::new(2).unwrap();
        let tree: PooledTree<f64> = pool_sequence(&seq_1d(&[1.0, 3.0, 5.0, 7.0]), &h).unwrap();
        assert_eq!(tree.values(), &[4.0, 2.0, 6.0]);
    }

    #[test]
    fn constant_sequence() {
        let h = Hierarchy::new(3).unwrap();
        let tree: PooledTree<f64> = pool_sequence(&seq_1d(&[2.5; 9]), &h).unwrap();
        assert!(tree.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn duplicated_frames_pool_identically() {
        let h = Hierarchy::new(3).unwrap();
        let base = [0.5f32, -1.0, 2.0, 4.0, 0.25, 3.0, -2.0, 1.0];
        let doubled: Vec<f32> = base.iter().flat_map(|&v| [v, v]).collect();
        let a: PooledTree<f64> = pool_sequence(&seq_1d(&base), &h).unwrap();
        let b: PooledTree<f64> = pool_sequence(&seq_1d(&doubled), &h).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn l2_options() {
        let h = Hierarchy::new(1).unwrap();
        let seq = StreamFeatureSequence::new("v", Stream::Motion, 2, vec![3.0, 4.0, 3.0, 4.0]).unwrap();
        let raw: PooledTree<f64> = pool_sequence(&seq, &h).unwrap();
        assert_eq!(raw.root(), &[3.0, 4.0]);
        let normed: PooledTree<f64> = pool_sequence_with(
            &seq,
            &h,
            PoolOptions {
                frame_l2: false,
                node_l2: true,
            },
        )
        .unwrap();
        assert!((normed.root()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn container_roundtrip() {
        let h = Hierarchy::new(3).unwrap();
        let seq = StreamFeatureSequence::new("v", Stream::Motion, 2, (0..16).map(|i| i as f32).collect()).unwrap();
        let tree: PooledTree<f64> = pool_sequence(&seq, &h).unwrap();
        let back = PooledTree::<f64>::from_bytes(&tree.to_bytes(), "v", Stream::Motion).unwrap();
        assert_eq!(back, tree);
        assert!(PooledTree::<f64>::from_bytes(b"GPF1", "v", Stream::Motion).is_err());
    }
}
