//! Dichotomic-tree label codec.
//!
//! An ordered category range `0..n` is split recursively into two
//! contiguous halves until every leaf holds one category. The left child
//! of a node covering `k` categories receives `ceil(k/2)` of them. When a
//! singleton range is reached above the tree depth, it gets a single
//! padding child with the same range so that every leaf sits at depth
//! `ceil(log2 n)`. The padding edge is canonically labelled `0`, and
//! decoding accepts either bit on it.
//!
//! Categories are 0-indexed throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A category index in `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub usize);

impl CategoryId {
    pub fn value(self) -> usize {
        self.0
    }
}

/// Inclusive contiguous category range `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRange {
    pub lo: usize,
    pub hi: usize,
}

impl CategoryRange {
    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, c: usize) -> bool {
        self.lo <= c && c <= self.hi
    }

    pub fn is_singleton(&self) -> bool {
        self.lo == self.hi
    }

    /// Indicator vector of this range over `n` categories.
    pub fn indicator(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| if self.contains(i) { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub lo: usize,
    pub hi: usize,
    pub left: Option<usize>,
    pub right: Option<usize>,
}

impl TreeNode {
    pub fn range(&self) -> CategoryRange {
        CategoryRange {
            lo: self.lo,
            hi: self.hi,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.left.is_none() && self.right.is_none()
    }

    /// A singleton node above the leaf level, carrying one same-range child.
    pub fn is_padding(&self) -> bool {
        self.left.is_some() && self.right.is_none()
    }
}

/// Balanced binary tree over the ordered categories `0..n`.
///
/// Node 0 is the root. Nodes are stored in depth-first pre-order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DichotomicTree {
    n: usize,
    depth: usize,
    nodes: Vec<TreeNode>,
}

/// Sequence of left (0) / right (1) decisions from the root to a leaf.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PathCode(Vec<u8>);

impl PathCode {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidPath(format!("bit value {b} is not 0 or 1")));
        }
        Ok(PathCode(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Decoder input token: the start marker or a bit emitted at a given position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Start,
    Bit { position: usize, bit: u8 },
}

/// `[s, c1, ..., c_{d-1}]`: the path shifted right behind a start marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftedTarget {
    tokens: Vec<Token>,
}

impl ShiftedTarget {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One indicator vector per tree level marking the categories that survive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHotSequence {
    steps: Vec<Vec<f64>>,
}

impl MultiHotSequence {
    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    /// `o_t` for 1-based step `t`.
    pub fn step(&self, t: usize) -> &[f64] {
        &self.steps[t - 1]
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn n(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }
}

/// `ceil(log2 n)` for `n >= 1`.
pub fn tree_depth(n: usize) -> usize {
    (usize::BITS - (n.max(1) - 1).leading_zeros()) as usize
}

impl DichotomicTree {
    pub fn build(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidCategoryCount(n));
        }
        let depth = tree_depth(n);
        let mut nodes = Vec::with_capacity(2 * n * depth);
        Self::grow(&mut nodes, 0, n - 1, 0, depth);
        Ok(DichotomicTree { n, depth, nodes })
    }

    fn grow(nodes: &mut Vec<TreeNode>, lo: usize, hi: usize, level: usize, depth: usize) -> usize {
        let idx = nodes.len();
        nodes.push(TreeNode {
            lo,
            hi,
            left: None,
            right: None,
        });
        if level == depth {
            debug_assert_eq!(lo, hi);
            return idx;
        }
        if lo == hi {
            let child = Self::grow(nodes, lo, hi, level + 1, depth);
            nodes[idx].left = Some(child);
            return idx;
        }
        let k = hi - lo + 1;
        let mid = lo + k.div_ceil(2) - 1;
        let left = Self::grow(nodes, lo, mid, level + 1, depth);
        let right = Self::grow(nodes, mid + 1, hi, level + 1, depth);
        nodes[idx].left = Some(left);
        nodes[idx].right = Some(right);
        idx
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn category(&self, value: usize) -> Result<CategoryId> {
        if value < self.n {
            Ok(CategoryId(value))
        } else {
            Err(Error::InvalidCategory {
                category: value,
                n: self.n,
            })
        }
    }

    fn check(&self, c: CategoryId) -> Result<()> {
        self.category(c.0).map(|_| ())
    }

    /// Follows one edge. On a padding node either bit leads to the single child.
    fn child(&self, node: usize, bit: u8) -> usize {
        let nd = &self.nodes[node];
        match (nd.left, nd.right, bit) {
            (Some(l), None, _) => l,
            (Some(l), Some(_), 0) => l,
            (Some(_), Some(r), _) => r,
            _ => unreachable!("child() called on a leaf"),
        }
    }

    /// Node indices visited from the root (exclusive) to the leaf of `c`.
    fn walk(&self, c: CategoryId) -> impl Iterator<Item = (u8, usize)> + '_ {
        let mut node = 0;
        std::iter::from_fn(move || {
            let nd = &self.nodes[node];
            let left = nd.left?;
            let bit = match nd.right {
                Some(_) if c.0 > self.nodes[left].hi => 1,
                _ => 0,
            };
            node = self.child(node, bit);
            Some((bit, node))
        })
    }

    pub fn encode_path(&self, c: CategoryId) -> Result<PathCode> {
        self.check(c)?;
        Ok(PathCode(self.walk(c).map(|(bit, _)| bit).collect()))
    }

    pub fn decode_path(&self, path: &PathCode) -> Result<CategoryId> {
        if path.len() != self.depth {
            return Err(Error::InvalidPath(format!(
                "length {} does not match tree depth {}",
                path.len(),
                self.depth
            )));
        }
        let leaf = path.bits().iter().fold(0, |node, &bit| self.child(node, bit));
        Ok(CategoryId(self.nodes[leaf].lo))
    }

    pub fn encode_multihot(&self, c: CategoryId) -> Result<MultiHotSequence> {
        self.check(c)?;
        let steps = self
            .walk(c)
            .map(|(_, node)| self.nodes[node].range().indicator(self.n))
            .collect();
        Ok(MultiHotSequence { steps })
    }

    /// Node reached by following `prefix` from the root.
    pub fn node_at(&self, prefix: &[u8]) -> Result<&TreeNode> {
        if prefix.len() > self.depth {
            return Err(Error::InvalidPrefix {
                len: prefix.len(),
                depth: self.depth,
                max: self.depth.saturating_sub(1),
            });
        }
        if let Some(b) = prefix.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidPath(format!("bit value {b} is not 0 or 1")));
        }
        let node = prefix.iter().fold(0, |node, &bit| self.child(node, bit));
        Ok(&self.nodes[node])
    }

    /// Child ranges of the internal node reached by `prefix`. A padding node
    /// reports its singleton range on both sides.
    pub fn node_ranges_at(&self, prefix: &[u8]) -> Result<(CategoryRange, CategoryRange)> {
        if prefix.len() >= self.depth {
            return Err(Error::InvalidPrefix {
                len: prefix.len(),
                depth: self.depth,
                max: self.depth - 1,
            });
        }
        let nd = self.node_at(prefix)?;
        let left = self.nodes[nd.left.expect("internal node")].range();
        let right = nd.right.map_or(left, |r| self.nodes[r].range());
        Ok((left, right))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn shift_right(path: &PathCode) -> ShiftedTarget {
    let mut tokens = Vec::with_capacity(path.len());
    tokens.push(Token::Start);
    tokens.extend(
        path.bits()
            .iter()
            .take(path.len().saturating_sub(1))
            .enumerate()
            .map(|(position, &bit)| Token::Bit { position, bit }),
    );
    ShiftedTarget { tokens }
}

/// Builds a shifted target from an explicit prefix of bits (used during
/// greedy decoding, where the prefix is the model's own output so far).
pub fn shifted_prefix(bits: &[u8]) -> ShiftedTarget {
    let mut tokens = Vec::with_capacity(bits.len() + 1);
    tokens.push(Token::Start);
    tokens.extend(
        bits.iter()
            .enumerate()
            .map(|(position, &bit)| Token::Bit { position, bit }),
    );
    ShiftedTarget { tokens }
}
