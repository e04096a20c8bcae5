//! Stratified label trees.
//!
//! A hierarchy organises class labels into strata indexed by height: stratum 0
//! holds the leaf classes, the top stratum holds a single root. Every node at
//! height `h < H-1` has exactly one parent at height `h+1`, so the strata form
//! a balanced tree: every leaf sits at height 0 and every root-to-leaf path
//! has the same length.
//!
//! The tree distance between two leaves is the height of their least common
//! ancestor. It is an ultrametric: `d(a,c) <= max(d(a,b), d(b,c))`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Address of a node: `(height, index within stratum)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub height: usize,
    pub index: usize,
}

impl NodeRef {
    pub fn new(height: usize, index: usize) -> Self {
        NodeRef { height, index }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.height, self.index)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("tree must have at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("multiple roots: top stratum contains {0} nodes")]
    MultipleRoots(usize),
    #[error("orphan node {0}: no parent edge")]
    OrphanNode(NodeRef),
    #[error("unbalanced leaves: node {0} has no children but sits above stratum 0")]
    UnbalancedLeaves(NodeRef),
    #[error("cycle detected through node {0}")]
    CycleDetected(NodeRef),
    #[error("node {child} lists parent {parent}, which is not one stratum up")]
    InvalidParentHeight { child: NodeRef, parent: NodeRef },
    #[error("duplicate parent edge for node {0}")]
    DuplicateEdge(NodeRef),
    #[error("height {height} out of range for a {num_levels}-level tree")]
    HeightOutOfRange { height: usize, num_levels: usize },
    #[error("node {0} is not a leaf")]
    NotALeaf(NodeRef),
    #[error("leaf index {index} out of range (stratum 0 has {num_leaves} nodes)")]
    LeafOutOfRange { index: usize, num_leaves: usize },
    #[error("node index {0} out of range")]
    NodeOutOfRange(NodeRef),
}

/// Balanced stratified label tree. Construction validates the strata; all
/// query methods on a built tree are total apart from explicit range checks.
pub struct Hierarchy {
    level_sizes: Vec<usize>,
    /// `parent[h][i]` = index at height `h+1`; defined for `h < H-1`.
    parent: Vec<Vec<usize>>,
    /// `children[h][i]` = sorted indices at height `h-1`; empty vec at `h = 0`.
    children: Vec<Vec<Vec<usize>>>,
    /// `ancestors[leaf][h]` = index of the leaf's ancestor at height `h`.
    ancestors: Vec<Vec<usize>>,
    /// `leaves_under[h][i]` = sorted leaf indices below node `(h, i)`.
    leaves_under: Vec<Vec<Vec<usize>>>,
    names: BTreeMap<String, String>,
    lower_masks: Vec<OnceLock<Vec<usize>>>,
    greater_masks: Vec<OnceLock<Vec<usize>>>,
}

impl fmt::Debug for Hierarchy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Hierarchy")
            .field("level_sizes", &self.level_sizes)
            .finish()
    }
}

impl Hierarchy {
    /// Builds a tree from `(child, parent)` edges covering every non-root
    /// node. Parents must sit exactly one stratum above their children;
    /// indices within each stratum must be contiguous from zero.
    pub fn build(num_levels: usize, edges: &[(NodeRef, NodeRef)]) -> Result<Self, TreeError> {
        if num_levels < 2 {
            return Err(TreeError::TooFewLevels(num_levels));
        }
        let top = num_levels - 1;

        // Reject duplicate child entries before anything else so later passes
        // can assume one edge per node.
        let mut seen: std::collections::BTreeSet<NodeRef> = std::collections::BTreeSet::new();
        for &(child, _) in edges {
            if !seen.insert(child) {
                return Err(TreeError::DuplicateEdge(child));
            }
        }

        for &(child, parent) in edges {
            if child.height >= top {
                return Err(TreeError::HeightOutOfRange {
                    height: child.height,
                    num_levels,
                });
            }
            if parent.height > top {
                return Err(TreeError::HeightOutOfRange {
                    height: parent.height,
                    num_levels,
                });
            }
        }

        // Parent links that do not climb exactly one stratum cannot form a
        // valid tree; if they loop back on themselves report the cycle.
        if edges.iter().any(|&(c, p)| p.height != c.height + 1) {
            let link: BTreeMap<NodeRef, NodeRef> = edges.iter().copied().collect();
            for &start in link.keys() {
                let mut visited = std::collections::BTreeSet::new();
                let mut cur = start;
                while let Some(&next) = link.get(&cur) {
                    if !visited.insert(cur) {
                        return Err(TreeError::CycleDetected(cur));
                    }
                    cur = next;
                }
            }
            let &(child, parent) = edges
                .iter()
                .find(|&&(c, p)| p.height != c.height + 1)
                .expect("checked above");
            return Err(TreeError::InvalidParentHeight { child, parent });
        }

        // Stratum sizes: one past the largest index mentioned at each height.
        let mut level_sizes = vec![0usize; num_levels];
        for &(child, parent) in edges {
            let c = &mut level_sizes[child.height];
            *c = (*c).max(child.index + 1);
            let p = &mut level_sizes[parent.height];
            *p = (*p).max(parent.index + 1);
        }
        if level_sizes[top] > 1 {
            return Err(TreeError::MultipleRoots(level_sizes[top]));
        }
        level_sizes[top] = 1;

        let mut parent_of: Vec<Vec<Option<usize>>> = (0..top)
            .map(|h| vec![None; level_sizes[h]])
            .collect();
        for &(child, parent) in edges {
            parent_of[child.height][child.index] = Some(parent.index);
        }
        let mut parent = Vec::with_capacity(top);
        for (h, level) in parent_of.into_iter().enumerate() {
            let mut filled = Vec::with_capacity(level.len());
            for (i, p) in level.into_iter().enumerate() {
                match p {
                    Some(p) => filled.push(p),
                    None => return Err(TreeError::OrphanNode(NodeRef::new(h, i))),
                }
            }
            parent.push(filled);
        }

        let mut children: Vec<Vec<Vec<usize>>> =
            level_sizes.iter().map(|&n| vec![Vec::new(); n]).collect();
        for (h, level) in parent.iter().enumerate() {
            for (i, &p) in level.iter().enumerate() {
                children[h + 1][p].push(i);
            }
        }
        for (h, level) in children.iter().enumerate().skip(1) {
            for (i, kids) in level.iter().enumerate() {
                if kids.is_empty() {
                    return Err(TreeError::UnbalancedLeaves(NodeRef::new(h, i)));
                }
            }
        }

        let num_leaves = level_sizes[0];
        let mut ancestors = Vec::with_capacity(num_leaves);
        for leaf in 0..num_leaves {
            let mut chain = Vec::with_capacity(num_levels);
            let mut idx = leaf;
            chain.push(idx);
            for h in 0..top {
                idx = parent[h][idx];
                chain.push(idx);
            }
            ancestors.push(chain);
        }

        let mut leaves_under: Vec<Vec<Vec<usize>>> =
            level_sizes.iter().map(|&n| vec![Vec::new(); n]).collect();
        for (leaf, chain) in ancestors.iter().enumerate() {
            for (h, &idx) in chain.iter().enumerate() {
                leaves_under[h][idx].push(leaf);
            }
        }

        let mask_slots = num_leaves * (num_levels - 1);
        Ok(Hierarchy {
            level_sizes,
            parent,
            children,
            ancestors,
            leaves_under,
            names: BTreeMap::new(),
            lower_masks: (0..mask_slots).map(|_| OnceLock::new()).collect(),
            greater_masks: (0..mask_slots).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn num_leaves(&self) -> usize {
        self.level_sizes[0]
    }

    pub fn root(&self) -> NodeRef {
        NodeRef::new(self.num_levels() - 1, 0)
    }

    fn check_node(&self, node: NodeRef) -> Result<(), TreeError> {
        if node.height >= self.num_levels() {
            return Err(TreeError::HeightOutOfRange {
                height: node.height,
                num_levels: self.num_levels(),
            });
        }
        if node.index >= self.level_sizes[node.height] {
            return Err(TreeError::NodeOutOfRange(node));
        }
        Ok(())
    }

    fn check_leaf(&self, y: usize) -> Result<(), TreeError> {
        if y >= self.num_leaves() {
            return Err(TreeError::LeafOutOfRange {
                index: y,
                num_leaves: self.num_leaves(),
            });
        }
        Ok(())
    }

    /// Parent of a node, `None` for the root.
    pub fn parent(&self, node: NodeRef) -> Result<Option<NodeRef>, TreeError> {
        self.check_node(node)?;
        if node.height == self.num_levels() - 1 {
            return Ok(None);
        }
        Ok(Some(NodeRef::new(
            node.height + 1,
            self.parent[node.height][node.index],
        )))
    }

    /// Direct children of a node; empty for leaves.
    pub fn children(&self, node: NodeRef) -> Result<&[usize], TreeError> {
        self.check_node(node)?;
        Ok(&self.children[node.height][node.index])
    }

    /// All descendants of `node` in the stratum at `target_height`, sorted by
    /// index. Requires `target_height < node.height`.
    pub fn offspring(&self, node: NodeRef, target_height: usize) -> Result<Vec<NodeRef>, TreeError> {
        self.check_node(node)?;
        if target_height >= node.height {
            return Err(TreeError::HeightOutOfRange {
                height: target_height,
                num_levels: node.height,
            });
        }
        let mut frontier = vec![node.index];
        let mut h = node.height;
        while h > target_height {
            let mut next = Vec::new();
            for &i in &frontier {
                next.extend_from_slice(&self.children[h][i]);
            }
            frontier = next;
            h -= 1;
        }
        frontier.sort_unstable();
        Ok(frontier
            .into_iter()
            .map(|i| NodeRef::new(target_height, i))
            .collect())
    }

    /// Sorted leaf indices below node `(height, index)`. A leaf is below
    /// itself, so `leaves_under(0, i) == [i]`.
    pub fn leaves_under(&self, node: NodeRef) -> Result<&[usize], TreeError> {
        self.check_node(node)?;
        Ok(&self.leaves_under[node.height][node.index])
    }

    /// Ancestor of a leaf at the requested height.
    pub fn ancestor_at(&self, leaf: NodeRef, height: usize) -> Result<NodeRef, TreeError> {
        if leaf.height != 0 {
            return Err(TreeError::NotALeaf(leaf));
        }
        self.check_leaf(leaf.index)?;
        if height >= self.num_levels() {
            return Err(TreeError::HeightOutOfRange {
                height,
                num_levels: self.num_levels(),
            });
        }
        Ok(NodeRef::new(height, self.ancestors[leaf.index][height]))
    }

    /// Index-only variant of [`ancestor_at`](Self::ancestor_at) for hot paths.
    /// Bounds are debug-asserted.
    #[inline]
    pub fn leaf_ancestor(&self, leaf: usize, height: usize) -> usize {
        debug_assert!(leaf < self.num_leaves() && height < self.num_levels());
        self.ancestors[leaf][height]
    }

    /// Tree distance between two leaves: the height of their least common
    /// ancestor. Zero iff the leaves coincide; at most `H - 1`.
    pub fn hdist(&self, a: NodeRef, b: NodeRef) -> Result<usize, TreeError> {
        if a.height != 0 {
            return Err(TreeError::NotALeaf(a));
        }
        if b.height != 0 {
            return Err(TreeError::NotALeaf(b));
        }
        self.check_leaf(a.index)?;
        self.check_leaf(b.index)?;
        Ok(self.leaf_distance(a.index, b.index))
    }

    /// Index-only variant of [`hdist`](Self::hdist). Simultaneous ascent over
    /// the parent arrays, O(H).
    #[inline]
    pub fn leaf_distance(&self, a: usize, b: usize) -> usize {
        debug_assert!(a < self.num_leaves() && b < self.num_leaves());
        let (mut x, mut y) = (a, b);
        let mut h = 0;
        while x != y {
            x = self.parent[h][x];
            y = self.parent[h][y];
            h += 1;
        }
        h
    }

    /// Leaves within distance `h` of `y`: exactly the leaves below `y`'s
    /// ancestor at height `h`. Requires `1 <= h <= H-1`; cached after first
    /// use. At `h = H-1` this is every leaf.
    pub fn lower_mask(&self, y: usize, h: usize) -> Result<&[usize], TreeError> {
        self.check_leaf(y)?;
        self.check_mask_height(h)?;
        let slot = &self.lower_masks[self.mask_slot(y, h)];
        Ok(slot.get_or_init(|| self.leaves_under[h][self.ancestors[y][h]].clone()))
    }

    /// Leaves at distance `>= h` from `y`, plus `y` itself: the complement of
    /// the lower mask at `h - 1`, restored to contain `y`. Requires
    /// `1 <= h <= H-1`; cached after first use. At `h = 1` this is every leaf.
    pub fn greater_mask(&self, y: usize, h: usize) -> Result<&[usize], TreeError> {
        self.check_leaf(y)?;
        self.check_mask_height(h)?;
        let slot = &self.greater_masks[self.mask_slot(y, h)];
        Ok(slot.get_or_init(|| {
            // Lower mask at h-1; for h = 1 that degenerates to {y}.
            let inner: &[usize] = if h == 1 {
                std::slice::from_ref(&y)
            } else {
                &self.leaves_under[h - 1][self.ancestors[y][h - 1]]
            };
            let mut mask = Vec::with_capacity(self.num_leaves() - inner.len() + 1);
            let mut skip = inner.iter().peekable();
            for leaf in 0..self.num_leaves() {
                if skip.peek() == Some(&&leaf) {
                    skip.next();
                    if leaf == y {
                        mask.push(leaf);
                    }
                } else {
                    mask.push(leaf);
                }
            }
            mask
        }))
    }

    fn check_mask_height(&self, h: usize) -> Result<(), TreeError> {
        if h == 0 || h >= self.num_levels() {
            return Err(TreeError::HeightOutOfRange {
                height: h,
                num_levels: self.num_levels(),
            });
        }
        Ok(())
    }

    fn mask_slot(&self, y: usize, h: usize) -> usize {
        y * (self.num_levels() - 1) + (h - 1)
    }

    /// Optional display name for a node.
    pub fn name(&self, node: NodeRef) -> Option<&str> {
        self.names
            .get(&format!("{}:{}", node.height, node.index))
            .map(String::as_str)
    }

    pub fn set_names(&mut self, names: BTreeMap<String, String>) {
        self.names = names;
    }

    pub fn to_file(&self) -> TreeFile {
        let mut edges = Vec::new();
        for h in 0..self.num_levels() - 1 {
            for (i, &p) in self.parent[h].iter().enumerate() {
                edges.push([h, i, p]);
            }
        }
        TreeFile {
            num_levels: self.num_levels(),
            edges,
            names: self.names.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_file())
            .expect("tree serialization cannot fail");
        text.push('\n');
        fs::write(path, text)
    }

    pub fn load(path: &Path) -> Result<Self, TreeFileError> {
        let text = fs::read_to_string(path).map_err(TreeFileError::Io)?;
        let file: TreeFile = serde_json::from_str(&text).map_err(TreeFileError::Parse)?;
        file.into_hierarchy().map_err(TreeFileError::Tree)
    }
}

/// On-disk tree description: `edges` holds `[height, index, parent_index]`
/// for every non-root node; `names` optionally labels nodes by `"h:i"` keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeFile {
    pub num_levels: usize,
    pub edges: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub names: BTreeMap<String, String>,
}

impl TreeFile {
    pub fn into_hierarchy(self) -> Result<Hierarchy, TreeError> {
        let edges: Vec<(NodeRef, NodeRef)> = self
            .edges
            .iter()
            .map(|&[h, i, p]| (NodeRef::new(h, i), NodeRef::new(h + 1, p)))
            .collect();
        let mut tree = Hierarchy::build(self.num_levels, &edges)?;
        tree.set_names(self.names);
        Ok(tree)
    }
}

#[derive(Debug, Error)]
pub enum TreeFileError {
    #[error("cannot read tree file: {0}")]
    Io(#[source] io::Error),
    #[error("malformed tree file: {0}")]
    Parse(#[source] serde_json::Error),
    #[error(transparent)]
    Tree(#[from] TreeError),
}
