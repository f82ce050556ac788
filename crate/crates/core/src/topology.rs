//! Balanced binary trees of index sets with bond dimensions.
//!
//! Internal nodes are numbered bottom-up, level by level, left to right: the
//! `d/2` nodes whose children are leaves come first and the root is last.
//! Every sweep in the crate walks this order forwards (leaves to root) or
//! backwards (root to leaves).

use crate::error::{FtnError, Result};

/// A child slot of an internal node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Child {
    /// Leaf mode `nu` (0-based).
    Leaf(usize),
    /// Internal node index in bottom-up order.
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    /// Half-open range of leaf modes `[start, end)` covered by the node.
    pub start: usize,
    pub end: usize,
    pub left: Child,
    pub right: Child,
    /// Bond dimension `r_t`; equals the output dimension at the root.
    pub rank: usize,
    /// 1 for nodes directly above the leaves.
    pub level: usize,
    pub parent: Option<usize>,
}

/// Requested bond dimensions for the internal non-root nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BondDims {
    Uniform(usize),
    /// One entry per internal non-root node, in bottom-up node order.
    PerNode(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTopology {
    leaf_dims: Vec<usize>,
    output_dim: usize,
    nodes: Vec<Node>,
}

impl TreeTopology {
    /// Builds the balanced tree and checks every rank bound.
    pub fn build_balanced(
        leaf_dims: &[usize],
        output_dim: usize,
        bond_dims: &BondDims,
    ) -> Result<Self> {
        let topo = Self::requested(leaf_dims, output_dim, bond_dims)?;
        topo.validate()?;
        Ok(topo)
    }

    /// Builds the tree shape with the requested bond dimensions without
    /// checking rank bounds; pair with [`TreeTopology::clamp_bond_dims`].
    pub fn requested(leaf_dims: &[usize], output_dim: usize, bond_dims: &BondDims) -> Result<Self> {
        let d = leaf_dims.len();
        if d < 2 || !d.is_power_of_two() {
            return Err(FtnError::Topology(format!(
                "leaf count {d} is not a power of two >= 2"
            )));
        }
        if leaf_dims.contains(&0) || output_dim == 0 {
            return Err(FtnError::Topology("dimensions must be positive".into()));
        }
        let inner = d - 2;
        let ranks: Vec<usize> = match bond_dims {
            BondDims::Uniform(r) => vec![*r; inner],
            BondDims::PerNode(v) => {
                if v.len() != inner {
                    return Err(FtnError::Topology(format!(
                        "expected {inner} bond dimensions, got {}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if ranks.contains(&0) {
            return Err(FtnError::Topology("bond dimensions must be positive".into()));
        }

        let mut nodes = Vec::with_capacity(d - 1);
        let mut below: Vec<(Child, usize, usize)> =
            (0..d).map(|nu| (Child::Leaf(nu), nu, nu + 1)).collect();
        let mut level = 1;
        while below.len() > 1 {
            let mut next = Vec::with_capacity(below.len() / 2);
            for pair in below.chunks(2) {
                let (left, start, _) = pair[0];
                let (right, _, end) = pair[1];
                let idx = nodes.len();
                let rank = if below.len() == 2 { output_dim } else { ranks[idx] };
                nodes.push(Node {
                    start,
                    end,
                    left,
                    right,
                    rank,
                    level,
                    parent: None,
                });
                for child in [left, right] {
                    if let Child::Node(c) = child {
                        nodes[c].parent = Some(idx);
                    }
                }
                next.push((Child::Node(idx), start, end));
            }
            below = next;
            level += 1;
        }
        Ok(Self {
            leaf_dims: leaf_dims.to_vec(),
            output_dim,
            nodes,
        })
    }

    /// Checks `r_t <= r_{t_L} r_{t_R}` at every internal non-root node.
    pub fn validate(&self) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if self.is_root(idx) {
                continue;
            }
            let bound = self.child_rank(node.left) * self.child_rank(node.right);
            if node.rank > bound {
                return Err(FtnError::Topology(format!(
                    "node {{{}..{}}} has rank {} > {bound}",
                    node.start + 1,
                    node.end,
                    node.rank
                )));
            }
        }
        Ok(())
    }

    /// Reduces every bond dimension to the largest feasible value in a single
    /// bottom-up sweep.
    pub fn clamp_bond_dims(&self) -> Self {
        let mut out = self.clone();
        let root = out.root();
        for idx in 0..out.nodes.len() {
            if idx == root {
                continue;
            }
            let node = &out.nodes[idx];
            let pair = out.child_rank(node.left) * out.child_rank(node.right);
            let span: usize = out.leaf_dims[node.start..node.end]
                .iter()
                .fold(1usize, |acc, &n| acc.saturating_mul(n));
            let rank = node.rank.min(pair).min(span);
            out.nodes[idx].rank = rank;
        }
        out
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_dims.len()
    }

    pub fn leaf_dims(&self) -> &[usize] {
        &self.leaf_dims
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn is_root(&self, idx: usize) -> bool {
        idx == self.root()
    }

    pub fn child_rank(&self, child: Child) -> usize {
        match child {
            Child::Leaf(nu) => self.leaf_dims[nu],
            Child::Node(c) => self.nodes[c].rank,
        }
    }

    /// Core shape `[r_L, r_R, r_t]` of an internal node.
    pub fn core_shape(&self, idx: usize) -> [usize; 3] {
        let node = &self.nodes[idx];
        [
            self.child_rank(node.left),
            self.child_rank(node.right),
            node.rank,
        ]
    }

    /// Bond dimensions of the internal non-root nodes in node order.
    pub fn bond_dims(&self) -> Vec<usize> {
        let root = self.root();
        self.nodes[..root].iter().map(|n| n.rank).collect()
    }

    /// Total number of core entries.
    pub fn param_count(&self) -> usize {
        (0..self.nodes.len())
            .map(|i| self.core_shape(i).iter().product::<usize>())
            .sum()
    }

    /// Dimension of the horizontal space: non-root cores lose `r_t^2`.
    pub fn horizontal_dim(&self) -> usize {
        let root = self.root();
        (0..self.nodes.len())
            .map(|i| {
                let [a, b, c] = self.core_shape(i);
                if i == root {
                    a * b * c
                } else {
                    (a * b - c) * c
                }
            })
            .sum()
    }

    /// Flat descriptor: `d, n_0, n_1..n_d, r_t for each internal non-root node`.
    pub fn descriptor(&self) -> Vec<u32> {
        let mut out = vec![self.leaf_dims.len() as u32, self.output_dim as u32];
        out.extend(self.leaf_dims.iter().map(|&n| n as u32));
        out.extend(self.bond_dims().iter().map(|&r| r as u32));
        out
    }

    pub fn from_descriptor(desc: &[u32]) -> Result<Self> {
        if desc.len() < 2 {
            return Err(FtnError::Format("topology descriptor too short".into()));
        }
        let d = desc[0] as usize;
        let n0 = desc[1] as usize;
        if d < 2 || desc.len() != 2 + d + (d - 2) {
            return Err(FtnError::Format("topology descriptor has wrong length".into()));
        }
        let leaf: Vec<usize> = desc[2..2 + d].iter().map(|&v| v as usize).collect();
        let bonds: Vec<usize> = desc[2 + d..].iter().map(|&v| v as usize).collect();
        Self::build_balanced(&leaf, n0, &BondDims::PerNode(bonds))
    }
}
