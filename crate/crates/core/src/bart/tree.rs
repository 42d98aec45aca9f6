//! Regression trees over binary predictors.
//!
//! Split rules are trivial for binary inputs: `x_var = 0` routes left,
//! `x_var = 1` routes right. Trees are stored as flat arenas with the root at
//! index 0; the JSON form is nested nodes.

use serde::{Deserialize, Serialize};

/// Row-major binary design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn from_rows<R: AsRef<[bool]>>(rows: &[R]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), n_cols, "ragged design matrix");
            data.extend(r.iter().map(|&b| b as u8));
        }
        BinaryMatrix { n_rows, n_cols, data }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.n_cols + col] != 0
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.n_cols..(row + 1) * self.n_cols]
    }
}

/// Immutable tree node (posterior-draw storage).
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf { value: f64 },
    Split { var: u32, left: u32, right: u32 },
}

/// A fitted regression tree; `nodes[0]` is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree { nodes: vec![Node::Leaf { value }] }
    }

    /// Value of the leaf the row routes to.
    #[inline]
    pub fn predict_row(&self, row: &[u8]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split { var, left, right } => {
                    at = if row[*var as usize] != 0 { *right } else { *left } as usize;
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }
}

/// Nested-node JSON form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum NestedNode {
    Leaf { value: f64 },
    Split {
        var: u32,
        left: Box<NestedNode>,
        right: Box<NestedNode>,
    },
}

impl Tree {
    fn to_nested(&self, at: u32) -> NestedNode {
        match &self.nodes[at as usize] {
            Node::Leaf { value } => NestedNode::Leaf { value: *value },
            Node::Split { var, left, right } => NestedNode::Split {
                var: *var,
                left: Box::new(self.to_nested(*left)),
                right: Box::new(self.to_nested(*right)),
            },
        }
    }

    fn push_nested(nodes: &mut Vec<Node>, nested: &NestedNode) -> u32 {
        match nested {
            NestedNode::Leaf { value } => {
                nodes.push(Node::Leaf { value: *value });
                (nodes.len() - 1) as u32
            }
            NestedNode::Split { var, left, right } => {
                let at = nodes.len();
                nodes.push(Node::Split { var: *var, left: 0, right: 0 });
                let l = Tree::push_nested(nodes, left);
                let r = Tree::push_nested(nodes, right);
                nodes[at] = Node::Split { var: *var, left: l, right: r };
                at as u32
            }
        }
    }
}

impl Serialize for Tree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_nested(0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let nested = NestedNode::deserialize(d)?;
        let mut nodes = Vec::new();
        Tree::push_nested(&mut nodes, &nested);
        Ok(Tree { nodes })
    }
}
