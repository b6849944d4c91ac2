//! Strictly nested aggregation hierarchies and the summing matrix.
//!
//! A hierarchy is a tree of nodes with exactly one root at level 0. Bottom
//! series are the leaves; every other node aggregates the leaves below it.
//! The summing matrix `S` (N x B) maps bottom values to all N series, with
//! rows in level-major order and ties broken by node id.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Id of the synthetic root node materialized by [`HierarchySpec::from_key_paths`].
pub const ROOT_ID: &str = "total";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub level: usize,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    /// Level names, index 0 is the top.
    pub levels: Vec<String>,
    pub nodes: Vec<NodeRecord>,
    pub bottom_ids: Vec<String>,
}

impl HierarchySpec {
    /// Materializes a hierarchy from key paths, one per bottom series.
    ///
    /// `level_names` names the levels below the root, so a path of length k
    /// yields nodes at levels 1..=k. Node ids are the `/`-joined prefixes.
    pub fn from_key_paths<S: AsRef<str>>(
        level_names: &[S],
        paths: &[Vec<String>],
    ) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::hierarchy("no key paths"));
        }
        let depth = level_names.len();
        let mut levels = vec![ROOT_ID.to_string()];
        levels.extend(level_names.iter().map(|s| s.as_ref().to_string()));

        let mut seen: BTreeMap<String, NodeRecord> = BTreeMap::new();
        let mut bottoms = BTreeSet::new();
        for path in paths {
            if path.len() != depth {
                return Err(Error::hierarchy(format!(
                    "key path {:?} has {} components, expected {depth}",
                    path,
                    path.len()
                )));
            }
            let mut parent = ROOT_ID.to_string();
            for k in 0..depth {
                let id = node_id(&path[..=k]);
                seen.entry(id.clone()).or_insert_with(|| NodeRecord {
                    id: id.clone(),
                    level: k + 1,
                    parent: Some(parent.clone()),
                });
                parent = id;
            }
            if !bottoms.insert(parent.clone()) {
                return Err(Error::hierarchy(format!("duplicate key path {parent}")));
            }
        }
        let mut nodes = vec![NodeRecord {
            id: ROOT_ID.to_string(),
            level: 0,
            parent: None,
        }];
        if depth == 0 {
            return Ok(Self {
                levels,
                nodes,
                bottom_ids: vec![ROOT_ID.to_string()],
            });
        }
        nodes.extend(seen.into_values());
        Ok(Self {
            levels,
            nodes,
            bottom_ids: bottoms.into_iter().collect(),
        })
    }

    /// Checks structural invariants and returns the children map.
    fn validate(&self) -> Result<BTreeMap<&str, Vec<&str>>> {
        if self.nodes.is_empty() {
            return Err(Error::hierarchy("no nodes"));
        }
        let mut by_id: HashMap<&str, &NodeRecord> = HashMap::new();
        for n in &self.nodes {
            if by_id.insert(n.id.as_str(), n).is_some() {
                return Err(Error::hierarchy(format!("node {} appears twice", n.id)));
            }
            if n.level >= self.levels.len() {
                return Err(Error::hierarchy(format!(
                    "node {} has undeclared level {}",
                    n.id, n.level
                )));
            }
        }
        let roots: Vec<_> = self.nodes.iter().filter(|n| n.level == 0).collect();
        if roots.len() != 1 {
            return Err(Error::hierarchy(format!(
                "expected exactly one level-0 node, found {}",
                roots.len()
            )));
        }
        let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for n in &self.nodes {
            match (&n.parent, n.level) {
                (None, 0) => {}
                (None, _) => {
                    return Err(Error::hierarchy(format!("orphan node {}", n.id)));
                }
                (Some(_), 0) => {
                    return Err(Error::hierarchy(format!("root {} has a parent", n.id)));
                }
                (Some(p), level) => {
                    let parent = by_id.get(p.as_str()).ok_or_else(|| {
                        Error::hierarchy(format!("orphan node {}: unknown parent {p}", n.id))
                    })?;
                    if parent.level >= level {
                        return Err(Error::hierarchy(format!(
                            "parent link {} -> {p} does not move up a level (cycle or inversion)",
                            n.id
                        )));
                    }
                    children.entry(p.as_str()).or_default().push(n.id.as_str());
                }
            }
        }
        let leaves: BTreeSet<&str> = self
            .nodes
            .iter()
            .filter(|n| !children.contains_key(n.id.as_str()))
            .map(|n| n.id.as_str())
            .collect();
        let mut declared = BTreeSet::new();
        for b in &self.bottom_ids {
            if !declared.insert(b.as_str()) {
                return Err(Error::hierarchy(format!("bottom id {b} listed twice")));
            }
        }
        if declared != leaves {
            return Err(Error::hierarchy(format!(
                "bottom_ids {:?} do not match the leaves {:?}",
                declared, leaves
            )));
        }
        Ok(children)
    }
}

fn node_id(prefix: &[String]) -> String {
    prefix.join("/")
}

/// Dense 0/1 summing matrix with its row (all series) and column (bottom) ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SummingMatrix {
    entries: DMatrix<f64>,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    row_levels: Vec<usize>,
    bottom_rows: Vec<usize>,
    parent_rows: Vec<Option<usize>>,
    n_levels: usize,
}

impl SummingMatrix {
    pub fn n_series(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_bottom(&self) -> usize {
        self.entries.ncols()
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.entries[(row, col)] != 0.0
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    /// Level index of every row (`l(i)`).
    pub fn row_levels(&self) -> &[usize] {
        &self.row_levels
    }

    /// Row index of each bottom column's own series.
    pub fn bottom_rows(&self) -> &[usize] {
        &self.bottom_rows
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.row_ids.iter().position(|r| r == id)
    }

    /// Bottom columns aggregated by `row`.
    pub fn descendants(&self, row: usize) -> Vec<usize> {
        (0..self.n_bottom()).filter(|&j| self.get(row, j)).collect()
    }

    /// Extracts the bottom slice (in column order) from a full N-vector.
    pub fn bottom_slice(&self, full: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(self.n_series(), full.len())?;
        Ok(self.bottom_rows.iter().map(|&r| full[r]).collect())
    }

    /// Parent row of every row; `None` for the root.
    pub fn parent_rows(&self) -> &[Option<usize>] {
        &self.parent_rows
    }
}

/// Builds `S` with level-major rows (stable by id within a level).
pub fn build_summing_matrix(spec: &HierarchySpec) -> Result<SummingMatrix> {
    let children = spec.validate()?;

    let mut order: Vec<&NodeRecord> = spec.nodes.iter().collect();
    order.sort_by(|a, b| a.level.cmp(&b.level).then_with(|| a.id.cmp(&b.id)));

    let col_of: HashMap<&str, usize> = spec
        .bottom_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (id.as_str(), j))
        .collect();

    let n = order.len();
    let b = spec.bottom_ids.len();
    let mut entries = DMatrix::<f64>::zeros(n, b);
    let mut bottom_rows = vec![usize::MAX; b];
    for (row, node) in order.iter().enumerate() {
        let mut stack = vec![node.id.as_str()];
        let mut visited = 0usize;
        while let Some(id) = stack.pop() {
            visited += 1;
            if visited > spec.nodes.len() {
                return Err(Error::hierarchy("cyclic parent links"));
            }
            match children.get(id) {
                Some(kids) => stack.extend(kids.iter().copied()),
                None => entries[(row, col_of[id])] = 1.0,
            }
        }
        if let Some(&j) = col_of.get(node.id.as_str()) {
            bottom_rows[j] = row;
        }
    }
    let row_of: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let parent_rows = order
        .iter()
        .map(|n| n.parent.as_deref().map(|p| row_of[p]))
        .collect();
    Ok(SummingMatrix {
        entries,
        parent_rows,
        row_ids: order.iter().map(|n| n.id.clone()).collect(),
        col_ids: spec.bottom_ids.clone(),
        row_levels: order.iter().map(|n| n.level).collect(),
        bottom_rows,
        n_levels: spec.levels.len(),
    })
}

/// `S . b`
pub fn aggregate_bottom(s: &SummingMatrix, bottom_values: &[f64]) -> Result<Vec<f64>> {
    Error::check_len(s.n_bottom(), bottom_values.len())?;
    let b = DVector::from_column_slice(bottom_values);
    Ok((&s.entries * b).iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoherenceReport {
    pub coherent: bool,
    pub max_violation: f64,
}

/// Compares every row against the sum of its bottom descendants taken from
/// the same vector. Bottom rows are trivially coherent.
pub fn check_coherence(s: &SummingMatrix, full_values: &[f64], tol: f64) -> Result<CoherenceReport> {
    let bottom = s.bottom_slice(full_values)?;
    let implied = aggregate_bottom(s, &bottom)?;
    let max_violation = full_values
        .iter()
        .zip(&implied)
        .map(|(y, z)| (y - z).abs())
        .fold(0.0_f64, f64::max);
    Ok(CoherenceReport {
        coherent: max_violation <= tol,
        max_violation,
    })
}
