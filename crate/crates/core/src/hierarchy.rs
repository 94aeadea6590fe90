//! Label tree, level structure, ancestor closure and the hierarchical
//! constraint rules.
//!
//! A hierarchy document is line oriented: `name<TAB>parent_name`, with a
//! single root line `name<TAB>-`. The root is a virtual node: it is kept so
//! that a forest of top-level classes (e.g. bird orders) hangs off a single
//! node, but it never counts as a level and never appears in a [`NodeSet`].
//! Blank lines and `#` comments are ignored, except for an optional
//! `#!levels name0 name1 ...` pragma naming the levels.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("line {line}: expected `name<TAB>parent`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate node name {name:?}")]
    DuplicateName { line: usize, name: String },
    #[error("multiple roots: {first:?} and {second:?}")]
    MultipleRoots { first: String, second: String },
    #[error("no root line (`name<TAB>-`)")]
    NoRoot,
    #[error("node {name:?} refers to unknown parent {parent:?}")]
    DanglingParent { name: String, parent: String },
    #[error("cycle detected involving {name:?}")]
    Cycle { name: String },
    #[error("hierarchy has no classes below the root")]
    Empty,
    #[error("level pragma names {given} levels but the tree has {depth}")]
    LevelNames { given: usize, depth: usize },
    #[error("path is empty")]
    EmptyPath,
    #[error("path of length {len} exceeds depth {depth}")]
    PathTooLong { len: usize, depth: usize },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("path must start at level 0, {node:?} is at level {level}")]
    PathStart { node: String, level: usize },
    #[error("{child:?} is not a child of {parent:?}")]
    NotAnEdge { parent: String, child: String },
    #[error("no node named {name:?} at level {level}")]
    UnknownName { name: String, level: usize },
    #[error("cannot truncate a path of length {len} at level {level}")]
    TruncateLevel { len: usize, level: usize },
}

/// Dense node identifier assigned in document order at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    parent: Option<NodeId>,
    level: usize,
    children: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    root_name: String,
    nodes: Vec<Node>,
    top: Vec<NodeId>,
    depth: usize,
    level_names: Vec<String>,
    by_level: Vec<Vec<NodeId>>,
    // (level, name) -> id
    lookup: HashMap<(usize, String), NodeId>,
    category_index: Vec<usize>,
}

impl Hierarchy {
    /// Parses and validates a hierarchy document.
    pub fn parse(source: &str) -> Result<Self, HierarchyError> {
        let mut root: Option<(usize, String)> = None;
        let mut level_names: Option<Vec<String>> = None;
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();

        for (idx, raw) in source.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if let Some(rest) = line.strip_prefix("#!levels") {
                level_names = Some(rest.split_whitespace().map(str::to_string).collect());
                continue;
            }
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (name, parent) = match (fields.next(), fields.next(), fields.next()) {
                (Some(n), Some(p), None) if !n.trim().is_empty() && !p.trim().is_empty() => {
                    (n.trim().to_string(), p.trim().to_string())
                }
                _ => {
                    return Err(HierarchyError::Malformed {
                        line: line_no,
                        text: line.to_string(),
                    })
                }
            };
            if seen.insert(name.clone(), line_no).is_some() {
                return Err(HierarchyError::DuplicateName {
                    line: line_no,
                    name,
                });
            }
            if parent == "-" {
                if let Some((_, first)) = &root {
                    return Err(HierarchyError::MultipleRoots {
                        first: first.clone(),
                        second: name,
                    });
                }
                root = Some((line_no, name));
            } else {
                if parent == name {
                    return Err(HierarchyError::Cycle { name });
                }
                entries.push((line_no, name, parent));
            }
        }

        let (_, root_name) = root.ok_or(HierarchyError::NoRoot)?;
        if entries.is_empty() {
            return Err(HierarchyError::Empty);
        }

        let ids: HashMap<&str, NodeId> = entries
            .iter()
            .enumerate()
            .map(|(i, (_, n, _))| (n.as_str(), NodeId(i as u32)))
            .collect();

        let mut nodes: Vec<Node> = entries
            .iter()
            .map(|(_, name, _)| Node {
                name: name.clone(),
                parent: None,
                level: usize::MAX,
                children: Vec::new(),
            })
            .collect();
        let mut top = Vec::new();
        for (i, (_, name, parent)) in entries.iter().enumerate() {
            let id = NodeId(i as u32);
            if *parent == root_name {
                top.push(id);
            } else {
                let pid = *ids.get(parent.as_str()).ok_or_else(|| {
                    HierarchyError::DanglingParent {
                        name: name.clone(),
                        parent: parent.clone(),
                    }
                })?;
                nodes[i].parent = Some(pid);
                nodes[pid.index()].children.push(id);
            }
        }

        // BFS from the virtual root assigns levels; anything left unvisited
        // can only be on a parent cycle.
        let mut queue: VecDeque<NodeId> = top.iter().copied().collect();
        for &t in &top {
            nodes[t.index()].level = 0;
        }
        while let Some(id) = queue.pop_front() {
            let level = nodes[id.index()].level;
            let children = nodes[id.index()].children.clone();
            for c in children {
                nodes[c.index()].level = level + 1;
                queue.push_back(c);
            }
        }
        if let Some(n) = nodes.iter().find(|n| n.level == usize::MAX) {
            return Err(HierarchyError::Cycle {
                name: n.name.clone(),
            });
        }

        let depth = nodes.iter().map(|n| n.level).max().unwrap_or(0) + 1;
        let level_names = match level_names {
            Some(names) if names.len() != depth => {
                return Err(HierarchyError::LevelNames {
                    given: names.len(),
                    depth,
                })
            }
            Some(names) => names,
            None => (0..depth).map(|l| format!("level{l}")).collect(),
        };

        let mut by_level = vec![Vec::new(); depth];
        let mut lookup = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            by_level[n.level].push(NodeId(i as u32));
            lookup.insert((n.level, n.name.clone()), NodeId(i as u32));
        }
        let mut category_index = vec![0; nodes.len()];
        let mut next = 0;
        for level in &by_level {
            for id in level {
                category_index[id.index()] = next;
                next += 1;
            }
        }

        Ok(Self {
            root_name,
            nodes,
            top,
            depth,
            level_names,
            by_level,
            lookup,
            category_index,
        })
    }

    /// Writes the hierarchy back out in document form, parents before
    /// children.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        if self.level_names.iter().enumerate().any(|(l, n)| *n != format!("level{l}")) {
            out.push_str("#!levels ");
            out.push_str(&self.level_names.join(" "));
            out.push('\n');
        }
        out.push_str(&self.root_name);
        out.push_str("\t-\n");
        for level in &self.by_level {
            for &id in level {
                let parent = match self.parent(id) {
                    Some(p) => self.name(p),
                    None => &self.root_name,
                };
                out.push_str(self.name(id));
                out.push('\t');
                out.push_str(parent);
                out.push('\n');
            }
        }
        out
    }

    /// Number of levels below the virtual root.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of classes, excluding the virtual root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root_name(&self) -> &str {
        &self.root_name
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].name
    }

    pub fn level_of(&self, id: NodeId) -> usize {
        self.nodes[id.index()].level
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.index()].parent
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.index()].children
    }

    /// Level-0 classes (children of the virtual root).
    pub fn top_level(&self) -> &[NodeId] {
        &self.top
    }

    pub fn level_names(&self) -> &[String] {
        &self.level_names
    }

    pub fn level_name(&self, level: usize) -> &str {
        &self.level_names[level]
    }

    pub fn level_index(&self, name: &str) -> Option<usize> {
        self.level_names.iter().position(|n| n == name)
    }

    /// Classes at `level`, in document order.
    pub fn nodes_at_level(&self, level: usize) -> &[NodeId] {
        &self.by_level[level]
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.by_level.iter().map(Vec::len).collect()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn find(&self, level: usize, name: &str) -> Option<NodeId> {
        self.lookup.get(&(level, name.to_string())).copied()
    }

    /// Position of `id` in the canonical category order: level-major, then
    /// document order within a level.
    pub fn category_index(&self, id: NodeId) -> usize {
        self.category_index[id.index()]
    }

    /// Categories in canonical order.
    pub fn canonical_order(&self) -> Vec<NodeId> {
        self.by_level.iter().flatten().copied().collect()
    }

    /// Position of `id` among the classes of its own level.
    pub fn index_within_level(&self, id: NodeId) -> usize {
        let level = self.level_of(id);
        self.category_index(id) - self.by_level[..level].iter().map(Vec::len).sum::<usize>()
    }

    /// Root-to-node path ending at `id`.
    pub fn path_to(&self, id: NodeId) -> LabelPath {
        let mut ids = vec![id];
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            ids.push(p);
            cur = p;
        }
        ids.reverse();
        LabelPath(ids)
    }

    /// Validates a sequence of node ids as a [`LabelPath`].
    pub fn path(&self, ids: Vec<NodeId>) -> Result<LabelPath, HierarchyError> {
        let first = *ids.first().ok_or(HierarchyError::EmptyPath)?;
        if ids.len() > self.depth {
            return Err(HierarchyError::PathTooLong {
                len: ids.len(),
                depth: self.depth,
            });
        }
        for &id in &ids {
            if id.index() >= self.nodes.len() {
                return Err(HierarchyError::UnknownNode(id));
            }
        }
        if self.level_of(first) != 0 {
            return Err(HierarchyError::PathStart {
                node: self.name(first).to_string(),
                level: self.level_of(first),
            });
        }
        for w in ids.windows(2) {
            if self.parent(w[1]) != Some(w[0]) {
                return Err(HierarchyError::NotAnEdge {
                    parent: self.name(w[0]).to_string(),
                    child: self.name(w[1]).to_string(),
                });
            }
        }
        Ok(LabelPath(ids))
    }

    /// Resolves a path given as per-level names.
    pub fn path_from_names<S: AsRef<str>>(&self, names: &[S]) -> Result<LabelPath, HierarchyError> {
        let ids = names
            .iter()
            .enumerate()
            .map(|(level, n)| {
                self.find(level, n.as_ref())
                    .ok_or_else(|| HierarchyError::UnknownName {
                        name: n.as_ref().to_string(),
                        level,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.path(ids)
    }

    pub fn path_names(&self, path: &LabelPath) -> Vec<String> {
        path.ids().iter().map(|&id| self.name(id).to_string()).collect()
    }

    /// The set of classes a sample labeled with `path` belongs to. For a tree
    /// the path is its own ancestor closure.
    pub fn ancestor_closure(&self, path: &LabelPath) -> Result<NodeSet, HierarchyError> {
        self.path(path.0.clone())?;
        Ok(path.ids().iter().copied().collect())
    }

    /// Every full-depth path, in canonical leaf order.
    pub fn leaf_paths(&self) -> Vec<LabelPath> {
        self.by_level[self.depth - 1]
            .iter()
            .map(|&id| self.path_to(id))
            .collect()
    }
}

/// A root-to-node category path, possibly stopping above the leaf level.
/// A path of length `k` labels its sample at level `k - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelPath(Vec<NodeId>);

impl LabelPath {
    /// Wraps ids without validation; use [`Hierarchy::path`] for checked
    /// construction.
    pub fn new_unchecked(ids: Vec<NodeId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Level this path is labeled to.
    pub fn level(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn node_at(&self, level: usize) -> Option<NodeId> {
        self.0.get(level).copied()
    }

    /// Prefix of the path ending at `level`.
    pub fn truncate(&self, level: usize) -> Result<LabelPath, HierarchyError> {
        if level >= self.0.len() {
            return Err(HierarchyError::TruncateLevel {
                len: self.0.len(),
                level,
            });
        }
        Ok(LabelPath(self.0[..=level].to_vec()))
    }
}

/// Finite set of classes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeSet(BTreeSet<NodeId>);

impl NodeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.0.contains(&id)
    }

    pub fn insert(&mut self, id: NodeId) -> bool {
        self.0.insert(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.0.iter().copied()
    }

    pub fn intersection_len(&self, other: &NodeSet) -> usize {
        self.0.intersection(&other.0).count()
    }

    pub fn symmetric_difference_len(&self, other: &NodeSet) -> usize {
        self.0.symmetric_difference(&other.0).count()
    }

    pub fn is_subset(&self, other: &NodeSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl FromIterator<NodeId> for NodeSet {
    fn from_iter<I: IntoIterator<Item = NodeId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Per-level classification outcome, `true` meaning correct at that level.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CorrectnessVector(pub Vec<bool>);

impl CorrectnessVector {
    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Correct at the top level and never correct below a miss.
    pub fn is_legal(&self) -> bool {
        match self.0.first() {
            Some(true) => self.0.windows(2).all(|w| w[0] || !w[1]),
            _ => false,
        }
    }

    /// Deepest correctly classified level, if the vector is legal.
    pub fn finest_correct_level(&self) -> Option<usize> {
        if !self.is_legal() {
            return None;
        }
        self.0.iter().rposition(|&b| b)
    }
}

impl fmt::Display for CorrectnessVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}", *b as u8)?;
        }
        write!(f, "]")
    }
}

/// The legal correctness patterns for a `depth`-level hierarchy, finest
/// first: `[1,..,1]`, `[1,..,1,0]`, ..., `[1,0,..,0]`.
pub fn legal_set(depth: usize) -> Vec<CorrectnessVector> {
    (0..depth)
        .map(|zeros| CorrectnessVector((0..depth).map(|i| i < depth - zeros).collect()))
        .collect()
}

pub fn is_legal(v: &CorrectnessVector) -> bool {
    v.is_legal()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "top\t-\nroot\ttop\nA\troot\nB\troot\nD\tA\nE\tA\nF\tB\n";

    #[test]
    fn toy_tree_under_virtual_root() {
        let h = Hierarchy::parse(TOY).unwrap();
        assert_eq!(h.depth(), 3);
        assert_eq!(h.len(), 6);
        assert_eq!(h.level_sizes(), vec![1, 2, 3]);
        let d = h.find(2, "D").unwrap();
        assert_eq!(h.path_names(&h.path_to(d)), ["root", "A", "D"]);
    }

    #[test]
    fn self_parent_is_a_cycle() {
        let err = Hierarchy::parse("r\t-\nA\tr\nB\tB\n").unwrap_err();
        assert_eq!(err, HierarchyError::Cycle { name: "B".into() });
        assert!(err.to_string().contains("cycle detected"));
    }

    #[test]
    fn detached_cycle_is_detected() {
        let err = Hierarchy::parse("r\t-\nA\tr\nB\tC\nC\tB\n").unwrap_err();
        assert!(matches!(err, HierarchyError::Cycle { .. }));
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            Hierarchy::parse("r\t-\ns\t-\nA\tr\n"),
            Err(HierarchyError::MultipleRoots { .. })
        ));
        assert!(matches!(
            Hierarchy::parse("r\t-\nA\tq\n"),
            Err(HierarchyError::DanglingParent { .. })
        ));
        assert!(matches!(
            Hierarchy::parse("r\t-\nA\tr\nA\tr\n"),
            Err(HierarchyError::DuplicateName { line: 3, .. })
        ));
        assert!(matches!(Hierarchy::parse("A\tr\n"), Err(HierarchyError::NoRoot)));
        assert!(matches!(
            Hierarchy::parse("r\t-\nA r\n"),
            Err(HierarchyError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn comments_pragma_and_blank_lines() {
        let doc = "#!levels order family\n# a comment\n\nr\t-\nA\tr\n\nx\tA\n";
        let h = Hierarchy::parse(doc).unwrap();
        assert_eq!(h.level_names(), ["order", "family"]);
        assert_eq!(h.level_index("family"), Some(1));
        assert!(matches!(
            Hierarchy::parse("#!levels one\nr\t-\nA\tr\nx\tA\n"),
            Err(HierarchyError::LevelNames { given: 1, depth: 2 })
        ));
    }

    #[test]
    fn legal_sets_match_constraint_table() {
        let bits = |d| legal_set(d).iter().map(|v| v.bits()).collect::<Vec<_>>();
        assert_eq!(bits(3), vec![vec![1, 1, 1], vec![1, 1, 0], vec![1, 0, 0]]);
        assert_eq!(bits(2), vec![vec![1, 1], vec![1, 0]]);
        assert_eq!(bits(1), vec![vec![1]]);
    }

    #[test]
    fn is_legal_cases() {
        assert!(CorrectnessVector::from_bits(&[1, 1, 0]).is_legal());
        assert!(!CorrectnessVector::from_bits(&[1, 0, 1]).is_legal());
        assert!(!CorrectnessVector::from_bits(&[0, 0, 0]).is_legal());
        assert!(!CorrectnessVector(vec![]).is_legal());
    }

    #[test]
    fn exhaustive_depth_four_agrees_with_membership() {
        let legal = legal_set(4);
        for mask in 0u32..16 {
            let v = CorrectnessVector((0..4).map(|i| mask >> i & 1 == 1).collect());
            assert_eq!(v.is_legal(), legal.contains(&v), "{v}");
        }
    }

    #[test]
    fn closure_and_truncation() {
        let h = Hierarchy::parse(TOY).unwrap();
        let p = h.path_from_names(&["root", "A", "D"]).unwrap();
        let closure = h.ancestor_closure(&p).unwrap();
        assert_eq!(closure.len(), 3);
        let single = h.path_from_names(&["root"]).unwrap();
        assert_eq!(h.ancestor_closure(&single).unwrap().len(), 1);

        assert_eq!(h.path_names(&p.truncate(1).unwrap()), ["root", "A"]);
        assert_eq!(p.truncate(2).unwrap(), p);
        assert!(matches!(p.truncate(3), Err(HierarchyError::TruncateLevel { .. })));
    }

    #[test]
    fn inconsistent_paths_are_rejected() {
        let h = Hierarchy::parse(TOY).unwrap();
        assert!(matches!(
            h.path_from_names(&["root", "B", "D"]),
            Err(HierarchyError::UnknownName { .. }) | Err(HierarchyError::NotAnEdge { .. })
        ));
        let a = h.find(1, "A").unwrap();
        assert!(matches!(h.path(vec![a]), Err(HierarchyError::PathStart { .. })));
        let bogus = LabelPath::new_unchecked(vec![h.find(0, "root").unwrap(), h.find(2, "F").unwrap()]);
        assert!(h.ancestor_closure(&bogus).is_err());
    }

    #[test]
    fn canonical_order_is_level_major() {
        let h = Hierarchy::parse("r\t-\nA\tr\nd\tA\nB\tr\ne\tB\n").unwrap();
        let names: Vec<_> = h.canonical_order().iter().map(|&i| h.name(i).to_string()).collect();
        assert_eq!(names, ["A", "B", "d", "e"]);
        let e = h.find(1, "e").unwrap();
        assert_eq!(h.category_index(e), 3);
        assert_eq!(h.index_within_level(e), 1);
    }
}
