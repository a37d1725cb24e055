//! Medical ontology DAG.
//!
//! # File format
//!
//! Plain UTF-8 text, one directive per line:
//!
//! ```text
//! ## free-form comment
//! #leaf <id> <label> <category>
//! #node <id>
//! #root <id>
//! <child_id>\t<parent_id>
//! ```
//!
//! * `#leaf` declares a leaf code. Leaves get dense ids `0..|C|` in
//!   declaration order; corpus and grouper files refer to leaves by that
//!   index. `category` is a non-negative integer label category.
//! * Every node that is not declared as a leaf is an ancestor and gets an id in
//!   `|C|..|C|+|N|`: first the `#node` declarations in order, then any other
//!   node in order of first appearance in an edge.
//! * `#root` is optional; without it the root is the unique node with no
//!   parent.
//! * An edge line has exactly two TAB-separated fields. Blank lines are
//!   ignored; any other line is rejected.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OntologyDag {
    leaf_count: usize,
    ancestor_count: usize,
    /// Original identifiers, indexed by dense node id.
    names: Vec<String>,
    leaf_labels: Vec<String>,
    category_of: Vec<usize>,
    parents: Vec<Vec<usize>>,
    root: usize,
    ancestor_sets: Vec<Vec<usize>>,
}

impl OntologyDag {
    /// Builds and validates a DAG from leaf declarations `(id, label,
    /// category)`, `(child, parent)` edges and an optional explicit root.
    pub fn from_parts(
        leaves: &[(String, String, usize)],
        edges: &[(String, String)],
        root: Option<&str>,
    ) -> Result<Self> {
        Self::from_parts_ordered(leaves, &[], edges, root)
    }

    /// Like [`OntologyDag::from_parts`], with `nodes` fixing the id order of
    /// those ancestors.
    pub fn from_parts_ordered(
        leaves: &[(String, String, usize)],
        nodes: &[String],
        edges: &[(String, String)],
        root: Option<&str>,
    ) -> Result<Self> {
        if leaves.is_empty() {
            return Err(Error::Ontology("no leaves declared".into()));
        }
        let mut ids: HashMap<&str, usize> = HashMap::new();
        let mut names = Vec::new();
        for (name, _, _) in leaves {
            if ids.insert(name, names.len()).is_some() {
                return Err(Error::Ontology(format!("leaf `{name}` declared twice")));
            }
            names.push(name.clone());
        }
        let leaf_count = names.len();
        for n in nodes {
            if ids.insert(n, names.len()).is_some() {
                return Err(Error::Ontology(format!("node `{n}` declared twice")));
            }
            names.push(n.clone());
        }
        for (c, p) in edges {
            for n in [c, p] {
                if !ids.contains_key(n.as_str()) {
                    ids.insert(n, names.len());
                    names.push(n.clone());
                }
            }
        }
        if let Some(r) = root {
            if !ids.contains_key(r) {
                return Err(Error::Ontology(format!("root `{r}` does not appear in any edge")));
            }
        }
        let total = names.len();
        let mut parents = vec![Vec::new(); total];
        for (c, p) in edges {
            let (ci, pi) = (ids[c.as_str()], ids[p.as_str()]);
            if pi < leaf_count {
                return Err(Error::Ontology(format!("leaf `{p}` cannot be a parent")));
            }
            if ci == pi {
                return Err(Error::OntologyCycle {
                    child: c.clone(),
                    parent: p.clone(),
                });
            }
            if !parents[ci].contains(&pi) {
                parents[ci].push(pi);
            }
        }
        for ps in &mut parents {
            ps.sort_unstable();
        }
        Self::check_acyclic(&parents, &names)?;

        let roots: Vec<usize> = (0..total).filter(|&i| parents[i].is_empty()).collect();
        let root = match root {
            Some(r) => ids[r],
            None => match roots.as_slice() {
                [r] => *r,
                [] => unreachable!("acyclic graph has a parentless node"),
                many => {
                    let orphan = many[1..].iter().map(|&i| names[i].as_str()).next().unwrap_or("");
                    return Err(Error::OntologyOrphan(orphan.to_string()));
                }
            },
        };
        if root < leaf_count {
            return Err(Error::Ontology(format!("leaf `{}` cannot be the root", names[root])));
        }
        if !parents[root].is_empty() {
            return Err(Error::Ontology(format!("root `{}` has a parent", names[root])));
        }

        let mut dag = Self {
            leaf_count,
            ancestor_count: total - leaf_count,
            names,
            leaf_labels: leaves.iter().map(|l| l.1.clone()).collect(),
            category_of: leaves.iter().map(|l| l.2).collect(),
            parents,
            root,
            ancestor_sets: Vec::new(),
        };
        for n in 0..total {
            if !dag.reachable_up(n).contains(&root) {
                return Err(Error::OntologyOrphan(dag.names[n].clone()));
            }
        }
        dag.ancestor_sets = (0..leaf_count).map(|i| dag.compute_ancestors(i)).collect();
        Ok(dag)
    }

    fn check_acyclic(parents: &[Vec<usize>], names: &[String]) -> Result<()> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; parents.len()];
        for start in 0..parents.len() {
            if state[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            state[start] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if let Some(&p) = parents[node].get(*next) {
                    *next += 1;
                    match state[p] {
                        0 => {
                            state[p] = 1;
                            stack.push((p, 0));
                        }
                        1 => {
                            return Err(Error::OntologyCycle {
                                child: names[node].clone(),
                                parent: names[p].clone(),
                            })
                        }
                        _ => {}
                    }
                } else {
                    state[node] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    fn reachable_up(&self, n: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([n]);
        let mut stack = vec![n];
        while let Some(x) = stack.pop() {
            for &p in &self.parents[x] {
                if seen.insert(p) {
                    stack.push(p);
                }
            }
        }
        seen
    }

    /// Breadth-first by depth from the leaf; within a depth, ascending id.
    fn compute_ancestors(&self, leaf: usize) -> Vec<usize> {
        let mut out = vec![leaf];
        let mut seen = BTreeSet::from([leaf]);
        let mut frontier = vec![leaf];
        while !frontier.is_empty() {
            let mut next: BTreeSet<usize> = BTreeSet::new();
            for &n in &frontier {
                for &p in &self.parents[n] {
                    if !seen.contains(&p) {
                        next.insert(p);
                    }
                }
            }
            seen.extend(next.iter().copied());
            out.extend(next.iter().copied());
            frontier = next.into_iter().collect();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut leaves = Vec::new();
        let mut edges = Vec::new();
        let mut root = None;
        let mut nodes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |detail: String| Error::OntologyParse {
                line: line_no,
                detail,
            };
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with("##") {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#leaf") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if !rest.starts_with(char::is_whitespace) || f.len() != 3 {
                    return Err(err(format!("expected `#leaf <id> <label> <category>`, got `{line}`")));
                }
                let cat = f[2]
                    .parse::<usize>()
                    .map_err(|_| err(format!("bad category `{}`", f[2])))?;
                leaves.push((f[0].to_string(), f[1].to_string(), cat));
            } else if let Some(rest) = line.strip_prefix("#node") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 1 || !rest.starts_with(char::is_whitespace) {
                    return Err(err(format!("bad node directive `{line}`")));
                }
                nodes.push(f[0].to_string());
            } else if let Some(rest) = line.strip_prefix("#root") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 1 || root.is_some() {
                    return Err(err(format!("bad root directive `{line}`")));
                }
                root = Some(f[0].to_string());
            } else if line.starts_with('#') {
                return Err(err(format!("unknown directive `{line}`")));
            } else {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 2 || f.iter().any(|s| s.trim().is_empty() || s.trim() != *s) {
                    return Err(err(format!("expected `child<TAB>parent`, got `{line}`")));
                }
                edges.push((f[0].to_string(), f[1].to_string()));
            }
        }
        Self::from_parts_ordered(&leaves, &nodes, &edges, root.as_deref())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("## ontology: leaves, then child<TAB>parent edges\n");
        for i in 0..self.leaf_count {
            let _ = writeln!(s, "#leaf {} {} {}", self.names[i], self.leaf_labels[i], self.category_of[i]);
        }
        for n in self.leaf_count..self.node_count() {
            let _ = writeln!(s, "#node {}", self.names[n]);
        }
        let _ = writeln!(s, "#root {}", self.names[self.root]);
        for (c, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                let _ = writeln!(s, "{}\t{}", self.names[c], self.names[p]);
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn ancestor_count(&self) -> usize {
        self.ancestor_count
    }

    pub fn node_count(&self) -> usize {
        self.leaf_count + self.ancestor_count
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&c| self.parents[c].contains(&node))
            .collect()
    }

    pub fn name(&self, node: usize) -> &str {
        &self.names[node]
    }

    pub fn leaf_label(&self, leaf: usize) -> &str {
        &self.leaf_labels[leaf]
    }

    pub fn category_of(&self, leaf: usize) -> usize {
        self.category_of[leaf]
    }

    pub fn category_count(&self) -> usize {
        self.category_of.iter().max().map_or(0, |m| m + 1)
    }

    /// The leaf followed by all of its distinct ancestors up to the root.
    pub fn ancestors(&self, leaf: usize) -> Result<&[usize]> {
        self.ancestor_sets
            .get(leaf)
            .map(Vec::as_slice)
            .ok_or(Error::OutOfRange {
                index: leaf,
                len: self.leaf_count,
            })
    }

    pub fn max_ancestor_set(&self) -> usize {
        self.ancestor_sets.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Depth of every node below the root along shortest parent paths.
    pub fn depth_from_root(&self, node: usize) -> usize {
        let mut q = VecDeque::from([(node, 0usize)]);
        let mut seen = BTreeSet::from([node]);
        while let Some((n, d)) = q.pop_front() {
            if n == self.root {
                return d;
            }
            for &p in &self.parents[n] {
                if seen.insert(p) {
                    q.push_back((p, d + 1));
                }
            }
        }
        usize::MAX
    }
}

/// A three-level toy ontology: root → `top` top-level categories → leaves.
/// Leaves of label category `c` hang under top category `c % top`.
pub fn toy_ontology(leaves: usize, categories: usize, top: usize) -> Result<OntologyDag> {
    if categories == 0 || top == 0 || leaves < categories {
        return Err(Error::Ontology(format!(
            "need leaves >= categories > 0 and top > 0 (leaves {leaves}, categories {categories}, top {top})"
        )));
    }
    let decl: Vec<(String, String, usize)> = (0..leaves)
        .map(|i| {
            let c = i % categories;
            (i.to_string(), format!("cat{c:02}_code{i:04}"), c)
        })
        .collect();
    let mut edges = Vec::new();
    for t in 0..top {
        edges.push((format!("T{t:02}"), "ROOT".to_string()));
    }
    for (i, (_, _, c)) in decl.iter().enumerate() {
        edges.push((i.to_string(), format!("T{:02}", c % top)));
    }
    OntologyDag::from_parts(&decl, &edges, Some("ROOT"))
}
