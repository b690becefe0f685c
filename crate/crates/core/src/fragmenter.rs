//! Contextual subgraphs (k-hop ego-nets, r-Å balls) and BRICS-style fragments.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::molio::{distance, BondOrder, MolError, Molecule};

pub const DEFAULT_K_HOP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubgraphKind {
    Ego2D,
    Ball3D,
    Fragment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    pub root: Option<usize>,
    /// Sorted parent-graph node indices.
    pub nodes: Vec<usize>,
    /// Induced parent-graph edges `(i, j)`, `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub kind: SubgraphKind,
}

impl Subgraph {
    /// Induced subgraph on `nodes` over an undirected edge list.
    pub fn induced(
        root: Option<usize>,
        mut nodes: Vec<usize>,
        edges: &[(usize, usize)],
        kind: SubgraphKind,
    ) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        let mut sub: Vec<(usize, usize)> = edges
            .iter()
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .filter(|&(a, b)| nodes.binary_search(&a).is_ok() && nodes.binary_search(&b).is_ok())
            .collect();
        sub.sort_unstable();
        sub.dedup();
        Subgraph {
            root,
            nodes,
            edges: sub,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.nodes.binary_search(&v).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentSet {
    pub fragments: Vec<Subgraph>,
    /// `assignment[v]` is the index of the fragment holding node `v`.
    pub assignment: Vec<usize>,
}

impl FragmentSet {
    /// Same partition with edges induced from another edge list (e.g. `edges_3d`).
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> FragmentSet {
        FragmentSet {
            fragments: self
                .fragments
                .iter()
                .map(|f| Subgraph::induced(None, f.nodes.clone(), edges, SubgraphKind::Fragment))
                .collect(),
            assignment: self.assignment.clone(),
        }
    }

    pub fn node_sets(&self) -> Vec<Vec<usize>> {
        self.fragments.iter().map(|f| f.nodes.clone()).collect()
    }
}

fn bond_edges(mol: &Molecule) -> Vec<(usize, usize)> {
    mol.bonds_2d.iter().map(|b| (b.a, b.b)).collect()
}

/// Induced subgraph on the BFS ball of radius `k` around `v` over 2D bonds.
pub fn ego_network(mol: &Molecule, v: usize, k: usize) -> Result<Subgraph, MolError> {
    if v >= mol.len() {
        return Err(MolError::InvalidNode(v));
    }
    let adj = mol.adjacency();
    let mut dist = vec![usize::MAX; mol.len()];
    dist[v] = 0;
    let mut queue = VecDeque::from([v]);
    let mut nodes = vec![v];
    while let Some(u) = queue.pop_front() {
        if dist[u] == k {
            continue;
        }
        for &w in &adj[u] {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                nodes.push(w);
                queue.push_back(w);
            }
        }
    }
    Ok(Subgraph::induced(
        Some(v),
        nodes,
        &bond_edges(mol),
        SubgraphKind::Ego2D,
    ))
}

/// Induced subgraph on every atom within `r` Å of `v`, with edges from `edges_3d`.
pub fn radius_ball(mol: &Molecule, v: usize, r: f64) -> Result<Subgraph, MolError> {
    let coords = mol.coords()?;
    if v >= mol.len() {
        return Err(MolError::InvalidNode(v));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(MolError::InvalidCutoff(r));
    }
    let edges = mol.edges_3d()?;
    let nodes = (0..mol.len())
        .filter(|&u| distance(&coords[u], &coords[v]) <= r)
        .collect();
    Ok(Subgraph::induced(
        Some(v),
        nodes,
        edges,
        SubgraphKind::Ball3D,
    ))
}

struct Env<'a> {
    mol: &'a Molecule,
    adj: Vec<Vec<usize>>,
}

impl Env<'_> {
    fn element(&self, v: usize) -> u8 {
        self.mol.atoms[v].element
    }

    fn aromatic(&self, v: usize) -> bool {
        self.mol.atoms[v].aromatic
    }

    fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    fn order(&self, a: usize, b: usize) -> Option<BondOrder> {
        self.mol.bond_between(a, b).map(|bd| bd.order)
    }

    fn double_bonded_to(&self, v: usize, element: u8) -> usize {
        self.adj[v]
            .iter()
            .filter(|&&w| self.element(w) == element && self.order(v, w) == Some(BondOrder::Double))
            .count()
    }

    /// Non-aromatic carbon with a C=O.
    fn acyl_c(&self, v: usize) -> bool {
        self.element(v) == 6 && !self.aromatic(v) && self.double_bonded_to(v, 8) >= 1
    }

    /// Non-aromatic carbon with only single bonds.
    fn sp3_c(&self, v: usize) -> bool {
        self.element(v) == 6
            && !self.aromatic(v)
            && self.adj[v]
                .iter()
                .all(|&w| self.order(v, w) == Some(BondOrder::Single))
    }

    fn sulfonyl_s(&self, v: usize) -> bool {
        self.element(v) == 16 && self.double_bonded_to(v, 8) == 2
    }

    fn next_to_acyl(&self, v: usize, except: usize) -> bool {
        self.adj[v].iter().any(|&w| w != except && self.acyl_c(w))
    }
}

type Predicate = fn(&Env, usize, usize) -> bool;

/// One environment pair; tested in both orientations of a bond.
pub struct BricsRule {
    pub name: &'static str,
    test: Predicate,
}

/// Cleavage environments. Only acyclic single bonds between two non-terminal atoms are considered.
pub static BRICS_RULES: &[BricsRule] = &[
    BricsRule {
        name: "ester: acyl C - O",
        test: |e, a, b| e.acyl_c(a) && e.element(b) == 8,
    },
    BricsRule {
        name: "amide: acyl C - N",
        test: |e, a, b| e.acyl_c(a) && e.element(b) == 7 && !e.aromatic(b),
    },
    BricsRule {
        name: "ether: O - sp3 C",
        test: |e, a, b| e.element(a) == 8 && !e.aromatic(a) && e.sp3_c(b) && !e.next_to_acyl(a, b),
    },
    BricsRule {
        name: "amine: N - sp3 C",
        test: |e, a, b| e.element(a) == 7 && !e.aromatic(a) && e.sp3_c(b) && !e.next_to_acyl(a, b),
    },
    BricsRule {
        name: "thioether: S - sp3 C",
        test: |e, a, b| e.element(a) == 16 && !e.aromatic(a) && e.degree(a) == 2 && e.sp3_c(b),
    },
    BricsRule {
        name: "sulfonamide: sulfonyl S - N",
        test: |e, a, b| e.sulfonyl_s(a) && e.element(b) == 7,
    },
    BricsRule {
        name: "aryl substituent: aromatic atom - sp3 C / N / O / S / acyl C",
        test: |e, a, b| {
            e.aromatic(a)
                && !e.aromatic(b)
                && (e.sp3_c(b) || e.acyl_c(b) || matches!(e.element(b), 7 | 8 | 16))
        },
    },
    BricsRule {
        name: "biaryl: aromatic - aromatic",
        test: |e, a, b| e.aromatic(a) && e.aromatic(b),
    },
    BricsRule {
        name: "aliphatic ring atom - acyclic N / O",
        test: |e, a, b| {
            !e.aromatic(a)
                && e.mol.atoms[a].in_ring
                && !e.mol.atoms[b].in_ring
                && matches!(e.element(b), 7 | 8)
        },
    },
];

/// Indices into `mol.bonds_2d` of bonds matched by the rule table.
pub fn cleavable_bonds(mol: &Molecule) -> Vec<usize> {
    let env = Env {
        mol,
        adj: mol.adjacency(),
    };
    let ring = mol.ring_bonds();
    mol.bonds_2d
        .iter()
        .enumerate()
        .filter(|(i, bd)| {
            !ring[*i]
                && bd.order == BondOrder::Single
                && env.degree(bd.a) > 1
                && env.degree(bd.b) > 1
                && BRICS_RULES
                    .iter()
                    .any(|r| (r.test)(&env, bd.a, bd.b) || (r.test)(&env, bd.b, bd.a))
        })
        .map(|(i, _)| i)
        .collect()
}

/// Cleaves every matched bond; connected components become fragments, ordered by smallest atom.
pub fn brics_fragment(mol: &Molecule) -> FragmentSet {
    let n = mol.len();
    let cut = cleavable_bonds(mol);
    let kept: Vec<(usize, usize)> = mol
        .bonds_2d
        .iter()
        .enumerate()
        .filter(|(i, _)| cut.binary_search(i).is_err())
        .map(|(_, b)| (b.a.min(b.b), b.a.max(b.b)))
        .collect();
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in &kept {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut assignment = vec![usize::MAX; n];
    let mut fragments = Vec::new();
    for s in 0..n {
        if assignment[s] != usize::MAX {
            continue;
        }
        let id = fragments.len();
        assignment[s] = id;
        let mut nodes = vec![s];
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &w in &adj[u] {
                if assignment[w] == usize::MAX {
                    assignment[w] = id;
                    nodes.push(w);
                    stack.push(w);
                }
            }
        }
        fragments.push(Subgraph::induced(
            None,
            nodes,
            &kept,
            SubgraphKind::Fragment,
        ));
    }
    FragmentSet {
        fragments,
        assignment,
    }
}

/// Checks that fragments are non-empty, pairwise disjoint, covering and match `assignment`.
pub fn check_partition(fs: &FragmentSet, n: usize) -> Result<(), String> {
    let mut owner = vec![None; n];
    for (fi, f) in fs.fragments.iter().enumerate() {
        if f.is_empty() {
            return Err(format!("fragment {fi} is empty"));
        }
        for &v in &f.nodes {
            if v >= n {
                return Err(format!("fragment {fi} holds out-of-range node {v}"));
            }
            if let Some(other) = owner[v] {
                return Err(format!("node {v} in fragments {other} and {fi}"));
            }
            owner[v] = Some(fi);
        }
    }
    if fs.assignment.len() != n {
        return Err("assignment length differs from node count".into());
    }
    for (v, o) in owner.iter().enumerate() {
        match o {
            None => return Err(format!("node {v} is uncovered")),
            Some(fi) if *fi != fs.assignment[v] => {
                return Err(format!(
                    "assignment of node {v} disagrees with fragment {fi}"
                ))
            }
            _ => {}
        }
    }
    Ok(())
}
