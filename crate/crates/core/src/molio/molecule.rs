use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::MolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

/// Directional single-bond marker (`/` or `\`), recorded but inert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BondStereo {
    Up,
    Down,
}

/// Tetrahedral marker from bracket atoms (`@` / `@@`), recorded but inert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChiralTag {
    CounterClockwise,
    Clockwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomFeature {
    /// Atomic number in `[1, 118]`.
    pub element: u8,
    pub formal_charge: i8,
    /// Heavy-atom degree in the 2D graph.
    pub degree: u8,
    pub aromatic: bool,
    pub in_ring: bool,
    pub chiral_tag: Option<ChiralTag>,
}

impl AtomFeature {
    pub fn new(element: u8) -> Self {
        Self {
            element,
            formal_charge: 0,
            degree: 0,
            aromatic: false,
            in_ring: false,
            chiral_tag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub stereo: Option<BondStereo>,
}

impl Bond {
    pub fn new(a: usize, b: usize, order: BondOrder) -> Self {
        Self {
            a,
            b,
            order,
            stereo: None,
        }
    }

    pub fn other(&self, v: usize) -> Option<usize> {
        if self.a == v {
            Some(self.b)
        } else if self.b == v {
            Some(self.a)
        } else {
            None
        }
    }
}

/// Paired 2D topology and optional 3D geometry of one molecule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub id: String,
    pub atoms: Vec<AtomFeature>,
    /// Undirected heavy-atom bonds, each stored once.
    pub bonds_2d: Vec<Bond>,
    /// Cartesian coordinates in angstrom, one row per atom.
    pub coords: Option<Vec<[f64; 3]>>,
    /// Radius-graph edges `(i, j)` with `i < j`, lexicographically sorted.
    pub edges_3d: Option<Vec<(usize, usize)>>,
}

impl Molecule {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Plain graph with every node a neutral sp3 carbon and single bonds.
    pub fn from_graph(id: &str, n: usize, edges: &[(usize, usize)]) -> Result<Self, MolError> {
        let mut mol = Molecule {
            id: id.to_string(),
            atoms: vec![AtomFeature::new(6); n],
            bonds_2d: edges
                .iter()
                .map(|&(a, b)| Bond::new(a.min(b), a.max(b), BondOrder::Single))
                .collect(),
            coords: None,
            edges_3d: None,
        };
        mol.validate()?;
        mol.refresh_topology();
        Ok(mol)
    }

    pub fn with_coords(mut self, coords: Vec<[f64; 3]>) -> Result<Self, MolError> {
        if coords.len() != self.len() {
            return Err(MolError::CountMismatch {
                expected: self.len(),
                found: coords.len(),
            });
        }
        self.coords = Some(coords);
        self.edges_3d = None;
        Ok(self)
    }

    pub fn coords(&self) -> Result<&[[f64; 3]], MolError> {
        self.coords.as_deref().ok_or(MolError::MissingCoordinates)
    }

    pub fn edges_3d(&self) -> Result<&[(usize, usize)], MolError> {
        self.edges_3d.as_deref().ok_or(MolError::MissingCoordinates)
    }

    /// Sorted neighbor lists over `bonds_2d`.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        adjacency_from(self.len(), self.bonds_2d.iter().map(|b| (b.a, b.b)))
    }

    /// Sorted neighbor lists over `edges_3d` (empty when absent).
    pub fn adjacency_3d(&self) -> Vec<Vec<usize>> {
        adjacency_from(self.len(), self.edges_3d.iter().flatten().copied())
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.bonds_2d
            .iter()
            .find(|bd| (bd.a == a && bd.b == b) || (bd.a == b && bd.b == a))
    }

    /// Checks index ranges, self-loops, duplicate bonds, element range, coordinate count.
    pub fn validate(&self) -> Result<(), MolError> {
        let n = self.len();
        let mut seen = std::collections::HashSet::new();
        for bd in &self.bonds_2d {
            if bd.a >= n || bd.b >= n {
                return Err(MolError::InvalidNode(bd.a.max(bd.b)));
            }
            if bd.a == bd.b {
                return Err(MolError::SelfLoop(bd.a));
            }
            if !seen.insert((bd.a.min(bd.b), bd.a.max(bd.b))) {
                return Err(MolError::DuplicateBond(bd.a, bd.b));
            }
        }
        for (i, at) in self.atoms.iter().enumerate() {
            if !(1..=118).contains(&at.element) {
                return Err(MolError::InvalidElement {
                    index: i,
                    element: at.element,
                });
            }
        }
        if let Some(c) = &self.coords {
            if c.len() != n {
                return Err(MolError::CountMismatch {
                    expected: n,
                    found: c.len(),
                });
            }
        } else if self.edges_3d.is_some() {
            return Err(MolError::MissingCoordinates);
        }
        Ok(())
    }

    /// Per-bond ring membership: a bond lies on a ring iff it is not a bridge.
    pub fn ring_bonds(&self) -> Vec<bool> {
        let adj = self.adjacency();
        self.bonds_2d
            .iter()
            .map(|bd| connected_without(&adj, bd.a, bd.b))
            .collect()
    }

    /// Recomputes `degree` and `in_ring` from the bond list.
    pub fn refresh_topology(&mut self) {
        let ring = self.ring_bonds();
        for at in &mut self.atoms {
            at.degree = 0;
            at.in_ring = false;
        }
        for (bd, r) in self.bonds_2d.iter().zip(ring) {
            for v in [bd.a, bd.b] {
                self.atoms[v].degree += 1;
                self.atoms[v].in_ring |= r;
            }
        }
    }

    /// Relabel atoms so that new atom `perm[i]` is old atom `i`.
    pub fn permuted(&self, perm: &[usize]) -> Molecule {
        let n = self.len();
        let mut atoms = vec![AtomFeature::new(6); n];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old].clone();
        }
        let bonds = self
            .bonds_2d
            .iter()
            .map(|bd| Bond {
                a: perm[bd.a],
                b: perm[bd.b],
                ..bd.clone()
            })
            .collect();
        let coords = self.coords.as_ref().map(|c| {
            let mut out = vec![[0.0; 3]; n];
            for (old, &new) in perm.iter().enumerate() {
                out[new] = c[old];
            }
            out
        });
        let edges_3d = self.edges_3d.as_ref().map(|e| {
            let mut out: Vec<(usize, usize)> = e
                .iter()
                .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
                .collect();
            out.sort_unstable();
            out
        });
        Molecule {
            id: self.id.clone(),
            atoms,
            bonds_2d: bonds,
            coords,
            edges_3d,
        }
    }
}

pub(crate) fn adjacency_from(
    n: usize,
    edges: impl Iterator<Item = (usize, usize)>,
) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    for l in &mut adj {
        l.sort_unstable();
        l.dedup();
    }
    adj
}

fn connected_without(adj: &[Vec<usize>], a: usize, b: usize) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([a]);
    seen[a] = true;
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if (u == a && w == b) || (u == b && w == a) || seen[w] {
                continue;
            }
            if w == b {
                return true;
            }
            seen[w] = true;
            queue.push_back(w);
        }
    }
    false
}
