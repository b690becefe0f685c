//! Weisfeiler-Lehman baselines, ego-network refinement, embedding-based pair counting and
//! isomer-pair generators.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{prepare, ModelConfig, MvcibModel, Prepared};
use crate::molio::elements::{atomic_number, symbol};
use crate::molio::{embed_synthetic, AtomFeature, Bond, BondOrder, MolError, Molecule};
use crate::{Error, Result};

/// Color value -> number of nodes carrying it.
pub type Histogram = BTreeMap<u64, usize>;

pub const EMBED_DRAWS: usize = 10;
pub const EMBED_TOL: f64 = 1e-4;
pub const DEFAULT_PAIR_COUNT: usize = 500;
pub const RANDOM_SUITE_PAIRS: usize = 200;

const ROOT_MARK: u64 = 0x9e37_79b9_7f4a_7c15;
const BOND: f64 = 1.45;
const DOUBLE_BOND: f64 = 1.34;

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a << 6)
        .wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_seq(seed: u64, xs: &[u64]) -> u64 {
    xs.iter()
        .fold(mix(seed, xs.len() as u64), |h, &x| mix(h, x))
}

fn initial_colors(mol: &Molecule) -> Vec<u64> {
    mol.atoms
        .iter()
        .map(|a| mix(a.element as u64, (a.formal_charge as i64 + 128) as u64))
        .collect()
}

fn distinct(colors: &[u64]) -> usize {
    colors.iter().collect::<HashSet<_>>().len()
}

fn histogram(colors: &[u64]) -> Histogram {
    let mut h = Histogram::new();
    for &c in colors {
        *h.entry(c).or_insert(0) += 1;
    }
    h
}

/// Color refinement on an adjacency list until the partition is stable or `iterations` rounds ran.
fn refine(adj: &[Vec<usize>], mut colors: Vec<u64>, iterations: usize) -> Vec<u64> {
    let mut classes = distinct(&colors);
    for _ in 0..iterations {
        let next: Vec<u64> = (0..adj.len())
            .map(|v| {
                let mut nb: Vec<u64> = adj[v].iter().map(|&u| colors[u]).collect();
                nb.sort_unstable();
                hash_seq(colors[v], &nb)
            })
            .collect();
        let c = distinct(&next);
        colors = next;
        if c == classes {
            break;
        }
        classes = c;
    }
    colors
}

/// 1-WL color histogram. Initial colors are element and formal charge.
pub fn wl1_refine(mol: &Molecule, iterations: usize) -> Histogram {
    histogram(&refine(&mol.adjacency(), initial_colors(mol), iterations))
}

fn ego_nodes(adj: &[Vec<usize>], root: usize, k: usize) -> Vec<usize> {
    let mut depth = vec![usize::MAX; adj.len()];
    depth[root] = 0;
    let mut queue = VecDeque::from([root]);
    let mut out = vec![root];
    while let Some(v) = queue.pop_front() {
        if depth[v] == k {
            continue;
        }
        for &u in &adj[v] {
            if depth[u] == usize::MAX {
                depth[u] = depth[v] + 1;
                out.push(u);
                queue.push_back(u);
            }
        }
    }
    out.sort_unstable();
    out
}

fn induced(adj: &[Vec<usize>], nodes: &[usize]) -> Vec<Vec<usize>> {
    let mut local = vec![usize::MAX; adj.len()];
    for (i, &v) in nodes.iter().enumerate() {
        local[v] = i;
    }
    nodes
        .iter()
        .map(|&v| {
            adj[v]
                .iter()
                .filter_map(|&u| (local[u] != usize::MAX).then_some(local[u]))
                .collect()
        })
        .collect()
}

/// Per-root WL histograms of the k-hop ego-networks, iterated over rounds: each round every node
/// is recolored by its own color and the histogram of its root-marked, colored ego-network.
/// Returns the sorted multiset of per-root histograms from the final round.
pub fn ego_wl_signature(mol: &Molecule, k: usize) -> Vec<Histogram> {
    assert!(k >= 1, "ego-network radius must be at least 1");
    let adj = mol.adjacency();
    let n = adj.len();
    let egos: Vec<(Vec<usize>, Vec<Vec<usize>>)> = (0..n)
        .map(|v| {
            let nodes = ego_nodes(&adj, v, k);
            let sub = induced(&adj, &nodes);
            (nodes, sub)
        })
        .collect();
    let mut colors = initial_colors(mol);
    let mut classes = distinct(&colors);
    let mut hists = Vec::new();
    for _ in 0..n.max(1) {
        hists = egos
            .iter()
            .enumerate()
            .map(|(v, (nodes, sub))| {
                let local: Vec<u64> = nodes
                    .iter()
                    .map(|&u| {
                        if u == v {
                            mix(colors[u], ROOT_MARK)
                        } else {
                            colors[u]
                        }
                    })
                    .collect();
                histogram(&refine(sub, local, nodes.len()))
            })
            .collect();
        let next: Vec<u64> = hists
            .iter()
            .enumerate()
            .map(|(v, h)| {
                let flat: Vec<u64> = h.iter().flat_map(|(&c, &m)| [c, m as u64]).collect();
                hash_seq(colors[v], &flat)
            })
            .collect();
        let c = distinct(&next);
        colors = next;
        if c == classes {
            break;
        }
        classes = c;
    }
    hists.sort();
    hists
}

/// Exact isomorphism by backtracking over degree-compatible assignments; atom elements must match.
pub fn isomorphic(g1: &Molecule, g2: &Molecule) -> bool {
    let n = g1.len();
    if n != g2.len() || g1.bonds_2d.len() != g2.bonds_2d.len() {
        return false;
    }
    let a1 = g1.adjacency();
    let a2 = g2.adjacency();
    let key = |m: &Molecule, a: &[Vec<usize>], v: usize| (m.atoms[v].element, a[v].len());
    let mut k1: Vec<_> = (0..n).map(|v| key(g1, &a1, v)).collect();
    let mut k2: Vec<_> = (0..n).map(|v| key(g2, &a2, v)).collect();
    k1.sort_unstable();
    k2.sort_unstable();
    if k1 != k2 {
        return false;
    }
    let adj1: Vec<HashSet<usize>> = a1.iter().map(|l| l.iter().copied().collect()).collect();
    let adj2: Vec<HashSet<usize>> = a2.iter().map(|l| l.iter().copied().collect()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| std::cmp::Reverse(a1[v].len()));
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];

    fn extend(
        depth: usize,
        order: &[usize],
        g: (&Molecule, &Molecule),
        adj: (&[HashSet<usize>], &[HashSet<usize>]),
        map: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        let Some(&v) = order.get(depth) else {
            return true;
        };
        for w in 0..map.len() {
            if used[w]
                || g.0.atoms[v].element != g.1.atoms[w].element
                || adj.0[v].len() != adj.1[w].len()
            {
                continue;
            }
            let consistent = order[..depth]
                .iter()
                .all(|&u| adj.0[v].contains(&u) == adj.1[w].contains(&map[u]));
            if !consistent {
                continue;
            }
            map[v] = w;
            used[w] = true;
            if extend(depth + 1, order, g, adj, map, used) {
                return true;
            }
            used[w] = false;
            map[v] = usize::MAX;
        }
        false
    }

    extend(0, &order, (g1, g2), (&adj1, &adj2), &mut map, &mut used)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    Isomorphic,
    NonIsomorphic,
    IsomerPair,
}

impl FromStr for Expected {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isomorphic" => Ok(Expected::Isomorphic),
            "non-isomorphic" => Ok(Expected::NonIsomorphic),
            "isomer-pair" => Ok(Expected::IsomerPair),
            other => Err(Error::Config(format!("unknown pair kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for Expected {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Expected::Isomorphic => "isomorphic",
            Expected::NonIsomorphic => "non-isomorphic",
            Expected::IsomerPair => "isomer-pair",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphPair {
    pub g1: Molecule,
    pub g2: Molecule,
    pub expected: Expected,
}

impl GraphPair {
    pub fn new(g1: Molecule, g2: Molecule, expected: Expected) -> Result<Self> {
        if g1.len() != g2.len() {
            return Err(Error::Config(format!(
                "pair has {} vs {} atoms",
                g1.len(),
                g2.len()
            )));
        }
        Ok(GraphPair { g1, g2, expected })
    }

    pub fn has_coords(&self) -> bool {
        self.g1.coords.is_some() && self.g2.coords.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Wl1,
    Ego,
    Model,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wl1" => Ok(Suite::Wl1),
            "ego" => Ok(Suite::Ego),
            "model" => Ok(Suite::Model),
            other => Err(Error::Config(format!("unknown suite {other:?}"))),
        }
    }
}

pub fn wl1_distinguishes(pair: &GraphPair) -> bool {
    let it = pair.g1.len().max(pair.g2.len());
    wl1_refine(&pair.g1, it) != wl1_refine(&pair.g2, it)
}

pub fn ego_distinguishes(pair: &GraphPair, k: usize) -> bool {
    ego_wl_signature(&pair.g1, k) != ego_wl_signature(&pair.g2, k)
}

/// Which embedding `embed_votes` compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedView {
    /// Posterior means of both views.
    Full,
    /// Sum readout of the 2D encoder alone; coordinates are never read.
    TwoDOnly,
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn prepare_pairs(
    pairs: &[GraphPair],
    cfg: &ModelConfig,
    view: EmbedView,
) -> Result<Vec<(Prepared, Prepared)>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let (g1, g2) = if view == EmbedView::Full {
                if !pair.has_coords() {
                    return Err(Error::CoordsRequiredFor3dPairs(i));
                }
                (pair.g1.clone(), pair.g2.clone())
            } else {
                (strip_coords(&pair.g1), strip_coords(&pair.g2))
            };
            Ok((prepare(&g1, cfg)?, prepare(&g2, cfg)?))
        })
        .collect()
}

fn strip_coords(m: &Molecule) -> Molecule {
    let mut m = m.clone();
    m.coords = None;
    m.edges_3d = None;
    m
}

/// Per pair, the number of untrained initializations (seeds `cfg.init_seed + d`) whose
/// embeddings differ by more than `tol` in the infinity norm.
pub fn embed_votes(
    pairs: &[GraphPair],
    cfg: &ModelConfig,
    view: EmbedView,
    tol: f64,
    draws: usize,
) -> Result<Vec<usize>> {
    let preps = prepare_pairs(pairs, cfg, view)?;
    let mut votes = vec![0; pairs.len()];
    for d in 0..draws {
        let model = MvcibModel::new(ModelConfig {
            init_seed: cfg.init_seed.wrapping_add(d as u64),
            ..cfg.clone()
        })?;
        let p = model.store.bind_frozen();
        for ((a, b), v) in preps.iter().zip(votes.iter_mut()) {
            let (ea, eb) = match view {
                EmbedView::Full => (model.embed(&p, a)?, model.embed(&p, b)?),
                EmbedView::TwoDOnly => (model.embed_2d_only(&p, a)?, model.embed_2d_only(&p, b)?),
            };
            if inf_dist(&ea, &eb) > tol {
                *v += 1;
            }
        }
    }
    Ok(votes)
}

/// Number of pairs the untrained full model fails to separate by majority vote over `EMBED_DRAWS`.
pub fn embed_distinguish(pairs: &[GraphPair], cfg: &ModelConfig, tol: f64) -> Result<usize> {
    let votes = embed_votes(pairs, cfg, EmbedView::Full, tol, EMBED_DRAWS)?;
    Ok(votes.iter().filter(|&&v| 2 * v <= EMBED_DRAWS).count())
}

/// Per-pair outcome of one suite.
pub fn run_suite(
    pairs: &[GraphPair],
    suite: Suite,
    k: usize,
    cfg: &ModelConfig,
    tol: f64,
) -> Result<Vec<bool>> {
    Ok(match suite {
        Suite::Wl1 => pairs.iter().map(wl1_distinguishes).collect(),
        Suite::Ego => pairs.iter().map(|p| ego_distinguishes(p, k)).collect(),
        Suite::Model => embed_votes(pairs, cfg, EmbedView::Full, tol, EMBED_DRAWS)?
            .into_iter()
            .map(|v| 2 * v > EMBED_DRAWS)
            .collect(),
    })
}

fn cycle_coords(n: usize, center: [f64; 3]) -> Vec<[f64; 3]> {
    let r = BOND / (2.0 * (std::f64::consts::PI / n as f64).sin());
    (0..n)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            [center[0] + r * t.cos(), center[1] + r * t.sin(), center[2]]
        })
        .collect()
}

/// Hexagon vs two disjoint triangles, with planar coordinates.
pub fn cycle_pair() -> Result<GraphPair> {
    let c6: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
    let c33 = [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)];
    let mut tri = cycle_coords(3, [-2.5, 0.0, 0.0]);
    tri.extend(cycle_coords(3, [2.5, 0.0, 0.0]));
    GraphPair::new(
        Molecule::from_graph("c6", 6, &c6)?.with_coords(cycle_coords(6, [0.0; 3]))?,
        Molecule::from_graph("2c3", 6, &c33)?.with_coords(tri)?,
        Expected::NonIsomorphic,
    )
}

fn z4_cayley(gens: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for &(da, db) in gens {
                let u = 4 * a + b;
                let v = 4 * ((a + da) % 4) + (b + db) % 4;
                if u < v {
                    edges.push((u, v));
                }
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

pub fn shrikhande_edges() -> Vec<(usize, usize)> {
    z4_cayley(&[(1, 0), (3, 0), (0, 1), (0, 3), (1, 1), (3, 3)])
}

pub fn rook_4x4_edges() -> Vec<(usize, usize)> {
    z4_cayley(&[(1, 0), (2, 0), (3, 0), (0, 1), (0, 2), (0, 3)])
}

/// Both graphs share the vertex set Z4 x Z4, placed identically on a torus.
fn torus_coords() -> Vec<[f64; 3]> {
    let (big, small) = (2.2, 1.0);
    let q = std::f64::consts::FRAC_PI_2;
    (0..16)
        .map(|i| {
            let (t, f) = ((i / 4) as f64 * q, (i % 4) as f64 * q);
            let r = big + small * f.cos();
            [r * t.cos(), r * t.sin(), small * f.sin()]
        })
        .collect()
}

/// Shrikhande graph vs the 4x4 rook's graph, both SRG(16, 6, 2, 2).
pub fn srg_pair() -> Result<GraphPair> {
    GraphPair::new(
        Molecule::from_graph("shrikhande", 16, &shrikhande_edges())?.with_coords(torus_coords())?,
        Molecule::from_graph("rook4x4", 16, &rook_4x4_edges())?.with_coords(torus_coords())?,
        Expected::NonIsomorphic,
    )
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, m: usize, id: &str) -> Result<Molecule> {
    let mut all: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .collect();
    all.shuffle(rng);
    all.truncate(m);
    all.sort_unstable();
    let mol = Molecule::from_graph(id, n, &all)?;
    let c = embed_synthetic(&mol);
    Ok(mol.with_coords(c)?)
}

/// Non-isomorphic pairs with equal node and edge counts, `5 <= n <= 12`, labeled by `isomorphic`.
pub fn random_pairs(count: usize, seed: u64) -> Result<Vec<GraphPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.gen_range(5..=12);
        let m = rng.gen_range(n - 1..=(2 * n).min(n * (n - 1) / 2));
        let i = out.len();
        let g1 = random_graph(&mut rng, n, m, &format!("r{i}a"))?;
        let g2 = random_graph(&mut rng, n, m, &format!("r{i}b"))?;
        if !isomorphic(&g1, &g2) {
            out.push(GraphPair::new(g1, g2, Expected::NonIsomorphic)?);
        }
    }
    Ok(out)
}

/// Isomorphic controls: a random graph and a relabeled copy carrying permuted coordinates.
pub fn relabeled_pairs(count: usize, seed: u64) -> Result<Vec<GraphPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.gen_range(5..=12);
            let m = rng.gen_range(n - 1..=(2 * n).min(n * (n - 1) / 2));
            let g = random_graph(&mut rng, n, m, &format!("p{i}"))?;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let h = g.permuted(&perm);
            GraphPair::new(g, h, Expected::Isomorphic)
        })
        .collect()
}

/// SRG pair, cycle pair and `RANDOM_SUITE_PAIRS` random non-isomorphic pairs.
pub fn default_suite(seed: u64) -> Result<Vec<GraphPair>> {
    let mut pairs = vec![srg_pair()?, cycle_pair()?];
    pairs.extend(random_pairs(RANDOM_SUITE_PAIRS, seed)?);
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsomerKind {
    CisTrans,
    Enantiomer,
}

impl FromStr for IsomerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cistrans" => Ok(IsomerKind::CisTrans),
            "enantiomer" => Ok(IsomerKind::Enantiomer),
            other => Err(Error::Config(format!("unknown isomer kind {other:?}"))),
        }
    }
}

/// Substituent chains: every element but the last must be able to continue a chain.
const CHAINS: &[&[&str]] = &[
    &["F"],
    &["Cl"],
    &["Br"],
    &["I"],
    &["C"],
    &["N"],
    &["O"],
    &["C", "C"],
    &["C", "O"],
    &["C", "N"],
    &["O", "C"],
    &["N", "C"],
    &["C", "Cl"],
    &["C", "C", "C"],
    &["C", "C", "O"],
    &["S", "C"],
];

struct Builder {
    atoms: Vec<AtomFeature>,
    bonds: Vec<Bond>,
    coords: Vec<[f64; 3]>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            atoms: Vec::new(),
            bonds: Vec::new(),
            coords: Vec::new(),
        }
    }

    fn atom(&mut self, sym: &str, at: [f64; 3]) -> usize {
        let z = atomic_number(sym).expect("template element");
        self.atoms.push(AtomFeature::new(z));
        self.coords.push(at);
        self.atoms.len() - 1
    }

    fn bond(&mut self, a: usize, b: usize, order: BondOrder) {
        self.bonds.push(Bond::new(a, b, order));
    }

    /// Chain leaving `from` along `first`, zigzagging towards `out` after the first bond.
    fn chain(&mut self, from: usize, chain: &[&str], first: [f64; 3], out: [f64; 3]) {
        let mut prev = from;
        for (i, sym) in chain.iter().enumerate() {
            let d = if i % 2 == 0 { first } else { out };
            let p = self.coords[prev];
            let at = [p[0] + BOND * d[0], p[1] + BOND * d[1], p[2] + BOND * d[2]];
            let v = self.atom(sym, at);
            self.bond(prev, v, BondOrder::Single);
            prev = v;
        }
    }

    fn finish(self, id: &str) -> Result<Molecule> {
        let mut m = Molecule {
            id: id.to_string(),
            atoms: self.atoms,
            bonds_2d: self.bonds,
            coords: None,
            edges_3d: None,
        };
        m.validate()?;
        m.refresh_topology();
        Ok(m.with_coords(self.coords)?)
    }
}

fn pick_chain(rng: &mut ChaCha8Rng) -> &'static [&'static str] {
    CHAINS.choose(rng).copied().expect("non-empty chain table")
}

/// A substituted C=C in the xy-plane: `R1` on the first carbon and `R2` on the second, on the
/// same side (first molecule) or opposite sides (second). Optional geminal groups fill the
/// remaining positions. Atom order and bonds are identical in both molecules.
pub fn make_cis_trans_pair(seed: u64) -> Result<GraphPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r1 = pick_chain(&mut rng);
    let r2 = pick_chain(&mut rng);
    let r3 = rng
        .gen_bool(0.4)
        .then(|| pick_chain(&mut rng))
        .filter(|c| *c != r1);
    let r4 = rng
        .gen_bool(0.4)
        .then(|| pick_chain(&mut rng))
        .filter(|c| *c != r2);
    let (s, c) = (3f64.sqrt() / 2.0, 0.5);
    let build = |cis: bool, id: &str| -> Result<Molecule> {
        let mut b = Builder::new();
        let c1 = b.atom("C", [-DOUBLE_BOND / 2.0, 0.0, 0.0]);
        let c2 = b.atom("C", [DOUBLE_BOND / 2.0, 0.0, 0.0]);
        b.bond(c1, c2, BondOrder::Double);
        let side = if cis { 1.0 } else { -1.0 };
        b.chain(c1, r1, [-c, s, 0.0], [-1.0, 0.0, 0.0]);
        b.chain(c2, r2, [c, side * s, 0.0], [1.0, 0.0, 0.0]);
        if let Some(r3) = r3 {
            b.chain(c1, r3, [-c, -s, 0.0], [-1.0, 0.0, 0.0]);
        }
        if let Some(r4) = r4 {
            b.chain(c2, r4, [c, -side * s, 0.0], [1.0, 0.0, 0.0]);
        }
        b.finish(id)
    };
    GraphPair::new(
        build(true, &format!("cis{seed}"))?,
        build(false, &format!("trans{seed}"))?,
        Expected::IsomerPair,
    )
}

/// A tetrahedral center with three or four distinct substituent chains; the second molecule is
/// the mirror image (x negated).
pub fn make_enantiomer_pair(seed: u64) -> Result<GraphPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = if rng.gen_bool(0.5) { 4 } else { 3 };
    let mut chains: Vec<&[&str]> = CHAINS.to_vec();
    chains.shuffle(&mut rng);
    chains.truncate(k);
    let t = 1.0 / 3f64.sqrt();
    let dirs = [[t, t, t], [t, -t, -t], [-t, t, -t], [-t, -t, t]];
    let mut b = Builder::new();
    let center = b.atom("C", [0.0; 3]);
    for (chain, d) in chains.iter().zip(dirs) {
        b.chain(center, chain, d, d);
    }
    let left = b.finish(&format!("enantA{seed}"))?;
    let mirrored: Vec<[f64; 3]> = left.coords()?.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    let mut right = left.clone().with_coords(mirrored)?;
    right.id = format!("enantB{seed}");
    GraphPair::new(left, right, Expected::IsomerPair)
}

/// `count` pairs from seeds `seed, seed + 1, ...`.
pub fn isomer_pairs(kind: IsomerKind, count: usize, seed: u64) -> Result<Vec<GraphPair>> {
    (0..count as u64)
        .map(|i| match kind {
            IsomerKind::CisTrans => make_cis_trans_pair(seed + i),
            IsomerKind::Enantiomer => make_enantiomer_pair(seed + i),
        })
        .collect()
}

fn malformed(line: usize) -> Error {
    MolError::MalformedLine(line).into()
}

/// Parses a pair file. Graphs are blocks separated by blank lines and pair up in order. A block
/// is a node-count line, `i j [order]` edge lines and an optional `coords:` section with one
/// `x y z` or `El x y z` row per node. An `expect <kind>` line may open a pair's first block.
pub fn parse_pairs(text: &str) -> Result<Vec<GraphPair>> {
    let mut blocks: Vec<Vec<(usize, &str)>> = vec![Vec::new()];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            if !blocks.last().expect("at least one block").is_empty() {
                blocks.push(Vec::new());
            }
            continue;
        }
        blocks
            .last_mut()
            .expect("at least one block")
            .push((i + 1, line));
    }
    blocks.retain(|b| !b.is_empty());
    if blocks.len() % 2 == 1 {
        return Err(Error::Config(format!(
            "{} graphs cannot be paired",
            blocks.len()
        )));
    }
    let mut out = Vec::new();
    for pair in blocks.chunks(2) {
        let (expected, first) = parse_block(&pair[0])?;
        let (_, second) = parse_block(&pair[1])?;
        out.push(GraphPair::new(
            first,
            second,
            expected.unwrap_or(Expected::NonIsomorphic),
        )?);
    }
    Ok(out)
}

fn parse_block(lines: &[(usize, &str)]) -> Result<(Option<Expected>, Molecule)> {
    let mut it = lines.iter().peekable();
    let mut expected = None;
    if let Some((_, l)) = it.peek() {
        if let Some(kind) = l.strip_prefix("expect") {
            expected = Some(kind.trim().parse()?);
            it.next();
        }
    }
    let &(ln, count) = it
        .next()
        .ok_or_else(|| Error::Config("empty graph block".into()))?;
    let n: usize = count.parse().map_err(|_| malformed(ln))?;
    let mut elements = vec!["C".to_string(); n];
    let mut bonds = Vec::new();
    let mut coords: Option<Vec<[f64; 3]>> = None;
    for &(ln, line) in it {
        if line == "coords:" {
            coords = Some(Vec::new());
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match coords.as_mut() {
            Some(c) => {
                let (el, xyz) = match tok.len() {
                    3 => (None, &tok[..]),
                    4 => (Some(tok[0]), &tok[1..]),
                    _ => return Err(malformed(ln)),
                };
                if c.len() >= n {
                    return Err(malformed(ln));
                }
                if let Some(el) = el {
                    atomic_number(el).ok_or_else(|| malformed(ln))?;
                    elements[c.len()] = el.to_string();
                }
                let mut p = [0.0; 3];
                for (d, t) in p.iter_mut().zip(xyz) {
                    *d = t.parse().map_err(|_| malformed(ln))?;
                }
                c.push(p);
            }
            None => {
                if tok.len() != 2 && tok.len() != 3 {
                    return Err(malformed(ln));
                }
                let a: usize = tok[0].parse().map_err(|_| malformed(ln))?;
                let b: usize = tok[1].parse().map_err(|_| malformed(ln))?;
                let order = match tok.get(2).copied() {
                    None | Some("1") => BondOrder::Single,
                    Some("2") => BondOrder::Double,
                    Some("3") => BondOrder::Triple,
                    Some("ar") => BondOrder::Aromatic,
                    Some(_) => return Err(malformed(ln)),
                };
                bonds.push(Bond::new(a.min(b), a.max(b), order));
            }
        }
    }
    let mut m = Molecule {
        id: String::new(),
        atoms: elements
            .iter()
            .map(|e| AtomFeature::new(atomic_number(e).expect("validated symbol")))
            .collect(),
        bonds_2d: bonds,
        coords: None,
        edges_3d: None,
    };
    m.validate()?;
    m.refresh_topology();
    if let Some(c) = coords {
        m = m.with_coords(c)?;
    }
    Ok((expected, m))
}

/// Inverse of `parse_pairs`; element symbols are written only when coordinates are present.
pub fn format_pairs(pairs: &[GraphPair]) -> String {
    let mut s = String::new();
    for (i, p) in pairs.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "expect {}", p.expected);
        format_graph(&mut s, &p.g1);
        s.push('\n');
        format_graph(&mut s, &p.g2);
    }
    s
}

fn format_graph(s: &mut String, m: &Molecule) {
    let _ = writeln!(s, "{}", m.len());
    for b in &m.bonds_2d {
        let order = match b.order {
            BondOrder::Single => "",
            BondOrder::Double => " 2",
            BondOrder::Triple => " 3",
            BondOrder::Aromatic => " ar",
        };
        let _ = writeln!(s, "{} {}{order}", b.a, b.b);
    }
    if let Some(c) = &m.coords {
        s.push_str("coords:\n");
        for (a, p) in m.atoms.iter().zip(c) {
            let el = symbol(a.element).unwrap_or("C");
            let _ = writeln!(s, "{el} {:?} {:?} {:?}", p[0], p[1], p[2]);
        }
    }
}
