//! Seeded synthetic corpora: drug-like random SMILES, the bundled toy set, a planted-motif
//! classification task and correlated Gaussian latent pairs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::molio::{parse_dataset, Record};

pub const TOY_TSV: &str = include_str!("../data/toy.tsv");

/// The bundled toy corpus.
pub fn toy_corpus() -> Vec<Record> {
    parse_dataset(TOY_TSV).expect("bundled toy corpus parses")
}

/// Ring templates: `{R}` is the ring-closure label, `{F}` a second label for fused systems,
/// `{x}` the exit towards the rest of the molecule and `{s}` an optional substituent.
const RINGS: &[&str] = &[
    "c{R}cc({s})c({x})cc{R}",
    "c{R}ccc({x})cc{R}",
    "c{R}cnc({s})c({x})c{R}",
    "c{R}ccc({x})s{R}",
    "c{R}ccc({x})o{R}",
    "c{R}cnc({x})nc{R}",
    "c{R}cn({x})cn{R}",
    "C{R}CC({s})C({x})CC{R}",
    "C{R}CCN({x})CC{R}",
    "C{R}CN(C)CCN{R}{x}",
    "C{R}COCCN{R}{x}",
    "C{R}CC{R}{x}",
    "C{R}CCC({x})C{R}",
    "c{R}ccc{F}cc({x})ccc{F}c{R}",
    "c{R}ccc{F}c(c{R})cc({s})n{F}{x}",
];

const LINKERS: &[&str] = &[
    "",
    "C",
    "CC",
    "C(=O)N",
    "NC(=O)",
    "C(=O)O",
    "OC(=O)",
    "O",
    "N",
    "S(=O)(=O)N",
    "OC",
    "CN",
    "C=C",
    "CC(=O)N",
    "NC(=O)N",
];

const SUBSTITUENTS: &[&str] = &[
    "F",
    "Cl",
    "Br",
    "C",
    "O",
    "OC",
    "N",
    "C(F)(F)F",
    "C#N",
    "C(=O)O",
    "N(C)C",
    "CC",
    "C(C)C",
    "[N+](=O)[O-]",
    "S(C)(=O)=O",
    "C(N)=O",
];

const TAILS: &[&str] = &[
    "C", "CC", "CCO", "CCN(C)C", "CC(=O)O", "C(=O)OC", "OCC", "N", "C(C)(C)C", "CCCC",
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty table")
}

fn fill(template: &str, level: usize, exit: &str, sub: &str) -> String {
    let r = (1 + 2 * level).to_string();
    let f = (2 + 2 * level).to_string();
    let mut s = template.replace("{R}", &r).replace("{F}", &f);
    s = if sub.is_empty() {
        s.replace("({s})", "").replace("{s}", "")
    } else {
        s.replace("{s}", sub)
    };
    if exit.is_empty() {
        s.replace("({x})", "").replace("{x}", "")
    } else {
        s.replace("{x}", exit)
    }
}

fn ring_chain(rng: &mut ChaCha8Rng, rings: usize, level: usize) -> String {
    let template = pick(rng, RINGS);
    let sub = if rng.gen_bool(0.5) {
        pick(rng, SUBSTITUENTS)
    } else {
        ""
    };
    let exit = if rings > 1 {
        format!(
            "{}{}",
            pick(rng, LINKERS),
            ring_chain(rng, rings - 1, level + 1)
        )
    } else if rng.gen_bool(0.6) {
        pick(rng, TAILS).to_string()
    } else {
        String::new()
    };
    fill(template, level, &exit, sub)
}

/// One drug-like SMILES string: two to three ring systems joined by linkers, with optional
/// substituents and an acyclic tail.
pub fn random_drug_like(rng: &mut ChaCha8Rng) -> String {
    let rings = rng.gen_range(2..=3);
    let head = if rng.gen_bool(0.3) {
        pick(rng, TAILS)
    } else {
        ""
    };
    format!("{head}{}", ring_chain(rng, rings, 0))
}

pub fn random_smiles_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_drug_like(&mut rng)).collect()
}

/// Sulfonamide joining two ring systems; positives carry it, negatives never do.
pub const PLANTED_MOTIF: &str = "S(=O)(=O)N";

/// `(id, smiles, label)` rows alternating positive and negative. Positives join two ring
/// systems through the planted linker; negatives use any other linker and never contain it.
pub fn planted_motif_corpus(n: usize, seed: u64) -> Vec<(String, String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let positive = out.len() % 2 == 0;
        let linker = if positive {
            PLANTED_MOTIF
        } else {
            let others: Vec<&str> = LINKERS
                .iter()
                .copied()
                .filter(|&l| l != PLANTED_MOTIF)
                .collect();
            pick(&mut rng, &others)
        };
        let systems = rng.gen_range(1..=2);
        let tail = ring_chain(&mut rng, systems, 1);
        let sub = if rng.gen_bool(0.5) {
            pick(&mut rng, SUBSTITUENTS)
        } else {
            ""
        };
        let first = pick(&mut rng, RINGS);
        let smiles = fill(first, 0, &format!("{linker}{tail}"), sub);
        if !positive && smiles.contains(PLANTED_MOTIF) {
            continue;
        }
        let label = if positive { 1.0 } else { 0.0 };
        out.push((format!("motif{:04}", out.len()), smiles, label));
    }
    out
}

/// `n` pairs `(x, y)` of `dim`-vectors with per-coordinate correlation `rho`.
pub fn gaussian_pairs(n: usize, dim: usize, rho: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| {
                let e: f64 = StandardNormal.sample(&mut rng);
                rho * xi + s * e
            })
            .collect();
        xs.push(x);
        ys.push(y);
    }
    (xs, ys)
}

/// Mutual information in nats of `dim` independent coordinate pairs with correlation `rho`.
pub fn gaussian_mi(dim: usize, rho: f64) -> f64 {
    -0.5 * dim as f64 * (1.0 - rho * rho).ln()
}
