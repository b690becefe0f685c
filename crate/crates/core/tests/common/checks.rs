#![allow(dead_code)]

use mvcib::align::{attend_2d_queries, attend_3d_queries};
use mvcib::encoders::LatentPosterior;
use mvcib::fragmenter::brics_fragment;
use mvcib::losses::skl_term;
use mvcib::model::{prepare, ModelConfig, MvcibModel};
use mvcib::molio::{embed_synthetic, parse_smiles, Molecule};
use mvcib::synth::toy_corpus;
use mvcib::tensor::{Matrix, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Toy molecules with synthetic coordinates attached.
pub fn toy_with_coords() -> Vec<Molecule> {
    toy_corpus()
        .into_iter()
        .map(|r| {
            let c = embed_synthetic(&r.mol);
            r.mol.with_coords(c).unwrap()
        })
        .collect()
}

fn gaussian3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(&a, &a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Random orthogonal matrix by Gram-Schmidt; `proper = false` flips one axis (det = -1).
pub fn random_orthogonal(rng: &mut ChaCha8Rng, proper: bool) -> [[f64; 3]; 3] {
    let a = normalize(gaussian3(rng));
    let b0 = gaussian3(rng);
    let p = dot(&a, &b0);
    let b = normalize([b0[0] - p * a[0], b0[1] - p * a[1], b0[2] - p * a[2]]);
    let mut c = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    if !proper {
        c = [-c[0], -c[1], -c[2]];
    }
    [a, b, c]
}

pub fn transform(coords: &[[f64; 3]], r: &[[f64; 3]; 3], t: [f64; 3]) -> Vec<[f64; 3]> {
    coords
        .iter()
        .map(|x| {
            [
                dot(&r[0], x) + t[0],
                dot(&r[1], x) + t[1],
                dot(&r[2], x) + t[2],
            ]
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy)]
pub struct E3Report {
    /// Worst inf-norm change of the invariant 3D node embeddings.
    pub embed: f64,
    /// Worst inf-norm change of the 3D posterior mean.
    pub latent: f64,
    /// Worst deviation of the output coordinates from the transformed originals.
    pub coords: f64,
}

/// Encodes each molecule before and after a random rigid motion. Reflections are only drawn
/// when the signed-volume feature is off, since that feature is chiral by construction.
pub fn e3_invariance(triples: usize, seed: u64, cfg: &ModelConfig) -> E3Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mols = toy_with_coords();
    let model = MvcibModel::new(cfg.clone()).unwrap();
    let p = model.store.bind_frozen();
    let mut rep = E3Report {
        embed: 0.0,
        latent: 0.0,
        coords: 0.0,
    };
    for i in 0..triples {
        let mol = &mols[i % mols.len()];
        let proper = cfg.chirality || rng.gen_bool(0.5);
        let r = random_orthogonal(&mut rng, proper);
        let t = [
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        ];
        let moved = mol
            .clone()
            .with_coords(transform(mol.coords().unwrap(), &r, t))
            .unwrap();
        let a = model.eval_forward(&p, &prepare(mol, cfg).unwrap()).unwrap();
        let b = model
            .eval_forward(&p, &prepare(&moved, cfg).unwrap())
            .unwrap();
        rep.embed = rep.embed.max(max_abs_diff(
            a.view_3d.embeddings.fused.data(),
            b.view_3d.embeddings.fused.data(),
        ));
        rep.latent = rep
            .latent
            .max(max_abs_diff(a.p3d.mean.data(), b.p3d.mean.data()));
        let xa: Vec<[f64; 3]> = a
            .view_3d
            .coords
            .as_ref()
            .unwrap()
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let want: Vec<f64> = transform(&xa, &r, t).into_iter().flatten().collect();
        rep.coords = rep.coords.max(max_abs_diff(
            &want,
            b.view_3d.coords.as_ref().unwrap().data(),
        ));
    }
    rep
}

/// Worst inf-norm deviation of permuted 2D node embeddings from the relabeled originals.
pub fn gin_permutation(trials: usize, seed: u64, cfg: &ModelConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mols = toy_with_coords();
    let model = MvcibModel::new(cfg.clone()).unwrap();
    let p = model.store.bind_frozen();
    let mut worst: f64 = 0.0;
    for i in 0..trials {
        let mol = &mols[i % mols.len()];
        let mut perm: Vec<usize> = (0..mol.len()).collect();
        perm.shuffle(&mut rng);
        let a = model.eval_forward(&p, &prepare(mol, cfg).unwrap()).unwrap();
        let b = model
            .eval_forward(&p, &prepare(&mol.permuted(&perm), cfg).unwrap())
            .unwrap();
        let (ha, hb) = (&a.view_2d.embeddings.fused, &b.view_2d.embeddings.fused);
        for (old, &new) in perm.iter().enumerate() {
            worst = worst.max(max_abs_diff(ha.row(old), hb.row(new)));
        }
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionReport {
    pub row_sum: f64,
    pub col_sum: f64,
    pub shift: f64,
}

/// Stochasticity of xi rows and zeta columns plus row-shift invariance of xi.
pub fn attention_normalization(inputs: usize, seed: u64) -> AttentionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = AttentionReport {
        row_sum: 0.0,
        col_sum: 0.0,
        shift: 0.0,
    };
    for _ in 0..inputs {
        let n = rng.gen_range(1..=12);
        let scale = 10f64.powi(rng.gen_range(-2..=2));
        let s: Vec<f64> = (0..n * n)
            .map(|_| scale * rng.gen_range(-5.0..5.0))
            .collect();
        let h = Tensor::constant(&Matrix::new(n, 2, vec![1.0; 2 * n]).unwrap());
        let st = Tensor::new(n, n, s.clone()).unwrap();
        let (xi, _) = attend_2d_queries(&st, &h).unwrap();
        let (zeta, _) = attend_3d_queries(&st, &h).unwrap();
        for i in 0..n {
            let r: f64 = xi.row(i).iter().sum();
            let c: f64 = (0..n).map(|k| zeta.get(k, i)).sum();
            rep.row_sum = rep.row_sum.max((r - 1.0).abs());
            rep.col_sum = rep.col_sum.max((c - 1.0).abs());
        }
        let row = rng.gen_range(0..n);
        let shift = rng.gen_range(-50.0..50.0);
        let mut shifted = s;
        for v in &mut shifted[row * n..(row + 1) * n] {
            *v += shift;
        }
        let (xi2, _) = attend_2d_queries(&Tensor::new(n, n, shifted).unwrap(), &h).unwrap();
        rep.shift = rep.shift.max(max_abs_diff(xi.row(row), xi2.row(row)));
    }
    rep
}

fn random_posterior(rng: &mut ChaCha8Rng, d: usize) -> LatentPosterior {
    let mean = Tensor::new(1, d, (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let logvar = Tensor::new(1, d, (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    LatentPosterior {
        sample: mean.clone(),
        mean,
        logvar,
        eps: None,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SklReport {
    pub self_term: f64,
    pub asymmetry: f64,
    pub min_value: f64,
}

pub fn skl_identities(count: usize, seed: u64) -> SklReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SklReport {
        self_term: 0.0,
        asymmetry: 0.0,
        min_value: f64::INFINITY,
    };
    for _ in 0..count {
        let d = rng.gen_range(1..=16);
        let p = random_posterior(&mut rng, d);
        let q = random_posterior(&mut rng, d);
        let pq = skl_term(&p, &q).unwrap().item();
        let qp = skl_term(&q, &p).unwrap().item();
        rep.self_term = rep.self_term.max(skl_term(&p, &p).unwrap().item().abs());
        rep.asymmetry = rep.asymmetry.max((pq - qp).abs());
        rep.min_value = rep.min_value.min(pq);
    }
    rep
}

/// Molecules whose fragments overlap or miss an atom, checked from the node sets alone.
pub fn partition_violations(smiles: &[String]) -> Vec<String> {
    let mut bad = Vec::new();
    for s in smiles {
        let mol = parse_smiles(s).unwrap();
        let fs = brics_fragment(&mol);
        let mut seen = vec![0usize; mol.len()];
        for f in &fs.fragments {
            for &v in &f.nodes {
                seen[v] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            bad.push(s.clone());
        }
    }
    bad
}
