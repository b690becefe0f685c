use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::molecule::Molecule;
use super::MolError;

pub const DEFAULT_CUTOFF: f64 = 1.5;

const BOND_LENGTH: f64 = 1.4;
const CONTACT: f64 = 2.2;
const REPULSION: f64 = 0.2;
const BOND_STIFFNESS: f64 = 8.0;
const JITTER: f64 = 0.05;
const RELAX_STEPS: usize = 1000;
const STEP: f64 = 0.02;
const STRESS_STEPS: usize = 1000;
const STRESS_STEP: f64 = 0.2;

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Sets `edges_3d` to every unordered pair within `cutoff`, sorted lexicographically.
pub fn build_radius_graph(mut mol: Molecule, cutoff: f64) -> Result<Molecule, MolError> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(MolError::InvalidCutoff(cutoff));
    }
    let coords = mol.coords()?;
    let n = coords.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if distance(&coords[i], &coords[j]) <= cutoff {
                edges.push((i, j));
            }
        }
    }
    mol.edges_3d = Some(edges);
    Ok(mol)
}

/// Dense N×N Euclidean distance matrix.
pub fn distance_matrix(mol: &Molecule) -> Result<Vec<Vec<f64>>, MolError> {
    let c = mol.coords()?;
    Ok(c.iter()
        .map(|a| c.iter().map(|b| distance(a, b)).collect())
        .collect())
}

/// Synthetic 3D coordinates: stress layout on graph distances, then a spring relaxation
/// with non-bonded repulsion, plus small seeded jitter.
///
/// Bonded pairs relax toward 1.4 Å and non-bonded pairs are pushed beyond 2.2 Å.
/// The result depends on atom order, so it is not permutation-equivariant.
pub fn embed_synthetic(mol: &Molecule) -> Vec<[f64; 3]> {
    let n = mol.len();
    let mut pos = stress_layout(mol);
    let mut bonded = vec![vec![false; n]; n];
    for b in &mol.bonds_2d {
        bonded[b.a][b.b] = true;
        bonded[b.b][b.a] = true;
    }
    let mut grad = vec![[0.0f64; 3]; n];
    for _ in 0..RELAX_STEPS {
        grad.iter_mut().for_each(|g| *g = [0.0; 3]);
        for i in 0..n {
            for j in i + 1..n {
                let diff = sub3(&pos[i], &pos[j]);
                let d = norm3(&diff);
                let coef = if bonded[i][j] {
                    2.0 * BOND_STIFFNESS * (d - BOND_LENGTH)
                } else if d < CONTACT {
                    -2.0 * REPULSION * (CONTACT - d)
                } else {
                    continue;
                };
                let u = if d > 1e-9 {
                    [diff[0] / d, diff[1] / d, diff[2] / d]
                } else {
                    [1.0, 0.0, 0.0]
                };
                for k in 0..3 {
                    grad[i][k] += coef * u[k];
                    grad[j][k] -= coef * u[k];
                }
            }
        }
        for (p, g) in pos.iter_mut().zip(&grad) {
            for k in 0..3 {
                p[k] -= STEP * g[k];
            }
        }
    }
    pos.iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            [
                p[0] + rng.gen_range(-JITTER..JITTER),
                p[1] + rng.gen_range(-JITTER..JITTER),
                p[2] + rng.gen_range(-JITTER..JITTER),
            ]
        })
        .collect()
}

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn hop_distances(mol: &Molecule) -> Vec<Vec<Option<usize>>> {
    let adj = mol.adjacency();
    (0..mol.len())
        .map(|s| {
            let mut d = vec![None; mol.len()];
            d[s] = Some(0);
            let mut queue = std::collections::VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &w in &adj[u] {
                    if d[w].is_none() {
                        d[w] = Some(d[u].unwrap() + 1);
                        queue.push_back(w);
                    }
                }
            }
            d
        })
        .collect()
}

/// Target separation for atoms `h` bonds apart: a zigzag chain with 120° angles.
fn ideal_distance(h: usize) -> f64 {
    match h {
        0 => 0.0,
        1 => BOND_LENGTH,
        _ => BOND_LENGTH * (1.0 + 0.75 * (h - 1) as f64),
    }
}

/// Stress layout on graph distances, started from classical MDS.
fn stress_layout(mol: &Molecule) -> Vec<[f64; 3]> {
    let n = mol.len();
    let hops = hop_distances(mol);
    let far = hops.iter().flatten().flatten().max().copied().unwrap_or(0) + 3;
    let ideal: Vec<Vec<f64>> = hops
        .iter()
        .map(|r| r.iter().map(|h| ideal_distance(h.unwrap_or(far))).collect())
        .collect();

    let mut b = vec![vec![0.0; n]; n];
    let sq: Vec<Vec<f64>> = ideal
        .iter()
        .map(|r| r.iter().map(|d| d * d).collect())
        .collect();
    let row_mean: Vec<f64> = sq
        .iter()
        .map(|r| r.iter().sum::<f64>() / n as f64)
        .collect();
    let all_mean = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            b[i][j] = -0.5 * (sq[i][j] - row_mean[i] - row_mean[j] + all_mean);
        }
    }
    let mut axes: Vec<(Vec<f64>, f64)> = Vec::new();
    for axis in 0..3 {
        let mut v: Vec<f64> = (0..n)
            .map(|i| ChaCha8Rng::seed_from_u64((i * 3 + axis) as u64).gen_range(-1.0..1.0))
            .collect();
        let mut lambda = 0.0;
        for _ in 0..200 {
            for (prev, _) in &axes {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
            let w: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| b[i][j] * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                break;
            }
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        axes.push((v, lambda.sqrt()));
    }
    let mut pos: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64 ^ 0x5eed);
            let mut p = [0.0; 3];
            for (k, (v, s)) in axes.iter().enumerate() {
                p[k] = v[i] * s + rng.gen_range(-0.1..0.1);
            }
            p
        })
        .collect();

    let mut grad = vec![[0.0f64; 3]; n];
    for _ in 0..STRESS_STEPS {
        grad.iter_mut().for_each(|g| *g = [0.0; 3]);
        for i in 0..n {
            for j in i + 1..n {
                let diff = sub3(&pos[i], &pos[j]);
                let d = norm3(&diff).max(1e-9);
                let w = 1.0 / (ideal[i][j] * ideal[i][j]);
                let coef = 2.0 * w * (d - ideal[i][j]) / d;
                for k in 0..3 {
                    grad[i][k] += coef * diff[k];
                    grad[j][k] -= coef * diff[k];
                }
            }
        }
        for (p, g) in pos.iter_mut().zip(&grad) {
            for k in 0..3 {
                p[k] -= STRESS_STEP * g[k];
            }
        }
    }
    pos
}

/// Attaches synthetic coordinates when none are present, then builds the radius graph.
pub fn ensure_3d(mol: Molecule, cutoff: f64) -> Result<Molecule, MolError> {
    let mol = if mol.coords.is_some() {
        mol
    } else {
        let c = embed_synthetic(&mol);
        mol.with_coords(c)?
    };
    build_radius_graph(mol, cutoff)
}

/// Signed volume of the first three bonded neighbors (by index) around each atom; 0 below three.
pub fn signed_volumes(mol: &Molecule) -> Result<Vec<f64>, MolError> {
    let c = mol.coords()?;
    let adj = mol.adjacency();
    Ok((0..mol.len())
        .map(|i| {
            if adj[i].len() < 3 {
                return 0.0;
            }
            let v: Vec<[f64; 3]> = adj[i][..3]
                .iter()
                .map(|&j| [c[j][0] - c[i][0], c[j][1] - c[i][1], c[j][2] - c[i][2]])
                .collect();
            v[0][0] * (v[1][1] * v[2][2] - v[1][2] * v[2][1])
                - v[0][1] * (v[1][0] * v[2][2] - v[1][2] * v[2][0])
                + v[0][2] * (v[1][0] * v[2][1] - v[1][1] * v[2][0])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::parse_smiles;

    fn line(spacing: f64, n: usize) -> Molecule {
        let m = Molecule::from_graph("line", n, &[]).unwrap();
        m.with_coords((0..n).map(|i| [i as f64 * spacing, 0.0, 0.0]).collect())
            .unwrap()
    }

    #[test]
    fn radius_graph_thresholds() {
        let near = build_radius_graph(line(1.0, 2), 1.5).unwrap();
        assert_eq!(near.edges_3d.unwrap(), vec![(0, 1)]);
        let far = build_radius_graph(line(2.0, 2), 1.5).unwrap();
        assert!(far.edges_3d.unwrap().is_empty());
    }

    #[test]
    fn radius_graph_requires_coords() {
        let m = parse_smiles("CC").unwrap();
        assert_eq!(
            build_radius_graph(m, 1.5).unwrap_err(),
            MolError::MissingCoordinates
        );
        assert!(matches!(
            build_radius_graph(line(1.0, 2), 0.0),
            Err(MolError::InvalidCutoff(_))
        ));
    }

    #[test]
    fn radius_graph_sorted() {
        let g = build_radius_graph(line(1.0, 4), 2.5).unwrap();
        assert_eq!(
            g.edges_3d.unwrap(),
            vec![(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]
        );
    }

    #[test]
    fn synthetic_embedding_keeps_bonds_within_cutoff() {
        for smi in [
            "CCO",
            "c1ccccc1",
            "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
            "C1CCC1",
            "C1CC1",
        ] {
            let m = parse_smiles(smi).unwrap();
            let c = embed_synthetic(&m);
            for b in &m.bonds_2d {
                let d = distance(&c[b.a], &c[b.b]);
                assert!(d < DEFAULT_CUTOFF, "{smi}: bond {}-{} at {d}", b.a, b.b);
            }
            assert_eq!(c, embed_synthetic(&m));
        }
    }

    #[test]
    fn signed_volume_flips_under_mirror() {
        let m = Molecule::from_graph("t", 4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let c = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let mirrored: Vec<_> = c.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let v = signed_volumes(&m.clone().with_coords(c).unwrap()).unwrap();
        let w = signed_volumes(&m.with_coords(mirrored).unwrap()).unwrap();
        assert_eq!(v[0], 1.0);
        assert_eq!(w[0], -1.0);
        assert_eq!(v[1], 0.0);
    }
}
