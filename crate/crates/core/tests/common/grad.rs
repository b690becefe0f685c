#![allow(dead_code)]

use mvcib::align::{affinity, align, attend_2d_queries, attend_3d_queries, AlignParams};
use mvcib::encoders::{
    egnn_forward, fuse, gin_forward, posterior_head, readout, EgnnParams, GinParams,
    LatentPosterior, Linear, PosteriorHead, SubgraphBatch,
};
use mvcib::fragmenter::{Subgraph, SubgraphKind};
use mvcib::losses::{
    js_bound, js_mi, loss_2d_recon, loss_2d_to_3d, loss_3d_denoise, skl_term, total_loss,
    DistanceHead, JsScorer, LossConfig, LossParts, PairNorm,
};
use mvcib::params::{Bound, ParamStore};
use mvcib::tensor::{Matrix, Tensor};
use mvcib::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Below this gradient norm the error is measured in absolute terms; central differences
/// carry roughly `1e-16 / FD_EPS` of rounding noise.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Uniform entries in [-2, 2] kept at least `margin` away from every point in `kinks`.
pub fn uniform_avoiding(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    kinks: &[f64],
    margin: f64,
) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| loop {
            let x: f64 = rng.gen_range(-2.0..2.0);
            if kinks.iter().all(|k| (x - k).abs() > margin) {
                break x;
            }
        })
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=4))
}

type Forward<'a> = dyn Fn(&Bound, &[Tensor]) -> Result<Tensor> + 'a;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error between the analytic gradient of `<f(params, inputs), W>` and central
/// differences, taken over every input entry and every parameter entry at once. `W` is a
/// fixed random projection so that non-scalar outputs are checked in every direction.
pub fn fd_check(rng: &mut ChaCha8Rng, store: &ParamStore, inputs: &[Matrix], f: &Forward) -> f64 {
    let frozen = |s: &ParamStore, xs: &[Matrix]| -> Tensor {
        let t: Vec<Tensor> = xs.iter().map(Tensor::constant).collect();
        f(&s.bind_frozen(), &t).unwrap()
    };
    let probe = frozen(store, inputs);
    let w = Tensor::constant(&uniform(rng, probe.rows(), probe.cols()));
    let objective = |out: Tensor| out.mul(&w).unwrap().sum();

    let vars: Vec<Tensor> = inputs.iter().map(Tensor::variable).collect();
    let bound = store.bind_all();
    let loss = objective(f(&bound, &vars).unwrap());
    let g = loss.backward().unwrap();
    let mut analytic: Vec<f64> = vars.iter().flat_map(|v| g.wrt(v)).collect();
    analytic.extend(bound.grads(&g).into_iter().flatten());

    let value = |s: &ParamStore, xs: &[Matrix]| objective(frozen(s, xs)).item();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..inputs.len() {
        for k in 0..inputs[i].data.len() {
            let mut xs = inputs.to_vec();
            xs[i].data[k] += FD_EPS;
            let up = value(store, &xs);
            xs[i].data[k] -= 2.0 * FD_EPS;
            let down = value(store, &xs);
            numeric.push((up - down) / (2.0 * FD_EPS));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).data.len() {
            let mut s = store.clone();
            s.get_mut(id).data[k] += FD_EPS;
            let up = value(&s, inputs);
            s.get_mut(id).data[k] -= 2.0 * FD_EPS;
            let down = value(&s, inputs);
            numeric.push((up - down) / (2.0 * FD_EPS));
        }
    }
    assert_eq!(analytic.len(), numeric.len());
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(GRAD_FLOOR)
}

fn op<E: Into<mvcib::Error>>(
    rng: &mut ChaCha8Rng,
    inputs: &[Matrix],
    f: impl Fn(&[Tensor]) -> std::result::Result<Tensor, E>,
) -> f64 {
    fd_check(rng, &ParamStore::new(), inputs, &|_, t| {
        f(t).map_err(Into::into)
    })
}

pub struct Case {
    pub name: &'static str,
    pub instance: fn(&mut ChaCha8Rng) -> f64,
}

/// Worst relative error of `case` over [`INSTANCES`] seeded instances.
pub fn run_case(case: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..INSTANCES)
        .map(|_| (case.instance)(&mut rng))
        .fold(0.0, f64::max)
}

fn unary(rng: &mut ChaCha8Rng, kinks: &[f64], f: fn(&Tensor) -> Tensor) -> f64 {
    let (r, c) = dims(rng);
    let x = uniform_avoiding(rng, r, c, kinks, 1e-3);
    op(rng, &[x], |t| Ok::<_, mvcib::Error>(f(&t[0])))
}

fn binary<E: Into<mvcib::Error>>(
    rng: &mut ChaCha8Rng,
    f: fn(&Tensor, &Tensor) -> std::result::Result<Tensor, E>,
) -> f64 {
    let (r, c) = dims(rng);
    let a = uniform(rng, r, c);
    let b = uniform(rng, r, c);
    op(rng, &[a, b], |t| f(&t[0], &t[1]))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.gen_range(0..v), v)).collect();
    for _ in 0..n / 2 {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && !edges.contains(&(a.min(b), a.max(b))) {
            edges.push((a.min(b), a.max(b)));
        }
    }
    edges
}

/// One-hop ego-nets of a random connected graph, plus the graph itself as an extra subgraph.
fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> SubgraphBatch {
    let edges = random_graph(rng, n);
    let mut subs: Vec<Subgraph> = (0..n)
        .map(|v| {
            let mut nodes = vec![v];
            for &(a, b) in &edges {
                if a == v {
                    nodes.push(b);
                } else if b == v {
                    nodes.push(a);
                }
            }
            Subgraph::induced(Some(v), nodes, &edges, SubgraphKind::Ego2D)
        })
        .collect();
    subs.push(Subgraph::induced(
        None,
        (0..n).collect(),
        &edges,
        SubgraphKind::Fragment,
    ));
    SubgraphBatch::new(&subs)
}

fn seeded(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(rng.gen())
}

fn posterior(mean: &Tensor, logvar: &Tensor) -> LatentPosterior {
    LatentPosterior {
        mean: mean.clone(),
        logvar: logvar.clone(),
        sample: mean.clone(),
        eps: None,
    }
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            instance: |rng| {
                let (m, k) = dims(rng);
                let n = rng.gen_range(1..=4);
                let a = uniform(rng, m, k);
                let b = uniform(rng, k, n);
                op(rng, &[a, b], |t| t[0].matmul(&t[1]))
            },
        },
        Case {
            name: "matmul_t",
            instance: |rng| {
                let (m, k) = dims(rng);
                let n = rng.gen_range(1..=4);
                let a = uniform(rng, m, k);
                let b = uniform(rng, n, k);
                op(rng, &[a, b], |t| t[0].matmul_t(&t[1]))
            },
        },
        Case {
            name: "transpose",
            instance: |rng| unary(rng, &[], |x| x.transpose()),
        },
        Case {
            name: "add",
            instance: |rng| binary(rng, |a, b| a.add(b)),
        },
        Case {
            name: "sub",
            instance: |rng| binary(rng, |a, b| a.sub(b)),
        },
        Case {
            name: "mul",
            instance: |rng| binary(rng, |a, b| a.mul(b)),
        },
        Case {
            name: "div",
            instance: |rng| {
                let (r, c) = dims(rng);
                let a = uniform(rng, r, c);
                let b = uniform_avoiding(rng, r, c, &[0.0], 0.5);
                op(rng, &[a, b], |t| t[0].div(&t[1]))
            },
        },
        Case {
            name: "scale",
            instance: |rng| unary(rng, &[], |x| x.scale(-1.7)),
        },
        Case {
            name: "neg",
            instance: |rng| unary(rng, &[], |x| x.neg()),
        },
        Case {
            name: "add_scalar",
            instance: |rng| unary(rng, &[], |x| x.add_scalar(0.3).square()),
        },
        Case {
            name: "scale_by",
            instance: |rng| {
                let (r, c) = dims(rng);
                let a = uniform(rng, r, c);
                let s = uniform(rng, 1, 1);
                op(rng, &[a, s], |t| t[0].scale_by(&t[1]))
            },
        },
        Case {
            name: "add_row",
            instance: |rng| {
                let (r, c) = dims(rng);
                let a = uniform(rng, r, c);
                let b = uniform(rng, 1, c);
                op(rng, &[a, b], |t| t[0].add_row(&t[1]))
            },
        },
        Case {
            name: "mul_col",
            instance: |rng| {
                let (r, c) = dims(rng);
                let a = uniform(rng, r, c);
                let b = uniform(rng, r, 1);
                op(rng, &[a, b], |t| t[0].mul_col(&t[1]))
            },
        },
        Case {
            name: "relu",
            instance: |rng| unary(rng, &[0.0], |x| x.relu()),
        },
        Case {
            name: "silu",
            instance: |rng| unary(rng, &[], |x| x.silu()),
        },
        Case {
            name: "exp",
            instance: |rng| unary(rng, &[], |x| x.exp()),
        },
        Case {
            name: "softplus",
            instance: |rng| unary(rng, &[], |x| x.softplus()),
        },
        Case {
            name: "sigmoid",
            instance: |rng| unary(rng, &[], |x| x.sigmoid()),
        },
        Case {
            name: "abs",
            instance: |rng| unary(rng, &[0.0], |x| x.abs()),
        },
        Case {
            name: "square",
            instance: |rng| unary(rng, &[], |x| x.square()),
        },
        Case {
            name: "clamp",
            instance: |rng| unary(rng, &[-1.0, 1.0], |x| x.clamp(-1.0, 1.0)),
        },
        Case {
            name: "sum",
            instance: |rng| unary(rng, &[], |x| x.sum()),
        },
        Case {
            name: "mean",
            instance: |rng| unary(rng, &[], |x| x.mean().unwrap()),
        },
        Case {
            name: "sum_rows",
            instance: |rng| unary(rng, &[], |x| x.sum_rows().unwrap()),
        },
        Case {
            name: "row_sum",
            instance: |rng| unary(rng, &[], |x| x.row_sum()),
        },
        Case {
            name: "frobenius_sq",
            instance: |rng| unary(rng, &[], |x| x.frobenius_sq()),
        },
        Case {
            name: "l2_norm",
            instance: |rng| unary(rng, &[], |x| x.l2_norm()),
        },
        Case {
            name: "concat_rows",
            instance: |rng| {
                let c = rng.gen_range(1..=4);
                let rows = rng.gen_range(1..=3);
                let a = uniform(rng, rows, c);
                let rows = rng.gen_range(1..=3);
                let b = uniform(rng, rows, c);
                op(rng, &[a, b], |t| {
                    Tensor::concat(&[t[0].clone(), t[1].clone(), t[0].clone()], 0)
                })
            },
        },
        Case {
            name: "concat_cols",
            instance: |rng| {
                let r = rng.gen_range(1..=4);
                let cols = rng.gen_range(1..=3);
                let a = uniform(rng, r, cols);
                let cols = rng.gen_range(1..=3);
                let b = uniform(rng, r, cols);
                op(rng, &[a, b], |t| {
                    Tensor::concat(&[t[1].clone(), t[0].clone()], 1)
                })
            },
        },
        Case {
            name: "slice_cols",
            instance: |rng| {
                let r = rng.gen_range(1..=4);
                let c = rng.gen_range(2..=5);
                let start = rng.gen_range(0..c - 1);
                let end = rng.gen_range(start + 1..=c);
                let a = uniform(rng, r, c);
                op(rng, &[a], move |t| t[0].slice_cols(start, end))
            },
        },
        Case {
            name: "gather_rows",
            instance: |rng| {
                let (r, c) = dims(rng);
                let index: Vec<usize> = (0..rng.gen_range(1..=6))
                    .map(|_| rng.gen_range(0..r))
                    .collect();
                let a = uniform(rng, r, c);
                op(rng, &[a], move |t| t[0].gather_rows(&index))
            },
        },
        Case {
            name: "segment_sum",
            instance: |rng| {
                let (r, c) = dims(rng);
                let segments = rng.gen_range(1..=3);
                let seg: Vec<usize> = (0..r).map(|_| rng.gen_range(0..segments)).collect();
                let a = uniform(rng, r, c);
                op(rng, &[a], move |t| t[0].segment_sum(&seg, segments))
            },
        },
        Case {
            name: "softmax_rows",
            instance: |rng| unary(rng, &[], |x| x.softmax_rows().unwrap()),
        },
        Case {
            name: "softmax_cols",
            instance: |rng| unary(rng, &[], |x| x.softmax_cols().unwrap()),
        },
        Case {
            name: "cosine_similarity",
            instance: |rng| unary(rng, &[], |x| x.cosine_similarity()),
        },
        Case {
            name: "row_cosine",
            instance: |rng| binary(rng, |a, b| a.row_cosine(b)),
        },
        Case {
            name: "gaussian_kl",
            instance: |rng| {
                let (r, c) = dims(rng);
                let xs: Vec<Matrix> = (0..4).map(|_| uniform(rng, r, c)).collect();
                op(rng, &xs, |t| {
                    Tensor::gaussian_kl(&t[0], &t[1], &t[2], &t[3])
                })
            },
        },
        Case {
            name: "skl_term",
            instance: |rng| {
                let (r, c) = dims(rng);
                let xs: Vec<Matrix> = (0..4).map(|_| uniform(rng, r, c)).collect();
                op(rng, &xs, |t| {
                    skl_term(&posterior(&t[0], &t[1]), &posterior(&t[2], &t[3]))
                })
            },
        },
        Case {
            name: "js_bound",
            instance: |rng| binary(rng, js_bound),
        },
        Case {
            name: "js_mi",
            instance: |rng| {
                let b = rng.gen_range(2..=5);
                let d = rng.gen_range(1..=3);
                let mut store = ParamStore::new();
                let scorer = JsScorer::new(&mut store, "js", d, 4, &mut seeded(rng));
                let xs = [uniform(rng, b, d), uniform(rng, b, d)];
                fd_check(rng, &store, &xs, &move |p, t| {
                    js_mi(p, &scorer, &t[0], &t[1])
                })
            },
        },
        Case {
            name: "loss_2d_recon",
            instance: |rng| {
                let n = rng.gen_range(2..=5);
                let cols = rng.gen_range(1..=4);
                let h = uniform(rng, n, cols);
                let mut a = Matrix::zeros(n, n);
                for (i, j) in random_graph(rng, n) {
                    a.set(i, j, 1.0);
                    a.set(j, i, 1.0);
                }
                for i in 0..n {
                    a.set(i, i, 1.0);
                }
                let a = Tensor::constant(&a);
                op(rng, &[h], move |t| loss_2d_recon(&t[0], &a))
            },
        },
        Case {
            name: "loss_3d_denoise",
            instance: |rng| {
                let n = rng.gen_range(1..=6);
                let batch: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
                let xs = [uniform(rng, n, 3), uniform(rng, n, 3)];
                op(rng, &xs, move |t| loss_3d_denoise(&t[0], &t[1], &batch))
            },
        },
        Case {
            name: "loss_2d_to_3d",
            instance: |rng| {
                let n = rng.gen_range(2..=4);
                let d = rng.gen_range(1..=3);
                let mut store = ParamStore::new();
                let head = DistanceHead::new(&mut store, "dist", d, 4, &mut seeded(rng));
                let mut dist = uniform(rng, n, n);
                dist.data.iter_mut().for_each(|x| *x = x.abs() + 0.5);
                let norm = if rng.gen_bool(0.5) {
                    PairNorm::N
                } else {
                    PairNorm::N2
                };
                let h = uniform(rng, n, d);
                fd_check(rng, &store, &[h], &move |p, t| {
                    loss_2d_to_3d(p, &head, &t[0], &dist, norm)
                })
            },
        },
        Case {
            name: "total_loss",
            instance: |rng| {
                let xs: Vec<Matrix> = (0..6).map(|_| uniform(rng, 1, 1)).collect();
                let cfg = LossConfig {
                    alpha: rng.gen_range(0.1..2.0),
                    beta: rng.gen_range(0.1..2.0),
                    ..LossConfig::default()
                };
                op(rng, &xs, move |t| {
                    let parts = LossParts {
                        skl: t[0].clone(),
                        jsmi: t[1].clone(),
                        l_2d: t[2].clone(),
                        l_3d: t[3].clone(),
                        l_2d_to_3d: t[4].clone(),
                        l_3d_to_2d: t[5].clone(),
                    };
                    Ok::<_, mvcib::Error>(total_loss(&parts, &cfg)?.0)
                })
            },
        },
        Case {
            name: "affinity",
            instance: |rng| {
                let (n, d) = dims(rng);
                let mut store = ParamStore::new();
                let mut params = AlignParams::new(&mut store, d, 3, 1.0, &mut seeded(rng));
                params.temperature = rng.gen_range(0.5..2.0);
                let xs = [uniform(rng, n, d), uniform(rng, n, d)];
                fd_check(rng, &store, &xs, &move |p, t| {
                    affinity(p, &params, &t[0], &t[1])
                })
            },
        },
        Case {
            name: "attend_2d_queries",
            instance: |rng| {
                let (n, d) = dims(rng);
                let xs = [uniform(rng, n, n), uniform(rng, n, d)];
                op(rng, &xs, |t| {
                    let (xi, out) = attend_2d_queries(&t[0], &t[1])?;
                    Ok::<_, mvcib::Error>(Tensor::concat_cols(&[xi, out])?)
                })
            },
        },
        Case {
            name: "attend_3d_queries",
            instance: |rng| {
                let (n, d) = dims(rng);
                let xs = [uniform(rng, n, n), uniform(rng, n, d)];
                op(rng, &xs, |t| {
                    let (zeta, out) = attend_3d_queries(&t[0], &t[1])?;
                    Ok::<_, mvcib::Error>(Tensor::concat_cols(&[zeta, out])?)
                })
            },
        },
        Case {
            name: "align",
            instance: |rng| {
                let (n, d) = dims(rng);
                let mut store = ParamStore::new();
                let params = AlignParams::new(&mut store, d, 3, 1.0, &mut seeded(rng));
                let xs = [uniform(rng, n, d), uniform(rng, n, d)];
                fd_check(rng, &store, &xs, &move |p, t| {
                    let out = align(p, &params, &t[0], &t[1])?;
                    Ok(Tensor::concat_cols(&[out.h2d_attended, out.h3d_attended])?)
                })
            },
        },
        Case {
            name: "linear",
            instance: |rng| {
                let (n, d) = dims(rng);
                let mut store = ParamStore::new();
                let lin = Linear::new(&mut store, "lin", d, 3, rng.gen_bool(0.5), &mut seeded(rng));
                let x = uniform(rng, n, d);
                fd_check(rng, &store, &[x], &move |p, t| lin.forward(p, &t[0]))
            },
        },
        Case {
            name: "readout_fuse",
            instance: |rng| binary(rng, |a, b| readout(&fuse(a, b)?)),
        },
        Case {
            name: "gin_forward",
            instance: |rng| {
                let n = rng.gen_range(2..=5);
                let batch = random_batch(rng, n);
                let mut store = ParamStore::new();
                let params = GinParams::new(&mut store, "gin", 3, 4, 2, &mut seeded(rng));
                let feats = uniform(rng, n, 3);
                fd_check(rng, &store, &[feats], &move |p, t| {
                    let h = gin_forward(p, &params, &batch, &t[0])?;
                    batch.readout(&h)
                })
            },
        },
        Case {
            name: "egnn_forward",
            instance: |rng| {
                let n = rng.gen_range(2..=5);
                let batch = random_batch(rng, n);
                let mut store = ParamStore::new();
                let params = EgnnParams::new(&mut store, "egnn", 3, 4, 2, &mut seeded(rng));
                let xs = [uniform(rng, n, 3), uniform(rng, n, 3)];
                fd_check(rng, &store, &xs, &move |p, t| {
                    let (h, x) = egnn_forward(p, &params, &batch, &t[0], &t[1])?;
                    Ok(Tensor::concat_cols(&[h, x])?)
                })
            },
        },
        Case {
            name: "posterior_head",
            instance: |rng| {
                let (b, d) = dims(rng);
                let mut store = ParamStore::new();
                let head = PosteriorHead::new(&mut store, "post", d, 3, &mut seeded(rng));
                let eps: Vec<f64> = uniform(rng, b, 3).data;
                let x = uniform(rng, b, d);
                fd_check(rng, &store, &[x], &move |p, t| {
                    let post = posterior_head(p, &head, &t[0], Some(&eps))?;
                    Ok(Tensor::concat_cols(&[post.sample, post.logvar])?)
                })
            },
        },
    ]
}
