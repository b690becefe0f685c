//! Compression bound, Jensen-Shannon MI estimator and the four reconstruction losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::{LatentPosterior, Linear};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Matrix, Tensor};
use crate::{Error, Result};

/// Divisor of the summed absolute distance error in [`loss_2d_to_3d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairNorm {
    /// Divide by the atom count.
    N,
    /// Divide by the number of ordered pairs, diagonal included.
    N2,
}

impl std::str::FromStr for PairNorm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "n" => Ok(PairNorm::N),
            "n2" => Ok(PairNorm::N2),
            _ => Err(format!("pair-norm must be n or n2, got {s}")),
        }
    }
}

impl std::fmt::Display for PairNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairNorm::N => "n",
            PairNorm::N2 => "n2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_noise: f64,
    pub pair_norm: PairNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            sigma_noise: 0.1,
            pair_norm: PairNorm::N2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.sigma_noise > 0.0 && self.sigma_noise.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_noise must be > 0, got {}",
                self.sigma_noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_mi: f64,
    pub l_skl: f64,
    pub l_jsmi: f64,
    pub l_2d: f64,
    pub l_3d: f64,
    pub l_2d_to_3d: f64,
    pub l_3d_to_2d: f64,
    pub total: f64,
}

impl LossReport {
    /// Builds a report whose `l_mi` and `total` follow the composition rule exactly.
    pub fn compose(
        l_skl: f64,
        l_jsmi: f64,
        l_2d: f64,
        l_3d: f64,
        l_2d_to_3d: f64,
        l_3d_to_2d: f64,
        cfg: &LossConfig,
    ) -> Self {
        let l_mi = compose_mi(l_skl, l_jsmi, cfg.alpha);
        LossReport {
            l_mi,
            l_skl,
            l_jsmi,
            l_2d,
            l_3d,
            l_2d_to_3d,
            l_3d_to_2d,
            total: compose_total(l_mi, l_2d, l_3d, l_2d_to_3d, l_3d_to_2d, cfg.beta),
        }
    }
}

pub fn compose_mi(l_skl: f64, l_jsmi: f64, alpha: f64) -> f64 {
    l_skl - alpha * l_jsmi
}

pub fn compose_total(
    l_mi: f64,
    l_2d: f64,
    l_3d: f64,
    l_2d_to_3d: f64,
    l_3d_to_2d: f64,
    beta: f64,
) -> f64 {
    l_mi + beta * (l_2d + l_3d + l_2d_to_3d + l_3d_to_2d)
}

/// Symmetrized KL between two diagonal Gaussian posteriors.
pub fn skl_term(p2d: &LatentPosterior, p3d: &LatentPosterior) -> Result<Tensor> {
    let a = Tensor::gaussian_kl(&p2d.mean, &p2d.logvar, &p3d.mean, &p3d.logvar)?;
    let b = Tensor::gaussian_kl(&p3d.mean, &p3d.logvar, &p2d.mean, &p2d.logvar)?;
    Ok(a.add(&b)?.scale(0.5))
}

/// Two-layer scorer `T(z2d, z3d)` on concatenated pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsScorer {
    pub l1: Linear,
    pub l2: Linear,
}

impl JsScorer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        latent: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        JsScorer {
            l1: Linear::new(store, &format!("{name}.l1"), 2 * latent, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, 1, true, rng),
        }
    }

    pub fn score(&self, p: &Bound, z2d: &Tensor, z3d: &Tensor) -> Result<Tensor> {
        let x = Tensor::concat_cols(&[z2d.clone(), z3d.clone()])?;
        self.l2.forward(p, &self.l1.forward(p, &x)?.relu())
    }
}

/// Jensen-Shannon MI estimate with shift-by-one in-batch negatives.
pub fn js_mi(p: &Bound, scorer: &JsScorer, z2d: &Tensor, z3d: &Tensor) -> Result<Tensor> {
    let b = z2d.rows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let shift: Vec<usize> = (0..b).map(|i| (i + 1) % b).collect();
    let pos = scorer.score(p, z2d, z3d)?;
    let neg = scorer.score(p, z2d, &z3d.gather_rows(&shift)?)?;
    js_bound(&pos, &neg)
}

/// `mean(-softplus(-pos)) - mean(softplus(neg))`.
pub fn js_bound(pos: &Tensor, neg: &Tensor) -> Result<Tensor> {
    let e_pos = pos.neg().softplus().neg().mean()?;
    let e_neg = neg.softplus().mean()?;
    Ok(e_pos.sub(&e_neg)?)
}

fn adjacency_recon(h: &Tensor, a: &Tensor) -> Result<Tensor> {
    let n = h.rows();
    let p = h.cosine_similarity();
    Ok(a.sub(&p)?.frobenius_sq().scale(1.0 / (n * n) as f64))
}

/// `||A - cos(H2D_bar)||_F^2 / N^2`.
pub fn loss_2d_recon(h2d_attended: &Tensor, a: &Tensor) -> Result<Tensor> {
    adjacency_recon(h2d_attended, a)
}

/// `||A - cos(H3D_bar)||_F^2 / N^2`.
pub fn loss_3d_to_2d(h3d_attended: &Tensor, a: &Tensor) -> Result<Tensor> {
    adjacency_recon(h3d_attended, a)
}

/// Sum over atoms of `1 - cos(eps, eps_hat)`, divided by the number of graphs in `batch_index`.
pub fn loss_3d_denoise(
    eps_true: &Tensor,
    eps_pred: &Tensor,
    batch_index: &[usize],
) -> Result<Tensor> {
    if batch_index.len() != eps_true.rows() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "loss_3d_denoise",
            lhs: eps_true.shape(),
            rhs: (batch_index.len(), 1),
        }
        .into());
    }
    let mut graphs: Vec<usize> = batch_index.to_vec();
    graphs.sort_unstable();
    graphs.dedup();
    let b = graphs.len().max(1) as f64;
    let cos = eps_true.row_cosine(eps_pred)?;
    Ok(cos.neg().add_scalar(1.0).sum().scale(1.0 / b))
}

/// Coordinates perturbed by `sigma * eps`, `eps ~ N(0, I)`, plus the drawn `eps`.
pub fn inject_noise(coords: &[[f64; 3]], sigma: f64, seed: u64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<[f64; 3]> = coords
        .iter()
        .map(|_| {
            [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ]
        })
        .collect();
    let noisy = coords
        .iter()
        .zip(&eps)
        .map(|(c, e)| {
            [
                c[0] + sigma * e[0],
                c[1] + sigma * e[1],
                c[2] + sigma * e[2],
            ]
        })
        .collect();
    (noisy, eps)
}

/// MLP `f` mapping a row difference of H2D_bar to a scalar distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl DistanceHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DistanceHead {
            l1: Linear::new(store, &format!("{name}.l1"), input, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, 1, true, rng),
        }
    }

    /// Predictions for all ordered pairs `(i, j)`, row-major, as an `N^2 x 1` column.
    pub fn predict_pairs(&self, p: &Bound, h: &Tensor) -> Result<Tensor> {
        let n = h.rows();
        let proj = h.matmul(p.t(self.l1.w))?;
        let ii: Vec<usize> = (0..n * n).map(|k| k / n).collect();
        let jj: Vec<usize> = (0..n * n).map(|k| k % n).collect();
        let mut pre = proj.gather_rows(&ii)?.sub(&proj.gather_rows(&jj)?)?;
        if let Some(b) = self.l1.b {
            pre = pre.add_row(p.t(b))?;
        }
        self.l2.forward(p, &pre.relu())
    }
}

/// `sum_ij |f(H_i - H_j) - D_ij|` over ordered pairs, divided per `norm`.
pub fn loss_2d_to_3d(
    p: &Bound,
    head: &DistanceHead,
    h2d_attended: &Tensor,
    dist: &Matrix,
    norm: PairNorm,
) -> Result<Tensor> {
    let n = h2d_attended.rows();
    if dist.shape() != (n, n) {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "loss_2d_to_3d",
            lhs: h2d_attended.shape(),
            rhs: dist.shape(),
        }
        .into());
    }
    let pred = head.predict_pairs(p, h2d_attended)?;
    let target = Tensor::new(n * n, 1, dist.data.clone())?;
    let denom = match norm {
        PairNorm::N => n,
        PairNorm::N2 => n * n,
    } as f64;
    Ok(pred.sub(&target)?.abs().sum().scale(1.0 / denom))
}

/// Loss terms of one batch as autodiff scalars.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub skl: Tensor,
    pub jsmi: Tensor,
    pub l_2d: Tensor,
    pub l_3d: Tensor,
    pub l_2d_to_3d: Tensor,
    pub l_3d_to_2d: Tensor,
}

/// `L = (skl - alpha * jsmi) + beta * (l_2d + l_3d + l_2d_to_3d + l_3d_to_2d)`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<(Tensor, LossReport)> {
    let named = [
        ("l_skl", &parts.skl),
        ("l_jsmi", &parts.jsmi),
        ("l_2d", &parts.l_2d),
        ("l_3d", &parts.l_3d),
        ("l_2d_to_3d", &parts.l_2d_to_3d),
        ("l_3d_to_2d", &parts.l_3d_to_2d),
    ];
    for (name, t) in named {
        if t.shape() != (1, 1) || !t.item().is_finite() {
            return Err(Error::NonFiniteLoss(name.to_string()));
        }
    }
    let mi = parts.skl.sub(&parts.jsmi.scale(cfg.alpha))?;
    let recon = parts
        .l_2d
        .add(&parts.l_3d)?
        .add(&parts.l_2d_to_3d)?
        .add(&parts.l_3d_to_2d)?;
    let total = mi.add(&recon.scale(cfg.beta))?;
    let report = LossReport::compose(
        parts.skl.item(),
        parts.jsmi.item(),
        parts.l_2d.item(),
        parts.l_3d.item(),
        parts.l_2d_to_3d.item(),
        parts.l_3d_to_2d.item(),
        cfg,
    );
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss("total".into()));
    }
    Ok((total, report))
}
