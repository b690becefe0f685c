//! Downstream metrics, attention explanations, fidelity, JSD between embedding groups and
//! cross-view reconstruction.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{prepare_masked, MvcibModel, Prepared};
use crate::params::Bound;
use crate::tensor::Tensor;
use crate::trainer::DownstreamHead;
use crate::{Error, Result};

pub const JSD_SAMPLES: usize = 2048;
pub const JSD_SEED: u64 = 17;
const JSD_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    RocAuc,
    Rmse,
    Mae,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::RocAuc)
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rocauc" => Ok(MetricKind::RocAuc),
            "rmse" => Ok(MetricKind::Rmse),
            "mae" => Ok(MetricKind::Mae),
            _ => Err(format!("unknown metric {s}")),
        }
    }
}

pub fn metric(preds: &[f64], labels: &[f64], kind: MetricKind) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LabelMismatch(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::LabelMismatch("no predictions".into()));
    }
    let n = preds.len() as f64;
    Ok(match kind {
        MetricKind::RocAuc => roc_auc(preds, labels)?,
        MetricKind::Rmse => (preds
            .iter()
            .zip(labels)
            .map(|(p, y)| (p - y).powi(2))
            .sum::<f64>()
            / n)
            .sqrt(),
        MetricKind::Mae => {
            preds
                .iter()
                .zip(labels)
                .map(|(p, y)| (p - y).abs())
                .sum::<f64>()
                / n
        }
    })
}

/// Mann-Whitney rank statistic with average ranks for ties. Labels > 0.5 are positive.
fn roc_auc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && preds[idx[j + 1]] == preds[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as f64 * avg;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub id: String,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Indices of the top `ceil(N/2)` scores, ties to the lower index, returned ascending.
pub fn select_top_half(scores: &[f64]) -> Vec<usize> {
    let k = scores.len().div_ceil(2);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut sel = idx[..k].to_vec();
    sel.sort_unstable();
    sel
}

/// Node score = largest weight in the node's row of `xi` (its 2D-query attention over 3D keys).
pub fn attention_scores(model: &MvcibModel, p: &Bound, prep: &Prepared) -> Result<Vec<f64>> {
    let out = model.eval_forward(p, prep)?;
    let xi = out.attention.xi.to_matrix();
    Ok((0..prep.n)
        .map(|v| xi.row(v).iter().copied().fold(0.0, f64::max))
        .collect())
}

pub fn explain(model: &MvcibModel, p: &Bound, prep: &Prepared) -> Result<Explanation> {
    let scores = attention_scores(model, p, prep)?;
    Ok(Explanation {
        id: prep.id.clone(),
        selected: select_top_half(&scores),
        scores,
    })
}

/// Probability of the class predicted on the full molecule, for label column `task`.
fn predicted_class_prob(
    model: &MvcibModel,
    p: &Bound,
    head: &DownstreamHead,
    prep: &Prepared,
    task: usize,
    class: Option<bool>,
) -> Result<(bool, f64)> {
    let e = model.embed(p, prep)?;
    let prob = *head
        .predict(&e)?
        .get(task)
        .ok_or_else(|| Error::LabelMismatch(format!("head has no task {task}")))?;
    let c = class.unwrap_or(prob >= 0.5);
    Ok((c, if c { prob } else { 1.0 - prob }))
}

/// `(fid_minus, fid_plus)`: drop in predicted-class probability when keeping only the
/// explanation, and when removing it.
pub fn fidelity_pair(
    model: &MvcibModel,
    head: Option<&DownstreamHead>,
    prep: &Prepared,
    explanation: &Explanation,
    task: usize,
) -> Result<(f64, f64)> {
    let head = head.ok_or(Error::UntrainedModel)?;
    let p = model.store.bind_frozen();
    let (class, full) = predicted_class_prob(model, &p, head, prep, task, None)?;
    let mut in_sel = vec![false; prep.n];
    for &v in &explanation.selected {
        if v >= prep.n {
            return Err(Error::Config(format!(
                "explanation selects node {v} of {}",
                prep.n
            )));
        }
        in_sel[v] = true;
    }
    let variant = |keep: Vec<bool>| -> Result<f64> {
        if keep.iter().all(|&k| k) {
            return Ok(full);
        }
        let masked = prepare_masked(prep, &keep, &model.config)?;
        Ok(predicted_class_prob(model, &p, head, &masked, task, Some(class))?.1)
    };
    let keep_selected = variant(in_sel.clone())?;
    let keep_complement = variant(in_sel.iter().map(|&s| !s).collect())?;
    Ok((full - keep_selected, full - keep_complement))
}

/// Diagonal Gaussian fitted to a group of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    /// Maximum-likelihood fit with a small variance floor; needs two or more vectors.
    pub fn fit(xs: &[&[f64]], label: &str) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::SingletonGroup(label.to_string()));
        }
        let d = xs[0].len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(Error::LabelMismatch(format!(
                "ragged embeddings in group {label}"
            )));
        }
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n)
            .collect();
        let var = (0..d)
            .map(|j| xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n + JSD_VAR_FLOOR)
            .collect();
        Ok(DiagGaussian { mean, var })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((m, v), xi)| -0.5 * (ln2pi + v.ln() + (xi - m).powi(2) / v))
            .sum()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Monte-Carlo Jensen-Shannon divergence in nats, clipped to `[0, ln 2]`.
/// Both distributions reuse one set of standard-normal draws, so the estimate is symmetric.
pub fn jsd_gaussians(p: &DiagGaussian, q: &DiagGaussian, samples: usize, seed: u64) -> f64 {
    if p == q {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = p.mean.len();
    let half = |a: &DiagGaussian, b: &DiagGaussian, x: &[f64]| {
        let la = a.log_density(x);
        let lb = b.log_density(x);
        la - (log_add_exp(la, lb) - std::f64::consts::LN_2)
    };
    let (mut sp, mut sq) = (0.0, 0.0);
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    for _ in 0..samples {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[j] = p.mean[j] + p.var[j].sqrt() * z;
            y[j] = q.mean[j] + q.var[j].sqrt() * z;
        }
        sp += half(p, q, &x);
        sq += half(q, p, &y);
    }
    let n = samples.max(1) as f64;
    (0.5 * (sp / n) + 0.5 * (sq / n)).clamp(0.0, std::f64::consts::LN_2)
}

fn groups<'a>(embeds: &'a [(Vec<f64>, String)]) -> BTreeMap<&'a str, Vec<&'a [f64]>> {
    let mut g: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for (v, l) in embeds {
        g.entry(l.as_str()).or_default().push(v.as_slice());
    }
    g
}

/// Mean pairwise JSD between label groups of one view (higher separates better).
pub fn jsd_distinguish(embeds: &[(Vec<f64>, String)]) -> Result<f64> {
    let g = groups(embeds);
    if g.len() < 2 {
        return Err(Error::DegenerateLabels);
    }
    let fits: Vec<DiagGaussian> = g
        .iter()
        .map(|(l, xs)| DiagGaussian::fit(xs, l))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..fits.len() {
        for j in i + 1..fits.len() {
            total += jsd_gaussians(&fits[i], &fits[j], JSD_SAMPLES, JSD_SEED);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// JSD between the 2D-view and 3D-view embeddings of each label, averaged over labels
/// (lower aligns better).
pub fn jsd_align(view_2d: &[(Vec<f64>, String)], view_3d: &[(Vec<f64>, String)]) -> Result<f64> {
    let g2 = groups(view_2d);
    let g3 = groups(view_3d);
    if g2.keys().ne(g3.keys()) {
        return Err(Error::LabelMismatch(
            "views have different label sets".into(),
        ));
    }
    if g2.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    let mut total = 0.0;
    for (l, xs) in &g2 {
        let a = DiagGaussian::fit(xs, l)?;
        let b = DiagGaussian::fit(&g3[l], l)?;
        total += jsd_gaussians(&a, &b, JSD_SAMPLES, JSD_SEED);
    }
    Ok(total / g2.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JsdMode {
    Distinguish,
    Align,
}

/// `embeds` carries `(vector, label, view)`; `view` is `"2d"` or `"3d"`.
/// Distinguish mode averages over both views' group-pair JSDs when both are present.
pub fn jsd_groups(embeds: &[(Vec<f64>, String, String)], mode: JsdMode) -> Result<f64> {
    let split = |view: &str| -> Vec<(Vec<f64>, String)> {
        embeds
            .iter()
            .filter(|e| e.2 == view)
            .map(|e| (e.0.clone(), e.1.clone()))
            .collect()
    };
    let (a, b) = (split("2d"), split("3d"));
    match mode {
        JsdMode::Align => jsd_align(&a, &b),
        JsdMode::Distinguish => {
            let views: Vec<_> = [a, b].into_iter().filter(|v| !v.is_empty()).collect();
            if views.is_empty() {
                return Err(Error::DegenerateLabels);
            }
            let vals = views
                .iter()
                .map(|v| jsd_distinguish(v))
                .collect::<Result<Vec<_>>>()?;
            Ok(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Reconstruction errors with the best constant predictor of each target as baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconReport {
    /// Mean squared error of `cos(H3D_bar)` against `A + I`.
    pub mse_adj_from_3d: f64,
    pub mse_adj_baseline: f64,
    /// Mean squared error of the distance head on `H2D_bar` over ordered atom pairs.
    pub mse_dist_from_2d: f64,
    pub mse_dist_baseline: f64,
}

/// Evaluates both cross-view reconstructions on clean geometry with pre-trained weights.
pub fn cross_view_reconstruct(model: &MvcibModel, preps: &[Prepared]) -> Result<ReconReport> {
    if model.trained_epochs == 0 {
        return Err(Error::UntrainedModel);
    }
    if preps.is_empty() {
        return Err(Error::Config("no molecules to evaluate".into()));
    }
    let p = model.store.bind_frozen();
    let mut adj_targets = Vec::new();
    let mut adj_err = 0.0;
    let mut dist_targets = Vec::new();
    let mut dist_err = 0.0;
    for prep in preps {
        let out = model.eval_forward(&p, prep)?;
        let cos = out.attention.h3d_attended.cosine_similarity();
        for (c, a) in cos.data().iter().zip(&prep.adjacency.data) {
            adj_err += (c - a).powi(2);
            adj_targets.push(*a);
        }
        let pred: Tensor = model
            .dist_head
            .predict_pairs(&p, &out.attention.h2d_attended)?;
        for (d_hat, d) in pred.data().iter().zip(&prep.dist.data) {
            dist_err += (d_hat - d).powi(2);
            dist_targets.push(*d);
        }
    }
    let const_mse = |t: &[f64]| {
        let m = t.iter().sum::<f64>() / t.len() as f64;
        t.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64
    };
    Ok(ReconReport {
        mse_adj_from_3d: adj_err / adj_targets.len() as f64,
        mse_adj_baseline: const_mse(&adj_targets),
        mse_dist_from_2d: dist_err / dist_targets.len() as f64,
        mse_dist_baseline: const_mse(&dist_targets),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_basics() {
        assert_eq!(
            metric(
                &[0.1, 0.2, 0.8, 0.9],
                &[0.0, 0.0, 1.0, 1.0],
                MetricKind::RocAuc
            )
            .unwrap(),
            1.0
        );
        assert_eq!(
            metric(
                &[0.9, 0.8, 0.2, 0.1],
                &[0.0, 0.0, 1.0, 1.0],
                MetricKind::RocAuc
            )
            .unwrap(),
            0.0
        );
        assert_eq!(
            metric(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0], MetricKind::RocAuc).unwrap(),
            0.5
        );
        assert!(matches!(
            metric(&[0.1, 0.2], &[1.0, 1.0], MetricKind::RocAuc),
            Err(Error::DegenerateLabels)
        ));
    }

    #[test]
    fn auc_matches_pair_count() {
        // Pairs (pos, neg): 0.7>0.3, 0.7>0.5, 0.4>0.3, 0.4<0.5 -> 3/4.
        let p = [0.3, 0.7, 0.5, 0.4];
        let y = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(metric(&p, &y, MetricKind::RocAuc).unwrap(), 0.75);
    }

    #[test]
    fn regression_metrics() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(metric(&y, &y, MetricKind::Rmse).unwrap(), 0.0);
        assert_eq!(metric(&y, &y, MetricKind::Mae).unwrap(), 0.0);
        assert_eq!(
            metric(&[2.0, 2.0, 2.0], &y, MetricKind::Mae).unwrap(),
            2.0 / 3.0
        );
        assert!(
            (metric(&[2.0, 2.0, 2.0], &y, MetricKind::Rmse).unwrap() - (2.0f64 / 3.0).sqrt()).abs()
                < 1e-15
        );
    }

    #[test]
    fn top_half_selection() {
        assert_eq!(select_top_half(&[0.1, 0.9, 0.5, 0.5, 0.2]), vec![1, 2, 3]);
        assert_eq!(select_top_half(&[1.0, 1.0, 1.0, 1.0]), vec![0, 1]);
        assert_eq!(select_top_half(&[3.0]), vec![0]);
    }

    #[test]
    fn jsd_identical_symmetric_and_saturating() {
        let a = DiagGaussian {
            mean: vec![0.0, 1.0],
            var: vec![1.0, 2.0],
        };
        let b = DiagGaussian {
            mean: vec![0.5, 0.0],
            var: vec![1.5, 1.0],
        };
        assert_eq!(jsd_gaussians(&a, &a, JSD_SAMPLES, JSD_SEED), 0.0);
        assert_eq!(
            jsd_gaussians(&a, &b, JSD_SAMPLES, JSD_SEED),
            jsd_gaussians(&b, &a, JSD_SAMPLES, JSD_SEED)
        );
        let far_p = DiagGaussian {
            mean: vec![5.0],
            var: vec![1.0],
        };
        let far_q = DiagGaussian {
            mean: vec![-5.0],
            var: vec![1.0],
        };
        let j = jsd_gaussians(&far_p, &far_q, JSD_SAMPLES, JSD_SEED);
        assert!((j - std::f64::consts::LN_2).abs() < 0.01, "{j}");
    }

    #[test]
    fn singleton_group_is_rejected() {
        let e = vec![
            (vec![0.0], "a".to_string()),
            (vec![1.0], "b".to_string()),
            (vec![2.0], "b".to_string()),
        ];
        assert!(matches!(jsd_distinguish(&e), Err(Error::SingletonGroup(l)) if l == "a"));
    }
}
