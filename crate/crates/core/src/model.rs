//! The full two-view model: encoders, cross-view attention, Gaussian heads and loss heads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::align::{align, AlignParams, AttentionOutput};
use crate::encoders::{
    encode_view, posterior_head, readout, EgnnParams, GinParams, LatentPosterior, Linear,
    PosteriorHead, ViewEncoder, ViewGraphs, ViewOutput,
};
use crate::fragmenter::{brics_fragment, ego_network, radius_ball, FragmentSet};
use crate::losses::{
    inject_noise, js_mi, loss_2d_recon, loss_2d_to_3d, loss_3d_denoise, loss_3d_to_2d, skl_term,
    total_loss, DistanceHead, JsScorer, LossConfig, LossParts, LossReport,
};
use crate::molio::{
    distance_matrix, ensure_3d, featurize, featurize_with_chirality, Molecule, DEFAULT_CUTOFF,
    FEATURE_DIM,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Matrix, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseHeadKind {
    /// Linear map from per-atom 3D features to a 3-vector.
    Linear,
    /// EGNN coordinate displacement of the fragment pass.
    Equivariant,
}

impl std::str::FromStr for NoiseHeadKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(NoiseHeadKind::Linear),
            "equivariant" => Ok(NoiseHeadKind::Equivariant),
            _ => Err(format!("noise head must be linear or equivariant, got {s}")),
        }
    }
}

impl std::fmt::Display for NoiseHeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseHeadKind::Linear => "linear",
            NoiseHeadKind::Equivariant => "equivariant",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub latent: usize,
    pub depth: usize,
    pub k_hop: usize,
    pub cutoff: f64,
    pub temperature: f64,
    /// Adds the signed-volume column to 3D atom features.
    pub chirality: bool,
    pub noise_head: NoiseHeadKind,
    pub head_hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            latent: 16,
            depth: 4,
            k_hop: crate::fragmenter::DEFAULT_K_HOP,
            cutoff: DEFAULT_CUTOFF,
            temperature: 1.0,
            chirality: false,
            noise_head: NoiseHeadKind::Linear,
            head_hidden: 32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn in_dim_3d(&self) -> usize {
        FEATURE_DIM + self.chirality as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 || self.latent == 0 || self.head_hidden == 0 {
            return bad("widths must be positive");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return bad("cutoff must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    /// `key=value` lines, stored in checkpoints.
    pub fn to_meta(&self) -> String {
        format!(
            "hidden={}\nlatent={}\ndepth={}\nk_hop={}\ncutoff={}\ntemperature={}\nchirality={}\nnoise_head={}\nhead_hidden={}\ninit_seed={}\n",
            self.hidden,
            self.latent,
            self.depth,
            self.k_hop,
            self.cutoff,
            self.temperature,
            self.chirality,
            self.noise_head,
            self.head_hidden,
            self.init_seed
        )
    }

    pub fn from_meta(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad metadata line '{line}'")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field from text; returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {k}")))
        }
        match key {
            "hidden" => self.hidden = num(key, value)?,
            "latent" => self.latent = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "k_hop" => self.k_hop = num(key, value)?,
            "cutoff" => self.cutoff = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "chirality" => self.chirality = num(key, value)?,
            "noise_head" => self.noise_head = value.parse().map_err(Error::Config)?,
            "head_hidden" => self.head_hidden = num(key, value)?,
            "init_seed" => self.init_seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Everything about one molecule that does not depend on parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub n: usize,
    pub feats_2d: Matrix,
    pub feats_3d: Matrix,
    pub coords: Vec<[f64; 3]>,
    /// Binary bond adjacency with unit diagonal.
    pub adjacency: Matrix,
    pub dist: Matrix,
    pub fragments: FragmentSet,
    pub graphs_2d: ViewGraphs,
    pub graphs_3d: ViewGraphs,
    pub mol: Molecule,
}

/// Attaches synthetic coordinates if needed, then samples ego-nets, balls and fragments.
pub fn prepare(mol: &Molecule, cfg: &ModelConfig) -> Result<Prepared> {
    if mol.is_empty() {
        return Err(Error::Config(format!("molecule '{}' has no atoms", mol.id)));
    }
    let mut m = mol.clone();
    m.edges_3d = None;
    let m = ensure_3d(m, cfg.cutoff)?;
    let feats_2d = featurize(&m);
    let feats_3d = if cfg.chirality {
        featurize_with_chirality(&m)?
    } else {
        feats_2d.clone()
    };
    assemble(m, feats_2d, feats_3d, cfg)
}

/// Node removal by feature zeroing and dropping every 2D and 3D edge incident to a removed node.
/// Atom indices are unchanged.
pub fn prepare_masked(prep: &Prepared, keep: &[bool], cfg: &ModelConfig) -> Result<Prepared> {
    if keep.len() != prep.n {
        return Err(Error::Config(format!(
            "mask has {} entries for {} atoms",
            keep.len(),
            prep.n
        )));
    }
    let mut m = prep.mol.clone();
    m.bonds_2d.retain(|b| keep[b.a] && keep[b.b]);
    if let Some(e) = m.edges_3d.as_mut() {
        e.retain(|&(a, b)| keep[a] && keep[b]);
    }
    m.refresh_topology();
    let zero = |f: &Matrix| {
        let mut f = f.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                for c in 0..f.cols {
                    f.set(i, c, 0.0);
                }
            }
        }
        f
    };
    let feats_2d = zero(&prep.feats_2d);
    let feats_3d = zero(&prep.feats_3d);
    let mut out = assemble(m, feats_2d, feats_3d, cfg)?;
    out.dist = prep.dist.clone();
    Ok(out)
}

fn assemble(
    m: Molecule,
    feats_2d: Matrix,
    feats_3d: Matrix,
    cfg: &ModelConfig,
) -> Result<Prepared> {
    let n = m.len();
    let coords = m.coords()?.to_vec();
    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        adjacency.set(i, i, 1.0);
    }
    for b in &m.bonds_2d {
        adjacency.set(b.a, b.b, 1.0);
        adjacency.set(b.b, b.a, 1.0);
    }
    let dist = Matrix::from_rows(&distance_matrix(&m)?)?;
    let fragments = brics_fragment(&m);
    let ego: Vec<_> = (0..n)
        .map(|v| ego_network(&m, v, cfg.k_hop))
        .collect::<std::result::Result<_, _>>()?;
    let balls: Vec<_> = (0..n)
        .map(|v| radius_ball(&m, v, cfg.cutoff))
        .collect::<std::result::Result<_, _>>()?;
    let frag_3d = fragments.with_edges(m.edges_3d()?);
    let graphs_2d = ViewGraphs::new(&ego, &fragments.fragments, &fragments.assignment);
    let graphs_3d = ViewGraphs::new(&balls, &frag_3d.fragments, &fragments.assignment);
    Ok(Prepared {
        id: m.id.clone(),
        n,
        feats_2d,
        feats_3d,
        coords,
        adjacency,
        dist,
        fragments,
        graphs_2d,
        graphs_3d,
        mol: m,
    })
}

#[derive(Debug, Clone)]
pub struct MolOutput {
    pub view_2d: ViewOutput,
    pub view_3d: ViewOutput,
    pub attention: AttentionOutput,
    pub p2d: LatentPosterior,
    pub p3d: LatentPosterior,
    /// Predicted coordinate noise, `N x 3`.
    pub eps_pred: Tensor,
}

/// Per-molecule random draws for one training step.
#[derive(Debug, Clone)]
pub struct Draws {
    pub noisy_coords: Vec<[f64; 3]>,
    pub eps_noise: Vec<[f64; 3]>,
    pub eps_2d: Vec<f64>,
    pub eps_3d: Vec<f64>,
}

/// Mixes a base seed with two counters into an independent stream seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(17))
}

impl Draws {
    pub fn sample(prep: &Prepared, latent: usize, sigma: f64, stream: u64) -> Draws {
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let (noisy_coords, eps_noise) = inject_noise(&prep.coords, sigma, rng.next_u64());
        let mut gauss =
            |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let eps_2d = gauss(latent);
        let eps_3d = gauss(latent);
        Draws {
            noisy_coords,
            eps_noise,
            eps_2d,
            eps_3d,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MvcibModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub enc_2d: ViewEncoder,
    pub enc_3d: ViewEncoder,
    pub align: AlignParams,
    pub head_2d: PosteriorHead,
    pub head_3d: PosteriorHead,
    pub scorer: JsScorer,
    pub dist_head: DistanceHead,
    /// Present only for [`NoiseHeadKind::Linear`].
    pub noise_head: Option<Linear>,
    /// Pre-training epochs applied to these weights.
    pub trained_epochs: usize,
}

fn coords_tensor(c: &[[f64; 3]]) -> Result<Tensor> {
    Ok(Tensor::new(
        c.len(),
        3,
        c.iter().flatten().copied().collect(),
    )?)
}

impl MvcibModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let enc_2d = ViewEncoder::Gin(GinParams::new(
            &mut store,
            "gin",
            FEATURE_DIM,
            h,
            config.depth,
            &mut rng,
        ));
        let enc_3d = ViewEncoder::Egnn(EgnnParams::new(
            &mut store,
            "egnn",
            config.in_dim_3d(),
            h,
            config.depth,
            &mut rng,
        ));
        let align = AlignParams::new(&mut store, 2 * h, h, config.temperature, &mut rng);
        let head_2d = PosteriorHead::new(&mut store, "post2d", 2 * h, config.latent, &mut rng);
        let head_3d = PosteriorHead::new(&mut store, "post3d", 2 * h, config.latent, &mut rng);
        let scorer = JsScorer::new(
            &mut store,
            "jsmi",
            config.latent,
            config.head_hidden,
            &mut rng,
        );
        let dist_head = DistanceHead::new(&mut store, "dist", 2 * h, config.head_hidden, &mut rng);
        let noise_head = (config.noise_head == NoiseHeadKind::Linear)
            .then(|| Linear::new(&mut store, "noise", 2 * h, 3, true, &mut rng));
        Ok(MvcibModel {
            config,
            store,
            enc_2d,
            enc_3d,
            align,
            head_2d,
            head_3d,
            scorer,
            dist_head,
            noise_head,
            trained_epochs: 0,
        })
    }

    /// Rebuilds a model from checkpoint bytes.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = ParamStore::from_bytes(bytes)?;
        let config = ModelConfig::from_meta(&meta)?;
        let mut model = MvcibModel::new(config)?;
        model.store.assign_from(&store)?;
        model.trained_epochs = meta
            .lines()
            .find_map(|l| l.strip_prefix("trained_epochs="))
            .map(|v| v.trim().parse())
            .transpose()
            .map_err(|_| Error::Config("bad trained_epochs".into()))?
            .unwrap_or(0);
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let meta = format!(
            "{}trained_epochs={}\n",
            self.config.to_meta(),
            self.trained_epochs
        );
        self.store.to_bytes(&meta)
    }

    /// Forward pass on given coordinates; `reparam = None` selects evaluation mode.
    pub fn forward(
        &self,
        p: &Bound,
        prep: &Prepared,
        coords: &[[f64; 3]],
        reparam: Option<(&[f64], &[f64])>,
    ) -> Result<MolOutput> {
        let x2 = Tensor::constant(&prep.feats_2d);
        let x3 = Tensor::constant(&prep.feats_3d);
        let c = coords_tensor(coords)?;
        let view_2d = encode_view(p, &self.enc_2d, &prep.graphs_2d, &x2, None)?;
        let view_3d = encode_view(p, &self.enc_3d, &prep.graphs_3d, &x3, Some(&c))?;
        let attention = align(
            p,
            &self.align,
            &view_2d.embeddings.fused,
            &view_3d.embeddings.fused,
        )?;
        let g2 = readout(&attention.h2d_attended)?;
        let g3 = readout(&attention.h3d_attended)?;
        let p2d = posterior_head(p, &self.head_2d, &g2, reparam.map(|r| r.0))?;
        let p3d = posterior_head(p, &self.head_3d, &g3, reparam.map(|r| r.1))?;
        let eps_pred = match self.config.noise_head {
            NoiseHeadKind::Linear => self
                .noise_head
                .as_ref()
                .expect("linear noise head is built with the model")
                .forward(p, &view_3d.embeddings.fused)?,
            NoiseHeadKind::Equivariant => view_3d
                .coords
                .as_ref()
                .expect("EGNN view returns coordinates")
                .sub(&c)?,
        };
        Ok(MolOutput {
            view_2d,
            view_3d,
            attention,
            p2d,
            p3d,
            eps_pred,
        })
    }

    /// Batch objective: per-molecule terms averaged, JS-MI over the stacked samples.
    pub fn batch_objective(
        &self,
        p: &Bound,
        batch: &[(&Prepared, &Draws)],
        loss: &LossConfig,
    ) -> Result<(Tensor, LossReport)> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let inv = 1.0 / b as f64;
        let mut skl = Vec::with_capacity(b);
        let mut l2d = Vec::with_capacity(b);
        let mut l23 = Vec::with_capacity(b);
        let mut l32 = Vec::with_capacity(b);
        let mut z2 = Vec::with_capacity(b);
        let mut z3 = Vec::with_capacity(b);
        let mut eps_true = Vec::with_capacity(b);
        let mut eps_pred = Vec::with_capacity(b);
        let mut batch_index = Vec::new();
        for (bi, (prep, d)) in batch.iter().enumerate() {
            let out = self.forward(p, prep, &d.noisy_coords, Some((&d.eps_2d, &d.eps_3d)))?;
            let a = Tensor::constant(&prep.adjacency);
            skl.push(skl_term(&out.p2d, &out.p3d)?);
            l2d.push(loss_2d_recon(&out.attention.h2d_attended, &a)?);
            l23.push(loss_2d_to_3d(
                p,
                &self.dist_head,
                &out.attention.h2d_attended,
                &prep.dist,
                loss.pair_norm,
            )?);
            l32.push(loss_3d_to_2d(&out.attention.h3d_attended, &a)?);
            z2.push(out.p2d.sample.clone());
            z3.push(out.p3d.sample.clone());
            eps_true.push(coords_tensor(&d.eps_noise)?);
            eps_pred.push(out.eps_pred.clone());
            batch_index.extend(std::iter::repeat(bi).take(prep.n));
        }
        let mean =
            |v: &[Tensor]| -> Result<Tensor> { Ok(Tensor::concat_rows(v)?.sum().scale(inv)) };
        let jsmi = js_mi(
            p,
            &self.scorer,
            &Tensor::concat_rows(&z2)?,
            &Tensor::concat_rows(&z3)?,
        )?;
        let l3d = loss_3d_denoise(
            &Tensor::concat_rows(&eps_true)?,
            &Tensor::concat_rows(&eps_pred)?,
            &batch_index,
        )?;
        let parts = LossParts {
            skl: mean(&skl)?,
            jsmi,
            l_2d: mean(&l2d)?,
            l_3d: l3d,
            l_2d_to_3d: mean(&l23)?,
            l_3d_to_2d: mean(&l32)?,
        };
        total_loss(&parts, loss)
    }

    /// Parameters with no path to the objective under this config: with the linear noise
    /// head the final EGNN coordinate update is never read.
    pub fn idle_params(&self) -> Vec<String> {
        match (&self.enc_3d, self.config.noise_head) {
            (ViewEncoder::Egnn(e), NoiseHeadKind::Linear) => {
                let last = e.layers.last().expect("depth >= 1");
                let mut ids = vec![last.coord1.w, last.coord2.w];
                ids.extend(last.coord1.b);
                ids.into_iter()
                    .map(|id| self.store.name(id).to_string())
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    /// Evaluation-mode forward on clean coordinates.
    pub fn eval_forward(&self, p: &Bound, prep: &Prepared) -> Result<MolOutput> {
        self.forward(p, prep, &prep.coords, None)
    }

    /// `[mu_2D, mu_3D]` in evaluation mode.
    pub fn embed(&self, p: &Bound, prep: &Prepared) -> Result<Vec<f64>> {
        let out = self.eval_forward(p, prep)?;
        let mut v = out.p2d.mean.data().to_vec();
        v.extend_from_slice(out.p3d.mean.data());
        Ok(v)
    }

    /// Sum readout of the fused 2D node embeddings; uses no geometry.
    pub fn embed_2d_only(&self, p: &Bound, prep: &Prepared) -> Result<Vec<f64>> {
        let x2 = Tensor::constant(&prep.feats_2d);
        let v = encode_view(p, &self.enc_2d, &prep.graphs_2d, &x2, None)?;
        Ok(readout(&v.embeddings.fused)?.data().to_vec())
    }
}
