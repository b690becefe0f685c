//! GIN and EGNN message passing over batched subgraphs, readouts, FUSE and Gaussian heads.

use rand_chacha::ChaCha8Rng;

use crate::fragmenter::Subgraph;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::Result;

pub const LOGVAR_CLAMP: f64 = 8.0;

/// `x · W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.uniform(&format!("{name}.w"), input, output, rng);
        let b = bias.then(|| store.uniform_fan(&format!("{name}.b"), 1, output, input, rng));
        Linear {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(p.t(self.w))?;
        Ok(match self.b {
            Some(b) => y.add_row(p.t(b))?,
            None => y,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer {
    pub mlp1: Linear,
    pub mlp2: Linear,
    /// Learnable `1 x 1` self-weight offset.
    pub eps: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinParams {
    pub layers: Vec<GinLayer>,
    pub depth: usize,
    pub width: usize,
    pub in_dim: usize,
}

impl GinParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(depth >= 1, "GIN depth must be at least 1");
        let layers = (0..depth)
            .map(|l| {
                let d = if l == 0 { in_dim } else { width };
                GinLayer {
                    mlp1: Linear::new(store, &format!("{name}.{l}.mlp1"), d, width, true, rng),
                    mlp2: Linear::new(store, &format!("{name}.{l}.mlp2"), width, width, true, rng),
                    eps: store.zeros(&format!("{name}.{l}.eps"), 1, 1),
                }
            })
            .collect();
        GinParams {
            layers,
            depth,
            width,
            in_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgnnLayer {
    pub edge1: Linear,
    pub edge2: Linear,
    pub coord1: Linear,
    pub coord2: Linear,
    pub node1: Linear,
    pub node2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgnnParams {
    pub input: Linear,
    pub layers: Vec<EgnnLayer>,
    pub depth: usize,
    pub width: usize,
    pub in_dim: usize,
}

impl EgnnParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(depth >= 1, "EGNN depth must be at least 1");
        let input = Linear::new(store, &format!("{name}.in"), in_dim, width, true, rng);
        let h = width;
        let layers = (0..depth)
            .map(|l| {
                let n = |s: &str| format!("{name}.{l}.{s}");
                EgnnLayer {
                    edge1: Linear::new(store, &n("edge1"), 2 * h + 1, h, true, rng),
                    edge2: Linear::new(store, &n("edge2"), h, h, true, rng),
                    coord1: Linear::new(store, &n("coord1"), h, h, true, rng),
                    coord2: Linear::new(store, &n("coord2"), h, 1, false, rng),
                    node1: Linear::new(store, &n("node1"), 2 * h, h, true, rng),
                    node2: Linear::new(store, &n("node2"), h, h, true, rng),
                }
            })
            .collect();
        EgnnParams {
            input,
            layers,
            depth,
            width,
            in_dim,
        }
    }
}

/// Disjoint union of subgraphs: every subgraph gets its own copy of each of its nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphBatch {
    /// Parent node of each copy.
    pub copies: Vec<usize>,
    /// Subgraph index of each copy.
    pub owner: Vec<usize>,
    /// Directed copy-level edges (both directions of each undirected edge).
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// `1 / (deg + 1)` per copy.
    pub inv_deg: Vec<f64>,
    pub n_subgraphs: usize,
}

impl SubgraphBatch {
    pub fn new(subs: &[Subgraph]) -> Self {
        let mut b = SubgraphBatch {
            copies: Vec::new(),
            owner: Vec::new(),
            edge_src: Vec::new(),
            edge_dst: Vec::new(),
            inv_deg: Vec::new(),
            n_subgraphs: subs.len(),
        };
        for (si, s) in subs.iter().enumerate() {
            let base = b.copies.len();
            b.copies.extend_from_slice(&s.nodes);
            b.owner.extend(std::iter::repeat(si).take(s.nodes.len()));
            let local = |v: usize| base + s.nodes.binary_search(&v).expect("edge inside subgraph");
            for &(u, v) in &s.edges {
                let (lu, lv) = (local(u), local(v));
                b.edge_src.extend([lu, lv]);
                b.edge_dst.extend([lv, lu]);
            }
        }
        let mut deg = vec![0usize; b.copies.len()];
        for &d in &b.edge_dst {
            deg[d] += 1;
        }
        b.inv_deg = deg.iter().map(|&d| 1.0 / (d as f64 + 1.0)).collect();
        b
    }

    pub fn len(&self) -> usize {
        self.copies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.copies.is_empty()
    }

    /// Sum of incoming neighbor rows for every copy.
    fn aggregate(&self, h: &Tensor) -> Result<Tensor> {
        if self.edge_src.is_empty() {
            return Ok(Tensor::zeros(self.len(), h.cols()));
        }
        Ok(h.gather_rows(&self.edge_src)?
            .segment_sum(&self.edge_dst, self.len())?)
    }

    /// Per-subgraph sum readout, `n_subgraphs x cols`.
    pub fn readout(&self, h: &Tensor) -> Result<Tensor> {
        Ok(h.segment_sum(&self.owner, self.n_subgraphs)?)
    }
}

/// GIN over every copy in `batch`; `feats` holds one row per parent node.
pub fn gin_forward(
    p: &Bound,
    params: &GinParams,
    batch: &SubgraphBatch,
    feats: &Tensor,
) -> Result<Tensor> {
    if feats.cols() != params.in_dim {
        return Err(TensorError::ShapeMismatch {
            op: "gin_forward",
            lhs: feats.shape(),
            rhs: (feats.rows(), params.in_dim),
        }
        .into());
    }
    let mut h = feats.gather_rows(&batch.copies)?;
    for (l, layer) in params.layers.iter().enumerate() {
        let agg = batch.aggregate(&h)?;
        let pre = h.add(&h.scale_by(p.t(layer.eps))?)?.add(&agg)?;
        let hidden = layer.mlp1.forward(p, &pre)?.relu();
        h = layer.mlp2.forward(p, &hidden)?;
        if l + 1 < params.layers.len() {
            h = h.relu();
        }
    }
    Ok(h)
}

/// EGNN over every copy; returns invariant scalar features and equivariant coordinates per copy.
pub fn egnn_forward(
    p: &Bound,
    params: &EgnnParams,
    batch: &SubgraphBatch,
    feats: &Tensor,
    coords: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if feats.cols() != params.in_dim || coords.cols() != 3 || coords.rows() != feats.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "egnn_forward",
            lhs: feats.shape(),
            rhs: coords.shape(),
        }
        .into());
    }
    let c = batch.len();
    let mut h = params
        .input
        .forward(p, &feats.gather_rows(&batch.copies)?)?;
    let mut x = coords.gather_rows(&batch.copies)?;
    if batch.edge_src.is_empty() {
        for layer in &params.layers {
            let m = Tensor::zeros(c, params.width);
            let upd = layer.node2.forward(
                p,
                &layer
                    .node1
                    .forward(p, &Tensor::concat_cols(&[h.clone(), m])?)?
                    .silu(),
            )?;
            h = h.add(&upd)?;
        }
        return Ok((h, x));
    }
    let inv_deg = Tensor::new(c, 1, batch.inv_deg.clone())?;
    for layer in &params.layers {
        let hi = h.gather_rows(&batch.edge_dst)?;
        let hj = h.gather_rows(&batch.edge_src)?;
        let diff = x
            .gather_rows(&batch.edge_dst)?
            .sub(&x.gather_rows(&batch.edge_src)?)?;
        let d2 = diff.square().row_sum();
        let e_in = Tensor::concat_cols(&[hi, hj, d2])?;
        let m = layer
            .edge2
            .forward(p, &layer.edge1.forward(p, &e_in)?.silu())?
            .silu();
        let w = layer
            .coord2
            .forward(p, &layer.coord1.forward(p, &m)?.silu())?;
        let shift = diff
            .mul_col(&w)?
            .segment_sum(&batch.edge_dst, c)?
            .mul_col(&inv_deg)?;
        x = x.add(&shift)?;
        let agg = m.segment_sum(&batch.edge_dst, c)?;
        let upd = layer.node2.forward(
            p,
            &layer
                .node1
                .forward(p, &Tensor::concat_cols(&[h.clone(), agg])?)?
                .silu(),
        )?;
        h = h.add(&upd)?;
    }
    Ok((h, x))
}

/// Column-wise sum of node rows.
pub fn readout(node_embeds: &Tensor) -> Result<Tensor> {
    if node_embeds.rows() == 0 {
        return Err(TensorError::EmptyInput("readout").into());
    }
    Ok(node_embeds.sum_rows()?)
}

/// Concatenation, context first.
pub fn fuse(context: &Tensor, semantics: &Tensor) -> Result<Tensor> {
    if context.shape() != semantics.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "fuse",
            lhs: context.shape(),
            rhs: semantics.shape(),
        }
        .into());
    }
    Ok(Tensor::concat_cols(&[context.clone(), semantics.clone()])?)
}

#[derive(Debug, Clone)]
pub struct NodeEmbeddings {
    pub context: Tensor,
    pub semantics: Tensor,
    pub fused: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViewEncoder {
    Gin(GinParams),
    Egnn(EgnnParams),
}

impl ViewEncoder {
    pub fn width(&self) -> usize {
        match self {
            ViewEncoder::Gin(g) => g.width,
            ViewEncoder::Egnn(e) => e.width,
        }
    }
}

/// Contextual subgraphs (one per node, in node order) and fragments of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraphs {
    pub n_nodes: usize,
    pub assignment: Vec<usize>,
    pub n_fragments: usize,
    pub batch: SubgraphBatch,
    /// Copy index of each node inside its fragment.
    pub fragment_copy: Vec<usize>,
}

impl ViewGraphs {
    pub fn new(contexts: &[Subgraph], fragments: &[Subgraph], assignment: &[usize]) -> Self {
        let n = contexts.len();
        assert_eq!(assignment.len(), n, "one context subgraph per node");
        let mut all = contexts.to_vec();
        all.extend_from_slice(fragments);
        let batch = SubgraphBatch::new(&all);
        let mut fragment_copy = vec![usize::MAX; n];
        for (ci, (&v, &o)) in batch.copies.iter().zip(&batch.owner).enumerate() {
            if o >= n {
                fragment_copy[v] = ci;
            }
        }
        assert!(
            fragment_copy.iter().all(|&c| c != usize::MAX),
            "fragments cover all nodes"
        );
        ViewGraphs {
            n_nodes: n,
            assignment: assignment.to_vec(),
            n_fragments: fragments.len(),
            batch,
            fragment_copy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViewOutput {
    pub embeddings: NodeEmbeddings,
    /// EGNN coordinates per node from the fragment pass (3D view only).
    pub coords: Option<Tensor>,
}

/// Per node: context = readout of its contextual subgraph, semantics = readout of its fragment.
pub fn encode_view(
    p: &Bound,
    encoder: &ViewEncoder,
    graphs: &ViewGraphs,
    feats: &Tensor,
    coords: Option<&Tensor>,
) -> Result<ViewOutput> {
    let (h, x) = match encoder {
        ViewEncoder::Gin(g) => (gin_forward(p, g, &graphs.batch, feats)?, None),
        ViewEncoder::Egnn(e) => {
            let c = coords.ok_or(crate::molio::MolError::MissingCoordinates)?;
            let (h, x) = egnn_forward(p, e, &graphs.batch, feats, c)?;
            (h, Some(x))
        }
    };
    let r = graphs.batch.readout(&h)?;
    let n = graphs.n_nodes;
    let context = r.gather_rows(&(0..n).collect::<Vec<_>>())?;
    let sem_idx: Vec<usize> = graphs.assignment.iter().map(|&f| n + f).collect();
    let semantics = r.gather_rows(&sem_idx)?;
    let fused = fuse(&context, &semantics)?;
    let coords = match x {
        Some(x) => Some(x.gather_rows(&graphs.fragment_copy)?),
        None => None,
    };
    Ok(ViewOutput {
        embeddings: NodeEmbeddings {
            context,
            semantics,
            fused,
        },
        coords,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorHead {
    pub mu: Linear,
    pub logvar: Linear,
}

impl PosteriorHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        latent: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        PosteriorHead {
            mu: Linear::new(store, &format!("{name}.mu"), input, latent, true, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), input, latent, true, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatentPosterior {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
    /// Standard-normal draw used for `sample`; `None` in evaluation mode.
    pub eps: Option<Vec<f64>>,
}

/// Diagonal Gaussian head; `eps = None` selects evaluation mode (`sample = mean`).
pub fn posterior_head(
    p: &Bound,
    head: &PosteriorHead,
    graph_embed: &Tensor,
    eps: Option<&[f64]>,
) -> Result<LatentPosterior> {
    let mean = head.mu.forward(p, graph_embed)?;
    let logvar = head
        .logvar
        .forward(p, graph_embed)?
        .clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
    let sample = match eps {
        Some(e) => {
            let e_t = Tensor::new(mean.rows(), mean.cols(), e.to_vec())?;
            mean.add(&logvar.scale(0.5).exp().mul(&e_t)?)?
        }
        None => mean.clone(),
    };
    Ok(LatentPosterior {
        mean,
        logvar,
        sample,
        eps: eps.map(<[f64]>::to_vec),
    })
}
