//! Two-branch model: pointwise feature extractors, dynamic anchor learning,
//! anchor back-mapping, attention-based local aggregation, multi-layer
//! stacking, max pooling and the classifier head.
//!
//! Weights are shared between branches; anchors are learned from the
//! augmented branch and mapped back to the original pose through the inverse
//! parameterized transform.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, VarId};
use crate::geometry::{
    compose_augment, farthest_point_sample, invert_param_transform, radius_neighbors, AnchorSet,
    GeometryError, NeighborhoodSet, NonParamTransform, ParamTransform, PointCloud,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub n_layers: usize,
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub m_anchors: usize,
    pub n_classes: usize,
    /// Squared-distance neighborhood threshold.
    pub radius_sq: f64,
    pub leaky_slope: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            n_layers: 2,
            feat_dim: 32,
            hidden_dim: 32,
            attn_dim: 16,
            m_anchors: 32,
            n_classes: 4,
            radius_sq: 0.04,
            leaky_slope: 0.2,
        }
    }
}

/// All trainable weights, stored as named tensors so checkpoints and the
/// optimizer can address them uniformly.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

impl ModelParams {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.feat_dim;
        let h = dims.hidden_dim;
        let da = dims.attn_dim;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let push = |names: &mut Vec<String>, tensors: &mut Vec<Tensor>, name: String, t: Tensor| {
            names.push(name);
            tensors.push(t);
        };
        for l in 1..=dims.n_layers {
            let in_dim = if l == 1 { 3 } else { 2 * d };
            push(&mut names, &mut tensors, format!("f{l}/w1"), xavier(&mut rng, in_dim, h));
            push(&mut names, &mut tensors, format!("f{l}/b1"), Tensor::zeros(1, h));
            push(&mut names, &mut tensors, format!("f{l}/w2"), xavier(&mut rng, h, d));
            push(&mut names, &mut tensors, format!("f{l}/b2"), Tensor::zeros(1, d));
        }
        for l in 1..=dims.n_layers {
            push(&mut names, &mut tensors, format!("g1/{l}/w1"), xavier(&mut rng, d, h));
            push(&mut names, &mut tensors, format!("g1/{l}/b1"), Tensor::zeros(1, h));
            push(&mut names, &mut tensors, format!("g1/{l}/w2"), xavier(&mut rng, h, dims.m_anchors));
            push(&mut names, &mut tensors, format!("g1/{l}/b2"), Tensor::zeros(1, dims.m_anchors));
            push(&mut names, &mut tensors, format!("g2/{l}/w1"), xavier(&mut rng, d, h));
            push(&mut names, &mut tensors, format!("g2/{l}/b1"), Tensor::zeros(1, h));
            // Small-scale output layer: anchors start near (not exactly at)
            // the FPS coordinates, so the refinement pathway carries
            // gradient from the first step instead of sitting at a
            // stationary point of the coverage term.
            let mut w2 = xavier(&mut rng, h, 3);
            for v in w2.data_mut() {
                *v *= 0.1;
            }
            push(&mut names, &mut tensors, format!("g2/{l}/w2"), w2);
            push(&mut names, &mut tensors, format!("g2/{l}/b2"), Tensor::zeros(1, 3));
        }
        for l in 1..=dims.n_layers {
            push(&mut names, &mut tensors, format!("attn/{l}/w"), xavier(&mut rng, d, da));
            push(&mut names, &mut tensors, format!("attn/{l}/a1"), xavier(&mut rng, da, 1));
            push(&mut names, &mut tensors, format!("attn/{l}/a2"), xavier(&mut rng, da, 1));
        }
        push(&mut names, &mut tensors, "head/w".into(), xavier(&mut rng, d, dims.n_classes));
        push(&mut names, &mut tensors, "head/b".into(), Tensor::zeros(1, dims.n_classes));
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            dims,
            names,
            tensors,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn lookup(&self, name: &str) -> Result<usize, NetworkError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NetworkError::UnknownParam(name.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn set_tensor(&mut self, name: &str, t: Tensor) -> Result<(), NetworkError> {
        let i = self.lookup(name)?;
        self.tensors[i] = t;
        Ok(())
    }

    /// Round every parameter through f32 precision (checkpoint boundary).
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            t.quantize_f32();
        }
    }

    /// Parameter-group label used by gradient-check reports: the leading
    /// path segment of the tensor name.
    pub fn group_of(name: &str) -> &str {
        name.split('/').next().unwrap_or(name)
    }
}

/// Per-branch, per-layer forward products of the two-branch pipeline.
pub struct ForwardOutputs {
    pub logits_orig: VarId,
    pub logits_aug: VarId,
    pub global_orig: VarId,
    pub global_aug: VarId,
    /// Aligned local features per layer: `(F, F~)`, both `M x D`.
    pub local_pairs: Vec<(VarId, VarId)>,
    /// Original-pose anchors per layer (`M x 3`, differentiable).
    pub anchors_orig: Vec<VarId>,
    /// Augmented-branch anchors per layer.
    pub anchors_aug: Vec<VarId>,
    /// Selection matrices per layer (augmented branch).
    pub s_vars: Vec<VarId>,
    /// Max deviation of any selection-matrix row sum from 1.
    pub s_row_err: f64,
    /// Max deviation of any anchor's attention-weight sum from 1.
    pub attn_sum_err: f64,
    pub aug_cloud: PointCloud,
}

pub struct SingleOutputs {
    pub logits: VarId,
    pub global_desc: VarId,
    pub s_row_err: f64,
    pub attn_sum_err: f64,
}

/// One forward execution over a tape. Parameters enter the tape as leaves
/// (trainable) or constants (evaluation).
pub struct ForwardPass<'a> {
    pub tape: &'a mut Tape,
    params: &'a ModelParams,
    vars: Vec<VarId>,
}

impl<'a> ForwardPass<'a> {
    pub fn new(
        tape: &'a mut Tape,
        params: &'a ModelParams,
        trainable: bool,
    ) -> Result<Self, NetworkError> {
        let mut vars = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let t = params.tensor(i).clone();
            let v = if trainable {
                tape.leaf(t)?
            } else {
                tape.constant(t)?
            };
            vars.push(v);
        }
        Ok(Self { tape, params, vars })
    }

    pub fn param_var(&self, name: &str) -> Result<VarId, NetworkError> {
        Ok(self.vars[self.params.lookup(name)?])
    }

    /// Leaf ids in parameter order; used to collect gradients after backward.
    pub fn param_vars(&self) -> &[VarId] {
        &self.vars
    }

    fn mlp2(&mut self, x: VarId, prefix: &str) -> Result<VarId, NetworkError> {
        let w1 = self.param_var(&format!("{prefix}/w1"))?;
        let b1 = self.param_var(&format!("{prefix}/b1"))?;
        let w2 = self.param_var(&format!("{prefix}/w2"))?;
        let b2 = self.param_var(&format!("{prefix}/b2"))?;
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_bias(h, b1)?;
        let h = self.tape.relu(h)?;
        let out = self.tape.matmul(h, w2)?;
        Ok(self.tape.add_bias(out, b2)?)
    }

    /// Shared pointwise extractor for layer `l`. Rows are processed
    /// independently, so the map is permutation equivariant by construction.
    pub fn extract_features(&mut self, layer: usize, x: VarId) -> Result<VarId, NetworkError> {
        self.mlp2(x, &format!("f{layer}"))
    }

    /// Anchor learning: `A~ = A0 + g2(S^T H)` with `S = row_softmax(g1(H))`.
    /// Returns the anchor var, the selection matrix var and the worst row-sum
    /// deviation of `S`.
    pub fn learn_anchors(
        &mut self,
        layer: usize,
        h: VarId,
        a0: &AnchorSet,
    ) -> Result<(VarId, VarId, f64), NetworkError> {
        let logits = self.mlp2(h, &format!("g1/{layer}"))?;
        let s = self.tape.softmax_rows(logits)?;
        let s_val = self.tape.value(s);
        let mut s_err = 0.0_f64;
        for i in 0..s_val.rows() {
            let sum: f64 = s_val.row(i).iter().sum();
            s_err = s_err.max((sum - 1.0).abs());
        }
        let pooled = self.tape.matmul_tn(s, h)?;
        let offset = self.mlp2(pooled, &format!("g2/{layer}"))?;
        let a0_var = self.tape.constant(Tensor::from_points(a0.anchors()))?;
        let anchors = self.tape.add(a0_var, offset)?;
        Ok((anchors, s, s_err))
    }

    /// Map augmented-branch anchors back to the original pose through the
    /// inverse parameterized transform.
    pub fn map_anchors_back(
        &mut self,
        anchors_aug: VarId,
        t1: &ParamTransform,
    ) -> Result<VarId, NetworkError> {
        let inv = invert_param_transform(t1)?;
        let neg_tr = self.tape.constant(Tensor::from_vec(
            1,
            3,
            t1.translation.iter().map(|v| -v).collect(),
        )?)?;
        let shifted = self.tape.add_bias(anchors_aug, neg_tr)?;
        let minv = self.tape.constant(Tensor::from_vec(
            3,
            3,
            inv.matrix.iter().flatten().copied().collect(),
        )?)?;
        Ok(self.tape.matmul(shifted, minv)?)
    }

    /// Single-head graph attention over each anchor's neighborhood, self term
    /// included. Returns the `M x D` aggregated features and the worst
    /// deviation of any anchor's attention-weight sum from 1.
    pub fn aggregate_local(
        &mut self,
        layer: usize,
        anchor_feats: VarId,
        point_feats: VarId,
        nbrs: &NeighborhoodSet,
    ) -> Result<(VarId, f64), NetworkError> {
        let slope = self.params.dims.leaky_slope;
        let w = self.param_var(&format!("attn/{layer}/w"))?;
        let a1 = self.param_var(&format!("attn/{layer}/a1"))?;
        let a2 = self.param_var(&format!("attn/{layer}/a2"))?;
        let wh = self.tape.matmul(point_feats, w)?;
        let wha = self.tape.matmul(anchor_feats, w)?;
        // e_{i,j} = LeakyReLU(a1 . W h^A_i + a2 . W h_j); the self edge uses
        // the anchor feature on both sides.
        let b = self.tape.matmul(wh, a2)?;
        let c = self.tape.matmul(wha, a1)?;
        let sb = self.tape.matmul(wha, a2)?;
        let m = nbrs.neighbors.len();
        let mut rows = Vec::with_capacity(m);
        let mut attn_err = 0.0_f64;
        for i in 0..m {
            let nbr = &nbrs.neighbors[i];
            let ci = self.tape.gather_rows(c, &[i])?;
            let si = self.tape.gather_rows(sb, &[i])?;
            let self_score = self.tape.add(si, ci)?;
            let bn = self.tape.gather_rows(b, nbr)?;
            let nbr_scores = self.tape.add_scalar(bn, ci)?;
            let scores = self.tape.concat_rows(&[self_score, nbr_scores])?;
            let scores = self.tape.leaky_relu(scores, slope)?;
            let row = self.tape.transpose(scores)?;
            let weights = self.tape.softmax_rows(row)?;
            let sum: f64 = self.tape.value(weights).data().iter().sum();
            attn_err = attn_err.max((sum - 1.0).abs());
            let hi = self.tape.gather_rows(anchor_feats, &[i])?;
            let hn = self.tape.gather_rows(point_feats, nbr)?;
            let feats = self.tape.concat_rows(&[hi, hn])?;
            rows.push(self.tape.matmul(weights, feats)?);
        }
        Ok((self.tape.concat_rows(&rows)?, attn_err))
    }

    /// Next-layer point features: each point concatenates the local feature of
    /// its nearest anchor, then the layer's shared extractor is applied.
    pub fn next_layer_features(
        &mut self,
        next_layer: usize,
        h: VarId,
        local: VarId,
        cloud: &PointCloud,
        anchors: &AnchorSet,
    ) -> Result<VarId, NetworkError> {
        let assign = nearest_anchor_assignment(cloud, anchors);
        let broadcast = self.tape.gather_rows(local, &assign)?;
        let cat = self.tape.concat_cols(&[h, broadcast])?;
        self.extract_features(next_layer, cat)
    }

    /// Coordinatewise max over points.
    pub fn global_descriptor(&mut self, h: VarId) -> Result<VarId, NetworkError> {
        Ok(self.tape.max_over_rows(h)?)
    }

    pub fn classify(&mut self, global_desc: VarId) -> Result<VarId, NetworkError> {
        let w = self.param_var("head/w")?;
        let b = self.param_var("head/b")?;
        let out = self.tape.matmul(global_desc, w)?;
        Ok(self.tape.add_bias(out, b)?)
    }
}

/// Nearest anchor index per point; ties break to the lowest anchor index.
pub fn nearest_anchor_assignment(cloud: &PointCloud, anchors: &AnchorSet) -> Vec<usize> {
    cloud
        .points()
        .iter()
        .map(|&p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &a) in anchors.anchors().iter().enumerate() {
                let dx = p[0] - a[0];
                let dy = p[1] - a[1];
                let dz = p[2] - a[2];
                let d = dx * dx + dy * dy + dz * dz;
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Options for a two-branch forward execution.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Ablation switch: use FPS coordinates directly as anchors, bypassing
    /// the anchor-learning module.
    pub no_anchor_learning: bool,
}

/// Initial anchor positions via farthest point sampling. The selection
/// width of the learned layers is fixed at `m`, so when the cloud has fewer
/// than `m` points the sampled set is cycled to pad out the full count.
fn initial_anchors(cloud: &PointCloud, m: usize) -> Result<AnchorSet, GeometryError> {
    let take = m.min(cloud.len());
    let fps = farthest_point_sample(cloud, take, 0)?;
    if take == m {
        return Ok(fps);
    }
    let mut pts = fps.anchors().to_vec();
    for k in take..m {
        pts.push(pts[k % take]);
    }
    Ok(AnchorSet::new(pts)?)
}

/// Execute the full two-branch pipeline over one cloud.
pub fn forward_two_branch(
    pass: &mut ForwardPass,
    cloud: &PointCloud,
    t1: &ParamTransform,
    t2: &NonParamTransform,
    opts: ForwardOptions,
) -> Result<ForwardOutputs, NetworkError> {
    let dims = pass.params.dims.clone();
    let aug_cloud = compose_augment(cloud, t1, t2)?;
    let a0 = initial_anchors(&aug_cloud, dims.m_anchors)?;
    let xo = pass.tape.constant(Tensor::from_points(cloud.points()))?;
    let xa = pass.tape.constant(Tensor::from_points(aug_cloud.points()))?;
    let mut ho = pass.extract_features(1, xo)?;
    let mut ha = pass.extract_features(1, xa)?;

    let mut local_pairs = Vec::with_capacity(dims.n_layers);
    let mut anchors_orig = Vec::with_capacity(dims.n_layers);
    let mut anchors_aug = Vec::with_capacity(dims.n_layers);
    let mut s_vars = Vec::new();
    let mut s_row_err = 0.0_f64;
    let mut attn_sum_err = 0.0_f64;

    for l in 1..=dims.n_layers {
        // Ablation: no anchor learning means plain FPS anchors on each
        // branch independently — no learned offsets and no mapping of the
        // augmented-branch anchors back through the inverse transform.
        let (a_aug_var, a_orig_var) = if opts.no_anchor_learning {
            let a0_orig = initial_anchors(cloud, dims.m_anchors)?;
            (
                pass.tape.constant(Tensor::from_points(a0.anchors()))?,
                pass.tape.constant(Tensor::from_points(a0_orig.anchors()))?,
            )
        } else {
            let (anchors, s, s_err) = pass.learn_anchors(l, ha, &a0)?;
            s_vars.push(s);
            s_row_err = s_row_err.max(s_err);
            (anchors, pass.map_anchors_back(anchors, t1)?)
        };
        let a_orig_set = AnchorSet::new(pass.tape.value(a_orig_var).to_points())?;
        let a_aug_set = AnchorSet::new(pass.tape.value(a_aug_var).to_points())?;
        let nbrs_o = radius_neighbors(&a_orig_set, cloud, dims.radius_sq)?;
        let nbrs_a = radius_neighbors(&a_aug_set, &aug_cloud, dims.radius_sq)?;
        let ha_o = pass.extract_features(1, a_orig_var)?;
        let ha_a = pass.extract_features(1, a_aug_var)?;
        let (f_o, e_o) = pass.aggregate_local(l, ha_o, ho, &nbrs_o)?;
        let (f_a, e_a) = pass.aggregate_local(l, ha_a, ha, &nbrs_a)?;
        attn_sum_err = attn_sum_err.max(e_o).max(e_a);
        local_pairs.push((f_o, f_a));
        anchors_orig.push(a_orig_var);
        anchors_aug.push(a_aug_var);
        if l < dims.n_layers {
            ho = pass.next_layer_features(l + 1, ho, f_o, cloud, &a_orig_set)?;
            ha = pass.next_layer_features(l + 1, ha, f_a, &aug_cloud, &a_aug_set)?;
        }
    }

    let global_orig = pass.global_descriptor(ho)?;
    let global_aug = pass.global_descriptor(ha)?;
    let logits_orig = pass.classify(global_orig)?;
    let logits_aug = pass.classify(global_aug)?;
    Ok(ForwardOutputs {
        logits_orig,
        logits_aug,
        global_orig,
        global_aug,
        local_pairs,
        anchors_orig,
        anchors_aug,
        s_vars,
        s_row_err,
        attn_sum_err,
        aug_cloud,
    })
}

/// Single-branch forward used at inference: no augmentation is applied and
/// anchors are learned from the input cloud itself.
pub fn forward_single(
    pass: &mut ForwardPass,
    cloud: &PointCloud,
    opts: ForwardOptions,
) -> Result<SingleOutputs, NetworkError> {
    let dims = pass.params.dims.clone();
    let x = pass.tape.constant(Tensor::from_points(cloud.points()))?;
    let mut h = pass.extract_features(1, x)?;
    let a0 = initial_anchors(cloud, dims.m_anchors)?;
    let mut s_row_err = 0.0_f64;
    let mut attn_sum_err = 0.0_f64;
    for l in 1..=dims.n_layers {
        let a_var = if opts.no_anchor_learning {
            pass.tape.constant(Tensor::from_points(a0.anchors()))?
        } else {
            let (anchors, _, s_err) = pass.learn_anchors(l, h, &a0)?;
            s_row_err = s_row_err.max(s_err);
            anchors
        };
        let a_set = AnchorSet::new(pass.tape.value(a_var).to_points())?;
        let nbrs = radius_neighbors(&a_set, cloud, dims.radius_sq)?;
        let ha = pass.extract_features(1, a_var)?;
        let (f, e) = pass.aggregate_local(l, ha, h, &nbrs)?;
        attn_sum_err = attn_sum_err.max(e);
        if l < dims.n_layers {
            h = pass.next_layer_features(l + 1, h, f, cloud, &a_set)?;
        }
    }
    let global_desc = pass.global_descriptor(h)?;
    let logits = pass.classify(global_desc)?;
    Ok(SingleOutputs {
        logits,
        global_desc,
        s_row_err,
        attn_sum_err,
    })
}

/// Argmax with ties broken to the lowest index.
pub fn predicted_class(logits: &Tensor) -> usize {
    let row = logits.row(0);
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
