//! Two-modality classification models: per-modality MLP encoders, a fusion
//! head (late-linear, mid-MLP, FiLM or gated), optional unimodal classifier
//! heads, the multi-loss objective, and exact reverse-mode gradients.
//!
//! Modality indices are fixed throughout the crate: 0 = v, 1 = a. Feature
//! concatenation order is always `[phi_v, phi_a]`.

use crate::error::{Error, Result};
use crate::matrix::{dense_forward, relu, relu_mask, sigmoid, softmax_ce, Matrix};
use crate::param::{GroupTag, ParamGroup};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

pub const MODALITIES: usize = 2;
pub const V: usize = 0;
pub const A: usize = 1;

/// Fusion head variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    LateLinear,
    MidMlp,
    Film,
    Gated,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::LateLinear, Fusion::MidMlp, Fusion::Film, Fusion::Gated];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::LateLinear => "late_linear",
            Fusion::MidMlp => "mid_mlp",
            Fusion::Film => "film",
            Fusion::Gated => "gated",
        }
    }
}

/// Which modality conditions the other in FiLM fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilmDirection {
    AConditionsV,
    VConditionsA,
}

fn default_film_direction() -> FilmDirection {
    FilmDirection::AConditionsV
}

fn default_heads() -> bool {
    true
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input feature counts per modality.
    pub f_v: usize,
    pub f_a: usize,
    /// Encoder output widths per modality.
    pub phi_v: usize,
    pub phi_a: usize,
    /// Number of dense+ReLU blocks per encoder.
    pub encoder_depth: usize,
    /// Width of encoder hidden layers (depth >= 2); defaults to the
    /// modality's output width.
    #[serde(default)]
    pub encoder_hidden: Option<usize>,
    /// Hidden width of the mid-MLP fusion head.
    pub phi_h: usize,
    /// Class count.
    pub classes: usize,
    pub fusion: Fusion,
    /// Attach one dense classifier head per modality.
    #[serde(default = "default_heads")]
    pub heads: bool,
    #[serde(default = "default_film_direction")]
    pub film_direction: FilmDirection,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("f_v", self.f_v),
            ("f_a", self.f_a),
            ("phi_v", self.phi_v),
            ("phi_a", self.phi_a),
            ("encoder_depth", self.encoder_depth),
            ("phi_h", self.phi_h),
        ];
        for (name, w) in widths {
            if w < 1 {
                return Err(Error::Config(format!("model.{name} must be >= 1, got {w}")));
            }
        }
        if let Some(h) = self.encoder_hidden {
            if h < 1 {
                return Err(Error::Config("model.encoder_hidden must be >= 1".into()));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "model.classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.fusion == Fusion::Gated && self.phi_v != self.phi_a {
            return Err(Error::Config(format!(
                "gated fusion requires phi_v == phi_a, got {} and {}",
                self.phi_v, self.phi_a
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self, modality: usize) -> usize {
        if modality == V {
            self.f_v
        } else {
            self.f_a
        }
    }

    pub fn feature_dim(&self, modality: usize) -> usize {
        if modality == V {
            self.phi_v
        } else {
            self.phi_a
        }
    }

    /// (in, out) widths of each encoder layer for a modality.
    pub fn encoder_layer_dims(&self, modality: usize) -> Vec<(usize, usize)> {
        let f = self.input_dim(modality);
        let phi = self.feature_dim(modality);
        let hidden = self.encoder_hidden.unwrap_or(phi);
        let d = self.encoder_depth;
        let mut dims = Vec::with_capacity(d);
        for l in 0..d {
            let inp = if l == 0 { f } else { hidden };
            let out = if l == d - 1 { phi } else { hidden };
            dims.push((inp, out));
        }
        dims
    }
}

/// All parameter groups of one model in a fixed order:
/// encoder_v, encoder_a, fusion, then (with heads) head_v, head_a.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub groups: Vec<ParamGroup>,
}

const GROUP_FUSION: usize = 2;

impl ModelParams {
    pub fn encoder(&self, modality: usize) -> &ParamGroup {
        &self.groups[modality]
    }

    pub fn encoder_mut(&mut self, modality: usize) -> &mut ParamGroup {
        &mut self.groups[modality]
    }

    pub fn fusion(&self) -> &ParamGroup {
        &self.groups[GROUP_FUSION]
    }

    pub fn fusion_mut(&mut self) -> &mut ParamGroup {
        &mut self.groups[GROUP_FUSION]
    }

    pub fn head(&self, modality: usize) -> Option<&ParamGroup> {
        self.groups.get(GROUP_FUSION + 1 + modality)
    }

    pub fn head_mut(&mut self, modality: usize) -> Option<&mut ParamGroup> {
        self.groups.get_mut(GROUP_FUSION + 1 + modality)
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(|g| g.num_params()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.groups {
            g.zero_grads();
        }
    }
}

fn he_uniform(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let bound = (6.0 / cols as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.uniform(-bound, bound);
    }
    m
}

fn linear_uniform(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let bound = (1.0 / cols as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.uniform(-bound, bound);
    }
    m
}

/// Initialize all parameters. He-uniform for layers adjacent to a ReLU,
/// uniform +-sqrt(1/fan_in) for linear output layers; biases start at zero.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> Result<ModelParams> {
    spec.validate()?;
    let mut groups = Vec::new();
    for (m, name) in [(V, "encoder_v"), (A, "encoder_a")] {
        let mut tensors = Vec::new();
        for (inp, out) in spec.encoder_layer_dims(m) {
            tensors.push(he_uniform(out, inp, rng));
            tensors.push(Matrix::zeros(1, out));
        }
        groups.push(ParamGroup::new(name, tensors, GroupTag::Encoder(m)));
    }
    let c = spec.classes;
    let concat = spec.phi_v + spec.phi_a;
    let fusion_tensors = match spec.fusion {
        Fusion::LateLinear => vec![linear_uniform(c, concat, rng), Matrix::zeros(1, c)],
        Fusion::MidMlp => vec![
            he_uniform(spec.phi_h, concat, rng),
            Matrix::zeros(1, spec.phi_h),
            linear_uniform(c, spec.phi_h, rng),
            Matrix::zeros(1, c),
        ],
        Fusion::Film => {
            let (target, source) = match spec.film_direction {
                FilmDirection::AConditionsV => (spec.phi_v, spec.phi_a),
                FilmDirection::VConditionsA => (spec.phi_a, spec.phi_v),
            };
            vec![
                linear_uniform(2 * target, source, rng),
                Matrix::zeros(1, 2 * target),
                linear_uniform(c, target, rng),
                Matrix::zeros(1, c),
            ]
        }
        Fusion::Gated => {
            let phi = spec.phi_v;
            vec![
                linear_uniform(phi, 2 * phi, rng),
                Matrix::zeros(1, phi),
                linear_uniform(c, phi, rng),
                Matrix::zeros(1, c),
            ]
        }
    };
    groups.push(ParamGroup::new("fusion", fusion_tensors, GroupTag::Fusion));
    if spec.heads {
        for (m, name) in [(V, "head_v"), (A, "head_a")] {
            let tensors = vec![
                linear_uniform(c, spec.feature_dim(m), rng),
                Matrix::zeros(1, c),
            ];
            groups.push(ParamGroup::new(name, tensors, GroupTag::Head(m)));
        }
    }
    Ok(ModelParams { groups })
}

// ---------------------------------------------------------------------------
// Standalone fusion operations
// ---------------------------------------------------------------------------

/// Late fusion: `logits = [phi_v, phi_a]·Wᵀ + b` with `W` of shape
/// C x (phi_v + phi_a); the first phi_v columns belong to modality v.
pub fn fuse_late_linear(
    phi_v: &Matrix,
    phi_a: &Matrix,
    w: &Matrix,
    b: &Matrix,
) -> Result<Matrix> {
    let concat = phi_v.concat_cols(phi_a)?;
    dense_forward(w, b, &concat)
}

/// Mid fusion: `logits = W2·relu(W1^v·phi_v + W1^a·phi_a + b1) + b2`,
/// computed over the concatenation `[phi_v, phi_a]`.
pub fn fuse_mid_mlp(
    phi_v: &Matrix,
    phi_a: &Matrix,
    w1: &Matrix,
    b1: &Matrix,
    w2: &Matrix,
    b2: &Matrix,
) -> Result<Matrix> {
    let concat = phi_v.concat_cols(phi_a)?;
    let hidden = relu(&dense_forward(w1, b1, &concat)?);
    dense_forward(w2, b2, &hidden)
}

/// FiLM fusion with a conditioning b: `(gamma, beta) = dense(phi_src)` split
/// in halves, `phi' = gamma ⊙ phi_tgt + beta`, `logits = dense(relu(phi'))`.
pub fn fuse_film(
    phi_tgt: &Matrix,
    phi_src: &Matrix,
    w_cond: &Matrix,
    b_cond: &Matrix,
    w_out: &Matrix,
    b_out: &Matrix,
) -> Result<Matrix> {
    let cond = dense_forward(w_cond, b_cond, phi_src)?;
    let (gamma, beta) = cond.split_cols(phi_tgt.cols())?;
    let mut modulated = gamma.hadamard(phi_tgt)?;
    modulated.add_assign(&beta)?;
    dense_forward(w_out, b_out, &relu(&modulated))
}

/// Gated fusion: `g = sigmoid(dense([phi_v, phi_a]))`,
/// `fused = g ⊙ phi_v + (1-g) ⊙ phi_a`, `logits = dense(fused)`.
/// Requires equal feature widths.
pub fn fuse_gated(
    phi_v: &Matrix,
    phi_a: &Matrix,
    w_gate: &Matrix,
    b_gate: &Matrix,
    w_out: &Matrix,
    b_out: &Matrix,
) -> Result<Matrix> {
    if phi_v.cols() != phi_a.cols() {
        return Err(Error::Config(format!(
            "gated fusion requires equal feature widths, got {} and {}",
            phi_v.cols(),
            phi_a.cols()
        )));
    }
    let concat = phi_v.concat_cols(phi_a)?;
    let gate = sigmoid(&dense_forward(w_gate, b_gate, &concat)?);
    let mut fused = gate.hadamard(phi_v)?;
    for r in 0..fused.rows() {
        for c in 0..fused.cols() {
            let g = gate.get(r, c);
            fused.set(r, c, fused.get(r, c) + (1.0 - g) * phi_a.get(r, c));
        }
    }
    dense_forward(w_out, b_out, &fused)
}

/// Cosine late fusion: `logits = s_cos · Σ_m (Ŵ_m · phî_m)` where both the
/// per-class weight rows and the feature vectors are L2-normalized per
/// modality; zero-norm vectors contribute zero. The bias of the late-linear
/// head is not used. Returns the logits and the cache needed for backward.
pub(crate) fn cosine_fusion(
    phi_v: &Matrix,
    phi_a: &Matrix,
    w: &Matrix,
    s_cos: f64,
) -> Result<(Matrix, CosineCache)> {
    let expect = phi_v.cols() + phi_a.cols();
    if w.cols() != expect {
        return Err(Error::dim(
            "cosine_fusion",
            format!(
                "W is {}x{} but features concatenate to width {expect}",
                w.rows(),
                w.cols()
            ),
        ));
    }
    let batch = phi_v.rows();
    let classes = w.rows();
    let mut logits = Matrix::zeros(batch, classes);
    let mut cache = CosineCache {
        s_cos,
        phi_hat: Vec::new(),
        phi_norm: Vec::new(),
        w_hat: Vec::new(),
        w_norm: Vec::new(),
    };
    for (m, phi) in [phi_v, phi_a].into_iter().enumerate() {
        let offset = if m == V { 0 } else { phi_v.cols() };
        let dim = phi.cols();
        let mut phi_hat = Matrix::zeros(batch, dim);
        let mut phi_norm = vec![0.0; batch];
        for r in 0..batch {
            let n = phi.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            phi_norm[r] = n;
            if n > 0.0 {
                for (dst, src) in phi_hat.row_mut(r).iter_mut().zip(phi.row(r)) {
                    *dst = src / n;
                }
            }
        }
        let mut w_hat = Matrix::zeros(classes, dim);
        let mut w_norm = vec![0.0; classes];
        for c in 0..classes {
            let block = &w.row(c)[offset..offset + dim];
            let n = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            w_norm[c] = n;
            if n > 0.0 {
                for (dst, src) in w_hat.row_mut(c).iter_mut().zip(block) {
                    *dst = src / n;
                }
            }
        }
        let contrib = phi_hat.matmul_bt(&w_hat)?;
        for r in 0..batch {
            for c in 0..classes {
                logits.set(r, c, logits.get(r, c) + s_cos * contrib.get(r, c));
            }
        }
        cache.phi_hat.push(phi_hat);
        cache.phi_norm.push(phi_norm);
        cache.w_hat.push(w_hat);
        cache.w_norm.push(w_norm);
    }
    Ok((logits, cache))
}

// ---------------------------------------------------------------------------
// Forward pass with cache
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub(crate) struct EncoderCache {
    /// Pre-activations per layer.
    pre: Vec<Matrix>,
    /// Post-ReLU activations per layer; the last is the feature matrix.
    act: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub(crate) struct CosineCache {
    s_cos: f64,
    phi_hat: Vec<Matrix>,
    phi_norm: Vec<Vec<f64>>,
    w_hat: Vec<Matrix>,
    w_norm: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub(crate) enum FusionCache {
    Late {
        concat: Matrix,
    },
    Cosine(CosineCache),
    Mid {
        concat: Matrix,
        pre: Matrix,
        hidden: Matrix,
    },
    Film {
        gamma: Matrix,
        modulated: Matrix,
        act: Matrix,
    },
    Gated {
        concat: Matrix,
        gate: Matrix,
        fused: Matrix,
    },
}

/// Output of one forward pass: multimodal logits, per-modality head logits
/// (when heads are on), the feature matrices, and the cache for backward.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub logits_mm: Matrix,
    pub logits_uni: Option<Vec<Matrix>>,
    pub features: Vec<Matrix>,
    pub(crate) encoders: Vec<EncoderCache>,
    pub(crate) fusion: FusionCache,
}

fn encode_cached(
    spec: &ModelSpec,
    group: &ParamGroup,
    modality: usize,
    x: &Matrix,
) -> Result<EncoderCache> {
    if x.cols() != spec.input_dim(modality) {
        return Err(Error::dim(
            "encode",
            format!(
                "input is {}x{} but modality {modality} expects width {}",
                x.rows(),
                x.cols(),
                spec.input_dim(modality)
            ),
        ));
    }
    let depth = spec.encoder_depth;
    let mut pre = Vec::with_capacity(depth);
    let mut act = Vec::with_capacity(depth);
    let mut cur = x;
    for l in 0..depth {
        let w = &group.tensors[2 * l];
        let b = &group.tensors[2 * l + 1];
        let p = dense_forward(w, b, cur)?;
        let a = relu(&p);
        pre.push(p);
        act.push(a);
        cur = act.last().expect("just pushed");
    }
    Ok(EncoderCache { pre, act })
}

/// Run one modality's encoder: `encoder_depth` dense+ReLU blocks.
pub fn encode(spec: &ModelSpec, params: &ModelParams, modality: usize, x: &Matrix) -> Result<Matrix> {
    let cache = encode_cached(spec, params.encoder(modality), modality, x)?;
    Ok(cache.act.last().expect("depth >= 1").clone())
}

/// Full forward pass. `cosine_scale` switches the late-linear head to the
/// normalized cosine form (feature and weight standardization).
pub fn forward(
    spec: &ModelSpec,
    params: &ModelParams,
    x_v: &Matrix,
    x_a: &Matrix,
    cosine_scale: Option<f64>,
) -> Result<ForwardOut> {
    if x_v.rows() != x_a.rows() {
        return Err(Error::dim(
            "forward",
            format!("batch sizes differ: {} vs {}", x_v.rows(), x_a.rows()),
        ));
    }
    if cosine_scale.is_some() && spec.fusion != Fusion::LateLinear {
        return Err(Error::Config(
            "cosine logits require late_linear fusion".into(),
        ));
    }
    let enc_v = encode_cached(spec, params.encoder(V), V, x_v)?;
    let enc_a = encode_cached(spec, params.encoder(A), A, x_a)?;
    let phi_v = enc_v.act.last().expect("depth >= 1").clone();
    let phi_a = enc_a.act.last().expect("depth >= 1").clone();

    let f = params.fusion();
    let (logits_mm, fusion) = match spec.fusion {
        Fusion::LateLinear => {
            if let Some(s_cos) = cosine_scale {
                let (logits, cache) = cosine_fusion(&phi_v, &phi_a, &f.tensors[0], s_cos)?;
                (logits, FusionCache::Cosine(cache))
            } else {
                let concat = phi_v.concat_cols(&phi_a)?;
                let logits = dense_forward(&f.tensors[0], &f.tensors[1], &concat)?;
                (logits, FusionCache::Late { concat })
            }
        }
        Fusion::MidMlp => {
            let concat = phi_v.concat_cols(&phi_a)?;
            let pre = dense_forward(&f.tensors[0], &f.tensors[1], &concat)?;
            let hidden = relu(&pre);
            let logits = dense_forward(&f.tensors[2], &f.tensors[3], &hidden)?;
            (logits, FusionCache::Mid { concat, pre, hidden })
        }
        Fusion::Film => {
            let (tgt, src) = match spec.film_direction {
                FilmDirection::AConditionsV => (&phi_v, &phi_a),
                FilmDirection::VConditionsA => (&phi_a, &phi_v),
            };
            let cond = dense_forward(&f.tensors[0], &f.tensors[1], src)?;
            let (gamma, beta) = cond.split_cols(tgt.cols())?;
            let mut modulated = gamma.hadamard(tgt)?;
            modulated.add_assign(&beta)?;
            let act = relu(&modulated);
            let logits = dense_forward(&f.tensors[2], &f.tensors[3], &act)?;
            (logits, FusionCache::Film { gamma, modulated, act })
        }
        Fusion::Gated => {
            let concat = phi_v.concat_cols(&phi_a)?;
            let gate = sigmoid(&dense_forward(&f.tensors[0], &f.tensors[1], &concat)?);
            let mut fused = gate.hadamard(&phi_v)?;
            for r in 0..fused.rows() {
                for c in 0..fused.cols() {
                    let g = gate.get(r, c);
                    fused.set(r, c, fused.get(r, c) + (1.0 - g) * phi_a.get(r, c));
                }
            }
            let logits = dense_forward(&f.tensors[2], &f.tensors[3], &fused)?;
            (logits, FusionCache::Gated { concat, gate, fused })
        }
    };

    let logits_uni = if spec.heads {
        let mut per = Vec::with_capacity(MODALITIES);
        for (m, phi) in [(&phi_v), (&phi_a)].into_iter().enumerate() {
            let head = params.head(m).expect("heads enabled");
            per.push(dense_forward(&head.tensors[0], &head.tensors[1], phi)?);
        }
        Some(per)
    } else {
        None
    };

    Ok(ForwardOut {
        logits_mm,
        logits_uni,
        features: vec![phi_v, phi_a],
        encoders: vec![enc_v, enc_a],
        fusion,
    })
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Which cross-entropy terms enter the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Single multimodal cross-entropy. Heads, when present, still train as
    /// detached probes: their gradients stop at the features.
    Joint,
    /// Multimodal cross-entropy plus one unweighted cross-entropy per
    /// unimodal head; head gradients flow into the encoders.
    MultiLoss,
}

/// Loss values and logit gradients of one forward pass.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// Value of the selected objective.
    pub total: f64,
    pub ce_mm: f64,
    /// Per-modality head cross-entropies; empty when heads are off.
    pub ce_uni: Vec<f64>,
    pub probs_mm: Matrix,
    pub(crate) dlogits_mm: Matrix,
    pub(crate) dlogits_uni: Vec<Matrix>,
}

/// Compute the multi-loss objective `L = CE_mm (+ Σ_i CE_uni_i)`.
pub fn multi_loss(fo: &ForwardOut, labels: &[usize], objective: Objective) -> Result<LossTerms> {
    let (ce_mm, dlogits_mm, probs_mm) = softmax_ce(&fo.logits_mm, labels)?;
    let mut ce_uni = Vec::new();
    let mut dlogits_uni = Vec::new();
    match &fo.logits_uni {
        Some(per) => {
            for logits in per {
                let (ce, dl, _) = softmax_ce(logits, labels)?;
                ce_uni.push(ce);
                dlogits_uni.push(dl);
            }
        }
        None => {
            if objective == Objective::MultiLoss {
                return Err(Error::Config(
                    "multi-loss objective requires unimodal heads".into(),
                ));
            }
        }
    }
    let total = match objective {
        Objective::Joint => ce_mm,
        Objective::MultiLoss => ce_mm + ce_uni.iter().sum::<f64>(),
    };
    Ok(LossTerms {
        total,
        ce_mm,
        ce_uni,
        probs_mm,
        dlogits_mm,
        dlogits_uni,
    })
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Backprop through one encoder given the gradient at its output features.
/// Accumulates into the group's gradient buffers.
pub(crate) fn encoder_backward(
    group: &mut ParamGroup,
    cache: &EncoderCache,
    x: &Matrix,
    dphi: &Matrix,
) -> Result<()> {
    let depth = cache.pre.len();
    let mut dact = dphi.clone();
    for l in (0..depth).rev() {
        let dpre = dact.hadamard(&relu_mask(&cache.pre[l]))?;
        let input = if l == 0 { x } else { &cache.act[l - 1] };
        group.grads[2 * l].add_assign(&dpre.matmul_at(input)?)?;
        group.grads[2 * l + 1].add_assign(&dpre.col_sum())?;
        if l > 0 {
            dact = dpre.matmul(&group.tensors[2 * l])?;
        }
    }
    Ok(())
}

/// Accumulate exact reverse-mode gradients of the selected objective into
/// every parameter group.
///
/// Encoders receive contributions from the multimodal path always, and from
/// their own head path only under [`Objective::MultiLoss`]. Heads, when
/// present, always receive the gradients of their own cross-entropy (the
/// multimodal term does not depend on them), so probes keep training even
/// under the joint objective.
pub fn backward(
    spec: &ModelSpec,
    params: &mut ModelParams,
    fo: &ForwardOut,
    x_v: &Matrix,
    x_a: &Matrix,
    terms: &LossTerms,
    objective: Objective,
) -> Result<()> {
    let dl = &terms.dlogits_mm;
    // Fusion head backward: parameter grads plus dphi per modality.
    let (mut dphi_v, mut dphi_a) = fusion_backward(spec, params, fo, dl)?;

    // Head paths.
    if fo.logits_uni.is_some() {
        for m in 0..MODALITIES {
            let phi = &fo.features[m];
            let dlu = &terms.dlogits_uni[m];
            let head = params.head_mut(m).expect("heads enabled");
            head.grads[0].add_assign(&dlu.matmul_at(phi)?)?;
            head.grads[1].add_assign(&dlu.col_sum())?;
            if objective == Objective::MultiLoss {
                let dphi_head = dlu.matmul(&head.tensors[0])?;
                if m == V {
                    dphi_v.add_assign(&dphi_head)?;
                } else {
                    dphi_a.add_assign(&dphi_head)?;
                }
            }
        }
    }

    encoder_backward(params.encoder_mut(V), &fo.encoders[V], x_v, &dphi_v)?;
    encoder_backward(params.encoder_mut(A), &fo.encoders[A], x_a, &dphi_a)?;
    Ok(())
}

/// Gradients of the fusion parameters plus the feature gradients
/// (dphi_v, dphi_a) induced by dlogits_mm.
fn fusion_backward(
    spec: &ModelSpec,
    params: &mut ModelParams,
    fo: &ForwardOut,
    dlogits: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let phi_v_cols = spec.phi_v;
    match &fo.fusion {
        FusionCache::Late { concat } => {
            let f = params.fusion_mut();
            f.grads[0].add_assign(&dlogits.matmul_at(concat)?)?;
            f.grads[1].add_assign(&dlogits.col_sum())?;
            let dconcat = dlogits.matmul(&f.tensors[0])?;
            let (dv, da) = dconcat.split_cols(phi_v_cols)?;
            Ok((dv, da))
        }
        FusionCache::Cosine(cache) => cosine_backward(spec, params, fo, cache, dlogits),
        FusionCache::Mid { concat, pre, hidden } => {
            let f = params.fusion_mut();
            f.grads[2].add_assign(&dlogits.matmul_at(hidden)?)?;
            f.grads[3].add_assign(&dlogits.col_sum())?;
            let dhidden = dlogits.matmul(&f.tensors[2])?;
            let dpre = dhidden.hadamard(&relu_mask(pre))?;
            f.grads[0].add_assign(&dpre.matmul_at(concat)?)?;
            f.grads[1].add_assign(&dpre.col_sum())?;
            let dconcat = dpre.matmul(&f.tensors[0])?;
            let (dv, da) = dconcat.split_cols(phi_v_cols)?;
            Ok((dv, da))
        }
        FusionCache::Film { gamma, modulated, act } => {
            let (tgt_idx, src_idx) = match spec.film_direction {
                FilmDirection::AConditionsV => (V, A),
                FilmDirection::VConditionsA => (A, V),
            };
            let phi_tgt = &fo.features[tgt_idx];
            let phi_src = &fo.features[src_idx];
            let f = params.fusion_mut();
            f.grads[2].add_assign(&dlogits.matmul_at(act)?)?;
            f.grads[3].add_assign(&dlogits.col_sum())?;
            let dact = dlogits.matmul(&f.tensors[2])?;
            let dmod = dact.hadamard(&relu_mask(modulated))?;
            let dgamma = dmod.hadamard(phi_tgt)?;
            let dbeta = dmod.clone();
            let dcond = dgamma.concat_cols(&dbeta)?;
            f.grads[0].add_assign(&dcond.matmul_at(phi_src)?)?;
            f.grads[1].add_assign(&dcond.col_sum())?;
            let dphi_src = dcond.matmul(&f.tensors[0])?;
            let dphi_tgt = dmod.hadamard(gamma)?;
            if tgt_idx == V {
                Ok((dphi_tgt, dphi_src))
            } else {
                Ok((dphi_src, dphi_tgt))
            }
        }
        FusionCache::Gated { concat, gate, fused } => {
            let phi_v = &fo.features[V];
            let phi_a = &fo.features[A];
            let f = params.fusion_mut();
            f.grads[2].add_assign(&dlogits.matmul_at(fused)?)?;
            f.grads[3].add_assign(&dlogits.col_sum())?;
            let dfused = dlogits.matmul(&f.tensors[2])?;
            // d gate = dfused ⊙ (phi_v - phi_a); d gate_pre = d gate ⊙ g(1-g)
            let mut dgate_pre = Matrix::zeros(gate.rows(), gate.cols());
            for r in 0..gate.rows() {
                for c in 0..gate.cols() {
                    let g = gate.get(r, c);
                    let dg = dfused.get(r, c) * (phi_v.get(r, c) - phi_a.get(r, c));
                    dgate_pre.set(r, c, dg * g * (1.0 - g));
                }
            }
            f.grads[0].add_assign(&dgate_pre.matmul_at(concat)?)?;
            f.grads[1].add_assign(&dgate_pre.col_sum())?;
            let dconcat = dgate_pre.matmul(&f.tensors[0])?;
            let (mut dv, mut da) = dconcat.split_cols(phi_v_cols)?;
            for r in 0..dv.rows() {
                for c in 0..dv.cols() {
                    let g = gate.get(r, c);
                    dv.set(r, c, dv.get(r, c) + dfused.get(r, c) * g);
                    da.set(r, c, da.get(r, c) + dfused.get(r, c) * (1.0 - g));
                }
            }
            Ok((dv, da))
        }
    }
}

/// Smallest |pre-activation| feeding any ReLU in this forward pass. Used by
/// the gradient checker to avoid instances where a finite-difference probe
/// would cross the kink.
pub(crate) fn min_abs_relu_preactivation(fo: &ForwardOut) -> f64 {
    let mut min = f64::INFINITY;
    let mut scan = |m: &Matrix| {
        for &v in m.data() {
            let a = v.abs();
            if a < min {
                min = a;
            }
        }
    };
    for enc in &fo.encoders {
        for pre in &enc.pre {
            scan(pre);
        }
    }
    match &fo.fusion {
        FusionCache::Mid { pre, .. } => scan(pre),
        FusionCache::Film { modulated, .. } => scan(modulated),
        FusionCache::Late { .. } | FusionCache::Cosine(_) | FusionCache::Gated { .. } => {}
    }
    min
}

fn cosine_backward(
    spec: &ModelSpec,
    params: &mut ModelParams,
    fo: &ForwardOut,
    cache: &CosineCache,
    dlogits: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let batch = dlogits.rows();
    let classes = dlogits.cols();
    let s = cache.s_cos;
    let mut dphis = Vec::with_capacity(MODALITIES);
    let f = params.fusion_mut();
    for m in 0..MODALITIES {
        let dim = fo.features[m].cols();
        let offset = if m == V { 0 } else { spec.phi_v };
        let phi_hat = &cache.phi_hat[m];
        let w_hat = &cache.w_hat[m];
        let mut dphi = Matrix::zeros(batch, dim);
        for b in 0..batch {
            let p = cache.phi_norm[m][b];
            if p == 0.0 {
                continue;
            }
            // S_b = Σ_c dlogits[b,c]·ŵ_c
            let mut sum = vec![0.0; dim];
            for c in 0..classes {
                let dl = dlogits.get(b, c);
                if dl != 0.0 {
                    for (sv, wv) in sum.iter_mut().zip(w_hat.row(c)) {
                        *sv += dl * wv;
                    }
                }
            }
            let ph = phi_hat.row(b);
            let proj: f64 = sum.iter().zip(ph).map(|(a, b)| a * b).sum();
            for (j, dst) in dphi.row_mut(b).iter_mut().enumerate() {
                *dst = s / p * (sum[j] - proj * ph[j]);
            }
        }
        // Weight rows.
        for c in 0..classes {
            let n = cache.w_norm[m][c];
            if n == 0.0 {
                continue;
            }
            let mut sum = vec![0.0; dim];
            for b in 0..batch {
                let dl = dlogits.get(b, c);
                if dl != 0.0 {
                    for (sv, pv) in sum.iter_mut().zip(phi_hat.row(b)) {
                        *sv += dl * pv;
                    }
                }
            }
            let wh = w_hat.row(c);
            let proj: f64 = sum.iter().zip(wh).map(|(a, b)| a * b).sum();
            let grow = &mut f.grads[0].row_mut(c)[offset..offset + dim];
            for (j, dst) in grow.iter_mut().enumerate() {
                *dst += s / n * (sum[j] - proj * wh[j]);
            }
        }
        dphis.push(dphi);
    }
    let da = dphis.pop().expect("two modalities");
    let dv = dphis.pop().expect("two modalities");
    Ok((dv, da))
}
