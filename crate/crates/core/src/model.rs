//! The trainable embedding network.
//!
//! Each spatial location of a [`FeatureMap`] passes independently through a
//! stack of affine+ReLU layers (1x1-convolution semantics, so grids of any
//! size and aspect ratio are accepted), the results are MAC-pooled into one
//! descriptor, and the descriptor is l2-normalized into an [`Embedding`].
//! An optional linear head on the *raw* pooled descriptor produces class
//! logits; keeping the head above the shared trunk is what lets retrieval
//! fine-tuning start from classification weights.
//!
//! Forward passes record a [`ForwardTrace`] with everything the exact
//! analytic backward pass needs: per-layer pre-activations and activations,
//! MAC argmax positions and the raw pooled vector.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::numerics::{l2_normalize_backward, Embedding, Matrix, RngState};

/// One affine layer: `weight` is C_out x C_in, `bias` has length C_out.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self { weight: Matrix::zeros(c_out, c_in), bias: vec![0.0; c_out] }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Layer-size description used by [`init_params`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    /// Channel count of the input feature maps.
    pub input_dim: usize,
    /// Output width of every trunk layer, in order.
    pub layer_widths: Vec<usize>,
    /// Class count of the classification head; `None` for retrieval-only.
    pub classes: Option<usize>,
}

/// All trainable state. The same struct doubles as the gradient and
/// velocity container, since those are exactly parameter-shaped.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub head: Option<LayerParams>,
}

/// Parameter-shaped gradient accumulator.
pub type ParamGradients = ModelParams;

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LayerParams::in_dim)
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, LayerParams::out_dim)
    }

    pub fn classes(&self) -> Option<usize> {
        self.head.as_ref().map(LayerParams::out_dim)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.input_dim(),
            layer_widths: self.layers.iter().map(LayerParams::out_dim).collect(),
            classes: self.classes(),
        }
    }

    /// Check the dimension chain and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::BadSpec { context: "model needs at least one layer".into() });
        }
        let mut prev = self.layers[0].in_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_dim() != prev {
                return Err(Error::BadSpec {
                    context: format!("layer {i} expects {} inputs, previous layer outputs {prev}", layer.in_dim()),
                });
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::BadSpec { context: format!("layer {i} bias length mismatch") });
            }
            prev = layer.out_dim();
        }
        if let Some(head) = &self.head {
            if head.in_dim() != prev {
                return Err(Error::BadSpec {
                    context: format!("head expects {} inputs, trunk outputs {prev}", head.in_dim()),
                });
            }
            if head.bias.len() != head.out_dim() {
                return Err(Error::BadSpec { context: "head bias length mismatch".into() });
            }
        }
        for s in self.tensor_slices() {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { context: "model parameters".into() });
            }
        }
        Ok(())
    }

    /// Same shapes, all zeros. Used for gradients and optimizer velocity.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            head: self.head.as_ref().map(|h| LayerParams::zeros(h.out_dim(), h.in_dim())),
        }
    }

    /// Drop the classification head, keeping the shared trunk.
    pub fn without_head(mut self) -> ModelParams {
        self.head = None;
        self
    }

    pub fn param_count(&self) -> usize {
        self.tensor_slices().iter().map(|s| s.len()).sum()
    }

    /// All parameter storage in a fixed order: per layer weight then bias,
    /// then head weight and bias when present.
    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weight.values());
            out.push(l.bias.as_slice());
        }
        if let Some(h) = &self.head {
            out.push(h.weight.values());
            out.push(h.bias.as_slice());
        }
        out
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weight.values_mut());
            out.push(l.bias.as_mut_slice());
        }
        if let Some(h) = &mut self.head {
            out.push(h.weight.values_mut());
            out.push(h.bias.as_mut_slice());
        }
        out
    }

    /// `self += other`, elementwise over all tensors.
    pub fn accumulate(&mut self, other: &ModelParams) -> Result<()> {
        let theirs = other.tensor_slices();
        let mut mine = self.tensor_slices_mut();
        if mine.len() != theirs.len() || mine.iter().zip(&theirs).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::ShapeMismatch { context: "gradient accumulation".into() });
        }
        for (dst, src) in mine.iter_mut().zip(&theirs) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
        Ok(())
    }

    /// Multiply every tensor by `s`.
    pub fn scale(&mut self, s: f64) {
        for slice in self.tensor_slices_mut() {
            for v in slice {
                *v *= s;
            }
        }
    }
}

/// Initialize parameters: weights uniform in +-sqrt(6 / (C_in + C_out)),
/// biases zero. Deterministic for a given seed.
pub fn init_params(spec: &ModelSpec, rng: &mut RngState) -> Result<ModelParams> {
    if spec.input_dim == 0 || spec.layer_widths.is_empty() || spec.layer_widths.contains(&0) {
        return Err(Error::BadSpec { context: format!("invalid layer spec {spec:?}") });
    }
    if spec.classes == Some(0) || spec.classes == Some(1) {
        return Err(Error::BadSpec { context: "classification head needs at least 2 classes".into() });
    }
    let mut layers = Vec::with_capacity(spec.layer_widths.len());
    let mut c_in = spec.input_dim;
    for &c_out in &spec.layer_widths {
        layers.push(init_layer(c_out, c_in, rng));
        c_in = c_out;
    }
    let head = spec.classes.map(|k| init_layer(k, c_in, rng));
    Ok(ModelParams { layers, head })
}

fn init_layer(c_out: usize, c_in: usize, rng: &mut RngState) -> LayerParams {
    let limit = (6.0 / (c_in + c_out) as f64).sqrt();
    let mut layer = LayerParams::zeros(c_out, c_in);
    for v in layer.weight.values_mut() {
        *v = rng.uniform(-limit, limit);
    }
    layer
}

/// Everything the backward pass needs to replay one forward exactly.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    locations: usize,
    /// acts[0][loc] is the input descriptor; acts[l][loc] the ReLU output
    /// of layer l.
    acts: Vec<Vec<Vec<f64>>>,
    /// preacts[l][loc] is the affine output of layer l+1 (before ReLU).
    preacts: Vec<Vec<Vec<f64>>>,
    /// Flat location index of each channel's MAC maximum.
    argmax: Vec<usize>,
    /// MAC output before normalization.
    raw_pooled: Vec<f64>,
    /// Unit embedding; present only for embedding forwards.
    embedding: Option<Vec<f64>>,
}

impl ForwardTrace {
    pub fn raw_pooled(&self) -> &[f64] {
        &self.raw_pooled
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn embedding(&self) -> Option<&[f64]> {
        self.embedding.as_deref()
    }

    /// Minimum over channels of the gap between the MAC maximum and the
    /// runner-up at other locations. Tests use this to stay away from
    /// argmax ties where the subgradient is not unique.
    pub fn min_argmax_gap(&self) -> f64 {
        let last = match self.acts.last() {
            Some(a) => a,
            None => return f64::INFINITY,
        };
        let mut gap = f64::INFINITY;
        for (ch, &arg) in self.argmax.iter().enumerate() {
            let best = self.raw_pooled[ch];
            for (loc, act) in last.iter().enumerate() {
                if loc != arg {
                    gap = gap.min(best - act[ch]);
                }
            }
        }
        gap
    }

    /// Minimum |pre-activation| over all layers and locations; the ReLU
    /// derivative is ambiguous near zero.
    pub fn min_preact_magnitude(&self) -> f64 {
        self.preacts
            .iter()
            .flatten()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

fn forward_trunk(params: &ModelParams, fm: &FeatureMap) -> Result<ForwardTrace> {
    params.validate()?;
    if fm.channels() != params.input_dim() {
        return Err(Error::DimMismatch { expected: params.input_dim(), got: fm.channels() });
    }

    let locations = fm.locations();
    let mut acts: Vec<Vec<Vec<f64>>> = Vec::with_capacity(params.layers.len() + 1);
    let mut preacts: Vec<Vec<Vec<f64>>> = Vec::with_capacity(params.layers.len());
    acts.push((0..locations).map(|loc| fm.descriptor(loc).to_vec()).collect());

    for layer in &params.layers {
        let prev = acts.last().unwrap();
        let mut z_layer = Vec::with_capacity(locations);
        let mut a_layer = Vec::with_capacity(locations);
        for x in prev {
            let mut z = layer.weight.matvec(x)?;
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            a_layer.push(z.iter().map(|v| v.max(0.0)).collect());
            z_layer.push(z);
        }
        preacts.push(z_layer);
        acts.push(a_layer);
    }

    // MAC over the final activations; reuse the pooling tie-break rule.
    let c_last = params.embed_dim();
    let last = acts.last().unwrap();
    let mut pooled = last[0].clone();
    let mut argmax = vec![0usize; c_last];
    for (loc, a) in last.iter().enumerate().skip(1) {
        for ch in 0..c_last {
            if a[ch] > pooled[ch] {
                pooled[ch] = a[ch];
                argmax[ch] = loc;
            }
        }
    }

    Ok(ForwardTrace { locations, acts, preacts, argmax, raw_pooled: pooled, embedding: None })
}

/// Embed a feature map: trunk, MAC, l2 normalization.
///
/// Fails with `ZeroVector` when ReLU kills every channel at every
/// location; the trainer skips such pairs.
pub fn forward_embed(params: &ModelParams, fm: &FeatureMap) -> Result<(Embedding, ForwardTrace)> {
    let mut trace = forward_trunk(params, fm)?;
    let embedding = Embedding::from_raw(&trace.raw_pooled)?;
    trace.embedding = Some(embedding.values().to_vec());
    Ok((embedding, trace))
}

/// Class logits from the raw (un-normalized) MAC descriptor.
pub fn forward_classify(params: &ModelParams, fm: &FeatureMap) -> Result<(Vec<f64>, ForwardTrace)> {
    let head = params.head.as_ref().ok_or(Error::MissingHead)?;
    let trace = forward_trunk(params, fm)?;
    let mut logits = head.weight.matvec(&trace.raw_pooled)?;
    for (l, b) in logits.iter_mut().zip(&head.bias) {
        *l += b;
    }
    Ok((logits, trace))
}

/// Gradients of a scalar loss w.r.t. every parameter, given the gradient
/// w.r.t. the unit embedding. Includes the l2-normalization Jacobian and
/// MAC argmax routing. Head gradients (if a head exists) are zero.
pub fn backward_embed(
    params: &ModelParams,
    trace: &ForwardTrace,
    upstream: &[f64],
) -> Result<ParamGradients> {
    let raw = &trace.raw_pooled;
    if trace.embedding.is_none() {
        return Err(Error::TraceMismatch { context: "trace was not produced by forward_embed".into() });
    }
    if upstream.len() != raw.len() {
        return Err(Error::DimMismatch { expected: raw.len(), got: upstream.len() });
    }
    let g_raw = l2_normalize_backward(raw, upstream)?;
    backward_from_pooled(params, trace, &g_raw)
}

/// Gradients of a scalar loss w.r.t. every parameter, given the gradient
/// w.r.t. the logits.
pub fn backward_classify(
    params: &ModelParams,
    trace: &ForwardTrace,
    upstream: &[f64],
) -> Result<ParamGradients> {
    let head = params.head.as_ref().ok_or(Error::MissingHead)?;
    if upstream.len() != head.out_dim() {
        return Err(Error::DimMismatch { expected: head.out_dim(), got: upstream.len() });
    }
    let mut grads = backward_from_pooled(params, trace, &head.weight.transpose_matvec(upstream)?)?;
    let g_head = grads.head.as_mut().expect("params have a head");
    for (k, &g) in upstream.iter().enumerate() {
        for (c, &x) in trace.raw_pooled.iter().enumerate() {
            g_head.weight.set(k, c, g * x);
        }
        g_head.bias[k] = g;
    }
    Ok(grads)
}

fn backward_from_pooled(
    params: &ModelParams,
    trace: &ForwardTrace,
    g_pooled: &[f64],
) -> Result<ParamGradients> {
    let n_layers = params.layers.len();
    if trace.acts.len() != n_layers + 1 || trace.preacts.len() != n_layers {
        return Err(Error::TraceMismatch {
            context: format!("trace has {} layers, params have {n_layers}", trace.preacts.len()),
        });
    }
    if trace.raw_pooled.len() != params.embed_dim() || trace.argmax.iter().any(|&l| l >= trace.locations) {
        return Err(Error::TraceMismatch { context: "pooled dimensions disagree with parameters".into() });
    }

    let mut grads = params.zeros_like();

    // MAC routes each channel's gradient to one location; group channels
    // by location so each location is walked once.
    let mut per_location: Vec<Option<Vec<f64>>> = vec![None; trace.locations];
    for (ch, &loc) in trace.argmax.iter().enumerate() {
        if g_pooled[ch] != 0.0 {
            per_location
                .get_mut(loc)
                .unwrap()
                .get_or_insert_with(|| vec![0.0; g_pooled.len()])[ch] += g_pooled[ch];
        }
    }

    for (loc, maybe_g) in per_location.iter().enumerate() {
        let Some(g_top) = maybe_g else { continue };
        let mut g_act = g_top.clone();
        for l in (0..n_layers).rev() {
            let layer = &params.layers[l];
            let z = &trace.preacts[l][loc];
            let a_in = &trace.acts[l][loc];
            if z.len() != layer.out_dim() || a_in.len() != layer.in_dim() {
                return Err(Error::TraceMismatch { context: format!("layer {l} activation shape") });
            }
            let g_z: Vec<f64> = g_act
                .iter()
                .zip(z)
                .map(|(g, zi)| if *zi > 0.0 { *g } else { 0.0 })
                .collect();
            let gl = &mut grads.layers[l];
            for (r, &gz) in g_z.iter().enumerate() {
                if gz != 0.0 {
                    gl.bias[r] += gz;
                    let row = gl.weight.row_mut(r);
                    for (w, &x) in row.iter_mut().zip(a_in) {
                        *w += gz * x;
                    }
                }
            }
            if l > 0 {
                g_act = layer.weight.transpose_matvec(&g_z)?;
            }
        }
    }

    Ok(grads)
}
