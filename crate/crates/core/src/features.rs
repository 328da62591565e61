//! Spatial feature-map aggregation into global descriptors.
//!
//! [`mac`] takes the channelwise maximum over all spatial locations,
//! [`spoc`] the channelwise sum. Neither normalizes its output; callers
//! feed the raw descriptor either to the classification head or through
//! [`postprocess`] for retrieval.

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, pca_apply, Embedding, PcaModel};

/// H x W grid of C-dimensional non-negative local descriptors.
///
/// Values are stored in (h, w, c) order. Grids of different sizes and
/// aspect ratios are all valid inputs to every operation here; only the
/// channel count is fixed by the consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::EmptyMap);
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "{height}x{width}x{channels} map needs {} values, got {}",
                    height * width * channels,
                    values.len()
                ),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFiniteValue { context: "feature map values must be finite and >= 0".into() });
        }
        Ok(Self { height, width, channels, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.values[(h * self.width + w) * self.channels + c]
    }

    /// Descriptor at flat location index `loc` = h * W + w.
    pub fn descriptor(&self, loc: usize) -> &[f64] {
        &self.values[loc * self.channels..(loc + 1) * self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Gradient w.r.t. a feature map; same (h, w, c) layout, any sign.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapGradient {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMapGradient {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, values: vec![0.0; height * width * channels] }
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.values[(h * self.width + w) * self.channels + c]
    }
}

/// Channelwise global max pooling. Output dim = C, not normalized.
pub fn mac(fm: &FeatureMap) -> Vec<f64> {
    mac_with_argmax(fm).0
}

/// Max pooling plus the flat location index of each channel's maximum.
/// Ties resolve to the first location in row-major scan order.
pub fn mac_with_argmax(fm: &FeatureMap) -> (Vec<f64>, Vec<usize>) {
    let c = fm.channels;
    let mut out = fm.descriptor(0).to_vec();
    let mut arg = vec![0usize; c];
    for loc in 1..fm.locations() {
        let d = fm.descriptor(loc);
        for ch in 0..c {
            if d[ch] > out[ch] {
                out[ch] = d[ch];
                arg[ch] = loc;
            }
        }
    }
    (out, arg)
}

/// Channelwise sum pooling. Output dim = C, not normalized.
pub fn spoc(fm: &FeatureMap) -> Vec<f64> {
    let c = fm.channels;
    let mut out = vec![0.0; c];
    for loc in 0..fm.locations() {
        for (o, v) in out.iter_mut().zip(fm.descriptor(loc)) {
            *o += v;
        }
    }
    out
}

/// Gradient of `upstream . mac(fm)` w.r.t. the feature map: each channel's
/// upstream value routes entirely to that channel's argmax location.
pub fn mac_backward(fm: &FeatureMap, upstream: &[f64]) -> Result<FeatureMapGradient> {
    if upstream.len() != fm.channels {
        return Err(Error::DimMismatch { expected: fm.channels, got: upstream.len() });
    }
    let (_, argmax) = mac_with_argmax(fm);
    let mut grad = FeatureMapGradient::zeros(fm.height, fm.width, fm.channels);
    for (ch, &loc) in argmax.iter().enumerate() {
        grad.values[loc * fm.channels + ch] = upstream[ch];
    }
    Ok(grad)
}

/// The retrieval post-processing chain: l2-normalize, optionally project
/// with PCA, l2-normalize again.
#[derive(Debug, Clone)]
pub struct PostProcessPipeline {
    pca: Option<PcaModel>,
    target_dim: usize,
}

impl PostProcessPipeline {
    /// Pass-through pipeline (normalization only).
    pub fn identity(dim: usize) -> Self {
        Self { pca: None, target_dim: dim }
    }

    pub fn with_pca(pca: PcaModel) -> Self {
        let target_dim = pca.output_dim();
        Self { pca: Some(pca), target_dim }
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn pca(&self) -> Option<&PcaModel> {
        self.pca.as_ref()
    }
}

/// Apply a [`PostProcessPipeline`] to a raw descriptor.
pub fn postprocess(p: &PostProcessPipeline, raw: &[f64]) -> Result<Embedding> {
    let unit = l2_normalize(raw)?;
    match &p.pca {
        None => Ok(Embedding::from_raw(&unit)?),
        Some(pca) => {
            let projected = pca_apply(pca, &unit)?;
            Embedding::from_raw(&projected)
        }
    }
}
