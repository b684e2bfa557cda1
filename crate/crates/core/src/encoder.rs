//! Two-stage toy encoder with a parameter-free local-enhance band between the
//! stages and an average + max pooling head.
//!
//! ```text
//! input (D_in) --affine+tanh--> C x H x W --enhance--> 1x1 mix C->D + tanh --> avg+max pool --> L2
//! ```
//!
//! Backward is exact: the enhanced band scales upstream gradients by `alpha`,
//! max pooling routes gradient to the stored argmax cell (first index on
//! ties), and the normalisation Jacobian is applied at the output.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PdlError, Result};
use crate::format::{read_tensors, write_tensors, NamedTensor};

pub const CHECKPOINT_MAGIC: &str = "PDL-CKPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_dim: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        EncoderShape {
            input_dim: 16,
            channels: 8,
            height: 10,
            width: 4,
            out_dim: 32,
        }
    }
}

impl EncoderShape {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn stage1_len(&self) -> usize {
        self.channels * self.cells()
    }

    pub fn validate(&self) -> Result<()> {
        if [self.input_dim, self.channels, self.height, self.width, self.out_dim].contains(&0) {
            return Err(PdlError::Config(format!("encoder dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// A `C x H x W` activation tensor, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(PdlError::Argument("feature map dimensions must be >= 1".into()));
        }
        if data.len() != channels * height * width {
            return Err(PdlError::Argument(format!(
                "feature map data has {} entries, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PdlError::numeric("feature map", "non-finite entry"));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    /// Values of channel `c` over all `H x W` cells.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnhanceConfig {
    pub alpha: f64,
    pub enabled: bool,
    pub block_fraction: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            alpha: 2.0,
            enabled: true,
            block_fraction: 0.1,
        }
    }
}

impl EnhanceConfig {
    pub fn disabled() -> Self {
        EnhanceConfig {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Rows in the enhanced band: `max(1, floor(fraction * height))`.
pub fn block_height(height: usize, fraction: f64) -> usize {
    ((fraction * height as f64).floor() as usize).clamp(1, height.max(1))
}

/// Multiplies rows `[p, p + block)` of every channel by `alpha`.
pub fn local_enhance(map: &FeatureMap, alpha: f64, p: usize) -> Result<FeatureMap> {
    let block = block_height(map.height, 0.1);
    if p + block > map.height {
        return Err(PdlError::Argument(format!(
            "anchor {p} out of range [0, {}]",
            map.height - block
        )));
    }
    let mut out = map.clone();
    enhance_in_place(&mut out.data, map.channels, map.height, map.width, alpha, p, block);
    Ok(out)
}

fn enhance_in_place(
    data: &mut [f64],
    channels: usize,
    height: usize,
    width: usize,
    alpha: f64,
    p: usize,
    block: usize,
) {
    for c in 0..channels {
        let start = (c * height + p) * width;
        for v in &mut data[start..start + block * width] {
            *v *= alpha;
        }
    }
}

/// Output of the pooling head.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    /// Unit-norm embedding, or all zeros if `pre_norm` is the zero vector.
    pub vector: Vec<f64>,
    /// `avg + max` per channel, before normalisation.
    pub pre_norm: Vec<f64>,
    /// Cell index of the maximum per channel (first on ties).
    pub argmax: Vec<usize>,
    pub norm: f64,
}

/// Global average pooling plus global max pooling, then L2 normalisation.
pub fn pool_head(map: &FeatureMap) -> Pooled {
    let mut pre_norm = Vec::with_capacity(map.channels);
    let mut argmax = Vec::with_capacity(map.channels);
    for c in 0..map.channels {
        let vals = map.channel(c);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let (mut best, mut best_i) = (vals[0], 0);
        for (i, &v) in vals.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        pre_norm.push(mean + best);
        argmax.push(best_i);
    }
    let norm = pre_norm.iter().map(|v| v * v).sum::<f64>().sqrt();
    let vector = if norm > 0.0 {
        pre_norm.iter().map(|v| v / norm).collect()
    } else {
        log::warn!("pooled feature is the zero vector; emitting zero embedding");
        vec![0.0; pre_norm.len()]
    };
    Pooled {
        vector,
        pre_norm,
        argmax,
        norm,
    }
}

/// Encoder weights. Also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    /// `(C*H*W) x D_in`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `D x C`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub type ParamGrads = EncoderParams;

impl EncoderParams {
    pub fn zeros(shape: EncoderShape) -> Self {
        EncoderParams {
            shape,
            w1: vec![0.0; shape.stage1_len() * shape.input_dim],
            b1: vec![0.0; shape.stage1_len()],
            w2: vec![0.0; shape.out_dim * shape.channels],
            b2: vec![0.0; shape.out_dim],
        }
    }

    /// Gaussian fan-in scaled weights, zero biases.
    pub fn random<R: Rng + ?Sized>(shape: EncoderShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let mut p = Self::zeros(shape);
        let s1 = 1.0 / (shape.input_dim as f64).sqrt();
        let s2 = 1.0 / (shape.channels as f64).sqrt();
        for w in &mut p.w1 {
            *w = s1 * Distribution::<f64>::sample(&StandardNormal, rng);
        }
        for w in &mut p.w2 {
            *w = s2 * Distribution::<f64>::sample(&StandardNormal, rng);
        }
        Ok(p)
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_layout(&self, other: &EncoderParams) -> bool {
        self.shape == other.shape
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self, extra: &[(&str, String)]) -> String {
        let s = self.shape;
        let mut meta = vec![
            ("input_dim", s.input_dim.to_string()),
            ("channels", s.channels.to_string()),
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("out_dim", s.out_dim.to_string()),
        ];
        meta.extend(extra.iter().cloned());
        let t = |name: &str, rows, cols, data: &[f64]| NamedTensor {
            name: name.into(),
            rows,
            cols,
            data: data.to_vec(),
        };
        write_tensors(
            CHECKPOINT_MAGIC,
            &meta,
            &[
                t("w1", s.stage1_len(), s.input_dim, &self.w1),
                t("b1", s.stage1_len(), 1, &self.b1),
                t("w2", s.out_dim, s.channels, &self.w2),
                t("b2", s.out_dim, 1, &self.b2),
            ],
        )
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let (meta, tensors) = read_tensors(text, CHECKPOINT_MAGIC)?;
        let get = |k| crate::format::header_usize(&meta, k, 1);
        let shape = EncoderShape {
            input_dim: get("input_dim")?,
            channels: get("channels")?,
            height: get("height")?,
            width: get("width")?,
            out_dim: get("out_dim")?,
        };
        shape.validate()?;
        let mut p = Self::zeros(shape);
        for (name, slot) in ["w1", "b1", "w2", "b2"].into_iter().zip(p.tensors_mut()) {
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| PdlError::parse(1, format!("checkpoint lacks tensor `{name}`")))?;
            if t.data.len() != slot.len() {
                return Err(PdlError::parse(
                    1,
                    format!("tensor `{name}` has {} values, expected {}", t.data.len(), slot.len()),
                ));
            }
            slot.copy_from_slice(&t.data);
        }
        Ok(p)
    }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    shape: EncoderShape,
    input: Vec<f64>,
    /// Stage-1 activations before enhancement.
    a1: Vec<f64>,
    /// Stage-1 activations after enhancement (equal to `a1` when disabled).
    a1e: Vec<f64>,
    /// `(anchor, block, alpha)` if the band was applied.
    band: Option<(usize, usize, f64)>,
    a2: Vec<f64>,
    pooled: Pooled,
}

impl ForwardTrace {
    pub fn anchor(&self) -> Option<usize> {
        self.band.map(|(p, _, _)| p)
    }

    pub fn stage1(&self) -> Result<FeatureMap> {
        let s = self.shape;
        FeatureMap::new(s.channels, s.height, s.width, self.a1.clone())
    }

    pub fn stage2(&self) -> Result<FeatureMap> {
        let s = self.shape;
        FeatureMap::new(s.out_dim, s.height, s.width, self.a2.clone())
    }
}

/// Training-path forward. One anchor is drawn from `rng` on every call, even
/// when enhancement is disabled, so that the random stream does not depend
/// on the enhancement switch.
pub fn forward<R: RngCore + ?Sized>(
    params: &EncoderParams,
    input: &[f64],
    enhance: &EnhanceConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let h = params.shape.height;
    let block = block_height(h, enhance.block_fraction);
    let p = rng.random_range(0..=h - block);
    let band = enhance.enabled.then_some((p, enhance.alpha));
    forward_with_anchor(params, input, band, enhance.block_fraction)
}

/// Inference forward: no enhancement, no randomness.
pub fn embed(params: &EncoderParams, input: &[f64]) -> Result<Vec<f64>> {
    forward_with_anchor(params, input, None, 0.1).map(|(v, _)| v)
}

/// Forward with an explicit `(anchor, alpha)` band, or none.
pub fn forward_with_anchor(
    params: &EncoderParams,
    input: &[f64],
    band: Option<(usize, f64)>,
    block_fraction: f64,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let s = params.shape;
    if input.len() != s.input_dim {
        return Err(PdlError::Argument(format!(
            "input has dimension {}, encoder expects {}",
            input.len(),
            s.input_dim
        )));
    }
    let n1 = s.stage1_len();
    let mut a1 = vec![0.0; n1];
    for (r, out) in a1.iter_mut().enumerate() {
        let row = &params.w1[r * s.input_dim..(r + 1) * s.input_dim];
        let z = params.b1[r] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        *out = z.tanh();
    }
    check_finite(&a1, "stage1")?;

    let mut a1e = a1.clone();
    let band = match band {
        Some((p, alpha)) => {
            let block = block_height(s.height, block_fraction);
            if p + block > s.height {
                return Err(PdlError::Argument(format!(
                    "anchor {p} out of range [0, {}]",
                    s.height - block
                )));
            }
            enhance_in_place(&mut a1e, s.channels, s.height, s.width, alpha, p, block);
            check_finite(&a1e, "local_enhance")?;
            Some((p, block, alpha))
        }
        None => None,
    };

    let cells = s.cells();
    let mut a2 = vec![0.0; s.out_dim * cells];
    for o in 0..s.out_dim {
        let wrow = &params.w2[o * s.channels..(o + 1) * s.channels];
        for cell in 0..cells {
            let mut z = params.b2[o];
            for (c, w) in wrow.iter().enumerate() {
                z += w * a1e[c * cells + cell];
            }
            a2[o * cells + cell] = z.tanh();
        }
    }
    check_finite(&a2, "stage2")?;

    let map = FeatureMap {
        channels: s.out_dim,
        height: s.height,
        width: s.width,
        data: a2,
    };
    let pooled = pool_head(&map);
    check_finite(&pooled.vector, "pool_head")?;
    let trace = ForwardTrace {
        shape: s,
        input: input.to_vec(),
        a1,
        a1e,
        band,
        a2: map.data,
        pooled,
    };
    Ok((trace.pooled.vector.clone(), trace))
}

/// Gradients of a scalar loss w.r.t. all parameters, given its gradient
/// w.r.t. the embedding returned by the matching forward call.
pub fn backward(params: &EncoderParams, trace: &ForwardTrace, grad_embedding: &[f64]) -> Result<ParamGrads> {
    let s = params.shape;
    if trace.shape != s || trace.a1.len() != s.stage1_len() || grad_embedding.len() != s.out_dim {
        return Err(PdlError::Argument("trace does not match encoder parameters".into()));
    }
    check_finite(grad_embedding, "backward input")?;
    let mut g = EncoderParams::zeros(s);
    let pooled = &trace.pooled;
    if pooled.norm == 0.0 {
        return Ok(g);
    }

    // d(u/|u|)/du = (I - v v^T) / |u|
    let v = &pooled.vector;
    let dot: f64 = v.iter().zip(grad_embedding).map(|(a, b)| a * b).sum();
    let gu: Vec<f64> = v
        .iter()
        .zip(grad_embedding)
        .map(|(vi, gi)| (gi - vi * dot) / pooled.norm)
        .collect();

    let cells = s.cells();
    let inv_cells = 1.0 / cells as f64;
    let mut ga1e = vec![0.0; s.stage1_len()];
    for (o, &gu_o) in gu.iter().enumerate() {
        let wrow = &params.w2[o * s.channels..(o + 1) * s.channels];
        for cell in 0..cells {
            let mut ga2 = gu_o * inv_cells;
            if cell == pooled.argmax[o] {
                ga2 += gu_o;
            }
            let a2 = trace.a2[o * cells + cell];
            let gz2 = ga2 * (1.0 - a2 * a2);
            if gz2 == 0.0 {
                continue;
            }
            g.b2[o] += gz2;
            for (c, w) in wrow.iter().enumerate() {
                g.w2[o * s.channels + c] += gz2 * trace.a1e[c * cells + cell];
                ga1e[c * cells + cell] += gz2 * w;
            }
        }
    }

    if let Some((p, block, alpha)) = trace.band {
        enhance_in_place(&mut ga1e, s.channels, s.height, s.width, alpha, p, block);
    }

    for (r, ga1) in ga1e.iter().enumerate() {
        let a1 = trace.a1[r];
        let gz1 = ga1 * (1.0 - a1 * a1);
        g.b1[r] = gz1;
        let grow = &mut g.w1[r * s.input_dim..(r + 1) * s.input_dim];
        for (gw, x) in grow.iter_mut().zip(&trace.input) {
            *gw = gz1 * x;
        }
    }
    check_finite(&g.w1, "backward")?;
    Ok(g)
}

fn check_finite(values: &[f64], stage: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(PdlError::numeric(stage, format!("non-finite value at index {i}")));
    }
    Ok(())
}
