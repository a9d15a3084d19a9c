//! Observation models that connect a latent high-resolution image to its
//! degraded measurements: spatial downsampling, spectral projection, and
//! forward-difference image gradients. Each operator is linear and carries
//! its exact adjoint, so it can sit inside the autodiff graph.
//!
//! Also hosts the reduced-resolution evaluation protocol (degrade a known
//! image so it can serve as its own reference) and the synthetic scene
//! generator used by the examples and tests.

use std::str::FromStr;

use crate::autodiff::LinearOperator;
use crate::error::{GddError, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsampleKind {
    /// Mean over non-overlapping factor x factor blocks.
    BlockAverage,
    /// Anti-aliased Catmull-Rom resampling (kernel stretched by the factor,
    /// reflected at boundaries, weights renormalized per output sample).
    Bicubic,
    /// Gaussian blur (sigma = factor / 2) fused with decimation.
    GaussianBlur,
}

impl DownsampleKind {
    pub fn name(&self) -> &'static str {
        match self {
            DownsampleKind::BlockAverage => "block",
            DownsampleKind::Bicubic => "bicubic",
            DownsampleKind::GaussianBlur => "gaussian",
        }
    }
}

impl FromStr for DownsampleKind {
    type Err = GddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(DownsampleKind::BlockAverage),
            "bicubic" => Ok(DownsampleKind::Bicubic),
            "gaussian" => Ok(DownsampleKind::GaussianBlur),
            other => Err(GddError::invalid(format!(
                "unknown downsample kind '{other}' (expected block, bicubic, or gaussian)"
            ))),
        }
    }
}

/// Spatial degradation `S`: reduces both spatial dimensions by an integer
/// factor that must divide them.
#[derive(Clone, Debug)]
pub struct SpatialDownsampler {
    kind: DownsampleKind,
    factor: usize,
}

impl SpatialDownsampler {
    pub fn new(kind: DownsampleKind, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(GddError::invalid(format!(
                "downsample factor must be at least 2, got {factor}"
            )));
        }
        Ok(SpatialDownsampler { kind, factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn kind(&self) -> DownsampleKind {
        self.kind
    }

    pub fn downsample(&self, input: &Tensor) -> Result<Tensor> {
        self.output_shape(input.shape())?;
        Ok(self.apply(input))
    }

    fn check_divisible(&self, input: Shape) -> Result<Shape> {
        if input.height % self.factor != 0 || input.width % self.factor != 0 {
            return Err(GddError::shape(
                format!("downsample by {}", self.factor),
                input,
                format!("spatial dims divisible by {}", self.factor),
            ));
        }
        Ok(Shape::new(
            input.channels,
            input.height / self.factor,
            input.width / self.factor,
        ))
    }
}

impl LinearOperator for SpatialDownsampler {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.check_divisible(input)
    }

    fn apply(&self, input: &Tensor) -> Tensor {
        let r = self.factor;
        let s = input.shape();
        match self.kind {
            DownsampleKind::BlockAverage => {
                let (oh, ow) = (s.height / r, s.width / r);
                let mut out = Tensor::zeros(Shape::new(s.channels, oh, ow));
                let norm = 1.0 / (r * r) as f64;
                for c in 0..s.channels {
                    let src = input.channel(c);
                    let dst = out.channel_mut(c);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for dy in 0..r {
                                let row = (oy * r + dy) * s.width + ox * r;
                                for &v in &src[row..row + r] {
                                    acc += v;
                                }
                            }
                            dst[oy * ow + ox] = acc * norm;
                        }
                    }
                }
                out
            }
            DownsampleKind::Bicubic | DownsampleKind::GaussianBlur => {
                let xtaps = self.axis_taps(s.width);
                let ytaps = self.axis_taps(s.height);
                let tmp = apply_rows(input, &xtaps);
                apply_cols(&tmp, &ytaps)
            }
        }
    }

    fn adjoint(&self, upstream: &Tensor) -> Tensor {
        let r = self.factor;
        let s = upstream.shape();
        let fine = Shape::new(s.channels, s.height * r, s.width * r);
        match self.kind {
            DownsampleKind::BlockAverage => {
                let mut out = Tensor::zeros(fine);
                let norm = 1.0 / (r * r) as f64;
                for c in 0..s.channels {
                    let g = upstream.channel(c);
                    let dst = out.channel_mut(c);
                    for oy in 0..s.height {
                        for ox in 0..s.width {
                            let gv = g[oy * s.width + ox] * norm;
                            for dy in 0..r {
                                let row = (oy * r + dy) * fine.width + ox * r;
                                for d in &mut dst[row..row + r] {
                                    *d += gv;
                                }
                            }
                        }
                    }
                }
                out
            }
            DownsampleKind::Bicubic | DownsampleKind::GaussianBlur => {
                let xtaps = self.axis_taps(fine.width);
                let ytaps = self.axis_taps(fine.height);
                let tmp = adjoint_cols(upstream, &ytaps, fine.height);
                adjoint_rows(&tmp, &xtaps, fine.width)
            }
        }
    }
}

impl SpatialDownsampler {
    fn axis_taps(&self, in_len: usize) -> Vec<Tap1D> {
        let r = self.factor as f64;
        let out_len = in_len / self.factor;
        match self.kind {
            DownsampleKind::Bicubic => build_taps(out_len, in_len, r, 2.0 * r, |d| {
                catmull_rom(d / r)
            }),
            DownsampleKind::GaussianBlur => {
                let sigma = 0.5 * r;
                build_taps(out_len, in_len, r, 2.0 * sigma, move |d| {
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
            }
            DownsampleKind::BlockAverage => unreachable!("block averaging is not tap-based"),
        }
    }
}

/// Catmull-Rom cubic (a = -0.5), support [-2, 2].
fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

struct Tap1D {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

fn reflect(mut j: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if j < 0 {
            j = -j - 1;
        } else if j >= n {
            j = 2 * n - 1 - j;
        } else {
            return j as usize;
        }
    }
}

/// One output sample per tap row: `out[i] = sum_t w[t] * in[idx[t]]` with the
/// sample grid placed by half-pixel centers, boundary indices reflected, and
/// weights renormalized to sum to one.
fn build_taps(
    out_len: usize,
    in_len: usize,
    step: f64,
    radius: f64,
    kernel: impl Fn(f64) -> f64,
) -> Vec<Tap1D> {
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * step - 0.5;
            let lo = (center - radius).ceil() as isize;
            let hi = (center + radius).floor() as isize;
            let mut indices = Vec::with_capacity((hi - lo + 1) as usize);
            let mut weights = Vec::with_capacity(indices.capacity());
            let mut sum = 0.0;
            for j in lo..=hi {
                let w = kernel(j as f64 - center);
                if w == 0.0 {
                    continue;
                }
                indices.push(reflect(j, in_len));
                weights.push(w);
                sum += w;
            }
            for w in &mut weights {
                *w /= sum;
            }
            Tap1D { indices, weights }
        })
        .collect()
}

fn apply_rows(input: &Tensor, taps: &[Tap1D]) -> Tensor {
    let s = input.shape();
    let ow = taps.len();
    let mut out = Tensor::zeros(Shape::new(s.channels, s.height, ow));
    for c in 0..s.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..s.height {
            let row = &src[y * s.width..(y + 1) * s.width];
            for (x, tap) in taps.iter().enumerate() {
                let mut acc = 0.0;
                for (&i, &w) in tap.indices.iter().zip(&tap.weights) {
                    acc += w * row[i];
                }
                dst[y * ow + x] = acc;
            }
        }
    }
    out
}

fn apply_cols(input: &Tensor, taps: &[Tap1D]) -> Tensor {
    let s = input.shape();
    let oh = taps.len();
    let mut out = Tensor::zeros(Shape::new(s.channels, oh, s.width));
    for c in 0..s.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for (y, tap) in taps.iter().enumerate() {
            let drow = &mut dst[y * s.width..(y + 1) * s.width];
            for (&i, &w) in tap.indices.iter().zip(&tap.weights) {
                let srow = &src[i * s.width..(i + 1) * s.width];
                for (d, &v) in drow.iter_mut().zip(srow) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

fn adjoint_rows(upstream: &Tensor, taps: &[Tap1D], in_w: usize) -> Tensor {
    let s = upstream.shape();
    let mut out = Tensor::zeros(Shape::new(s.channels, s.height, in_w));
    for c in 0..s.channels {
        let g = upstream.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..s.height {
            let grow = &g[y * s.width..(y + 1) * s.width];
            let drow = &mut dst[y * in_w..(y + 1) * in_w];
            for (x, tap) in taps.iter().enumerate() {
                let gv = grow[x];
                for (&i, &w) in tap.indices.iter().zip(&tap.weights) {
                    drow[i] += w * gv;
                }
            }
        }
    }
    out
}

fn adjoint_cols(upstream: &Tensor, taps: &[Tap1D], in_h: usize) -> Tensor {
    let s = upstream.shape();
    let mut out = Tensor::zeros(Shape::new(s.channels, in_h, s.width));
    for c in 0..s.channels {
        let g = upstream.channel(c);
        let dst = out.channel_mut(c);
        for (y, tap) in taps.iter().enumerate() {
            let grow = &g[y * s.width..(y + 1) * s.width];
            for (&i, &w) in tap.indices.iter().zip(&tap.weights) {
                let drow = &mut dst[i * s.width..(i + 1) * s.width];
                for (d, &gv) in drow.iter_mut().zip(grow) {
                    *d += w * gv;
                }
            }
        }
    }
    out
}

/// Upsamples both spatial dimensions by an integer factor with Catmull-Rom
/// interpolation (half-pixel centers, reflect boundary).
pub fn bicubic_upsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 2 {
        return Err(GddError::invalid(format!(
            "upsample factor must be at least 2, got {factor}"
        )));
    }
    let s = input.shape();
    let step = 1.0 / factor as f64;
    let xtaps = build_taps(s.width * factor, s.width, step, 2.0, catmull_rom);
    let ytaps = build_taps(s.height * factor, s.height, step, 2.0, catmull_rom);
    let tmp = apply_rows(input, &xtaps);
    Ok(apply_cols(&tmp, &ytaps))
}

/// Spectral degradation `R`: projects `in_bands` down to `out_bands` with a
/// row-stochastic non-negative matrix (each output band is a convex mix of
/// input bands).
#[derive(Clone, Debug)]
pub struct SpectralResponse {
    out_bands: usize,
    in_bands: usize,
    weights: Vec<f64>,
}

impl SpectralResponse {
    pub fn new(out_bands: usize, in_bands: usize, weights: Vec<f64>) -> Result<Self> {
        if out_bands == 0 || out_bands >= in_bands {
            return Err(GddError::invalid(format!(
                "spectral response needs 1 <= out_bands < in_bands, got {out_bands} -> {in_bands}"
            )));
        }
        if weights.len() != out_bands * in_bands {
            return Err(GddError::shape(
                "spectral response matrix",
                format!("{} entries", weights.len()),
                format!("{out_bands}x{in_bands}"),
            ));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(GddError::invalid(format!(
                    "spectral response entry {i} must be finite and non-negative, got {w}"
                )));
            }
        }
        for row in 0..out_bands {
            let sum: f64 = weights[row * in_bands..(row + 1) * in_bands].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(GddError::invalid(format!(
                    "spectral response row {row} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(SpectralResponse {
            out_bands,
            in_bands,
            weights,
        })
    }

    /// Uniform averaging over contiguous groups of input bands; group sizes
    /// differ by at most one.
    pub fn contiguous(out_bands: usize, in_bands: usize) -> Result<Self> {
        if out_bands == 0 || out_bands >= in_bands {
            return Err(GddError::invalid(format!(
                "contiguous response needs 1 <= out_bands < in_bands, got {out_bands} -> {in_bands}"
            )));
        }
        let base = in_bands / out_bands;
        let extra = in_bands % out_bands;
        let mut weights = vec![0.0; out_bands * in_bands];
        let mut start = 0;
        for row in 0..out_bands {
            let size = base + usize::from(row < extra);
            let w = 1.0 / size as f64;
            for i in start..start + size {
                weights[row * in_bands + i] = w;
            }
            start += size;
        }
        SpectralResponse::new(out_bands, in_bands, weights)
    }

    pub fn out_bands(&self) -> usize {
        self.out_bands
    }

    pub fn in_bands(&self) -> usize {
        self.in_bands
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.in_bands..(row + 1) * self.in_bands]
    }

    pub fn project(&self, input: &Tensor) -> Result<Tensor> {
        self.output_shape(input.shape())?;
        Ok(self.apply(input))
    }
}

impl LinearOperator for SpectralResponse {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_bands {
            return Err(GddError::shape(
                "spectral response input bands",
                input,
                format!("{} channels", self.in_bands),
            ));
        }
        Ok(input.with_channels(self.out_bands))
    }

    fn apply(&self, input: &Tensor) -> Tensor {
        let s = input.shape();
        let mut out = Tensor::zeros(s.with_channels(self.out_bands));
        for o in 0..self.out_bands {
            let dst = out.channel_mut(o);
            for i in 0..self.in_bands {
                let w = self.weights[o * self.in_bands + i];
                if w == 0.0 {
                    continue;
                }
                for (d, &v) in dst.iter_mut().zip(input.channel(i)) {
                    *d += w * v;
                }
            }
        }
        out
    }

    fn adjoint(&self, upstream: &Tensor) -> Tensor {
        let s = upstream.shape();
        let mut out = Tensor::zeros(s.with_channels(self.in_bands));
        for o in 0..self.out_bands {
            let g = upstream.channel(o);
            for i in 0..self.in_bands {
                let w = self.weights[o * self.in_bands + i];
                if w == 0.0 {
                    continue;
                }
                for (d, &gv) in out.channel_mut(i).iter_mut().zip(g) {
                    *d += w * gv;
                }
            }
        }
        out
    }
}

/// Forward-difference gradients with replicate boundary: the output stacks
/// `C` horizontal-difference channels, then `C` vertical ones, so the last
/// column (respectively row) of each difference plane is zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ImageGradientOp;

impl LinearOperator for ImageGradientOp {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(input.with_channels(2 * input.channels))
    }

    fn apply(&self, input: &Tensor) -> Tensor {
        let s = input.shape();
        let (h, w) = (s.height, s.width);
        let mut out = Tensor::zeros(s.with_channels(2 * s.channels));
        for c in 0..s.channels {
            let src = input.channel(c);
            let dh = out.channel_mut(c);
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    dh[y * w + x] = src[y * w + x + 1] - src[y * w + x];
                }
            }
            let dv = out.channel_mut(s.channels + c);
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    dv[y * w + x] = src[(y + 1) * w + x] - src[y * w + x];
                }
            }
        }
        out
    }

    fn adjoint(&self, upstream: &Tensor) -> Tensor {
        let s = upstream.shape();
        let channels = s.channels / 2;
        let (h, w) = (s.height, s.width);
        let mut out = Tensor::zeros(s.with_channels(channels));
        for c in 0..channels {
            let gh = upstream.channel(c);
            let gv = upstream.channel(channels + c);
            let dst = out.channel_mut(c);
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    let g = gh[y * w + x];
                    dst[y * w + x + 1] += g;
                    dst[y * w + x] -= g;
                }
            }
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    let g = gv[y * w + x];
                    dst[(y + 1) * w + x] += g;
                    dst[y * w + x] -= g;
                }
            }
        }
        out
    }
}

/// Convenience wrapper for plain (non-graph) use.
pub fn image_gradient(input: &Tensor) -> Tensor {
    ImageGradientOp.apply(input)
}

/// Reduced-resolution evaluation data: the original image degrades into the
/// fusion inputs and then serves as its own reference.
pub struct WaldData {
    pub input: Tensor,
    pub guidance: Tensor,
    pub reference: Tensor,
}

pub fn wald_protocol(
    hr: &Tensor,
    response: &SpectralResponse,
    sampler: &SpatialDownsampler,
) -> Result<WaldData> {
    let input = sampler.downsample(hr)?;
    let guidance = response.project(hr)?;
    Ok(WaldData {
        input,
        guidance,
        reference: hr.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub rectangles: usize,
    /// Rectangle extent bounds as fractions of the image side.
    pub min_extent: f64,
    pub max_extent: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rectangles: 8,
            min_extent: 0.12,
            max_extent: 0.45,
        }
    }
}

/// Deterministic piecewise-smooth test scene in `[0, 1]`: a bilinear ramp
/// between four random corner values per band, overlaid with random
/// axis-aligned rectangles carrying their own spectra.
pub fn synth_scene(seed: u64, channels: usize, size: usize, config: &SceneConfig) -> Result<Tensor> {
    if channels == 0 {
        return Err(GddError::invalid("scene needs at least one channel"));
    }
    if size < 4 {
        return Err(GddError::invalid(format!(
            "scene side must be at least 4, got {size}"
        )));
    }
    if !(config.min_extent > 0.0 && config.min_extent <= config.max_extent && config.max_extent <= 1.0)
    {
        return Err(GddError::invalid(format!(
            "scene extents must satisfy 0 < min <= max <= 1, got {} and {}",
            config.min_extent, config.max_extent
        )));
    }

    let mut rng = Rng::new(seed);
    let mut scene = Tensor::zeros(Shape::new(channels, size, size));
    let denom = (size - 1) as f64;
    for c in 0..channels {
        let tl = rng.uniform();
        let tr = rng.uniform();
        let bl = rng.uniform();
        let br = rng.uniform();
        let ch = scene.channel_mut(c);
        for y in 0..size {
            let fy = y as f64 / denom;
            let left = tl + (bl - tl) * fy;
            let right = tr + (br - tr) * fy;
            for x in 0..size {
                let fx = x as f64 / denom;
                ch[y * size + x] = left + (right - left) * fx;
            }
        }
    }

    for _ in 0..config.rectangles {
        let x0 = rng.below(size);
        let y0 = rng.below(size);
        let rw = ((rng.range(config.min_extent, config.max_extent) * size as f64) as usize).max(1);
        let rh = ((rng.range(config.min_extent, config.max_extent) * size as f64) as usize).max(1);
        let x1 = (x0 + rw).min(size);
        let y1 = (y0 + rh).min(size);
        for c in 0..channels {
            let level = rng.uniform();
            let ch = scene.channel_mut(c);
            for y in y0..y1 {
                for v in &mut ch[y * size + x0..y * size + x1] {
                    *v = 0.7 * level + 0.3 * *v;
                }
            }
        }
    }
    Ok(scene)
}
