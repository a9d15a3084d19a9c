//! The guided decoder network and its comparison variants.
//!
//! The full model couples two streams. A U-net style encoder-decoder runs
//! over the guidance image and exposes its feature maps; a deep decoder
//! grows a fixed random code tensor up to output resolution, and at every
//! scale its features are rescaled elementwise by attention gates computed
//! from the matching guidance features (encoder features right after each
//! upsample, decoder features after each refinement conv). A final 1x1
//! convolution and sigmoid produce the reconstruction.
//!
//! Variants for ablation share the same building blocks: the bare deep
//! decoder without gating, and two single-stream hourglass networks driven
//! by noise or by the guidance image.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{GddError, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Kernel size of body convolutions.
pub const BODY_KERNEL: usize = 3;
/// Kernel size of attention gate convolutions.
pub const GATE_KERNEL: usize = 1;
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Gated two-stream model: guidance U-net plus attention-modulated
    /// deep decoder.
    Gdd,
    /// Deep decoder alone; the guidance image is ignored.
    DeepDecoder,
    /// Hourglass encoder-decoder on a fixed noise input.
    DipZ,
    /// Hourglass encoder-decoder on the guidance image.
    DipG,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Gdd => "gdd",
            Variant::DeepDecoder => "dd",
            Variant::DipZ => "dip-z",
            Variant::DipG => "dip-g",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = GddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gdd" => Ok(Variant::Gdd),
            "dd" => Ok(Variant::DeepDecoder),
            "dip-z" => Ok(Variant::DipZ),
            "dip-g" => Ok(Variant::DipG),
            other => Err(GddError::invalid(format!(
                "unknown variant '{other}' (expected gdd, dd, dip-z, or dip-g)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkConfig {
    /// Number of 2x scales between the code tensor and the output.
    pub scales: usize,
    /// Feature width of the deep decoder (and of the hourglass variants).
    pub base_channels: usize,
    /// Feature width of the guidance encoder-decoder.
    pub guidance_channels: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            scales: 4,
            base_channels: 64,
            guidance_channels: 64,
            leaky_slope: 0.1,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(GddError::invalid(format!(
                "network needs at least 2 scales, got {}",
                self.scales
            )));
        }
        if self.base_channels == 0 || self.guidance_channels == 0 {
            return Err(GddError::invalid("channel widths must be positive"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(GddError::invalid(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

struct Conv {
    weight: ParamId,
    bias: ParamId,
}

struct Block {
    conv: Conv,
    gain: ParamId,
    shift: ParamId,
}

struct GatePair {
    weight: ParamId,
    bias: ParamId,
}

struct Unet {
    levels: Vec<[Block; 2]>,
    downs: Vec<Conv>,
    ups: Vec<[Block; 2]>,
}

struct DecoderStack {
    stages: Vec<Block>,
    uru: Vec<GatePair>,
    fru: Vec<GatePair>,
}

/// Guidance feature values at every scale, coarse to fine: `encoder[k]` and
/// `decoder[k]` both live at `H / 2^(K-1-k)` so each matches the deep-decoder
/// map at the stage that consumes it.
pub struct GuidanceFeatures {
    pub encoder: Vec<Tensor>,
    pub decoder: Vec<Tensor>,
}

struct GuidanceNodes {
    encoder: Vec<NodeId>,
    decoder: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateUnit {
    Uru,
    Fru,
}

impl GateUnit {
    pub fn label(&self) -> &'static str {
        match self {
            GateUnit::Uru => "uru",
            GateUnit::Fru => "fru",
        }
    }
}

pub struct AttentionMap {
    /// 1-based scale index; spatial size doubles with each scale.
    pub scale: usize,
    pub unit: GateUnit,
    pub channel: usize,
    pub map: Tensor,
}

pub struct ForwardPass {
    pub output: NodeId,
    /// Gate value nodes per scale (empty for ungated variants).
    pub uru_gates: Vec<NodeId>,
    pub fru_gates: Vec<NodeId>,
}

pub struct GddModel {
    variant: Variant,
    config: NetworkConfig,
    guidance_shape: Shape,
    out_channels: usize,
    params: ParamStore,
    code: Tensor,
    unet: Option<Unet>,
    decoder: Option<DecoderStack>,
    head: Conv,
    band_weights: Option<ParamId>,
    gate_bypass: bool,
}

/// Uniform samples in `[0, 0.1]`; the code tensor is sampled once at build
/// time and never optimized.
pub fn init_code_tensor(rng: &mut Rng, shape: Shape) -> Tensor {
    let data = (0..shape.len()).map(|_| 0.1 * rng.uniform()).collect();
    Tensor::from_vec(shape, data).expect("uniform samples are finite")
}

/// 1x1 conv -> LeakyReLU -> sigmoid over guidance features. The conv must
/// preserve the channel count, so every output pixel's weight vector depends
/// only on that pixel's feature vector.
pub fn attention_gate(
    graph: &mut Graph,
    features: NodeId,
    weight: NodeId,
    bias: NodeId,
    slope: f64,
) -> Result<NodeId> {
    let f_shape = graph.shape(features);
    let w_shape = graph.shape(weight);
    if w_shape.height != GATE_KERNEL || w_shape.width != GATE_KERNEL {
        return Err(GddError::shape(
            "attention gate kernel",
            w_shape,
            format!("{GATE_KERNEL}x{GATE_KERNEL}"),
        ));
    }
    if w_shape.channels != f_shape.channels * f_shape.channels {
        return Err(GddError::shape(
            "attention gate conv must preserve channel count",
            w_shape,
            format!("{0}x{0}x1x1 bank", f_shape.channels),
        ));
    }
    let y = graph.conv2d(features, weight, bias)?;
    let y = graph.leaky_relu(y, slope)?;
    Ok(graph.sigmoid(y))
}

/// Upsampling refinement: scales the post-upsample decoder feature `f`
/// elementwise by a gate computed from the same-scale guidance encoder
/// feature. With `bypass` the gate is forced to one, making the unit an
/// exact identity.
pub fn uru(
    graph: &mut Graph,
    f: NodeId,
    gamma: NodeId,
    weight: NodeId,
    bias: NodeId,
    slope: f64,
    bypass: bool,
) -> Result<NodeId> {
    modulate(graph, "uru", f, gamma, weight, bias, slope, bypass)
}

/// Feature refinement: as [`uru`], gated by the same-scale guidance decoder
/// feature.
pub fn fru(
    graph: &mut Graph,
    f: NodeId,
    xi: NodeId,
    weight: NodeId,
    bias: NodeId,
    slope: f64,
    bypass: bool,
) -> Result<NodeId> {
    modulate(graph, "fru", f, xi, weight, bias, slope, bypass)
}

#[allow(clippy::too_many_arguments)]
fn modulate(
    graph: &mut Graph,
    unit: &str,
    f: NodeId,
    source: NodeId,
    weight: NodeId,
    bias: NodeId,
    slope: f64,
    bypass: bool,
) -> Result<NodeId> {
    if graph.shape(f) != graph.shape(source) {
        return Err(GddError::shape(
            format!("{unit} feature alignment"),
            graph.shape(f),
            graph.shape(source),
        ));
    }
    if bypass {
        return Ok(f);
    }
    let gate = attention_gate(graph, source, weight, bias, slope)?;
    graph.mul(f, gate)
}

impl GddModel {
    /// Builds the gated two-stream model.
    pub fn build(
        config: NetworkConfig,
        guidance_shape: Shape,
        out_channels: usize,
    ) -> Result<Self> {
        GddModel::build_variant(Variant::Gdd, config, guidance_shape, out_channels)
    }

    pub fn build_variant(
        variant: Variant,
        config: NetworkConfig,
        guidance_shape: Shape,
        out_channels: usize,
    ) -> Result<Self> {
        config.validate()?;
        if out_channels == 0 {
            return Err(GddError::invalid("output needs at least one channel"));
        }
        if guidance_shape.channels == 0 {
            return Err(GddError::invalid("guidance needs at least one channel"));
        }
        let down = 1usize << config.scales;
        if guidance_shape.height % down != 0 || guidance_shape.width % down != 0 {
            return Err(GddError::shape(
                format!("guidance spatial size for {} scales", config.scales),
                guidance_shape,
                format!("height and width divisible by {down}"),
            ));
        }
        if variant == Variant::Gdd && config.base_channels != config.guidance_channels {
            return Err(GddError::invalid(format!(
                "gating multiplies decoder features ({} channels) by gated guidance \
                 features ({} channels) elementwise; the widths must match",
                config.base_channels, config.guidance_channels
            )));
        }

        let mut params = ParamStore::new();
        let mut rng = Rng::new(config.seed);
        let k = config.scales;
        let base = config.base_channels;

        let unet = match variant {
            Variant::Gdd => Some(build_unet(
                &mut params,
                &mut rng,
                guidance_shape.channels,
                config.guidance_channels,
                k,
            )),
            Variant::DipZ => Some(build_unet(&mut params, &mut rng, base, base, k)),
            Variant::DipG => Some(build_unet(
                &mut params,
                &mut rng,
                guidance_shape.channels,
                base,
                k,
            )),
            Variant::DeepDecoder => None,
        };

        let decoder = match variant {
            Variant::Gdd | Variant::DeepDecoder => {
                let mut stages = Vec::with_capacity(k);
                let mut uru = Vec::with_capacity(k);
                let mut fru = Vec::with_capacity(k);
                for s in 1..=k {
                    if variant == Variant::Gdd {
                        uru.push(add_gate(
                            &mut params,
                            &mut rng,
                            &format!("uru{s}"),
                            config.guidance_channels,
                        ));
                    }
                    stages.push(add_block(
                        &mut params,
                        &mut rng,
                        &format!("stage{s}"),
                        base,
                        base,
                    ));
                    if variant == Variant::Gdd {
                        fru.push(add_gate(
                            &mut params,
                            &mut rng,
                            &format!("fru{s}"),
                            config.guidance_channels,
                        ));
                    }
                }
                Some(DecoderStack { stages, uru, fru })
            }
            Variant::DipZ | Variant::DipG => None,
        };

        let head = add_conv(&mut params, &mut rng, "head", base, out_channels, 1);

        let code = match variant {
            Variant::Gdd | Variant::DeepDecoder => init_code_tensor(
                &mut rng,
                Shape::new(base, guidance_shape.height / down, guidance_shape.width / down),
            ),
            Variant::DipZ => init_code_tensor(
                &mut rng,
                Shape::new(base, guidance_shape.height, guidance_shape.width),
            ),
            Variant::DipG => Tensor::default(),
        };

        Ok(GddModel {
            variant,
            config,
            guidance_shape,
            out_channels,
            params,
            code,
            unet,
            decoder,
            head,
            band_weights: None,
            gate_bypass: false,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn guidance_shape(&self) -> Shape {
        self.guidance_shape
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_shape(&self) -> Shape {
        self.guidance_shape.with_channels(self.out_channels)
    }

    /// The fixed code tensor (noise input for the decoder-driven variants).
    pub fn code(&self) -> &Tensor {
        &self.code
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Forces every gate to one, turning the modulation units into exact
    /// identities. Intended for ablations and tests.
    pub fn set_gate_bypass(&mut self, bypass: bool) {
        self.gate_bypass = bypass;
    }

    pub fn gate_bypass(&self) -> bool {
        self.gate_bypass
    }

    /// Adds (once) the learnable per-band weights used by the gradient
    /// matching loss. They live with the model parameters so the optimizer
    /// updates them, but the forward pass never consumes them.
    pub fn enable_band_weights(&mut self, bands: usize) -> ParamId {
        if let Some(id) = self.band_weights {
            return id;
        }
        let id = self
            .params
            .add("band_weights", Tensor::filled(Shape::new(bands, 1, 1), 1.0));
        self.band_weights = Some(id);
        id
    }

    pub fn band_weights(&self) -> Option<ParamId> {
        self.band_weights
    }

    fn conv_node(&self, graph: &mut Graph, conv: &Conv, input: NodeId, stride: usize) -> Result<NodeId> {
        let w = graph.param(&self.params, conv.weight);
        let b = graph.param(&self.params, conv.bias);
        graph.conv2d_strided(input, w, b, stride)
    }

    fn block_node(&self, graph: &mut Graph, block: &Block, input: NodeId) -> Result<NodeId> {
        let y = self.conv_node(graph, &block.conv, input, 1)?;
        let gain = graph.param(&self.params, block.gain);
        let shift = graph.param(&self.params, block.shift);
        let y = graph.channel_norm(y, gain, shift, NORM_EPS)?;
        graph.leaky_relu(y, self.config.leaky_slope)
    }

    fn double_block(&self, graph: &mut Graph, pair: &[Block; 2], input: NodeId) -> Result<NodeId> {
        let y = self.block_node(graph, &pair[0], input)?;
        self.block_node(graph, &pair[1], y)
    }

    fn unet_nodes(&self, graph: &mut Graph, input: NodeId) -> Result<GuidanceNodes> {
        let unet = self.unet.as_ref().expect("variant has no guidance network");
        let k = self.config.scales;
        let mut skips = Vec::with_capacity(k);
        let mut e = input;
        for j in 0..k {
            e = self.double_block(graph, &unet.levels[j], e)?;
            skips.push(e);
            e = self.conv_node(graph, &unet.downs[j], e, 2)?;
        }
        let mut decoder = Vec::with_capacity(k);
        let mut d = e;
        for i in 1..=k {
            d = graph.bilinear_upsample2x(d);
            d = graph.concat_channels(d, skips[k - i])?;
            d = self.double_block(graph, &unet.ups[i - 1], d)?;
            decoder.push(d);
        }
        skips.reverse();
        Ok(GuidanceNodes {
            encoder: skips,
            decoder,
        })
    }

    /// Runs the guidance branch alone and returns detached feature values,
    /// coarse to fine. Only meaningful for variants whose network consumes
    /// the guidance image.
    pub fn guidance_forward(&self, guidance: &Tensor) -> Result<GuidanceFeatures> {
        if !matches!(self.variant, Variant::Gdd | Variant::DipG) {
            return Err(GddError::invalid(format!(
                "variant {} has no guidance-driven branch",
                self.variant
            )));
        }
        self.check_guidance(guidance)?;
        let mut graph = Graph::new();
        let input = graph.constant(guidance.clone());
        let nodes = self.unet_nodes(&mut graph, input)?;
        Ok(GuidanceFeatures {
            encoder: nodes
                .encoder
                .iter()
                .map(|&id| graph.value(id).clone())
                .collect(),
            decoder: nodes
                .decoder
                .iter()
                .map(|&id| graph.value(id).clone())
                .collect(),
        })
    }

    fn check_guidance(&self, guidance: &Tensor) -> Result<()> {
        if guidance.shape() != self.guidance_shape {
            return Err(GddError::shape(
                "guidance image",
                guidance.shape(),
                self.guidance_shape,
            ));
        }
        Ok(())
    }

    /// Full forward pass onto the caller's tape.
    pub fn forward(&self, graph: &mut Graph, guidance: &Tensor) -> Result<ForwardPass> {
        self.check_guidance(guidance)?;
        match self.variant {
            Variant::Gdd => self.forward_gated(graph, guidance),
            Variant::DeepDecoder => {
                let stack = self.decoder.as_ref().expect("decoder variant");
                let mut f = graph.constant(self.code.clone());
                for stage in &stack.stages {
                    f = graph.bilinear_upsample2x(f);
                    f = self.block_node(graph, stage, f)?;
                }
                let output = self.head_node(graph, f)?;
                Ok(ForwardPass {
                    output,
                    uru_gates: Vec::new(),
                    fru_gates: Vec::new(),
                })
            }
            Variant::DipZ | Variant::DipG => {
                let input = if self.variant == Variant::DipZ {
                    graph.constant(self.code.clone())
                } else {
                    graph.constant(guidance.clone())
                };
                let nodes = self.unet_nodes(graph, input)?;
                let last = *nodes.decoder.last().expect("at least two scales");
                let output = self.head_node(graph, last)?;
                Ok(ForwardPass {
                    output,
                    uru_gates: Vec::new(),
                    fru_gates: Vec::new(),
                })
            }
        }
    }

    fn forward_gated(&self, graph: &mut Graph, guidance: &Tensor) -> Result<ForwardPass> {
        let stack = self.decoder.as_ref().expect("gated variant");
        let g = graph.constant(guidance.clone());
        let feats = self.unet_nodes(graph, g)?;
        let slope = self.config.leaky_slope;

        let mut uru_gates = Vec::with_capacity(stack.stages.len());
        let mut fru_gates = Vec::with_capacity(stack.stages.len());
        let mut f = graph.constant(self.code.clone());
        for (k, stage) in stack.stages.iter().enumerate() {
            f = graph.bilinear_upsample2x(f);
            f = self.apply_gate(
                graph,
                "uru",
                f,
                feats.encoder[k],
                &stack.uru[k],
                slope,
                &mut uru_gates,
            )?;
            f = self.block_node(graph, stage, f)?;
            f = self.apply_gate(
                graph,
                "fru",
                f,
                feats.decoder[k],
                &stack.fru[k],
                slope,
                &mut fru_gates,
            )?;
        }
        let output = self.head_node(graph, f)?;
        Ok(ForwardPass {
            output,
            uru_gates,
            fru_gates,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_gate(
        &self,
        graph: &mut Graph,
        unit: &str,
        f: NodeId,
        source: NodeId,
        gate: &GatePair,
        slope: f64,
        gates_out: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        if graph.shape(f) != graph.shape(source) {
            return Err(GddError::shape(
                format!("{unit} feature alignment"),
                graph.shape(f),
                graph.shape(source),
            ));
        }
        let w = graph.param(&self.params, gate.weight);
        let b = graph.param(&self.params, gate.bias);
        let gate_node = attention_gate(graph, source, w, b, slope)?;
        gates_out.push(gate_node);
        if self.gate_bypass {
            Ok(f)
        } else {
            graph.mul(f, gate_node)
        }
    }

    fn head_node(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        let y = self.conv_node(graph, &self.head, input, 1)?;
        Ok(graph.sigmoid(y))
    }

    /// Gate values at every scale, one single-channel map per (scale, unit,
    /// channel) triple.
    pub fn export_attention_maps(&self, guidance: &Tensor) -> Result<Vec<AttentionMap>> {
        if self.variant != Variant::Gdd {
            return Err(GddError::invalid(format!(
                "attention maps exist only for the gated model, not {}",
                self.variant
            )));
        }
        let mut graph = Graph::new();
        let pass = self.forward(&mut graph, guidance)?;
        let mut maps = Vec::new();
        for (k, (&gu, &gf)) in pass.uru_gates.iter().zip(&pass.fru_gates).enumerate() {
            for (unit, node) in [(GateUnit::Uru, gu), (GateUnit::Fru, gf)] {
                let value = graph.value(node);
                for c in 0..value.shape().channels {
                    maps.push(AttentionMap {
                        scale: k + 1,
                        unit,
                        channel: c,
                        map: value.extract_channel(c),
                    });
                }
            }
        }
        Ok(maps)
    }

    /// Names of parameters a forward pass never touches. The per-band loss
    /// weights are excluded: they enter through the loss, not the network.
    pub fn audit_connectivity(&self, guidance: &Tensor) -> Result<Vec<String>> {
        let mut graph = Graph::new();
        let pass = self.forward(&mut graph, guidance)?;
        let reachable = graph.reachable_params(pass.output);
        Ok(self
            .params
            .ids()
            .filter(|id| Some(*id) != self.band_weights && !reachable.contains(id))
            .map(|id| self.params.name(id).to_string())
            .collect())
    }
}

fn he_tensor(rng: &mut Rng, shape: Shape, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.len()).map(|_| rng.range(-bound, bound)).collect();
    Tensor::from_vec(shape, data).expect("bounded samples are finite")
}

fn add_conv(
    params: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
) -> Conv {
    let weight_shape = Shape::new(out_channels * in_channels, kernel, kernel);
    let weight = params.add(
        format!("{name}.weight"),
        he_tensor(rng, weight_shape, in_channels * kernel * kernel),
    );
    let bias = params.add(
        format!("{name}.bias"),
        Tensor::zeros(Shape::new(out_channels, 1, 1)),
    );
    Conv { weight, bias }
}

fn add_block(
    params: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    in_channels: usize,
    out_channels: usize,
) -> Block {
    let conv = add_conv(params, rng, name, in_channels, out_channels, BODY_KERNEL);
    let gain = params.add(
        format!("{name}.gain"),
        Tensor::filled(Shape::new(out_channels, 1, 1), 1.0),
    );
    let shift = params.add(
        format!("{name}.shift"),
        Tensor::zeros(Shape::new(out_channels, 1, 1)),
    );
    Block { conv, gain, shift }
}

fn add_gate(params: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> GatePair {
    let conv = add_conv(params, rng, name, channels, channels, GATE_KERNEL);
    GatePair {
        weight: conv.weight,
        bias: conv.bias,
    }
}

fn build_unet(
    params: &mut ParamStore,
    rng: &mut Rng,
    in_channels: usize,
    width: usize,
    scales: usize,
) -> Unet {
    let mut levels = Vec::with_capacity(scales);
    let mut downs = Vec::with_capacity(scales);
    let mut ups = Vec::with_capacity(scales);
    for j in 0..scales {
        let first_in = if j == 0 { in_channels } else { width };
        levels.push([
            add_block(params, rng, &format!("enc{j}.0"), first_in, width),
            add_block(params, rng, &format!("enc{j}.1"), width, width),
        ]);
        downs.push(add_conv(
            params,
            rng,
            &format!("down{j}"),
            width,
            width,
            BODY_KERNEL,
        ));
    }
    for i in 0..scales {
        ups.push([
            add_block(params, rng, &format!("dec{i}.0"), 2 * width, width),
            add_block(params, rng, &format!("dec{i}.1"), width, width),
        ]);
    }
    Unet { levels, downs, ups }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> NetworkConfig {
        NetworkConfig {
            scales: 2,
            base_channels: 4,
            guidance_channels: 4,
            leaky_slope: 0.1,
            seed,
        }
    }

    fn tiny_guidance(seed: u64) -> Tensor {
        crate::degradation::synth_scene(seed, 3, 16, &Default::default()).unwrap()
    }

    #[test]
    fn build_produces_declared_shapes() {
        let config = NetworkConfig {
            seed: 1,
            ..Default::default()
        };
        let model = GddModel::build(config, Shape::new(3, 64, 64), 8).unwrap();
        assert_eq!(model.code().shape(), Shape::new(64, 4, 4));
        let guidance =
            crate::degradation::synth_scene(0, 3, 64, &Default::default()).unwrap();
        let mut graph = Graph::new();
        let pass = model.forward(&mut graph, &guidance).unwrap();
        assert_eq!(graph.shape(pass.output), Shape::new(8, 64, 64));
    }

    #[test]
    fn forward_outputs_lie_in_the_open_unit_interval() {
        let model = GddModel::build(tiny_config(3), Shape::new(3, 16, 16), 3).unwrap();
        let mut graph = Graph::new();
        let pass = model.forward(&mut graph, &tiny_guidance(1)).unwrap();
        for &v in graph.value(pass.output).data() {
            assert!(v.is_finite() && v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn build_rejects_indivisible_spatial_size() {
        let err = match GddModel::build(tiny_config(0), Shape::new(3, 18, 16), 3) {
            Err(err) => err,
            Ok(_) => panic!("expected an indivisible size to be rejected"),
        };
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn gated_build_rejects_mismatched_widths() {
        let config = NetworkConfig {
            base_channels: 4,
            guidance_channels: 8,
            scales: 2,
            ..Default::default()
        };
        assert!(GddModel::build(config, Shape::new(3, 16, 16), 3).is_err());
    }

    #[test]
    fn every_variant_reaches_all_parameters_from_the_output() {
        let guidance = tiny_guidance(2);
        for variant in [
            Variant::Gdd,
            Variant::DeepDecoder,
            Variant::DipZ,
            Variant::DipG,
        ] {
            let model =
                GddModel::build_variant(variant, tiny_config(5), guidance.shape(), 3).unwrap();
            let orphans = model.audit_connectivity(&guidance).unwrap();
            assert!(orphans.is_empty(), "{variant}: unreachable {orphans:?}");
        }
    }

    #[test]
    fn variants_share_the_output_shape() {
        let guidance = tiny_guidance(4);
        for variant in [
            Variant::Gdd,
            Variant::DeepDecoder,
            Variant::DipZ,
            Variant::DipG,
        ] {
            let model =
                GddModel::build_variant(variant, tiny_config(6), guidance.shape(), 5).unwrap();
            let mut graph = Graph::new();
            let pass = model.forward(&mut graph, &guidance).unwrap();
            assert_eq!(graph.shape(pass.output), Shape::new(5, 16, 16));
        }
    }

    #[test]
    fn forward_is_deterministic_for_a_seed() {
        let guidance = tiny_guidance(7);
        let run = || {
            let model = GddModel::build(tiny_config(9), guidance.shape(), 3).unwrap();
            let mut graph = Graph::new();
            let pass = model.forward(&mut graph, &guidance).unwrap();
            graph.value(pass.output).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn deep_decoder_ignores_guidance_content() {
        let g1 = tiny_guidance(10);
        let g2 = tiny_guidance(11);
        let model =
            GddModel::build_variant(Variant::DeepDecoder, tiny_config(12), g1.shape(), 3)
                .unwrap();
        let mut graph1 = Graph::new();
        let out1 = model.forward(&mut graph1, &g1).unwrap().output;
        let mut graph2 = Graph::new();
        let out2 = model.forward(&mut graph2, &g2).unwrap().output;
        assert_eq!(graph1.value(out1), graph2.value(out2));
    }

    #[test]
    fn guidance_driven_hourglass_responds_to_guidance_changes() {
        let g1 = tiny_guidance(13);
        let g2 = tiny_guidance(14);
        let model =
            GddModel::build_variant(Variant::DipG, tiny_config(15), g1.shape(), 3).unwrap();
        let mut graph1 = Graph::new();
        let out1 = model.forward(&mut graph1, &g1).unwrap().output;
        let mut graph2 = Graph::new();
        let out2 = model.forward(&mut graph2, &g2).unwrap().output;
        assert_ne!(graph1.value(out1), graph2.value(out2));
    }

    #[test]
    fn guidance_features_are_pure_and_sized_by_scale() {
        let config = NetworkConfig {
            scales: 3,
            base_channels: 4,
            guidance_channels: 4,
            leaky_slope: 0.1,
            seed: 21,
        };
        let guidance =
            crate::degradation::synth_scene(16, 3, 32, &Default::default()).unwrap();
        let model = GddModel::build(config, Shape::new(3, 32, 32), 3).unwrap();
        let a = model.guidance_forward(&guidance).unwrap();
        let b = model.guidance_forward(&guidance).unwrap();
        assert_eq!(a.encoder.len(), 3);
        assert_eq!(a.decoder.len(), 3);
        for k in 0..3 {
            // Index k (scale k+1) lives at H / 2^(K-1-k): 8, 16, 32.
            let expect = 32 >> (2 - k);
            assert_eq!(a.encoder[k].shape(), Shape::new(4, expect, expect));
            assert_eq!(a.decoder[k].shape(), Shape::new(4, expect, expect));
            assert_eq!(a.encoder[k], b.encoder[k]);
            assert_eq!(a.decoder[k], b.decoder[k]);
        }
    }

    #[test]
    fn perturbing_an_encoder_weight_changes_some_feature() {
        let guidance = tiny_guidance(17);
        let mut model = GddModel::build(tiny_config(18), guidance.shape(), 3).unwrap();
        let before = model.guidance_forward(&guidance).unwrap();
        let enc_weight = model
            .params()
            .ids()
            .find(|&id| model.params().name(id) == "enc0.0.weight")
            .unwrap();
        model.params_mut().value_mut(enc_weight).data_mut()[0] += 0.25;
        let after = model.guidance_forward(&guidance).unwrap();
        let changed = (0..before.encoder.len())
            .any(|k| before.encoder[k] != after.encoder[k]);
        assert!(changed);
    }

    #[test]
    fn attention_gate_outputs_are_open_unit_and_local() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let weight = store.add("w", he_tensor(&mut rng, Shape::new(4, 1, 1), 2));
        let bias = store.add("b", Tensor::zeros(Shape::new(2, 1, 1)));

        let mut base = Tensor::zeros(Shape::new(2, 5, 5));
        for (i, v) in base.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let mut graph = Graph::new();
        let f = graph.constant(base.clone());
        let w = graph.param(&store, weight);
        let b = graph.param(&store, bias);
        let gate = attention_gate(&mut graph, f, w, b, 0.1).unwrap();
        let reference = graph.value(gate).clone();
        assert_eq!(reference.shape(), base.shape());
        for &v in reference.data() {
            assert!(v > 0.0 && v < 1.0);
        }

        // Perturb one pixel's feature vector; only that pixel may change.
        let mut poked = base.clone();
        let idx = poked.index(1, 2, 3);
        poked.data_mut()[idx] += 1.0;
        let mut graph2 = Graph::new();
        let f2 = graph2.constant(poked);
        let w2 = graph2.param(&store, weight);
        let b2 = graph2.param(&store, bias);
        let gate2 = attention_gate(&mut graph2, f2, w2, b2, 0.1).unwrap();
        let perturbed = graph2.value(gate2);
        let mut changed_pixels = Vec::new();
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    if (perturbed.get(c, y, x) - reference.get(c, y, x)).abs() > 1e-15 {
                        changed_pixels.push((y, x));
                    }
                }
            }
        }
        assert!(!changed_pixels.is_empty());
        assert!(changed_pixels.iter().all(|&(y, x)| (y, x) == (2, 3)));
    }

    #[test]
    fn zero_gate_parameters_yield_one_half_everywhere() {
        let mut store = ParamStore::new();
        let weight = store.add("w", Tensor::zeros(Shape::new(4, 1, 1)));
        let bias = store.add("b", Tensor::zeros(Shape::new(2, 1, 1)));
        let mut graph = Graph::new();
        let f = graph.constant(Tensor::filled(Shape::new(2, 3, 3), 0.4));
        let w = graph.param(&store, weight);
        let b = graph.param(&store, bias);
        let gate = attention_gate(&mut graph, f, w, b, 0.1).unwrap();
        for &v in graph.value(gate).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn bypassed_modulation_is_the_exact_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let weight = store.add("w", he_tensor(&mut rng, Shape::new(9, 1, 1), 3));
        let bias = store.add("b", Tensor::zeros(Shape::new(3, 1, 1)));
        let mut graph = Graph::new();
        let f = graph.constant(Tensor::filled(Shape::new(3, 4, 4), 0.37));
        let source = graph.constant(Tensor::filled(Shape::new(3, 4, 4), -0.2));
        let w = graph.param(&store, weight);
        let b = graph.param(&store, bias);
        let gated = uru(&mut graph, f, source, w, b, 0.1, true).unwrap();
        assert_eq!(gated, f);
        let gated = fru(&mut graph, f, source, w, b, 0.1, true).unwrap();
        assert_eq!(gated, f);
    }

    #[test]
    fn zero_features_stay_zero_under_modulation() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let weight = store.add("w", he_tensor(&mut rng, Shape::new(4, 1, 1), 2));
        let bias = store.add("b", Tensor::zeros(Shape::new(2, 1, 1)));
        let mut graph = Graph::new();
        let f = graph.constant(Tensor::zeros(Shape::new(2, 4, 4)));
        let source = graph.constant(Tensor::filled(Shape::new(2, 4, 4), 0.3));
        let w = graph.param(&store, weight);
        let b = graph.param(&store, bias);
        let out = uru(&mut graph, f, source, w, b, 0.1, false).unwrap();
        assert!(graph.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_bypass_ignores_gate_parameters() {
        let guidance = tiny_guidance(19);
        let mut model = GddModel::build(tiny_config(20), guidance.shape(), 3).unwrap();
        model.set_gate_bypass(true);
        let mut graph = Graph::new();
        let out = model.forward(&mut graph, &guidance).unwrap().output;
        let before = graph.value(out).clone();
        let gate_weight = model
            .params()
            .ids()
            .find(|&id| model.params().name(id) == "uru1.weight")
            .unwrap();
        model.params_mut().value_mut(gate_weight).data_mut()[0] += 5.0;
        let mut graph2 = Graph::new();
        let out2 = model.forward(&mut graph2, &guidance).unwrap().output;
        assert_eq!(&before, graph2.value(out2));
    }

    #[test]
    fn code_tensor_sampling_matches_its_law() {
        let mut rng = Rng::new(33);
        let code = init_code_tensor(&mut rng, Shape::new(64, 4, 4));
        let mut sum = 0.0;
        for &v in code.data() {
            assert!((0.0..=0.1).contains(&v));
            sum += v;
        }
        let mean = sum / code.len() as f64;
        assert!((mean - 0.05).abs() < 0.005, "mean {mean}");
        let mut rng2 = Rng::new(33);
        assert_eq!(code, init_code_tensor(&mut rng2, Shape::new(64, 4, 4)));
    }

    #[test]
    fn attention_map_export_enumerates_every_gate_channel() {
        let guidance = tiny_guidance(21);
        let model = GddModel::build(tiny_config(22), guidance.shape(), 3).unwrap();
        let maps = model.export_attention_maps(&guidance).unwrap();
        // 2 scales x 2 units x 4 channels.
        assert_eq!(maps.len(), 16);
        for map in &maps {
            let side = 16 >> (2 - map.scale);
            assert_eq!(map.map.shape(), Shape::new(1, side, side));
            assert!(map.map.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let dd = GddModel::build_variant(
            Variant::DeepDecoder,
            tiny_config(23),
            guidance.shape(),
            3,
        )
        .unwrap();
        assert!(dd.export_attention_maps(&guidance).is_err());
    }
}
