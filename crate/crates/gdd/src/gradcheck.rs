//! Central finite-difference validation of the reverse-mode gradients,
//! operation by operation and end to end through a full model and loss.

use std::sync::Arc;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::degradation::{
    synth_scene, DownsampleKind, ImageGradientOp, SpatialDownsampler, SpectralResponse,
};
use crate::losses::hs_sr_loss;
use crate::network::{GddModel, NetworkConfig};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= self.tolerance
    }
}

fn rand_tensor(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    let data = (0..shape.len()).map(|_| rng.range(lo, hi)).collect();
    Tensor::from_vec(shape, data).expect("bounded samples")
}

/// Random magnitudes in `[min_abs, max_abs]` with random signs, keeping
/// every sample far from the kinks of piecewise ops.
fn rand_signed(rng: &mut Rng, shape: Shape, min_abs: f64, max_abs: f64) -> Tensor {
    let data = (0..shape.len())
        .map(|_| {
            let mag = rng.range(min_abs, max_abs);
            if rng.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("bounded samples")
}

/// Contracts a tensor node to a scalar through a fixed random projection so
/// every output element receives a distinct upstream gradient.
fn projected_sum(graph: &mut Graph, output: NodeId, seed: u64) -> NodeId {
    let shape = graph.shape(output);
    let mut rng = Rng::new(seed);
    let proj = graph.constant(rand_tensor(&mut rng, shape, 0.5, 1.5));
    let weighted = graph.mul(output, proj).expect("projection matches output");
    graph.sum(weighted)
}

fn relative_gap(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3)
}

fn central_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

fn fd_check<F>(
    name: &str,
    tolerance: f64,
    mut store: ParamStore,
    max_entries: usize,
    build: F,
) -> CheckResult
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    let eval = |store: &ParamStore| {
        let mut graph = Graph::new();
        let loss = build(&mut graph, store);
        graph.value(loss).data()[0]
    };

    let mut graph = Graph::new();
    let loss = build(&mut graph, &store);
    graph.backward(loss, &mut store).expect("scalar loss");
    let ids: Vec<ParamId> = store.ids().collect();
    let grads: Vec<Tensor> = ids.iter().map(|&id| store.grad(id).clone()).collect();

    let mut max_rel = 0.0_f64;
    for (&id, grad) in ids.iter().zip(&grads) {
        let len = store.value(id).len();
        let stride = (len / max_entries).max(1);
        let mut idx = 0;
        while idx < len {
            let x = store.value(id).data()[idx];
            let h = central_step(x);
            store.value_mut(id).data_mut()[idx] = x + h;
            let plus = eval(&store);
            store.value_mut(id).data_mut()[idx] = x - h;
            let minus = eval(&store);
            store.value_mut(id).data_mut()[idx] = x;
            max_rel = max_rel.max(relative_gap(grad.data()[idx], (plus - minus) / (2.0 * h)));
            idx += stride;
        }
    }
    CheckResult {
        name: name.to_string(),
        max_rel_error: max_rel,
        tolerance,
    }
}

fn conv_check(name: &str, kernel: usize, stride: usize, seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let input = store.add("input", rand_tensor(&mut rng, Shape::new(2, 6, 6), -1.0, 1.0));
    let weight = store.add(
        "weight",
        rand_tensor(&mut rng, Shape::new(3 * 2, kernel, kernel), -0.5, 0.5),
    );
    let bias = store.add("bias", rand_tensor(&mut rng, Shape::new(3, 1, 1), -0.2, 0.2));
    fd_check(name, OP_TOLERANCE, store, usize::MAX, move |graph, store| {
        let x = graph.param(store, input);
        let w = graph.param(store, weight);
        let b = graph.param(store, bias);
        let y = graph
            .conv2d_strided(x, w, b, stride)
            .expect("valid convolution");
        projected_sum(graph, y, seed ^ 0xabcd)
    })
}

fn unary_check(
    name: &str,
    input: Tensor,
    seed: u64,
    apply: impl Fn(&mut Graph, NodeId) -> NodeId + 'static,
) -> CheckResult {
    let mut store = ParamStore::new();
    let id = store.add("input", input);
    fd_check(name, OP_TOLERANCE, store, usize::MAX, move |graph, store| {
        let x = graph.param(store, id);
        let y = apply(graph, x);
        projected_sum(graph, y, seed)
    })
}

fn channel_norm_check(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let input = store.add("input", rand_tensor(&mut rng, Shape::new(3, 4, 4), -1.0, 1.0));
    let gain = store.add("gain", rand_tensor(&mut rng, Shape::new(3, 1, 1), 0.7, 1.3));
    let shift = store.add("shift", rand_tensor(&mut rng, Shape::new(3, 1, 1), -0.3, 0.3));
    fd_check(
        "channel_norm",
        OP_TOLERANCE,
        store,
        usize::MAX,
        move |graph, store| {
            let x = graph.param(store, input);
            let g = graph.param(store, gain);
            let s = graph.param(store, shift);
            let y = graph.channel_norm(x, g, s, 1e-6).expect("valid norm");
            projected_sum(graph, y, seed ^ 0x77)
        },
    )
}

fn per_band_scale_check(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let input = store.add("input", rand_tensor(&mut rng, Shape::new(4, 3, 3), -1.0, 1.0));
    let weights = store.add("weights", rand_tensor(&mut rng, Shape::new(2, 1, 1), 0.5, 2.0));
    fd_check(
        "per_band_scale",
        OP_TOLERANCE,
        store,
        usize::MAX,
        move |graph, store| {
            let x = graph.param(store, input);
            let w = graph.param(store, weights);
            let y = graph.per_band_scale(x, w).expect("divisible channels");
            projected_sum(graph, y, seed ^ 0x99)
        },
    )
}

fn elementwise_mix_check(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, Shape::new(2, 3, 3), -1.0, 1.0));
    let b = store.add("b", rand_tensor(&mut rng, Shape::new(2, 3, 3), -1.0, 1.0));
    fd_check(
        "elementwise_mix",
        OP_TOLERANCE,
        store,
        usize::MAX,
        move |graph, store| {
            let an = graph.param(store, a);
            let bn = graph.param(store, b);
            let prod = graph.mul(an, bn).expect("same shape");
            let diff = graph.sub(an, bn).expect("same shape");
            let mix = graph.add(prod, diff).expect("same shape");
            let scaled = graph.scalar_mul(an, 1.7);
            let cat = graph.concat_channels(mix, scaled).expect("same plane");
            projected_sum(graph, cat, seed ^ 0x55)
        },
    )
}

fn linear_op_check(
    name: &str,
    input_shape: Shape,
    op: Arc<dyn crate::autodiff::LinearOperator>,
    seed: u64,
) -> CheckResult {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let input = store.add("input", rand_tensor(&mut rng, input_shape, -1.0, 1.0));
    fd_check(name, OP_TOLERANCE, store, usize::MAX, move |graph, store| {
        let x = graph.param(store, input);
        let y = graph.linear(x, op.clone()).expect("valid operator shape");
        projected_sum(graph, y, seed ^ 0x33)
    })
}

fn end_to_end_check() -> CheckResult {
    let guidance = synth_scene(40, 3, 16, &Default::default()).expect("scene");
    let observed = synth_scene(42, 4, 4, &Default::default()).expect("scene");
    let config = NetworkConfig {
        scales: 2,
        base_channels: 8,
        guidance_channels: 8,
        leaky_slope: 0.1,
        seed: 41,
    };
    let mut model = GddModel::build(config, guidance.shape(), 4).expect("model");
    let sampler = Arc::new(SpatialDownsampler::new(DownsampleKind::BlockAverage, 4).expect("factor"));
    let srf = Arc::new(SpectralResponse::contiguous(3, 4).expect("bands"));

    let eval = |model: &GddModel| {
        let mut graph = Graph::new();
        let pass = model.forward(&mut graph, &guidance).expect("forward");
        let terms = hs_sr_loss(
            &mut graph,
            pass.output,
            &observed,
            &guidance,
            sampler.clone(),
            srf.clone(),
            0.8,
        )
        .expect("loss");
        graph.value(terms.total).data()[0]
    };

    let mut graph = Graph::new();
    let pass = model.forward(&mut graph, &guidance).expect("forward");
    let terms = hs_sr_loss(
        &mut graph,
        pass.output,
        &observed,
        &guidance,
        sampler.clone(),
        srf.clone(),
        0.8,
    )
    .expect("loss");
    graph
        .backward(terms.total, model.params_mut())
        .expect("scalar loss");
    let ids: Vec<ParamId> = model.params().ids().collect();
    let grads: Vec<Tensor> = ids
        .iter()
        .map(|&id| model.params().grad(id).clone())
        .collect();

    let mut max_rel = 0.0_f64;
    for (&id, grad) in ids.iter().zip(&grads) {
        let len = model.params().value(id).len();
        let stride = (len / 6).max(1);
        let mut idx = 0;
        while idx < len {
            let x = model.params().value(id).data()[idx];
            let h = central_step(x);
            model.params_mut().value_mut(id).data_mut()[idx] = x + h;
            let plus = eval(&model);
            model.params_mut().value_mut(id).data_mut()[idx] = x - h;
            let minus = eval(&model);
            model.params_mut().value_mut(id).data_mut()[idx] = x;
            max_rel = max_rel.max(relative_gap(grad.data()[idx], (plus - minus) / (2.0 * h)));
            idx += stride;
        }
    }
    CheckResult {
        name: "end_to_end_gdd".to_string(),
        max_rel_error: max_rel,
        tolerance: END_TO_END_TOLERANCE,
    }
}

/// Runs the whole suite. Deterministic: same results on every invocation.
pub fn run_all() -> Vec<CheckResult> {
    let mut results = vec![
        conv_check("conv3x3", 3, 1, 101),
        conv_check("conv1x1", 1, 1, 102),
        conv_check("conv3x3_stride2", 3, 2, 103),
        unary_check(
            "bilinear_up2x",
            rand_tensor(&mut Rng::new(104), Shape::new(2, 4, 4), -1.0, 1.0),
            204,
            |g, x| g.bilinear_upsample2x(x),
        ),
        unary_check(
            "leaky_relu",
            rand_signed(&mut Rng::new(105), Shape::new(2, 4, 4), 0.3, 1.0),
            205,
            |g, x| g.leaky_relu(x, 0.1).expect("valid slope"),
        ),
        unary_check(
            "sigmoid",
            rand_tensor(&mut Rng::new(106), Shape::new(2, 4, 4), -2.0, 2.0),
            206,
            |g, x| g.sigmoid(x),
        ),
        channel_norm_check(107),
        per_band_scale_check(108),
        elementwise_mix_check(109),
    ];

    let mut abs_store = ParamStore::new();
    let abs_input = abs_store.add(
        "input",
        rand_signed(&mut Rng::new(110), Shape::new(2, 4, 4), 0.3, 1.0),
    );
    results.push(fd_check(
        "abs_sum",
        OP_TOLERANCE,
        abs_store,
        usize::MAX,
        move |graph, store| {
            let x = graph.param(store, abs_input);
            graph.abs_sum(x)
        },
    ));

    let mut sq_store = ParamStore::new();
    let sq_input = sq_store.add(
        "input",
        rand_tensor(&mut Rng::new(111), Shape::new(2, 4, 4), -1.0, 1.0),
    );
    results.push(fd_check(
        "square_sum",
        OP_TOLERANCE,
        sq_store,
        usize::MAX,
        move |graph, store| {
            let x = graph.param(store, sq_input);
            graph.square_sum(x)
        },
    ));

    for (name, kind) in [
        ("block_downsample", DownsampleKind::BlockAverage),
        ("bicubic_downsample", DownsampleKind::Bicubic),
        ("gaussian_downsample", DownsampleKind::GaussianBlur),
    ] {
        results.push(linear_op_check(
            name,
            Shape::new(2, 8, 8),
            Arc::new(SpatialDownsampler::new(kind, 2).expect("factor")),
            112,
        ));
    }
    results.push(linear_op_check(
        "spectral_response",
        Shape::new(4, 4, 4),
        Arc::new(SpectralResponse::contiguous(2, 4).expect("bands")),
        113,
    ));
    results.push(linear_op_check(
        "image_gradient",
        Shape::new(2, 5, 5),
        Arc::new(ImageGradientOp),
        114,
    ));

    results.push(end_to_end_check());
    results
}
