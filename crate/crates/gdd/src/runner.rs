//! Per-image-pair optimization: the network is fit to one observation pair
//! and the architecture itself is the only regularizer.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::autodiff::{Graph, LinearOperator};
use crate::degradation::{SpatialDownsampler, SpectralResponse};
use crate::error::{GddError, Result};
use crate::io;
use crate::losses::{denoise_loss, hs_sr_loss, pansharpen_loss, LossTerms};
use crate::metrics;
use crate::network::{AttentionMap, GddModel, NetworkConfig, Variant};
use crate::optim::{adam_step, AdamConfig};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    HsSr,
    Pansharpen,
    Denoise,
}

impl Task {
    pub fn label(&self) -> &'static str {
        match self {
            Task::HsSr => "hs-sr",
            Task::Pansharpen => "pansharpen",
            Task::Denoise => "denoise",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Task {
    type Err = GddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hs-sr" => Ok(Task::HsSr),
            "pansharpen" => Ok(Task::Pansharpen),
            "denoise" => Ok(Task::Denoise),
            other => Err(GddError::invalid(format!(
                "unknown task '{other}' (expected hs-sr, pansharpen, or denoise)"
            ))),
        }
    }
}

/// One fusion instance: the observed input, the guidance image, the
/// degradation operators linking the estimate to the observation, and an
/// optional held-out reference for evaluation.
pub struct FusionProblem {
    task: Task,
    input: Tensor,
    guidance: Tensor,
    reference: Option<Tensor>,
    sampler: Option<Arc<SpatialDownsampler>>,
    srf: Option<Arc<SpectralResponse>>,
}

impl FusionProblem {
    /// Super-resolution: recover a high-resolution cube whose spatial
    /// downsampling matches `input` and whose spectral projection matches
    /// `guidance`.
    pub fn hs_sr(
        input: Tensor,
        guidance: Tensor,
        sampler: SpatialDownsampler,
        srf: SpectralResponse,
    ) -> Result<Self> {
        let out_shape = Shape::new(
            input.shape().channels,
            guidance.shape().height,
            guidance.shape().width,
        );
        let low = sampler.output_shape(out_shape)?;
        if low != input.shape() {
            return Err(GddError::shape("low-resolution input", input.shape(), low));
        }
        let projected = srf.output_shape(out_shape)?;
        if projected != guidance.shape() {
            return Err(GddError::shape(
                "guidance vs spectral projection",
                guidance.shape(),
                projected,
            ));
        }
        Ok(FusionProblem {
            task: Task::HsSr,
            input,
            guidance,
            reference: None,
            sampler: Some(Arc::new(sampler)),
            srf: Some(Arc::new(srf)),
        })
    }

    /// Pansharpening: recover full-resolution bands whose downsampling
    /// matches the multispectral `input` and whose gradients match the
    /// single-band `pan`.
    pub fn pansharpen(input: Tensor, pan: Tensor, sampler: SpatialDownsampler) -> Result<Self> {
        if pan.shape().channels != 1 {
            return Err(GddError::shape("pan guidance", pan.shape(), "a single channel"));
        }
        let out_shape = Shape::new(
            input.shape().channels,
            pan.shape().height,
            pan.shape().width,
        );
        let low = sampler.output_shape(out_shape)?;
        if low != input.shape() {
            return Err(GddError::shape("low-resolution input", input.shape(), low));
        }
        Ok(FusionProblem {
            task: Task::Pansharpen,
            input,
            guidance: pan,
            reference: None,
            sampler: Some(Arc::new(sampler)),
            srf: None,
        })
    }

    /// Guided denoising: fit the noisy image directly while the guidance
    /// steers the network features.
    pub fn denoise(noisy: Tensor, guidance: Tensor) -> Result<Self> {
        if noisy.shape().height != guidance.shape().height
            || noisy.shape().width != guidance.shape().width
        {
            return Err(GddError::shape(
                "noisy image vs guidance",
                noisy.shape(),
                guidance.shape(),
            ));
        }
        Ok(FusionProblem {
            task: Task::Denoise,
            input: noisy,
            guidance,
            reference: None,
            sampler: None,
            srf: None,
        })
    }

    /// Attaches a held-out reference so runs report PSNR in their trace.
    pub fn with_reference(mut self, reference: Tensor) -> Result<Self> {
        if reference.shape() != self.output_shape() {
            return Err(GddError::shape(
                "reference image",
                reference.shape(),
                self.output_shape(),
            ));
        }
        self.reference = Some(reference);
        Ok(self)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn guidance(&self) -> &Tensor {
        &self.guidance
    }

    pub fn reference(&self) -> Option<&Tensor> {
        self.reference.as_ref()
    }

    pub fn output_shape(&self) -> Shape {
        match self.task {
            Task::HsSr | Task::Pansharpen => Shape::new(
                self.input.shape().channels,
                self.guidance.shape().height,
                self.guidance.shape().width,
            ),
            Task::Denoise => self.input.shape(),
        }
    }

    /// Builds a network for this problem; pansharpening runs also get the
    /// per-band loss weights.
    pub fn build_model(&self, variant: Variant, config: NetworkConfig) -> Result<GddModel> {
        let mut model = GddModel::build_variant(
            variant,
            config,
            self.guidance.shape(),
            self.output_shape().channels,
        )?;
        if self.task == Task::Pansharpen {
            model.enable_band_weights(self.output_shape().channels);
        }
        Ok(model)
    }

    fn build_loss(
        &self,
        graph: &mut Graph,
        x: crate::autodiff::NodeId,
        model: &GddModel,
        mu: f64,
    ) -> Result<LossTerms> {
        match self.task {
            Task::HsSr => hs_sr_loss(
                graph,
                x,
                &self.input,
                &self.guidance,
                self.sampler.clone().expect("sampler set at construction"),
                self.srf.clone().expect("response set at construction"),
                mu,
            ),
            Task::Pansharpen => {
                let d = model.band_weights().ok_or_else(|| {
                    GddError::invalid("pansharpening needs the per-band weights enabled")
                })?;
                pansharpen_loss(
                    graph,
                    x,
                    &self.input,
                    &self.guidance,
                    self.sampler.clone().expect("sampler set at construction"),
                    model.params(),
                    d,
                    mu,
                )
            }
            Task::Denoise => denoise_loss(graph, x, &self.input),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Weight on the data fidelity term for the two-term losses.
    pub mu: f64,
    /// Rebalances `mu` once from the term magnitudes at the first iteration.
    pub auto_balance_mu: bool,
    /// Trace cadence; the first and last iterations are always recorded.
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 5000,
            learning_rate: 0.01,
            mu: 1.0,
            auto_balance_mu: false,
            eval_every: 50,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(GddError::invalid("need at least one iteration"));
        }
        if self.eval_every == 0 {
            return Err(GddError::invalid("eval cadence must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(GddError::invalid(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(GddError::invalid(format!(
                "coupling weight must be finite and non-negative, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_term1: f64,
    pub loss_term2: Option<f64>,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    pub fn first(&self) -> Option<&TraceRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    /// The forward output the final loss was computed on.
    pub output: Tensor,
    pub trace: RunTrace,
}

/// Fits the model to the problem with Adam. The code tensor stays fixed;
/// only network parameters move. A non-finite loss aborts with the trace
/// collected so far.
pub fn optimize(
    model: &mut GddModel,
    problem: &FusionProblem,
    config: &RunConfig,
) -> Result<RunOutcome> {
    config.validate()?;
    if model.guidance_shape() != problem.guidance.shape()
        || model.out_channels() != problem.output_shape().channels
    {
        return Err(GddError::shape(
            "model vs problem",
            model.output_shape(),
            problem.output_shape(),
        ));
    }
    if problem.task == Task::Pansharpen {
        model.enable_band_weights(problem.output_shape().channels);
    }

    let adam = AdamConfig::with_learning_rate(config.learning_rate);
    let eval_every = config.eval_every.min(config.iterations);
    let mut mu = config.mu;
    let mut trace = RunTrace::default();
    let mut final_output = None;

    for it in 1..=config.iterations {
        let mut graph = Graph::with_capacity(512);
        let pass = model.forward(&mut graph, &problem.guidance)?;
        let mut terms = problem.build_loss(&mut graph, pass.output, model, mu)?;
        if it == 1 && config.auto_balance_mu {
            let (_, t1, t2) = terms.values(&graph);
            if let Some(t2) = t2 {
                if t1 > 0.0 && t2 > 0.0 {
                    mu = t2 / t1;
                    terms = problem.build_loss(&mut graph, pass.output, model, mu)?;
                }
            }
        }
        let (total, term1, term2) = terms.values(&graph);
        if !total.is_finite() {
            return Err(GddError::NumericalAbort {
                iteration: it,
                trace,
            });
        }
        if it == 1 || it == config.iterations || it % eval_every == 0 {
            let psnr = match &problem.reference {
                Some(reference) => Some(metrics::psnr(reference, graph.value(pass.output))?),
                None => None,
            };
            trace.rows.push(TraceRow {
                iteration: it,
                loss_total: total,
                loss_term1: term1,
                loss_term2: term2,
                psnr,
            });
        }
        if it == config.iterations {
            final_output = Some(graph.value(pass.output).clone());
        }
        graph.backward(terms.total, model.params_mut())?;
        adam_step(model.params_mut(), &adam);
    }

    Ok(RunOutcome {
        output: final_output.expect("at least one iteration"),
        trace,
    })
}

pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: RunOutcome,
}

/// Runs every (variant, seed) pair on the same problem with the same
/// schedule, in parallel up to the available cores. Results come back in
/// variant-major, seed-minor order.
pub fn compare_variants(
    problem: &FusionProblem,
    variants: &[Variant],
    network: &NetworkConfig,
    config: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<VariantRun>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(GddError::invalid(
            "variant comparison needs at least one variant and one seed",
        ));
    }
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let workers = thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunOutcome>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (variant, seed) = jobs[i];
                let mut cfg = network.clone();
                cfg.seed = seed;
                let result = problem
                    .build_model(variant, cfg)
                    .and_then(|mut model| optimize(&mut model, problem, config));
                *slots[i].lock().expect("no poisoned slot") = Some(result);
            });
        }
    });

    let mut runs = Vec::with_capacity(jobs.len());
    for ((variant, seed), slot) in jobs.into_iter().zip(slots) {
        let outcome = slot
            .into_inner()
            .expect("no poisoned slot")
            .expect("every job ran")?;
        runs.push(VariantRun {
            variant,
            seed,
            outcome,
        });
    }
    Ok(runs)
}

fn rgb_composite(output: &Tensor) -> Result<Tensor> {
    if output.shape().channels >= 3 {
        let plane = output.shape().plane();
        let mut data = Vec::with_capacity(3 * plane);
        for c in 0..3 {
            data.extend_from_slice(output.channel(c));
        }
        Tensor::from_vec(
            Shape::new(3, output.shape().height, output.shape().width),
            data,
        )
    } else {
        output.extract_channel(0).replicate_channels(3)
    }
}

/// Writes the standard result set into `dir`: the fused tensor, an RGB
/// composite, an absolute-error map against the reference (normalized to
/// its own peak, recorded in a sidecar), and one PGM per attention map.
/// Returns the written paths.
pub fn export_results(
    dir: &Path,
    output: &Tensor,
    reference: Option<&Tensor>,
    maps: Option<&[AttentionMap]>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| GddError::io(dir, e))?;
    let mut written = Vec::new();

    let fused = dir.join("fused.btf");
    io::write_tensor(&fused, output)?;
    written.push(fused);

    let rgb = dir.join("fused_rgb.ppm");
    io::write_ppm(&rgb, &rgb_composite(output)?)?;
    written.push(rgb);

    if let Some(reference) = reference {
        if reference.shape() != output.shape() {
            return Err(GddError::shape(
                "reference for the error map",
                reference.shape(),
                output.shape(),
            ));
        }
        let mut diff = Tensor::zeros(Shape::new(
            1,
            output.shape().height,
            output.shape().width,
        ));
        let plane = output.shape().plane();
        for p in 0..plane {
            let mut acc = 0.0;
            for c in 0..output.shape().channels {
                acc += (output.data()[c * plane + p] - reference.data()[c * plane + p]).abs();
            }
            diff.data_mut()[p] = acc / output.shape().channels as f64;
        }
        let peak = diff.data().iter().cloned().fold(0.0_f64, f64::max);
        let scaled = if peak > 0.0 {
            diff.map(|v| v / peak)
        } else {
            diff
        };
        let map_path = dir.join("error_map.pgm");
        io::write_pgm(&map_path, &scaled)?;
        written.push(map_path);
        let scale_path = dir.join("error_map_scale.txt");
        fs::write(&scale_path, format!("{peak}\n")).map_err(|e| GddError::io(&scale_path, e))?;
        written.push(scale_path);
    }

    if let Some(maps) = maps {
        for map in maps {
            let path = dir.join(format!(
                "attention_s{}_{}_c{:03}.pgm",
                map.scale,
                map.unit.label(),
                map.channel
            ));
            io::write_pgm(&path, &map.map)?;
            written.push(path);
        }
    }
    Ok(written)
}
