//! Guided denoising: the network can only express what its architecture
//! favors, so fitting the noisy image recovers structure before noise.
//!
//! A clean band-mean image of the same scene steers the attention gates;
//! stopping after a modest number of iterations keeps the noise out.

use gdd::degradation::{synth_scene, SpectralResponse};
use gdd::metrics;
use gdd::network::Variant;
use gdd::rng::Rng;
use gdd::runner::{optimize, FusionProblem, RunConfig};
use gdd::{NetworkConfig, Tensor};

fn main() -> gdd::Result<()> {
    let clean = synth_scene(5, 6, 32, &Default::default())?;
    let mut rng = Rng::new(99);
    let noisy_data = clean.data().iter().map(|v| v + rng.range(-0.15, 0.15));
    let noisy = Tensor::from_vec(clean.shape(), noisy_data.collect())?;
    let guidance = SpectralResponse::contiguous(1, clean.shape().channels)?.project(&clean)?;

    println!(
        "noisy input: {:.2} dB against the clean scene",
        metrics::psnr(&clean, &noisy)?
    );

    let problem = FusionProblem::denoise(noisy, guidance)?.with_reference(clean.clone())?;
    let network = NetworkConfig {
        scales: 2,
        base_channels: 16,
        guidance_channels: 16,
        leaky_slope: 0.1,
        seed: 12,
    };
    let config = RunConfig {
        iterations: 250,
        learning_rate: 0.01,
        mu: 1.0,
        auto_balance_mu: false,
        eval_every: 25,
    };
    let mut model = problem.build_model(Variant::Gdd, network)?;
    let outcome = optimize(&mut model, &problem, &config)?;

    println!("iteration  fit-to-noisy  psnr-to-clean");
    for row in &outcome.trace.rows {
        println!(
            "{:>9}  {:.4e}    {:.2} dB",
            row.iteration,
            row.loss_total,
            row.psnr.expect("reference attached")
        );
    }
    let best = outcome
        .trace
        .rows
        .iter()
        .max_by(|a, b| a.psnr.partial_cmp(&b.psnr).expect("finite psnr"))
        .expect("trace row");
    println!(
        "final: {:.2} dB; peak: {:.2} dB at iteration {}. The fit keeps improving \
         against the noisy target while the image quality peaks and falls, so the \
         iteration count is the denoising knob.",
        metrics::psnr(&clean, &outcome.output)?,
        best.psnr.expect("reference attached"),
        best.iteration
    );
    Ok(())
}
