//! Exports the per-scale attention maps of a fitted model.
//!
//! Each gate produces one map per channel per scale; the maps show where
//! the guidance lets decoder features through (near 1) and where it
//! suppresses them (near 0).

use gdd::degradation::{
    synth_scene, wald_protocol, DownsampleKind, SpatialDownsampler, SpectralResponse,
};
use gdd::network::Variant;
use gdd::runner::{export_results, optimize, FusionProblem, RunConfig};
use gdd::NetworkConfig;

fn main() -> gdd::Result<()> {
    let hr = synth_scene(47, 6, 32, &Default::default())?;
    let srf = SpectralResponse::contiguous(3, hr.shape().channels)?;
    let sampler = SpatialDownsampler::new(DownsampleKind::BlockAverage, 4)?;
    let wald = wald_protocol(&hr, &srf, &sampler)?;
    let problem = FusionProblem::hs_sr(wald.input, wald.guidance.clone(), sampler, srf)?;

    let network = NetworkConfig {
        scales: 2,
        base_channels: 8,
        guidance_channels: 8,
        leaky_slope: 0.1,
        seed: 21,
    };
    let config = RunConfig {
        iterations: 150,
        learning_rate: 0.01,
        mu: 1.0,
        auto_balance_mu: false,
        eval_every: 50,
    };
    let mut model = problem.build_model(Variant::Gdd, network)?;
    let outcome = optimize(&mut model, &problem, &config)?;

    let maps = model.export_attention_maps(&wald.guidance)?;
    println!("scale  unit  channel  extent  mean gate");
    for map in &maps {
        let mean = map.map.data().iter().sum::<f64>() / map.map.len() as f64;
        println!(
            "{:>5}  {:<4}  {:>7}  {:>2}x{:<2}  {mean:.3}",
            map.scale,
            map.unit.label(),
            map.channel,
            map.map.shape().height,
            map.map.shape().width,
        );
    }

    let out = std::env::temp_dir().join("gdd_attention_maps");
    let written = export_results(&out, &outcome.output, None, Some(&maps))?;
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}
