//! Task losses assembled on the autodiff tape.
//!
//! Every loss compares the network output against the observed inputs
//! through the degradation operators, so the only regularization is the
//! network itself. The individual terms stay addressable so callers can
//! trace them separately and rebalance the coupling weight.

use std::sync::Arc;

use crate::autodiff::{Graph, LinearOperator, NodeId, ParamId, ParamStore};
use crate::degradation::{image_gradient, ImageGradientOp, SpatialDownsampler, SpectralResponse};
use crate::error::{GddError, Result};
use crate::tensor::Tensor;

/// Handles to the assembled loss nodes. `fidelity` and `guidance` are the
/// raw unweighted terms; `total` applies the coupling weight.
pub struct LossTerms {
    pub total: NodeId,
    pub fidelity: NodeId,
    pub guidance: Option<NodeId>,
}

impl LossTerms {
    /// Reads (total, fidelity, guidance) values after a forward pass.
    pub fn values(&self, graph: &Graph) -> (f64, f64, Option<f64>) {
        let scalar = |id: NodeId| graph.value(id).data()[0];
        (
            scalar(self.total),
            scalar(self.fidelity),
            self.guidance.map(scalar),
        )
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(GddError::invalid(format!(
            "coupling weight must be finite and non-negative, got {mu}"
        )));
    }
    Ok(())
}

/// `mu * ||S(X) - Y||^2 + ||R(X) - G||^2`: the estimate must reproduce the
/// low-resolution bands under spatial downsampling and the guidance bands
/// under the spectral response.
pub fn hs_sr_loss(
    graph: &mut Graph,
    x: NodeId,
    observed: &Tensor,
    guidance: &Tensor,
    sampler: Arc<SpatialDownsampler>,
    srf: Arc<SpectralResponse>,
    mu: f64,
) -> Result<LossTerms> {
    check_mu(mu)?;
    let x_shape = graph.shape(x);
    let low_shape = sampler.output_shape(x_shape)?;
    if low_shape != observed.shape() {
        return Err(GddError::shape(
            "observed low-resolution image",
            observed.shape(),
            low_shape,
        ));
    }
    let projected_shape = srf.output_shape(x_shape)?;
    if projected_shape != guidance.shape() {
        return Err(GddError::shape(
            "guidance image vs spectral projection",
            guidance.shape(),
            projected_shape,
        ));
    }

    let down = graph.linear(x, sampler)?;
    let y = graph.constant(observed.clone());
    let r1 = graph.sub(down, y)?;
    let fidelity = graph.square_sum(r1);

    let projected = graph.linear(x, srf)?;
    let g = graph.constant(guidance.clone());
    let r2 = graph.sub(projected, g)?;
    let spectral = graph.square_sum(r2);

    let weighted = graph.scalar_mul(fidelity, mu);
    let total = graph.add(weighted, spectral)?;
    Ok(LossTerms {
        total,
        fidelity,
        guidance: Some(spectral),
    })
}

/// `mu * ||S(X) - Y||^2 + |D grad(X) - grad(P)|_1` where `P` is the
/// panchromatic band broadcast over the output bands and `D` holds one
/// learnable weight per band, shared by the horizontal and vertical
/// differences.
#[allow(clippy::too_many_arguments)]
pub fn pansharpen_loss(
    graph: &mut Graph,
    x: NodeId,
    observed: &Tensor,
    pan: &Tensor,
    sampler: Arc<SpatialDownsampler>,
    store: &ParamStore,
    band_weights: ParamId,
    mu: f64,
) -> Result<LossTerms> {
    check_mu(mu)?;
    let x_shape = graph.shape(x);
    if pan.shape().channels != 1 {
        return Err(GddError::shape(
            "panchromatic guidance",
            pan.shape(),
            "a single channel",
        ));
    }
    if pan.shape().height != x_shape.height || pan.shape().width != x_shape.width {
        return Err(GddError::shape(
            "panchromatic guidance vs estimate",
            pan.shape(),
            x_shape,
        ));
    }
    let low_shape = sampler.output_shape(x_shape)?;
    if low_shape != observed.shape() {
        return Err(GddError::shape(
            "observed low-resolution image",
            observed.shape(),
            low_shape,
        ));
    }
    let d_shape = store.value(band_weights).shape();
    if d_shape.channels != x_shape.channels || d_shape.plane() != 1 {
        return Err(GddError::shape(
            "per-band gradient weights",
            d_shape,
            format!("{}x1x1", x_shape.channels),
        ));
    }

    let down = graph.linear(x, sampler)?;
    let y = graph.constant(observed.clone());
    let r1 = graph.sub(down, y)?;
    let fidelity = graph.square_sum(r1);

    let broadcast = pan.replicate_channels(x_shape.channels)?;
    let pan_grad = graph.constant(image_gradient(&broadcast));
    let x_grad = graph.linear(x, Arc::new(ImageGradientOp))?;
    let d = graph.param(store, band_weights);
    let scaled = graph.per_band_scale(x_grad, d)?;
    let r2 = graph.sub(scaled, pan_grad)?;
    let match_term = graph.abs_sum(r2);

    let weighted = graph.scalar_mul(fidelity, mu);
    let total = graph.add(weighted, match_term)?;
    Ok(LossTerms {
        total,
        fidelity,
        guidance: Some(match_term),
    })
}

/// Plain `||X - Y||^2` against the noisy observation; the guidance enters
/// only through the network.
pub fn denoise_loss(graph: &mut Graph, x: NodeId, observed: &Tensor) -> Result<LossTerms> {
    let x_shape = graph.shape(x);
    if x_shape != observed.shape() {
        return Err(GddError::shape(
            "noisy observation",
            observed.shape(),
            x_shape,
        ));
    }
    let y = graph.constant(observed.clone());
    let r = graph.sub(x, y)?;
    let fidelity = graph.square_sum(r);
    Ok(LossTerms {
        total: fidelity,
        fidelity,
        guidance: None,
    })
}
