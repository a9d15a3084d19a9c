//! Fusion quality metrics, full-reference and no-reference.
//!
//! All images are channel-major tensors. Full-reference metrics take
//! `(reference, estimate)`; intensities are assumed to live in `[0, 1]`
//! unless a metric exposes an explicit data range.

use crate::error::{GddError, Result};
use crate::tensor::Tensor;

const DEGENERATE: f64 = 1e-12;

fn check_pair(context: &str, reference: &Tensor, estimate: &Tensor) -> Result<()> {
    if reference.shape() != estimate.shape() {
        return Err(GddError::shape(context, reference.shape(), estimate.shape()));
    }
    if reference.is_empty() {
        return Err(GddError::invalid(format!("{context}: empty tensors")));
    }
    Ok(())
}

pub fn rmse(reference: &Tensor, estimate: &Tensor) -> Result<f64> {
    check_pair("rmse", reference, estimate)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sum / reference.len() as f64).sqrt())
}

/// Peak signal-to-noise ratio over a unit data range, in dB. Identical
/// inputs yield positive infinity.
pub fn psnr(reference: &Tensor, estimate: &Tensor) -> Result<f64> {
    check_pair("psnr", reference, estimate)?;
    let mse: f64 = reference
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Mean angle, in degrees, between the spectral vectors of corresponding
/// pixels. Pixels whose spectrum is near zero in either image are skipped;
/// if every pixel is skipped the metric is undefined.
pub fn spectral_angle_degrees(reference: &Tensor, estimate: &Tensor) -> Result<f64> {
    check_pair("spectral angle", reference, estimate)?;
    let shape = reference.shape();
    let plane = shape.plane();
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..plane {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for c in 0..shape.channels {
            let a = reference.data()[c * plane + p];
            let b = estimate.data()[c * plane + p];
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        if na < DEGENERATE || nb < DEGENERATE {
            continue;
        }
        let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
        sum += cos.acos();
        count += 1;
    }
    if count == 0 {
        return Err(GddError::invalid(
            "spectral angle undefined: every pixel has a degenerate spectrum",
        ));
    }
    Ok((sum / count as f64).to_degrees())
}

/// Relative dimensionless global error: `100/ratio` times the quadratic
/// mean over bands of the band RMSE relative to the band mean.
pub fn ergas(reference: &Tensor, estimate: &Tensor, ratio: usize) -> Result<f64> {
    check_pair("ergas", reference, estimate)?;
    if ratio == 0 {
        return Err(GddError::invalid("ergas needs a positive resolution ratio"));
    }
    let shape = reference.shape();
    let plane = shape.plane() as f64;
    let mut acc = 0.0;
    for c in 0..shape.channels {
        let band = reference.channel(c);
        let mean = band.iter().sum::<f64>() / plane;
        if mean.abs() < DEGENERATE {
            return Err(GddError::invalid(format!(
                "ergas undefined: reference band {c} has zero mean"
            )));
        }
        let mse = band
            .iter()
            .zip(estimate.channel(c))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / plane;
        acc += mse / (mean * mean);
    }
    Ok(100.0 / ratio as f64 * (acc / shape.channels as f64).sqrt())
}

fn gaussian_window(side: usize, sigma: f64) -> Vec<f64> {
    let half = (side as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            w.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).
/// Images narrower than the window use the largest odd window that fits;
/// anything below 8x8 is rejected.
pub fn ssim(reference: &Tensor, estimate: &Tensor, data_range: f64) -> Result<f64> {
    check_pair("ssim", reference, estimate)?;
    if !(data_range > 0.0) || !data_range.is_finite() {
        return Err(GddError::invalid("ssim needs a positive data range"));
    }
    let shape = reference.shape();
    if shape.height < 8 || shape.width < 8 {
        return Err(GddError::invalid(format!(
            "ssim needs at least 8x8 images, got {}x{}",
            shape.height, shape.width
        )));
    }
    let mut side = 11.min(shape.height).min(shape.width);
    if side % 2 == 0 {
        side -= 1;
    }
    let window = gaussian_window(side, 1.5);
    let c1 = (0.01 * data_range) * (0.01 * data_range);
    let c2 = (0.03 * data_range) * (0.03 * data_range);

    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..shape.channels {
        let a = reference.channel(c);
        let b = estimate.channel(c);
        for y0 in 0..=(shape.height - side) {
            for x0 in 0..=(shape.width - side) {
                let mut ma = 0.0;
                let mut mb = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                let mut wi = 0;
                for dy in 0..side {
                    let row = (y0 + dy) * shape.width + x0;
                    for dx in 0..side {
                        let w = window[wi];
                        wi += 1;
                        let va = a[row + dx];
                        let vb = b[row + dx];
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                sum += num / den;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

fn hc_conj(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    for v in &mut out[1..] {
        *v = -*v;
    }
    out
}

fn hc_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    if n == 1 {
        return vec![a[0] * b[0]];
    }
    let h = n / 2;
    let (a1, a2) = a.split_at(h);
    let (b1, b2) = b.split_at(h);
    // Cayley-Dickson: (a1, a2)(b1, b2) = (a1 b1 - b2* a2, b2 a1 + a2 b1*).
    let left_a = hc_mul(a1, b1);
    let left_b = hc_mul(&hc_conj(b2), a2);
    let right_a = hc_mul(b2, a1);
    let right_b = hc_mul(a2, &hc_conj(b1));
    let mut out = Vec::with_capacity(n);
    for i in 0..h {
        out.push(left_a[i] - left_b[i]);
    }
    for i in 0..h {
        out.push(right_a[i] + right_b[i]);
    }
    out
}

fn hc_norm_sq(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum()
}

/// Hypercomplex universal image quality index. Each pixel's spectrum
/// becomes one hypercomplex number (bands zero-padded to the next power of
/// two, at most 8 bands); the index is averaged over non-overlapping
/// blocks of up to 32x32 pixels, skipping blocks where both images are
/// constant.
pub fn q2n(reference: &Tensor, estimate: &Tensor) -> Result<f64> {
    check_pair("q2n", reference, estimate)?;
    let shape = reference.shape();
    if shape.channels > 8 {
        return Err(GddError::invalid(format!(
            "q2n supports at most 8 bands, got {}",
            shape.channels
        )));
    }
    let n = shape.channels.next_power_of_two();
    let block = 32.min(shape.height).min(shape.width);
    let plane = shape.plane();

    let mut sum = 0.0;
    let mut kept = 0usize;
    let mut z1 = vec![0.0; n];
    let mut z2 = vec![0.0; n];
    let mut y0 = 0;
    while y0 + block <= shape.height {
        let mut x0 = 0;
        while x0 + block <= shape.width {
            let count = (block * block) as f64;
            let mut mu1 = vec![0.0; n];
            let mut mu2 = vec![0.0; n];
            let mut e1 = 0.0;
            let mut e2 = 0.0;
            let mut cross = vec![0.0; n];
            for dy in 0..block {
                for dx in 0..block {
                    let p = (y0 + dy) * shape.width + x0 + dx;
                    z1.iter_mut().for_each(|v| *v = 0.0);
                    z2.iter_mut().for_each(|v| *v = 0.0);
                    for c in 0..shape.channels {
                        z1[c] = reference.data()[c * plane + p];
                        z2[c] = estimate.data()[c * plane + p];
                    }
                    for i in 0..n {
                        mu1[i] += z1[i];
                        mu2[i] += z2[i];
                    }
                    e1 += hc_norm_sq(&z1);
                    e2 += hc_norm_sq(&z2);
                    let prod = hc_mul(&z1, &hc_conj(&z2));
                    for i in 0..n {
                        cross[i] += prod[i];
                    }
                }
            }
            for i in 0..n {
                mu1[i] /= count;
                mu2[i] /= count;
            }
            let var1 = e1 / count - hc_norm_sq(&mu1);
            let var2 = e2 / count - hc_norm_sq(&mu2);
            let mean_prod = hc_mul(&mu1, &hc_conj(&mu2));
            let mut cov = vec![0.0; n];
            for i in 0..n {
                cov[i] = cross[i] / count - mean_prod[i];
            }
            let m1 = hc_norm_sq(&mu1).sqrt();
            let m2 = hc_norm_sq(&mu2).sqrt();
            // Variance sums that small are cancellation residue from
            // near-constant blocks, not signal.
            if var1 + var2 > DEGENERATE && m1 * m1 + m2 * m2 > DEGENERATE {
                let den = (var1 + var2) * (m1 * m1 + m2 * m2);
                sum += 4.0 * hc_norm_sq(&cov).sqrt() * m1 * m2 / den;
                kept += 1;
            }
            x0 += block;
        }
        y0 += block;
    }
    if kept == 0 {
        return Err(GddError::invalid("q2n undefined: every block is degenerate"));
    }
    Ok(sum / kept as f64)
}

fn laplacian(band: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((height - 2) * (width - 2));
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let mut acc = 8.0 * band[y * width + x];
            for dy in 0..3 {
                for dx in 0..3 {
                    if dy == 1 && dx == 1 {
                        continue;
                    }
                    acc -= band[(y + dy - 1) * width + (x + dx - 1)];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Spatial correlation coefficient: Pearson correlation between Laplacian
/// responses of the two images, averaged over bands. Only the interior
/// where the 3x3 filter fits is used.
pub fn scc(reference: &Tensor, estimate: &Tensor) -> Result<f64> {
    check_pair("scc", reference, estimate)?;
    let shape = reference.shape();
    if shape.height < 3 || shape.width < 3 {
        return Err(GddError::invalid(format!(
            "scc needs at least 3x3 images, got {}x{}",
            shape.height, shape.width
        )));
    }
    let mut sum = 0.0;
    for c in 0..shape.channels {
        let fa = laplacian(reference.channel(c), shape.height, shape.width);
        let fb = laplacian(estimate.channel(c), shape.height, shape.width);
        let n = fa.len() as f64;
        let ma = fa.iter().sum::<f64>() / n;
        let mb = fb.iter().sum::<f64>() / n;
        let mut va = 0.0;
        let mut vb = 0.0;
        let mut cov = 0.0;
        for (a, b) in fa.iter().zip(&fb) {
            va += (a - ma) * (a - ma);
            vb += (b - mb) * (b - mb);
            cov += (a - ma) * (b - mb);
        }
        if va < DEGENERATE || vb < DEGENERATE {
            return Err(GddError::invalid(format!(
                "scc undefined: band {c} has no spatial detail"
            )));
        }
        sum += cov / (va.sqrt() * vb.sqrt());
    }
    Ok(sum / shape.channels as f64)
}

/// Universal image quality index between two bands, computed globally over
/// the whole image.
fn uiqi(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    va /= n;
    vb /= n;
    cov /= n;
    let den = (va + vb) * (ma * ma + mb * mb);
    if den < DEGENERATE * DEGENERATE {
        return Err(GddError::invalid(
            "image quality index undefined for constant bands",
        ));
    }
    Ok(4.0 * cov * ma * mb / den)
}

/// Spectral distortion without a reference: mean absolute change of the
/// inter-band quality index between the fused image and the low-resolution
/// input.
pub fn d_lambda(fused: &Tensor, ms: &Tensor) -> Result<f64> {
    let c = fused.shape().channels;
    if c != ms.shape().channels {
        return Err(GddError::shape("d_lambda band count", fused.shape(), ms.shape()));
    }
    if c < 2 {
        return Err(GddError::invalid("d_lambda needs at least two bands"));
    }
    let mut sum = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let qf = uiqi(fused.channel(i), fused.channel(j))?;
            let qm = uiqi(ms.channel(i), ms.channel(j))?;
            sum += (qf - qm).abs();
        }
    }
    Ok(sum / (c * (c - 1)) as f64)
}

/// Spatial distortion without a reference: mean absolute difference between
/// each fused band's quality index against the panchromatic image and the
/// corresponding low-resolution band's index against the downsampled pan.
pub fn d_s(fused: &Tensor, ms: &Tensor, pan: &Tensor, pan_low: &Tensor) -> Result<f64> {
    let c = fused.shape().channels;
    if c != ms.shape().channels {
        return Err(GddError::shape("d_s band count", fused.shape(), ms.shape()));
    }
    if pan.shape().channels != 1 || pan_low.shape().channels != 1 {
        return Err(GddError::invalid("d_s needs single-band pan images"));
    }
    if pan.shape().plane() != fused.shape().plane() {
        return Err(GddError::shape("d_s pan vs fused", pan.shape(), fused.shape()));
    }
    if pan_low.shape().plane() != ms.shape().plane() {
        return Err(GddError::shape(
            "d_s downsampled pan vs low-resolution bands",
            pan_low.shape(),
            ms.shape(),
        ));
    }
    let mut sum = 0.0;
    for i in 0..c {
        let qf = uiqi(fused.channel(i), pan.channel(0))?;
        let qm = uiqi(ms.channel(i), pan_low.channel(0))?;
        sum += (qf - qm).abs();
    }
    Ok(sum / c as f64)
}

/// Quality with no reference: `(1 - d_lambda) * (1 - d_s)`.
pub fn qnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

/// One row of metric values; `None` marks metrics that were not computed.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rmse: Option<f64>,
    pub psnr: Option<f64>,
    pub sa_degrees: Option<f64>,
    pub ergas: Option<f64>,
    pub ssim: Option<f64>,
    pub q2n: Option<f64>,
    pub scc: Option<f64>,
    pub d_lambda: Option<f64>,
    pub d_s: Option<f64>,
    pub qnr: Option<f64>,
}

fn metric_or_warn(name: &str, value: Result<f64>) -> Option<f64> {
    match value {
        Ok(v) => Some(v),
        Err(err) => {
            log::warn!("skipping {name}: {err}");
            None
        }
    }
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "rmse,psnr,sa_degrees,ergas,ssim,q2n,scc,d_lambda,d_s,qnr";

    /// Computes every full-reference metric applicable to the pair. Metrics
    /// whose preconditions fail on valid data (constant bands, too few
    /// pixels, too many bands) are left empty with a logged warning; shape
    /// mismatches are hard errors.
    pub fn full_reference(reference: &Tensor, estimate: &Tensor, ratio: usize) -> Result<Self> {
        check_pair("metric report", reference, estimate)?;
        let shape = reference.shape();
        let mut report = MetricReport {
            rmse: Some(rmse(reference, estimate)?),
            psnr: Some(psnr(reference, estimate)?),
            sa_degrees: metric_or_warn(
                "spectral angle",
                spectral_angle_degrees(reference, estimate),
            ),
            ergas: metric_or_warn("ergas", ergas(reference, estimate, ratio)),
            scc: metric_or_warn("scc", scc(reference, estimate)),
            ..MetricReport::default()
        };
        if shape.height >= 8 && shape.width >= 8 {
            report.ssim = metric_or_warn("ssim", ssim(reference, estimate, 1.0));
        }
        if shape.channels <= 8 {
            report.q2n = metric_or_warn("q2n", q2n(reference, estimate));
        }
        Ok(report)
    }

    /// Computes the no-reference protocol for pansharpening.
    pub fn no_reference(
        fused: &Tensor,
        ms: &Tensor,
        pan: &Tensor,
        pan_low: &Tensor,
    ) -> Result<Self> {
        let dl = d_lambda(fused, ms)?;
        let ds = d_s(fused, ms, pan, pan_low)?;
        Ok(MetricReport {
            d_lambda: Some(dl),
            d_s: Some(ds),
            qnr: Some(qnr(dl, ds)),
            ..MetricReport::default()
        })
    }

    /// Fills empty fields from another report.
    pub fn merged(mut self, other: &MetricReport) -> Self {
        self.rmse = self.rmse.or(other.rmse);
        self.psnr = self.psnr.or(other.psnr);
        self.sa_degrees = self.sa_degrees.or(other.sa_degrees);
        self.ergas = self.ergas.or(other.ergas);
        self.ssim = self.ssim.or(other.ssim);
        self.q2n = self.q2n.or(other.q2n);
        self.scc = self.scc.or(other.scc);
        self.d_lambda = self.d_lambda.or(other.d_lambda);
        self.d_s = self.d_s.or(other.d_s);
        self.qnr = self.qnr.or(other.qnr);
        self
    }

    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            cell(self.rmse),
            cell(self.psnr),
            cell(self.sa_degrees),
            cell(self.ergas),
            cell(self.ssim),
            cell(self.q2n),
            cell(self.scc),
            cell(self.d_lambda),
            cell(self.d_s),
            cell(self.qnr),
        ]
        .join(",")
    }
}
