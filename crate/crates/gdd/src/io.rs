//! On-disk formats: binary tensors, portable pixmaps, and CSV reports.

use std::fs;
use std::path::Path;

use crate::degradation::SpectralResponse;
use crate::error::{GddError, Result};
use crate::metrics::MetricReport;
use crate::runner::{RunTrace, VariantRun};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"GDDT";
const VERSION: u32 = 1;

/// Writes a tensor as magic, version, rank, dimensions, then the samples as
/// little-endian f32 in channel-major order.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let shape = tensor.shape();
    let mut bytes = Vec::with_capacity(24 + tensor.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&3u32.to_le_bytes());
    for dim in [shape.channels, shape.height, shape.width] {
        let dim = u32::try_from(dim).map_err(|_| {
            GddError::invalid(format!(
                "{}: dimension {dim} does not fit the tensor header",
                path.display()
            ))
        })?;
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in tensor.data() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(GddError::invalid(format!(
                "{}: sample {v} cannot be stored as a finite 32-bit float",
                path.display()
            )));
        }
        bytes.extend_from_slice(&narrowed.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| GddError::io(path, e))
}

fn header_u32(path: &Path, bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(GddError::invalid(format!(
            "{}: truncated header while reading {what}",
            path.display()
        )));
    }
    Ok(u32::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| GddError::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(GddError::invalid(format!(
            "{}: bad magic, not a tensor file",
            path.display()
        )));
    }
    let version = header_u32(path, &bytes, 4, "version")?;
    if version != VERSION {
        return Err(GddError::invalid(format!(
            "{}: unsupported tensor version {version}",
            path.display()
        )));
    }
    let ndim = header_u32(path, &bytes, 8, "rank")?;
    if ndim != 3 {
        return Err(GddError::invalid(format!(
            "{}: expected rank 3, got {ndim}",
            path.display()
        )));
    }
    let c = header_u32(path, &bytes, 12, "channel count")? as usize;
    let h = header_u32(path, &bytes, 16, "height")? as usize;
    let w = header_u32(path, &bytes, 20, "width")? as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(GddError::invalid(format!(
            "{}: zero-sized dimension in {c}x{h}x{w}",
            path.display()
        )));
    }
    let count = c
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| {
            GddError::invalid(format!(
                "{}: dimensions {c}x{h}x{w} overflow",
                path.display()
            ))
        })?;
    let expected = 24 + count * 4;
    if bytes.len() < expected {
        return Err(GddError::invalid(format!(
            "{}: truncated payload, expected {count} samples",
            path.display()
        )));
    }
    if bytes.len() > expected {
        return Err(GddError::invalid(format!(
            "{}: {} trailing bytes after the payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in bytes[24..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(GddError::invalid(format!(
                "{}: non-finite sample in payload",
                path.display()
            )));
        }
        data.push(v as f64);
    }
    Tensor::from_vec(Shape::new(c, h, w), data)
}

/// Maps a unit-range intensity to a byte: clamp to `[0, 1]`, scale by 255,
/// round half away from zero.
pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pnm(path: &Path, tensor: &Tensor, channels: usize, tag: &str) -> Result<()> {
    let shape = tensor.shape();
    if shape.channels != channels {
        return Err(GddError::shape(
            format!("{tag} image"),
            shape,
            format!("{channels} channels"),
        ));
    }
    let mut bytes = format!("{tag}\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    let plane = shape.plane();
    for p in 0..plane {
        for c in 0..channels {
            bytes.push(quantize_unit(tensor.data()[c * plane + p]));
        }
    }
    fs::write(path, bytes).map_err(|e| GddError::io(path, e))
}

/// Binary PPM from a 3-channel tensor with intensities in `[0, 1]`.
pub fn write_ppm(path: &Path, tensor: &Tensor) -> Result<()> {
    write_pnm(path, tensor, 3, "P6")
}

/// Binary PGM from a single-channel tensor with intensities in `[0, 1]`.
pub fn write_pgm(path: &Path, tensor: &Tensor) -> Result<()> {
    write_pnm(path, tensor, 1, "P5")
}

/// Reads a spectral response from CSV: one row per output band, one column
/// per input band. Rows must sum to one; small drift within `[0.99, 1.01]`
/// is renormalized with a warning, anything further out is rejected.
pub fn read_srf_csv(path: &Path, in_bands: usize) -> Result<SpectralResponse> {
    let text = fs::read_to_string(path).map_err(|e| GddError::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(in_bands);
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| {
                GddError::parse(path, line_no, format!("not a number: '{}'", cell.trim()))
            })?;
            row.push(v);
        }
        if row.len() != in_bands {
            return Err(GddError::parse(
                path,
                line_no,
                format!("expected {in_bands} entries, got {}", row.len()),
            ));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            if (0.99..=1.01).contains(&sum) {
                log::warn!(
                    "{}:{line_no}: response row sums to {sum}, renormalizing",
                    path.display()
                );
                for v in &mut row {
                    *v /= sum;
                }
            } else {
                return Err(GddError::parse(
                    path,
                    line_no,
                    format!("response row sums to {sum}, outside [0.99, 1.01]"),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GddError::parse(path, 1, "no response rows"));
    }
    let out_bands = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    SpectralResponse::new(out_bands, in_bands, flat)
}

pub const TRACE_CSV_HEADER: &str = "iteration,loss_total,loss_term1,loss_term2,psnr";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trace_csv(path: &Path, trace: &RunTrace) -> Result<()> {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for row in &trace.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.iteration,
            row.loss_total,
            row.loss_term1,
            opt_cell(row.loss_term2),
            opt_cell(row.psnr),
        ));
    }
    fs::write(path, out).map_err(|e| GddError::io(path, e))
}

/// Long-format CSV over several optimization runs, one row per trace row.
pub fn write_comparison_csv(path: &Path, runs: &[VariantRun]) -> Result<()> {
    let mut out = String::from("variant,seed,iteration,loss_total,loss_term1,loss_term2,psnr\n");
    for run in runs {
        for row in &run.outcome.trace.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                run.variant,
                run.seed,
                row.iteration,
                row.loss_total,
                row.loss_term1,
                opt_cell(row.loss_term2),
                opt_cell(row.psnr),
            ));
        }
    }
    fs::write(path, out).map_err(|e| GddError::io(path, e))
}

pub fn write_metric_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let out = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row());
    fs::write(path, out).map_err(|e| GddError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::TraceRow;
    use tempfile::tempdir;

    fn sample_tensor() -> Tensor {
        Tensor::from_vec(
            Shape::new(2, 2, 2),
            vec![0.5, 0.25, -1.0, 2.0, 0.1, 0.0, 1.5, -0.75],
        )
        .unwrap()
    }

    #[test]
    fn tensor_roundtrip_preserves_f32_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.btf");
        let tensor = sample_tensor();
        write_tensor(&path, &tensor).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), tensor.shape());
        for (a, b) in back.data().iter().zip(tensor.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // A second write is byte-identical.
        let first = fs::read(&path).unwrap();
        write_tensor(&path, &tensor).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn tensor_reader_rejects_malformed_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.btf");
        write_tensor(&path, &sample_tensor()).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(read_tensor(&path).unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(read_tensor(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));

        let mut bad = good.clone();
        bad[8] = 4;
        fs::write(&path, &bad).unwrap();
        assert!(read_tensor(&path).unwrap_err().to_string().contains("rank"));

        let mut bad = good.clone();
        bad.truncate(good.len() - 3);
        fs::write(&path, &bad).unwrap();
        assert!(read_tensor(&path)
            .unwrap_err()
            .to_string()
            .contains("truncated"));

        let mut bad = good.clone();
        bad.push(0);
        fs::write(&path, &bad).unwrap();
        assert!(read_tensor(&path)
            .unwrap_err()
            .to_string()
            .contains("trailing"));

        let mut bad = good.clone();
        bad[12..16].copy_from_slice(&0u32.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(read_tensor(&path)
            .unwrap_err()
            .to_string()
            .contains("zero-sized"));

        let mut bad = good;
        bad[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(read_tensor(&path)
            .unwrap_err()
            .to_string()
            .contains("non-finite"));
    }

    #[test]
    fn tensor_writer_rejects_values_f32_cannot_hold() {
        let dir = tempdir().unwrap();
        let t = Tensor::filled(Shape::new(1, 1, 1), 1e300);
        assert!(write_tensor(&dir.path().join("t.btf"), &t).is_err());
    }

    #[test]
    fn quantization_pins_hold() {
        assert_eq!(quantize_unit(0.0), 0);
        assert_eq!(quantize_unit(0.5), 128);
        assert_eq!(quantize_unit(1.0), 255);
        assert_eq!(quantize_unit(1.3), 255);
        assert_eq!(quantize_unit(-0.2), 0);
    }

    #[test]
    fn ppm_layout_interleaves_channels_per_pixel() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let t = Tensor::from_vec(
            Shape::new(3, 1, 2),
            vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0],
        )
        .unwrap();
        write_ppm(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 128, 0]);
        assert!(write_ppm(&path, &Tensor::zeros(Shape::new(2, 1, 2))).is_err());
    }

    #[test]
    fn pgm_writes_a_single_plane() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let t = Tensor::from_vec(Shape::new(1, 2, 1), vec![0.5, 1.0]).unwrap();
        write_pgm(&path, &t).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"P5\n1 2\n255\n\x80\xff");
    }

    #[test]
    fn srf_rows_roundtrip_and_normalize() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("srf.csv");
        fs::write(&path, "0.5,0.5,0,0\n0,0,0.504,0.504\n").unwrap();
        let srf = read_srf_csv(&path, 4).unwrap();
        assert_eq!(srf.out_bands(), 2);
        assert!((srf.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((srf.row(1)[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn srf_errors_carry_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("srf.csv");

        fs::write(&path, "0.5,0.5,0,0\n1,0,0\n").unwrap();
        let err = read_srf_csv(&path, 4).unwrap_err().to_string();
        assert!(err.contains(":2"), "{err}");
        assert!(err.contains("expected 4"), "{err}");

        fs::write(&path, "0.5,x,0,0\n").unwrap();
        let err = read_srf_csv(&path, 4).unwrap_err().to_string();
        assert!(err.contains(":1"), "{err}");

        fs::write(&path, "0.9,0.2,0,0\n").unwrap();
        let err = read_srf_csv(&path, 4).unwrap_err().to_string();
        assert!(err.contains("outside"), "{err}");

        fs::write(&path, "\n\n").unwrap();
        assert!(read_srf_csv(&path, 4).is_err());
    }

    #[test]
    fn trace_csv_is_byte_stable() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = RunTrace {
            rows: vec![
                TraceRow {
                    iteration: 1,
                    loss_total: 10.0,
                    loss_term1: 7.0,
                    loss_term2: Some(3.0),
                    psnr: Some(20.5),
                },
                TraceRow {
                    iteration: 2,
                    loss_total: 5.0,
                    loss_term1: 5.0,
                    loss_term2: None,
                    psnr: Some(f64::INFINITY),
                },
            ],
        };
        write_trace_csv(&path, &trace).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "iteration,loss_total,loss_term1,loss_term2,psnr\n\
             1,10,7,3,20.5\n\
             2,5,5,,inf\n"
        );
    }

    #[test]
    fn metric_csv_has_header_and_one_row() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let report = MetricReport {
            rmse: Some(0.125),
            qnr: Some(0.5),
            ..Default::default()
        };
        write_metric_csv(&path, &report).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "rmse,psnr,sa_degrees,ergas,ssim,q2n,scc,d_lambda,d_s,qnr\n0.125,,,,,,,,,0.5\n"
        );
    }
}
