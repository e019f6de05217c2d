//! Whole-volume image quality: PSNR, NMSE and 3D Gaussian SSIM, each on
//! volumes independently rescaled to `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DATA_RANGE: f64 = 1.0;

/// `(v - min) / (max - min)`.
pub fn rescale_unit_interval(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.intensity_range();
    if hi <= lo {
        return Err(Error::DegenerateRange(lo as f64));
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    Ok(v.map(|x| ((x as f64 - lo) / span) as f32))
}

fn check_pair(pred: &Volume, reference: &Volume) -> Result<()> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "prediction shape {:?} != reference shape {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Volume, reference: &Volume) -> Result<f64> {
    check_pair(pred, reference)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// `10 log10(1 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(pred: &Volume, reference: &Volume) -> Result<f64> {
    let m = mse(pred, reference)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (DATA_RANGE * DATA_RANGE / m).log10()
    })
}

/// `||ref - pred||^2 / ||ref||^2`.
pub fn nmse(pred: &Volume, reference: &Volume) -> Result<f64> {
    check_pair(pred, reference)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        let (p, r) = (p as f64, r as f64);
        num += (r - p) * (r - p);
        den += r * r;
    }
    if den == 0.0 {
        return Err(Error::invalid("nmse reference is all zero"));
    }
    Ok(num / den)
}

/// Normalized 1D Gaussian taps; the 3D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Valid-mode correlation of an `[X, Y, Z]` field along one axis.
fn filter_axis(data: &[f64], shape: [usize; 3], axis: usize, taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = taps.len();
    let mut out_shape = shape;
    out_shape[axis] = shape[axis] + 1 - k;
    let stride = match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    };
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for x in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for z in 0..out_shape[2] {
                let base = (x * shape[1] + y) * shape[2] + z;
                out.push(taps.iter().enumerate().map(|(i, &t)| t * data[base + i * stride]).sum());
            }
        }
    }
    (out, out_shape)
}

fn gaussian_filter(data: Vec<f64>, shape: [usize; 3], taps: &[f64]) -> Vec<f64> {
    let (d, s) = filter_axis(&data, shape, 0, taps);
    let (d, s) = filter_axis(&d, s, 1, taps);
    filter_axis(&d, s, 2, taps).0
}

/// Local SSIM map statistic. The window is evaluated at every position
/// where it lies fully inside the volume and the map is averaged.
pub fn ssim(pred: &Volume, reference: &Volume) -> Result<f64> {
    check_pair(pred, reference)?;
    let shape = pred.shape();
    if shape.iter().any(|&n| n < SSIM_WINDOW) {
        return Err(Error::shape(format!(
            "volume {:?} is smaller than the {}-voxel SSIM window",
            shape, SSIM_WINDOW
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let a: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = gaussian_filter(a.clone(), shape, &taps);
    let mu_b = gaussian_filter(b.clone(), shape, &taps);
    let e_aa = gaussian_filter(prod(&|x, _| x * x), shape, &taps);
    let e_bb = gaussian_filter(prod(&|_, y| y * y), shape, &taps);
    let e_ab = gaussian_filter(prod(&|x, y| x * y), shape, &taps);
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| local_ssim(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i], c1, c2))
        .sum();
    Ok(total / n as f64)
}

fn local_ssim(ma: f64, mb: f64, eaa: f64, ebb: f64, eab: f64, c1: f64, c2: f64) -> f64 {
    let va = eaa - ma * ma;
    let vb = ebb - mb * mb;
    let cov = eab - ma * mb;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub volume_id: String,
    /// `f64::INFINITY` for identical volumes.
    pub psnr_db: f64,
    pub nmse: f64,
    pub ssim: f64,
}

/// Rescales each volume to `[0, 1]` on its own, then computes all metrics.
pub fn evaluate_pair(volume_id: &str, pred: &Volume, reference: &Volume) -> Result<MetricReport> {
    check_pair(pred, reference)?;
    let p = rescale_unit_interval(pred)?;
    let r = rescale_unit_interval(reference)?;
    Ok(MetricReport {
        volume_id: volume_id.to_string(),
        psnr_db: psnr(&p, &r)?,
        nmse: nmse(&p, &r)?,
        ssim: ssim(&p, &r)?,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> MeanSd {
        if values.is_empty() {
            return MeanSd { mean: f64::NAN, sd: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if mean.is_infinite() {
            return MeanSd { mean, sd: f64::NAN };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanSd { mean, sd: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub psnr_db: MeanSd,
    pub nmse: MeanSd,
    pub ssim: MeanSd,
}

pub fn summarize(reports: &[MetricReport]) -> MetricSummary {
    let col = |f: fn(&MetricReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    MetricSummary {
        n: reports.len(),
        psnr_db: MeanSd::of(&col(|r| r.psnr_db)),
        nmse: MeanSd::of(&col(|r| r.nmse)),
        ssim: MeanSd::of(&col(|r| r.ssim)),
    }
}

/// Renders a metric for reports; infinity becomes `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn parse_metric(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" => Ok(f64::INFINITY),
        "nan" => Ok(f64::NAN),
        t => t.parse().map_err(|_| Error::Format(format!("bad metric value {t:?}"))),
    }
}

pub const METRICS_CSV_HEADER: [&str; 4] = ["volume_id", "psnr_db", "nmse", "ssim"];

pub fn metrics_csv(reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(METRICS_CSV_HEADER).map_err(err)?;
    for r in reports {
        w.write_record([r.volume_id.clone(), fmt_metric(r.psnr_db), fmt_metric(r.nmse), fmt_metric(r.ssim)])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    std::fs::write(path, metrics_csv(reports)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != 4 {
            return Err(Error::Format(format!("{}: expected 4 columns", path.display())));
        }
        out.push(MetricReport {
            volume_id: rec[0].to_string(),
            psnr_db: parse_metric(&rec[1])?,
            nmse: parse_metric(&rec[2])?,
            ssim: parse_metric(&rec[3])?,
        });
    }
    Ok(out)
}
