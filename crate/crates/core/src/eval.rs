//! Benchmark protocol: divisible crops, bicubic degradation, PSNR tables.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::image::{self, bicubic_resize, bilinear_upsample, Image, ImageError, PsnrConvention};
use crate::model::Model;
use crate::tensor::{Scalar, TensorError};
use crate::train::{load_images, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}: no PNG images found")]
    EmptyDataset(String),
    #[error("scale {0} is not a finite value ≥ 1")]
    Scale(f64),
    #[error("{name}: {h}×{w} is too small for scale {r}")]
    TooSmall { name: String, h: usize, w: usize, r: f64 },
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Image(e) => EvalError::Image(e),
            TrainError::Tensor(e) => EvalError::Tensor(e),
            other => EvalError::Image(ImageError::Dimension(other.to_string())),
        }
    }
}

/// An LR input and the reference it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub lr: Image,
    pub gt: Image,
    /// `gt.height() / lr.height()`.
    pub realized_scale: f64,
}

fn is_integer(r: f64) -> bool {
    (r - r.round()).abs() < 1e-9
}

/// Integer `r`: center-crop to multiples of `r`, then bicubic-downsample.
/// Real `r`: LR side `⌊H/r⌋`, reference center-cropped to `⌊r·LR⌋`.
/// The LR image is quantized to 8 bits, as if it had been stored as PNG.
pub fn prepare_pair(gt: &Image, r: f64, name: &str) -> Result<PreparedPair, EvalError> {
    if !(r >= 1.0 && r.is_finite()) {
        return Err(EvalError::Scale(r));
    }
    let (h, w) = (gt.height(), gt.width());
    let too_small = || EvalError::TooSmall {
        name: name.to_string(),
        h,
        w,
        r,
    };
    let (lh, lw, gh, gw) = if is_integer(r) {
        let k = r.round() as usize;
        let (lh, lw) = (h / k, w / k);
        (lh, lw, lh * k, lw * k)
    } else {
        let (lh, lw) = ((h as f64 / r).floor() as usize, (w as f64 / r).floor() as usize);
        let gh = ((r * lh as f64).floor() as usize).min(h);
        let gw = ((r * lw as f64).floor() as usize).min(w);
        (lh, lw, gh, gw)
    };
    if lh == 0 || lw == 0 {
        return Err(too_small());
    }
    let gt = gt.to_rgb().center_crop(gh, gw)?;
    let lr = bicubic_resize(&gt, lh, lw);
    let q: Vec<f64> = lr.pixels().iter().map(|&v| image::quantize_u8(v) as f64 / 255.0).collect();
    let lr = Image::new(lh, lw, 3, q)?;
    Ok(PreparedPair {
        lr,
        realized_scale: gh as f64 / lh as f64,
        gt,
    })
}

/// Names (lowercased substrings) of the classic benchmarks scored on luma.
pub const LUMA_BENCHMARKS: &[&str] = &["set5", "set14", "b100", "bsd100", "urban100", "manga109"];

/// Luma for the classic benchmarks, rgb for everything else (DIV2K, toy and
/// custom sets).
pub fn convention_for(dataset: &str) -> PsnrConvention {
    let name = dataset.to_ascii_lowercase();
    if LUMA_BENCHMARKS.iter().any(|b| name.contains(b)) {
        PsnrConvention::YChannel
    } else {
        PsnrConvention::Rgb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dataset: String,
    pub scale: f64,
    pub method: String,
    pub psnr_db: f64,
    pub n_images: usize,
    pub convention: PsnrConvention,
    /// Mean realized scale over the scored images.
    pub realized_scale: f64,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn extend(&mut self, other: BenchReport) {
        self.rows.extend(other.rows);
    }

    pub fn find(&self, dataset: &str, scale: f64, method: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.scale == scale && r.method == method)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("dataset\tscale\tmethod\tpsnr_db\tn_images\tconvention\trealized_scale\tn_skipped\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.4}\t{}\t{}\t{:.4}\t{}",
                r.dataset,
                r.scale,
                r.method,
                r.psnr_db,
                r.n_images,
                r.convention.name(),
                r.realized_scale,
                r.n_skipped
            );
        }
        s
    }
}

/// A named dataset: images in file-name order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<(String, Image)>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let images = load_images(dir)?;
        if images.is_empty() {
            return Err(EvalError::EmptyDataset(dir.display().to_string()));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Dataset { name, images })
    }
}

/// Scores `method(lr, gt_h, gt_w)` over every image and scale.
pub fn evaluate<F>(data: &Dataset, scales: &[f64], method: &str, upsample: F) -> Result<BenchReport, EvalError>
where
    F: FnMut(&Image, usize, usize) -> Result<Image, EvalError>,
{
    evaluate_with(data, scales, method, convention_for(&data.name), upsample)
}

/// [`evaluate`] with the PSNR convention chosen by the caller.
pub fn evaluate_with<F>(
    data: &Dataset,
    scales: &[f64],
    method: &str,
    conv: PsnrConvention,
    mut upsample: F,
) -> Result<BenchReport, EvalError>
where
    F: FnMut(&Image, usize, usize) -> Result<Image, EvalError>,
{
    let mut report = BenchReport::default();
    for &r in scales {
        let shave = r.ceil() as usize;
        let (mut sum, mut n, mut skipped, mut rs) = (0.0, 0usize, 0usize, 0.0);
        for (name, img) in &data.images {
            let pair = match prepare_pair(img, r, name) {
                Ok(p) => p,
                Err(EvalError::TooSmall { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let out = upsample(&pair.lr, pair.gt.height(), pair.gt.width())?.clamped();
            sum += image::psnr(&out, &pair.gt, conv, shave)?;
            rs += pair.realized_scale;
            n += 1;
        }
        report.rows.push(BenchRow {
            dataset: data.name.clone(),
            scale: r,
            method: method.to_string(),
            psnr_db: if n > 0 { sum / n as f64 } else { f64::NAN },
            n_images: n,
            convention: conv,
            realized_scale: if n > 0 { rs / n as f64 } else { f64::NAN },
            n_skipped: skipped,
        });
    }
    Ok(report)
}

pub fn eval_bicubic(data: &Dataset, scales: &[f64]) -> Result<BenchReport, EvalError> {
    evaluate(data, scales, "bicubic", |lr, h, w| Ok(bicubic_resize(lr, h, w)))
}

pub fn eval_bilinear(data: &Dataset, scales: &[f64]) -> Result<BenchReport, EvalError> {
    evaluate(data, scales, "bilinear", |lr, h, w| Ok(bilinear_upsample(lr, h, w)))
}

pub fn eval_model<T: Scalar>(
    model: &Model<T>,
    method: &str,
    data: &Dataset,
    scales: &[f64],
    tile: usize,
) -> Result<BenchReport, EvalError> {
    evaluate(data, scales, method, |lr, h, w| Ok(model.upsample(lr, h, w, tile)?))
}
