//! Random-scale patch sampling, L1 objective, Adam and the training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coords::{make_coord_grid, Cell, Coord};
use crate::image::{self, bicubic_resize, Image, ImageError};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{file}: {msg}")]
    Data { file: String, msg: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFinite { epoch: usize, batch: usize, norms: String },
    #[error("metrics log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr0: f64,
    /// Epochs after which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Passes over the image list per epoch.
    pub repeat: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch: 48,
            batch: 16,
            epochs: 1000,
            lr0: 1e-4,
            milestones: vec![200, 400, 600, 800],
            decay_factor: 0.5,
            scale_min: 1.0,
            scale_max: 4.0,
            repeat: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.patch < 8 {
            return Err(format!("patch size {} is below 8", self.patch));
        }
        if self.batch == 0 || self.repeat == 0 {
            return Err("batch size and repeat must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(format!("learning rate must be positive, got {}", self.lr0));
        }
        if !(self.scale_min >= 1.0 && self.scale_max >= self.scale_min && self.scale_max.is_finite()) {
            return Err(format!("bad scale range [{}, {}]", self.scale_min, self.scale_max));
        }
        Ok(())
    }

    /// Learning rate in effect during (1-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m < epoch).count();
        self.lr0 * self.decay_factor.powi(passed as i32)
    }

    /// Smallest image side that admits every crop.
    pub fn min_side(&self) -> usize {
        (self.patch as f64 * self.scale_max).ceil() as usize
    }
}

/// One training example: an LR patch and HR pixel samples at known coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub lr_patch: Image,
    pub coords: Vec<Coord>,
    /// `T×3`, values in `[0, 1]`.
    pub targets: Vec<f64>,
    pub cell: Cell,
    /// Realized scale `⌊p·r⌋ / p`.
    pub scale: f64,
}

pub fn sample_pair(image: &Image, name: &str, rng: &mut impl Rng, cfg: &TrainConfig) -> Result<SamplePair, TrainError> {
    let need = cfg.min_side();
    if image.height() < need || image.width() < need {
        return Err(TrainError::Data {
            file: name.to_string(),
            msg: format!(
                "image is {}×{}, needs at least {need}×{need} for patch {} at scale {}",
                image.height(),
                image.width(),
                cfg.patch,
                cfg.scale_max
            ),
        });
    }
    let p = cfg.patch;
    let r = if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let s = ((p as f64 * r).floor() as usize).max(p);
    let y0 = rng.gen_range(0..=image.height() - s);
    let x0 = rng.gen_range(0..=image.width() - s);
    let hr = image.to_rgb().crop(y0, x0, s, s)?;
    let lr_patch = bicubic_resize(&hr, p, p);
    let grid = make_coord_grid(s);
    let picks = index::sample(rng, s * s, p * p);
    let mut coords = Vec::with_capacity(p * p);
    let mut targets = Vec::with_capacity(3 * p * p);
    for k in picks.iter() {
        let (i, j) = (k / s, k % s);
        coords.push(Coord::new(grid[j], grid[i]));
        targets.extend_from_slice(hr.pixel(i, j));
    }
    Ok(SamplePair {
        lr_patch,
        coords,
        targets,
        cell: Cell::for_target(s, s),
        scale: s as f64 / p as f64,
    })
}

/// Mean absolute error over all entries.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var, TensorError> {
    if g.shape(pred) != g.shape(target) {
        return Err(TensorError::Shape {
            op: "l1_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Bias-corrected Adam with moments kept in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<(), TensorError> {
        for (name, p) in params.iter() {
            match grads.get(name) {
                Some(g) if g.shape() == p.shape() => {}
                Some(g) => {
                    return Err(TensorError::Shape {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                None => {
                    return Err(TensorError::Contract {
                        op: "adam_step",
                        msg: format!("no gradient for {name}"),
                    })
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i].to_f64_lossy();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = T::from_f64_lossy(w.to_f64_lossy() - upd);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!("epoch={} lr={} loss={:.6}", self.epoch, self.lr, self.loss)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Images left out, with the reason.
    pub skipped: Vec<String>,
}

/// Named images of a directory, sorted by file name.
pub fn load_images(dir: &Path) -> Result<Vec<(String, Image)>, TrainError> {
    let files: Vec<PathBuf> = image::list_pngs(dir)?;
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, image::load_png(&f)?.to_rgb()));
    }
    Ok(out)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn param_norms<T: Scalar>(p: &ParamStore<T>) -> String {
    p.iter()
        .map(|(n, t)| format!("{n}={:.4e}", t.norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Graph computing the mean L1 loss of a batch in `[-1, 1]` units.
pub fn batch_loss<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, batch: &[SamplePair]) -> Result<Var, TensorError> {
    let mut total: Option<Var> = None;
    for s in batch {
        let res = model.forward(g, &s.lr_patch, &s.coords, s.cell)?;
        let lr = s.lr_patch.to_rgb();
        let t = s.coords.len();
        let mut skip = vec![0.0; 3 * t];
        let mut px = [0.0; 3];
        for (i, q) in s.coords.iter().enumerate() {
            image::bilinear_sample(&lr, q.x, q.y, &mut px);
            for c in 0..3 {
                skip[3 * i + c] = 2.0 * px[c] - 1.0;
            }
        }
        let skip = g.constant(Tensor::from_f64(&[t, 3], &skip)?);
        let pred = g.add(res, skip)?;
        let tgt: Vec<f64> = s.targets.iter().map(|&v| 2.0 * v - 1.0).collect();
        let tgt = g.constant(Tensor::from_f64(&[t, 3], &tgt)?);
        let l = l1_loss(g, pred, tgt)?;
        total = Some(match total {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let total = total.ok_or_else(|| TensorError::Contract {
        op: "batch_loss",
        msg: "empty batch".into(),
    })?;
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Trains `model` in place. One metrics line per epoch goes to `log`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    images: &[(String, Image)],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport, TrainError> {
    cfg.validate().map_err(|msg| TrainError::Data {
        file: "<config>".into(),
        msg,
    })?;
    let need = cfg.min_side();
    let mut report = TrainReport::default();
    let usable: Vec<&(String, Image)> = images
        .iter()
        .filter(|(name, img)| {
            let ok = img.height() >= need && img.width() >= need;
            if !ok {
                report.skipped.push(format!(
                    "{name}: {}×{} is smaller than {need}×{need}",
                    img.height(),
                    img.width()
                ));
            }
            ok
        })
        .collect();
    if usable.is_empty() && cfg.epochs > 0 {
        return Err(TrainError::Data {
            file: "<dataset>".into(),
            msg: "no usable training images".into(),
        });
    }

    let mut adam = Adam::new();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..usable.len()).flat_map(|i| std::iter::repeat(i).take(cfg.repeat)).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, u64::MAX)));
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<SamplePair> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, (b * cfg.batch + k) as u64));
                    let (name, img) = usable[i];
                    sample_pair(img, name, &mut rng, cfg)
                })
                .collect::<Result<_, _>>()?;
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, model, &batch)?;
            let value = g.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    norms: param_norms(&model.params),
                });
            }
            let grads = g.backward(loss)?;
            adam.step(&mut model.params, grads.params(), lr)?;
            sum += value * batch.len() as f64;
            count += batch.len();
        }
        let stats = EpochStats {
            epoch,
            lr,
            loss: sum / count.max(1) as f64,
        };
        writeln!(log, "{}", stats.log_line())?;
        report.epochs.push(stats);
    }
    Ok(report)
}
