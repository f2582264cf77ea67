//! Encoder + decoder + bilinear skip, with exact tiled inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coords::{Cell, Coord, QueryBatch};
use crate::decoder::{Decoder, DecoderConfig, QueryGeometry, Summaries};
use crate::encoder::{self, EncoderConfig};
use crate::image::{self, Image};
use crate::nn::{ParamSpec, ParamStore};
use crate::tensor::{attention_summary_f64, Graph, Result, Scalar, Tensor, TensorError, Var};

/// Largest number of queries decoded in one graph.
pub const MAX_TILE: usize = 1 << 16;
pub const DEFAULT_TILE: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.encoder.param_specs();
        v.extend(self.decoder.param_specs(self.encoder.c_out));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub decoder: Decoder,
    pub params: ParamStore<T>,
}

/// Maps `[0, 1]` pixels to a `[h, w, 3]` tensor in `[-1, 1]`.
pub fn image_tensor<T: Scalar>(img: &Image) -> Tensor<T> {
    let rgb = img.to_rgb();
    let data = rgb.pixels().iter().map(|&v| T::from_f64_lossy(2.0 * v - 1.0)).collect();
    Tensor::new(&[rgb.height(), rgb.width(), 3], data).expect("image geometry")
}

impl<T: Scalar> Model<T> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> std::result::Result<Self, String> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::init(&cfg.param_specs(), &mut rng);
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> std::result::Result<Self, String> {
        cfg.validate()?;
        params.matches(&cfg.param_specs())?;
        let decoder = Decoder::new(cfg.decoder.clone(), cfg.encoder.c_out)?;
        Ok(Model { cfg, decoder, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Latent map of `lr` flattened to `[h·w, C]`.
    pub fn encode(&self, g: &mut Graph<T>, lr: &Image) -> Result<Var> {
        let x = g.constant(image_tensor(lr));
        let z = encoder::encode(g, &self.params, &self.cfg.encoder, x)?;
        let s = g.shape(z).to_vec();
        g.reshape(z, &[s[0] * s[1], s[2]])
    }

    pub fn geometry(&self, lr: &Image, coords: &[Coord], cell: Cell) -> QueryGeometry {
        let d = &self.cfg.decoder;
        QueryGeometry::new(coords, cell, lr.height(), lr.width(), d.levels, d.base)
    }

    /// Differentiable residuals `[T, 3]` (in `[-1, 1]` units) with attention
    /// over exactly these queries.
    pub fn forward(&self, g: &mut Graph<T>, lr: &Image, coords: &[Coord], cell: Cell) -> Result<Var> {
        let latent = self.encode(g, lr)?;
        let geo = self.geometry(lr, coords, cell);
        self.decoder.decode(g, &self.params, latent, &geo, Summaries::InCall)
    }

    fn latent_value(&self, lr: &Image) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = self.encode(&mut g, lr)?;
        Ok(g.value(z).clone())
    }

    /// Residuals for all `queries`, decoded `tile` at a time. Attention
    /// summaries are accumulated over every tile before they are applied,
    /// so the result does not depend on the tile size.
    pub fn residuals(&self, lr: &Image, queries: &QueryBatch, tile: usize) -> Result<Vec<T>> {
        if tile == 0 || tile > MAX_TILE {
            return Err(TensorError::Contract {
                op: "residuals",
                msg: format!("tile size {tile} outside 1..={MAX_TILE}"),
            });
        }
        let latent = self.latent_value(lr)?;
        let n = queries.len();
        let tiles: Vec<QueryGeometry> = queries
            .coords
            .chunks(tile)
            .map(|c| self.geometry(lr, c, queries.cell))
            .collect();
        let d = &self.cfg.decoder;
        let mut summaries: Vec<Vec<T>> = Vec::new();
        if d.uses_attention() {
            let head_dim = d.width / d.heads;
            let scale = d.attn_norm.scale(n);
            for b in 0..d.blocks {
                let mut acc = vec![0.0f64; d.heads * head_dim * head_dim];
                for geo in &tiles {
                    let mut g = Graph::new();
                    let lat = g.constant(latent.clone());
                    let (q, k) = self.decoder.probe(&mut g, &self.params, lat, geo, &summaries, b)?;
                    let s = attention_summary_f64(g.value(k).data(), g.value(q).data(), geo.tokens, d.heads, head_dim);
                    acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
                }
                summaries.push(acc.into_iter().map(|v| T::from_f64_lossy(v * scale)).collect());
            }
        }
        let mut out = Vec::with_capacity(3 * n);
        for geo in &tiles {
            let mut g = Graph::new();
            let lat = g.constant(latent.clone());
            let r = self.decoder.decode(&mut g, &self.params, lat, geo, Summaries::External(&summaries))?;
            out.extend_from_slice(g.value(r).data());
        }
        Ok(out)
    }

    /// RGB predictions in `[0, 1]`, `T×3` row-major.
    pub fn predict(&self, lr: &Image, queries: &QueryBatch, tile: usize) -> Result<Vec<f64>> {
        let res = self.residuals(lr, queries, tile)?;
        let lr = lr.to_rgb();
        let mut out = vec![0.0; 3 * queries.len()];
        for (i, q) in queries.coords.iter().enumerate() {
            let o = &mut out[3 * i..3 * i + 3];
            image::bilinear_sample(&lr, q.x, q.y, o);
            for (c, v) in o.iter_mut().enumerate() {
                // skip added in [0, 1] units: zero residual leaves it untouched
                *v = (*v + 0.5 * res[3 * i + c].to_f64_lossy()).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }

    /// Full-grid reconstruction at `out_h × out_w`.
    pub fn upsample(&self, lr: &Image, out_h: usize, out_w: usize, tile: usize) -> Result<Image> {
        let q = QueryBatch::full_grid(out_h, out_w);
        let px = self.predict(lr, &q, tile)?;
        Ok(Image::new(out_h, out_w, 3, px).expect("output geometry"))
    }
}

/// Output size for scale `r` on an `n`-pixel axis: `ceil(r·n)`, tolerant to
/// representation error in `r`.
pub fn scaled_len(n: usize, r: f64) -> usize {
    let v = r * n as f64;
    let rounded = v.round();
    if (v - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        v.ceil() as usize
    }
}
