//! Images, PNG I/O, pixel-center resampling and PSNR.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::coords::{make_coord_grid, pixel_position};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Row-major image with values nominally in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}×{}×{})", self.height, self.width, self.channels)
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::Dimension(format!(
                "invalid image geometry {height}×{width}×{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(ImageError::Dimension(format!(
                "{height}×{width}×{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Image::new(height, width, channels, vec![v; height * width * channels]).expect("valid geometry")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    /// Expands grayscale to three identical channels; RGB is returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        Image::new(self.height, self.width, 3, pixels).expect("valid geometry")
    }

    pub fn clamped(&self) -> Image {
        let mut out = self.clone();
        out.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image, ImageError> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(ImageError::Dimension(format!(
                "crop {h}×{w} at ({y0}, {x0}) outside {}×{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * c;
            pixels.extend_from_slice(&self.pixels[row..row + w * c]);
        }
        Image::new(h, w, c, pixels)
    }

    /// Centered `h × w` window (extra pixel on the far side when odd).
    pub fn center_crop(&self, h: usize, w: usize) -> Result<Image, ImageError> {
        if h > self.height || w > self.width {
            return Err(ImageError::Dimension(format!(
                "center crop {h}×{w} larger than {}×{}",
                self.height, self.width
            )));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    pub fn mirrored_horizontally(&self) -> Image {
        let c = self.channels;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                pixels.extend_from_slice(self.pixel(y, x));
            }
        }
        Image::new(self.height, self.width, c, pixels).expect("valid geometry")
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> ImageError {
    ImageError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Loads an 8- or 16-bit grayscale or RGB PNG, scaled by the bit-depth maximum.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| format_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(format_err(path, format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let n = h * w * channels;
    let pixels: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..n].iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..2 * n]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / 65535.0)
            .collect(),
        other => return Err(format_err(path, format!("unsupported bit depth {other:?}"))),
    };
    Image::new(h, w, channels, pixels)
}

/// Quantizes a `[0, 1]` value to a byte, clamping first and rounding half away from zero.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves as an 8-bit PNG.
pub fn save_png(image: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let io_err = |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(if image.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
    let bytes: Vec<u8> = image.pixels.iter().map(|&v| quantize_u8(v)).collect();
    writer.write_image_data(&bytes).map_err(|e| format_err(path, e.to_string()))?;
    writer.finish().map_err(|e| format_err(path, e.to_string()))
}

/// Sorted list of `*.png` files in a directory.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, ImageError> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|source| ImageError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-pixel taps `(source index, weight)` along one axis.
struct AxisTaps {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisTaps {
    fn cubic(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        // Widen the kernel when shrinking so it acts as a low-pass filter.
        let stretch = scale.max(1.0);
        let support = 2.0 * stretch;
        let taps = (0..n_out)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale - 0.5;
                let lo = (center - support).ceil() as isize;
                let hi = (center + support).floor() as isize;
                let raw: Vec<(usize, f64)> = (lo..=hi)
                    .map(|j| {
                        let idx = j.clamp(0, n_in as isize - 1) as usize;
                        (idx, cubic_kernel((j as f64 - center) / stretch))
                    })
                    .filter(|&(_, w)| w != 0.0)
                    .collect();
                let total: f64 = raw.iter().map(|t| t.1).sum();
                raw.into_iter().map(|(j, w)| (j, w / total)).collect()
            })
            .collect();
        AxisTaps { taps }
    }
}

fn separable(image: &Image, rows: &AxisTaps, cols: &AxisTaps) -> Image {
    let c = image.channels;
    let (out_h, out_w) = (rows.taps.len(), cols.taps.len());
    // Horizontal pass: in_h × out_w.
    let mut mid = vec![0.0; image.height * out_w * c];
    for y in 0..image.height {
        for (x, taps) in cols.taps.iter().enumerate() {
            let dst = &mut mid[(y * out_w + x) * c..(y * out_w + x + 1) * c];
            for &(j, w) in taps {
                for (d, &s) in dst.iter_mut().zip(image.pixel(y, j)) {
                    *d += w * s;
                }
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * c];
    for (y, taps) in rows.taps.iter().enumerate() {
        for x in 0..out_w {
            let dst = &mut out[(y * out_w + x) * c..(y * out_w + x + 1) * c];
            for &(j, w) in taps {
                let src = &mid[(j * out_w + x) * c..(j * out_w + x + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    Image::new(out_h, out_w, c, out).expect("valid geometry")
}

/// Bicubic resampling with pixel-center alignment, clamped borders and an
/// anti-aliasing kernel stretch when downscaling.
pub fn bicubic_resize(image: &Image, out_h: usize, out_w: usize) -> Image {
    assert!(out_h >= 1 && out_w >= 1, "target size must be at least 1×1");
    if out_h == image.height && out_w == image.width {
        return image.clone();
    }
    let rows = AxisTaps::cubic(image.height, out_h);
    let cols = AxisTaps::cubic(image.width, out_w);
    separable(image, &rows, &cols)
}

/// Bilinear sample at normalized coordinate `(x, y)` with clamped borders.
/// Writes `image.channels()` values into `out`.
pub fn bilinear_sample(image: &Image, x: f64, y: f64, out: &mut [f64]) {
    let (h, w, c) = (image.height, image.width, image.channels);
    let u = pixel_position(y, h);
    let v = pixel_position(x, w);
    let (y0f, x0f) = (u.floor(), v.floor());
    let (fy, fx) = (u - y0f, v - x0f);
    let clamp = |i: f64, n: usize| i.clamp(0.0, (n - 1) as f64) as usize;
    let (y0, y1) = (clamp(y0f, h), clamp(y0f + 1.0, h));
    let (x0, x1) = (clamp(x0f, w), clamp(x0f + 1.0, w));
    let (p00, p01, p10, p11) = (image.pixel(y0, x0), image.pixel(y0, x1), image.pixel(y1, x0), image.pixel(y1, x1));
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let top = (1.0 - fx) * p00[ch] + fx * p01[ch];
        let bottom = (1.0 - fx) * p10[ch] + fx * p11[ch];
        *o = (1.0 - fy) * top + fy * bottom;
    }
}

/// Bilinear resampling on the target pixel-center grid. Intended for
/// upsampling; downscaling is not low-pass filtered.
pub fn bilinear_upsample(image: &Image, out_h: usize, out_w: usize) -> Image {
    assert!(out_h >= 1 && out_w >= 1, "target size must be at least 1×1");
    let ys = make_coord_grid(out_h);
    let xs = make_coord_grid(out_w);
    let c = image.channels;
    let mut pixels = vec![0.0; out_h * out_w * c];
    for (i, &y) in ys.iter().enumerate() {
        for (j, &x) in xs.iter().enumerate() {
            let k = (i * out_w + j) * c;
            bilinear_sample(image, x, y, &mut pixels[k..k + c]);
        }
    }
    Image::new(out_h, out_w, c, pixels).expect("valid geometry")
}

/// Which signal PSNR is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsnrConvention {
    Rgb,
    /// BT.601 luma on the studio-swing scale, rescaled to `[0, 1]`.
    YChannel,
}

impl PsnrConvention {
    pub fn name(self) -> &'static str {
        match self {
            PsnrConvention::Rgb => "rgb",
            PsnrConvention::YChannel => "y_channel",
        }
    }
}

/// BT.601 luma of an RGB triple in `[0, 1]`, as a `[0, 1]`-scaled value.
pub fn luma_bt601(r: f64, g: f64, b: f64) -> f64 {
    (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
}

/// Mean squared error after removing `shave` pixels from every border.
pub fn mse(a: &Image, b: &Image, convention: PsnrConvention, shave: usize) -> Result<f64, ImageError> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(ImageError::Dimension(format!("{a:?} vs {b:?}")));
    }
    if 2 * shave >= a.height || 2 * shave >= a.width {
        return Err(ImageError::Dimension(format!("shave {shave} leaves nothing of {a:?}")));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in shave..a.height - shave {
        for x in shave..a.width - shave {
            let (pa, pb) = (a.pixel(y, x), b.pixel(y, x));
            match (convention, a.channels) {
                (PsnrConvention::YChannel, 3) => {
                    let d = luma_bt601(pa[0], pa[1], pa[2]) - luma_bt601(pb[0], pb[1], pb[2]);
                    acc += d * d;
                    count += 1;
                }
                _ => {
                    for (u, v) in pa.iter().zip(pb) {
                        acc += (u - v) * (u - v);
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(acc / count as f64)
}

/// `10·log10(1/MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, convention: PsnrConvention, shave: usize) -> Result<f64, ImageError> {
    let m = mse(a, b, convention, shave)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    /// Direct 2D evaluation of the same resampling rule, without separability
    /// and with the weight sum taken over the full product kernel.
    fn reference_bicubic(img: &Image, oh: usize, ow: usize) -> Image {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
        let (ky, kx) = (sy.max(1.0), sx.max(1.0));
        let mut out = vec![0.0; oh * ow * c];
        for i in 0..oh {
            for j in 0..ow {
                let cy = (i as f64 + 0.5) * sy - 0.5;
                let cx = (j as f64 + 0.5) * sx - 0.5;
                let mut acc = vec![0.0; c];
                let mut total = 0.0;
                let r = 2 * ky.ceil() as isize + 2;
                let s = 2 * kx.ceil() as isize + 2;
                for dy in -r..=r {
                    let yy = cy.floor() as isize + dy;
                    let wy = cubic_kernel((yy as f64 - cy) / ky);
                    for dx in -s..=s {
                        let xx = cx.floor() as isize + dx;
                        let wgt = wy * cubic_kernel((xx as f64 - cx) / kx);
                        if wgt == 0.0 {
                            continue;
                        }
                        let py = yy.clamp(0, h as isize - 1) as usize;
                        let px = xx.clamp(0, w as isize - 1) as usize;
                        for (a, &v) in acc.iter_mut().zip(img.pixel(py, px)) {
                            *a += wgt * v;
                        }
                        total += wgt;
                    }
                }
                for ch in 0..c {
                    out[(i * ow + j) * c + ch] = acc[ch] / total;
                }
            }
        }
        Image::new(oh, ow, c, out).unwrap()
    }

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(1.5) - -0.0625).abs() < 1e-15);
    }

    #[test]
    fn bicubic_preserves_constants() {
        let img = Image::filled(13, 9, 3, 0.37);
        for (oh, ow) in [(1, 1), (5, 4), (13, 9), (26, 18), (40, 7)] {
            let out = bicubic_resize(&img, oh, ow);
            assert_eq!((out.height(), out.width()), (oh, ow));
            assert!(out.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn bicubic_matches_direct_2d_reference() {
        let img = random_image(48, 48, 3, 7);
        for (oh, ow) in [(24, 24), (16, 20), (96, 96), (31, 57)] {
            let fast = bicubic_resize(&img, oh, ow);
            let slow = reference_bicubic(&img, oh, ow);
            let max = fast
                .pixels()
                .iter()
                .zip(slow.pixels())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-3, "{oh}×{ow}: {max}");
            assert!(max < 1e-12, "{oh}×{ow}: {max}");
        }
    }

    #[test]
    fn bicubic_downscale_matches_pillow_interior() {
        // Pillow `Image.resize((24, 24), BICUBIC)` on a float image with pixel
        // (i, j) = ((48i + j)·2654435761 mod 2³²) / 2³². Rows/cols 4..8 lie away
        // from the borders, where Pillow truncates the kernel instead of clamping.
        const PILLOW: [f64; 16] = [
            0.6044996380805969, 0.46747493743896484, 0.41460248827934265, 0.5880483984947205,
            0.5834521651268005, 0.47395434975624084, 0.41732820868492126, 0.6183009743690491,
            0.5861778855323792, 0.48231056332588196, 0.37813806533813477, 0.5791108012199402,
            0.59828782081604, 0.46126312017440796, 0.40839067101478577, 0.5818365216255188,
        ];
        let px = (0..48u64 * 48)
            .map(|k| ((k * 2654435761) % (1u64 << 32)) as f64 / (1u64 << 32) as f64)
            .collect();
        let img = Image::new(48, 48, 1, px).unwrap();
        let out = bicubic_resize(&img, 24, 24);
        for (k, &want) in PILLOW.iter().enumerate() {
            let got = out.get(4 + k / 4, 4 + k % 4, 0);
            assert!((got - want).abs() < 1e-3, "({}, {}): {got} vs {want}", 4 + k / 4, 4 + k % 4);
        }
    }

    #[test]
    fn bicubic_identity_size_is_exact() {
        let img = random_image(6, 5, 3, 1);
        assert_eq!(bicubic_resize(&img, 6, 5), img);
        // Also the generic path: integer-aligned centers hit the kernel zeros.
        let rows = AxisTaps::cubic(6, 6);
        let cols = AxisTaps::cubic(5, 5);
        assert_eq!(separable(&img, &rows, &cols), img);
    }

    #[test]
    fn bicubic_commutes_with_mirroring() {
        let img = random_image(17, 23, 3, 3);
        for (oh, ow) in [(8, 11), (40, 50)] {
            let a = bicubic_resize(&img.mirrored_horizontally(), oh, ow);
            let b = bicubic_resize(&img, oh, ow).mirrored_horizontally();
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_examples() {
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let up = bilinear_upsample(&img, 1, 4);
        assert_eq!(up.pixels(), &[0.0, 0.25, 0.75, 1.0]);
        let img = random_image(7, 9, 3, 5);
        assert_eq!(bilinear_upsample(&img, 7, 9), img);
        let c = Image::filled(3, 4, 3, 0.6);
        assert!(bilinear_upsample(&c, 10, 11).pixels().iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn bilinear_commutes_with_mirroring() {
        let img = random_image(5, 8, 3, 11);
        let a = bilinear_upsample(&img.mirrored_horizontally(), 13, 21);
        let b = bilinear_upsample(&img, 13, 21).mirrored_horizontally();
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(4, 4, 3, 2);
        assert_eq!(psnr(&a, &a, PsnrConvention::Rgb, 0).unwrap(), f64::INFINITY);
        let p = Image::new(1, 1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        let q = Image::new(1, 1, 3, vec![0.6, 0.6, 0.6]).unwrap();
        assert!((psnr(&p, &q, PsnrConvention::Rgb, 0).unwrap() - 20.0).abs() < 1e-9);
        let b = random_image(4, 5, 3, 2);
        assert!(matches!(psnr(&a, &b, PsnrConvention::Rgb, 0), Err(ImageError::Dimension(_))));
        assert!(psnr(&a, &a, PsnrConvention::Rgb, 2).is_err());
    }

    #[test]
    fn psnr_is_symmetric_and_luma_uses_bt601() {
        let a = random_image(10, 10, 3, 8);
        let b = random_image(10, 10, 3, 9);
        for conv in [PsnrConvention::Rgb, PsnrConvention::YChannel] {
            assert_eq!(psnr(&a, &b, conv, 2).unwrap(), psnr(&b, &a, conv, 2).unwrap());
        }
        // A pure green shift of 0.1 moves luma by 12.8553/255.
        let p = Image::new(1, 1, 3, vec![0.2, 0.2, 0.2]).unwrap();
        let q = Image::new(1, 1, 3, vec![0.2, 0.3, 0.2]).unwrap();
        let d: f64 = 12.8553 / 255.0;
        let want = -10.0 * (d * d).log10();
        assert!((psnr(&p, &q, PsnrConvention::YChannel, 0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn png_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let bytes: Vec<f64> = (0..4 * 3 * 3).map(|i| ((i * 29) % 256) as f64 / 255.0).collect();
        let mut px = bytes.clone();
        px[0] = 1.0;
        px[1] = 128.0 / 255.0;
        let img = Image::new(4, 3, 3, px).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.get(0, 0, 0), 1.0);
        assert!((back.get(0, 0, 1) - 0.50196).abs() < 1e-5);
        save_png(&back, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), back);
    }

    #[test]
    fn save_clamps_and_rounds_half_away_from_zero() {
        assert_eq!(quantize_u8(-0.3), 0);
        assert_eq!(quantize_u8(1.7), 255);
        assert_eq!(quantize_u8(0.5 / 255.0), 1);
        assert_eq!(quantize_u8(0.49 / 255.0), 0);
    }

    #[test]
    fn load_reports_missing_file_with_path() {
        let err = load_png("/definitely/not/here.png").unwrap_err();
        assert!(matches!(err, ImageError::Io { .. }));
        assert!(err.to_string().contains("/definitely/not/here.png"));
    }

    #[test]
    fn load_sixteen_bit_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g16.png");
        {
            let f = File::create(&path).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0xff, 0xff, 0x80, 0x00]).unwrap();
        }
        let img = load_png(&path).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert!((img.get(0, 1, 0) - 32768.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn load_rejects_rgba() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        {
            let f = File::create(&path).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2, 3, 4]).unwrap();
        }
        assert!(matches!(load_png(&path), Err(ImageError::Format { .. })));
    }
}
