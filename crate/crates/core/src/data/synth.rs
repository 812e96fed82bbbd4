//! Procedural four-class style corpus: identical content distribution, one
//! appearance transform per class.
//!
//! Content is a few light-gray rectangles, disks and line segments on a
//! mid-gray background. The class transforms are
//!
//! - fog: `0.4 * blur(p, 2) + 0.6`
//! - rain: `p * 0.8`, then 40-80 anti-aliased streaks at 70-80 degrees adding
//!   0.25, then `blur(p, 1)`
//! - snow: `p + 0.1`, then white disks (radius 1-2) covering about 5% of pixels
//! - sun: `clamp(1.3 * (p - 0.5) + 0.65)`, red channel `+ 0.08`
//!
//! Every image draws from its own generators derived from the corpus seed and
//! the image index, so generation order never changes the output.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use super::{ppm, Dataset, Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::rng::{derive_index, derive_seed, rng_for, Rng as StdRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Style {
    Fog,
    Rain,
    Snow,
    Sun,
}

impl Style {
    /// In label order.
    pub const ALL: [Style; 4] = [Style::Fog, Style::Rain, Style::Snow, Style::Sun];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.label()]
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }
}

/// Transform constants; defaults are the documented class definitions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub sun_contrast: f32,
    pub sun_lift: f32,
    pub sun_red: f32,
    pub fog_keep: f32,
    pub fog_radius: usize,
    pub rain_gain: f32,
    pub rain_streaks: (usize, usize),
    pub rain_angle_deg: (f32, f32),
    pub rain_boost: f32,
    pub rain_blur: usize,
    pub snow_lift: f32,
    pub snow_coverage: f32,
    pub snow_radius: (f32, f32),
    pub snow_value: (f32, f32),
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            sun_contrast: 1.3,
            sun_lift: 0.15,
            sun_red: 0.08,
            fog_keep: 0.4,
            fog_radius: 2,
            rain_gain: 0.8,
            rain_streaks: (40, 80),
            rain_angle_deg: (70.0, 80.0),
            rain_boost: 0.25,
            rain_blur: 1,
            snow_lift: 0.1,
            snow_coverage: 0.05,
            snow_radius: (1.0, 2.0),
            snow_value: (0.95, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub per_class: usize,
    pub size: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes: (usize, usize),
    pub seed: u64,
    /// Share one content layout per index across the four classes.
    pub paired: bool,
    pub transforms: TransformParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_class: 100,
            size: 64,
            shapes: (3, 6),
            seed: 0,
            paired: false,
            transforms: TransformParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class < 1 {
            return Err(Error::config("per-class count must be >= 1"));
        }
        if self.size < 16 {
            return Err(Error::config(format!(
                "image size {} below the minimum of 16",
                self.size
            )));
        }
        if self.shapes.0 > self.shapes.1 {
            return Err(Error::config("shape range is empty"));
        }
        Ok(())
    }

    fn content_rng(&self, style: Style, index: usize) -> StdRng {
        let purpose = if self.paired {
            "content".to_string()
        } else {
            format!("content:{}", style.name())
        };
        rng_for(
            derive_index(derive_seed(self.seed, &purpose), index as u64),
            "draw",
        )
    }

    fn style_rng(&self, style: Style, index: usize) -> StdRng {
        let base = derive_seed(self.seed, &format!("style:{}", style.name()));
        rng_for(derive_index(base, index as u64), "draw")
    }

    /// Gray content plane (`H×W`) of image `index` of class `style`.
    pub fn content(&self, style: Style, index: usize) -> Vec<f32> {
        render_content(self.size, self.shapes, &mut self.content_rng(style, index))
    }

    /// Image `index` of class `style`, quantized to 8 bits.
    pub fn image(&self, style: Style, index: usize) -> Tensor<f32> {
        let content = self.content(style, index);
        let mut img = gray_to_rgb(&content, self.size);
        apply_style(
            &mut img,
            style,
            &self.transforms,
            &mut self.style_rng(style, index),
        );
        quantize(&mut img);
        img
    }

    /// Like [`image`](Self::image) but the transform only shows inside one
    /// quadrant (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right);
    /// the rest is untransformed content.
    pub fn quadrant_image(&self, style: Style, index: usize, quadrant: usize) -> Tensor<f32> {
        let content = self.content(style, index);
        let plain = gray_to_rgb(&content, self.size);
        let mut styled = plain.clone();
        apply_style(
            &mut styled,
            style,
            &self.transforms,
            &mut self.style_rng(style, index),
        );
        let n = self.size;
        let half = n / 2;
        let (r0, c0) = ((quadrant / 2) * half, (quadrant % 2) * half);
        let out = styled.data_mut();
        for ch in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let inside = (r0..r0 + half).contains(&y) && (c0..c0 + half).contains(&x);
                    if !inside {
                        let i = (ch * n + y) * n + x;
                        out[i] = plain.data()[i];
                    }
                }
            }
        }
        quantize(&mut styled);
        styled
    }

    /// Build the whole corpus in memory, class-major, paths relative to the
    /// corpus root.
    pub fn dataset(&self) -> Result<Dataset> {
        self.validate()?;
        let jobs: Vec<(Style, usize)> = Style::ALL
            .iter()
            .flat_map(|&s| (0..self.per_class).map(move |i| (s, i)))
            .collect();
        let samples = jobs
            .par_iter()
            .map(|&(style, i)| Sample {
                image: self.image(style, i),
                label: style.label(),
                path: relative_path(style, i),
            })
            .collect();
        Ok(Dataset {
            samples,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            resized_to: None,
        })
    }
}

pub fn relative_path(style: Style, index: usize) -> PathBuf {
    PathBuf::from(style.name()).join(format!("{index:05}.ppm"))
}

/// Generate the corpus and write it under `out` as `<class>/<index>.ppm`.
/// Returns the dataset with paths pointing at the written files.
pub fn generate(cfg: &SynthConfig, out: &Path) -> Result<Dataset> {
    let mut ds = cfg.dataset()?;
    for name in CLASS_NAMES {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    ds.samples.par_iter_mut().try_for_each(|s| {
        s.path = out.join(&s.path);
        ppm::write(&s.path, &s.image)
    })?;
    Ok(ds)
}

fn gray_to_rgb(gray: &[f32], size: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(3 * gray.len());
    for _ in 0..3 {
        data.extend_from_slice(gray);
    }
    Tensor::new(vec![3, size, size], data).expect("square image")
}

fn quantize(img: &mut Tensor<f32>) {
    for v in img.data_mut() {
        *v = ppm::to_byte(*v) as f32 / 255.0;
    }
}

fn render_content(n: usize, shapes: (usize, usize), rng: &mut StdRng) -> Vec<f32> {
    let mut plane = vec![0.5f32; n * n];
    let nf = n as f32;
    let count = rng.random_range(shapes.0..=shapes.1);
    for _ in 0..count {
        let value: f32 = rng.random_range(0.62..0.9);
        match rng.random_range(0..3) {
            0 => {
                let w = rng.random_range(0.15 * nf..0.45 * nf);
                let h = rng.random_range(0.15 * nf..0.45 * nf);
                let x0 = rng.random_range(-0.1 * nf..nf - 0.5 * w);
                let y0 = rng.random_range(-0.1 * nf..nf - 0.5 * h);
                fill(&mut plane, n, value, |x, y| {
                    x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
                });
            }
            1 => {
                let r = rng.random_range(0.08 * nf..0.2 * nf);
                let cx = rng.random_range(0.0..nf);
                let cy = rng.random_range(0.0..nf);
                fill(&mut plane, n, value, |x, y| {
                    (x - cx).powi(2) + (y - cy).powi(2) <= r * r
                });
            }
            _ => {
                let a = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
                let b = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
                let half = rng.random_range(0.5..1.5f32);
                fill(&mut plane, n, value, |x, y| {
                    segment_distance((x, y), a, b) <= half
                });
            }
        }
    }
    plane
}

fn fill(plane: &mut [f32], n: usize, value: f32, inside: impl Fn(f32, f32) -> bool) {
    for y in 0..n {
        for x in 0..n {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                plane[y * n + x] = value;
            }
        }
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Separable box blur of radius `r` with clamped borders, per channel.
pub fn box_blur(img: &mut Tensor<f32>, r: usize) {
    if r == 0 {
        return;
    }
    let sh = img.shape().to_vec();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let data = img.data_mut();
    let norm = 1.0 / (2 * r + 1) as f32;
    let mut tmp = vec![0f32; h * w];
    for ch in 0..c {
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -(r as isize)..=r as isize {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    s += plane[y * w + xx];
                }
                tmp[y * w + x] = s * norm;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -(r as isize)..=r as isize {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    s += tmp[yy * w + x];
                }
                plane[y * w + x] = s * norm;
            }
        }
    }
}

fn apply_style(img: &mut Tensor<f32>, style: Style, p: &TransformParams, rng: &mut StdRng) {
    let n = img.shape()[1];
    let plane = n * n;
    match style {
        Style::Sun => {
            for v in img.data_mut().iter_mut() {
                *v = (p.sun_contrast * (*v - 0.5) + 0.5 + p.sun_lift).clamp(0.0, 1.0);
            }
            for v in &mut img.data_mut()[..plane] {
                *v = (*v + p.sun_red).clamp(0.0, 1.0);
            }
        }
        Style::Fog => {
            box_blur(img, p.fog_radius);
            for v in img.data_mut().iter_mut() {
                *v = p.fog_keep * *v + (1.0 - p.fog_keep);
            }
        }
        Style::Rain => {
            for v in img.data_mut().iter_mut() {
                *v *= p.rain_gain;
            }
            let nf = n as f32;
            let mut cover = vec![0f32; plane];
            let count = rng.random_range(p.rain_streaks.0..=p.rain_streaks.1);
            for _ in 0..count {
                let angle = rng
                    .random_range(p.rain_angle_deg.0..=p.rain_angle_deg.1)
                    .to_radians();
                let len = rng.random_range(0.08 * nf..0.2 * nf);
                let cx = rng.random_range(0.0..nf);
                let cy = rng.random_range(0.0..nf);
                let (dx, dy) = (0.5 * len * angle.cos(), 0.5 * len * angle.sin());
                let (a, b) = ((cx - dx, cy - dy), (cx + dx, cy + dy));
                let (x0, x1) = (a.0.min(b.0).floor() - 1.0, a.0.max(b.0).ceil() + 1.0);
                let (y0, y1) = (a.1.min(b.1).floor() - 1.0, a.1.max(b.1).ceil() + 1.0);
                for y in (y0.max(0.0) as usize)..(y1.min(nf) as usize) {
                    for x in (x0.max(0.0) as usize)..(x1.min(nf) as usize) {
                        let d = segment_distance((x as f32 + 0.5, y as f32 + 0.5), a, b);
                        let c = &mut cover[y * n + x];
                        *c = c.max((1.0 - d).clamp(0.0, 1.0));
                    }
                }
            }
            let data = img.data_mut();
            for ch in 0..3 {
                for (i, &c) in cover.iter().enumerate() {
                    let v = &mut data[ch * plane + i];
                    *v = (*v + p.rain_boost * c).min(1.0);
                }
            }
            box_blur(img, p.rain_blur);
        }
        Style::Snow => {
            for v in img.data_mut().iter_mut() {
                *v = (*v + p.snow_lift).min(1.0);
            }
            let nf = n as f32;
            let mut covered = vec![false; plane];
            let mut count = 0usize;
            let target = (p.snow_coverage * plane as f32).ceil() as usize;
            let data = img.data_mut();
            while count < target {
                let r = rng.random_range(p.snow_radius.0..=p.snow_radius.1);
                let value = rng.random_range(p.snow_value.0..=p.snow_value.1);
                let cx = rng.random_range(0.0..nf);
                let cy = rng.random_range(0.0..nf);
                let lo_y = (cy - r).floor().max(0.0) as usize;
                let hi_y = ((cy + r).ceil() as usize).min(n);
                let lo_x = (cx - r).floor().max(0.0) as usize;
                let hi_x = ((cx + r).ceil() as usize).min(n);
                for y in lo_y..hi_y {
                    for x in lo_x..hi_x {
                        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                        if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                            let i = y * n + x;
                            if !covered[i] {
                                covered[i] = true;
                                count += 1;
                            }
                            for ch in 0..3 {
                                data[ch * plane + i] = value;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(t: &Tensor<f32>) -> f64 {
        t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64
    }

    #[test]
    fn same_seed_same_pixels() {
        let cfg = SynthConfig::default();
        for s in Style::ALL {
            assert_eq!(cfg.image(s, 3), cfg.image(s, 3));
        }
        assert_ne!(cfg.image(Style::Fog, 0), cfg.image(Style::Fog, 1));
    }

    #[test]
    fn paired_content_is_shared() {
        let cfg = SynthConfig {
            paired: true,
            ..SynthConfig::default()
        };
        let c = cfg.content(Style::Fog, 5);
        for s in Style::ALL {
            assert_eq!(cfg.content(s, 5), c);
        }
        let unpaired = SynthConfig::default();
        assert_ne!(
            unpaired.content(Style::Fog, 5),
            unpaired.content(Style::Sun, 5)
        );
    }

    #[test]
    fn snow_reaches_coverage() {
        let cfg = SynthConfig::default();
        let img = cfg.image(Style::Snow, 0);
        let bright = img.data()[..64 * 64].iter().filter(|&&v| v >= 0.95).count();
        assert!(bright as f32 >= 0.05 * 4096.0, "{bright}");
    }

    #[test]
    fn quadrant_image_is_plain_outside_quadrant() {
        let cfg = SynthConfig::default();
        let q = cfg.quadrant_image(Style::Rain, 2, 1);
        let content = cfg.content(Style::Rain, 2);
        // bottom-left pixel lies outside the top-right quadrant
        let i = 60 * 64 + 3;
        assert_eq!(q.data()[i], ppm::to_byte(content[i]) as f32 / 255.0);
        assert!(mean(&q) > 0.0);
    }

    #[test]
    fn rejects_tiny_images() {
        let cfg = SynthConfig {
            size: 8,
            ..SynthConfig::default()
        };
        assert!(cfg.dataset().is_err());
    }
}
