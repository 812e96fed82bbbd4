use std::path::Path;

use crate::autodiff::Graph;
use crate::data::ppm;
use crate::error::{Error, Result};
use crate::models::{batch_of_one, Model};
use crate::tensor::Tensor;

/// Class-activation map at input resolution, min-max normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    /// Source layers; several for multi-patch models, whose maps are averaged.
    pub layers: Vec<String>,
    pub class: usize,
}

impl Heatmap {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Share of total mass inside rows `r0..r1`, cols `c0..c1`; 0 for an
    /// all-zero map.
    pub fn mass_fraction(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
        let total = self.total();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = rows
            .flat_map(|r| cols.clone().map(move |c| (r, c)))
            .map(|(r, c)| self.at(r, c) as f64)
            .sum();
        inside / total
    }

    /// Mass fraction in quadrant `q` (0 top-left, 1 top-right, 2 bottom-left,
    /// 3 bottom-right).
    pub fn quadrant_fraction(&self, q: usize) -> f64 {
        let (hh, hw) = (self.height / 2, self.width / 2);
        let rows = if q < 2 { 0..hh } else { hh..self.height };
        let cols = if q.is_multiple_of(2) {
            0..hw
        } else {
            hw..self.width
        };
        self.mass_fraction(rows, cols)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("heatmap shape")
    }

    /// Input image with the jet-colored heatmap alpha-blended at 0.5.
    pub fn overlay(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let sh = image.shape();
        if sh != [3, self.height, self.width] {
            return Err(Error::usage(format!(
                "overlay needs a [3, {}, {}] image, got {sh:?}",
                self.height, self.width
            )));
        }
        let plane = self.height * self.width;
        let mut out = image.clone();
        let d = out.data_mut();
        for (i, &v) in self.values.iter().enumerate() {
            let rgb = jet(v);
            for ch in 0..3 {
                d[ch * plane + i] = 0.5 * d[ch * plane + i] + 0.5 * rgb[ch];
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ppm::write(path, &self.to_tensor())
    }

    pub fn write_overlay(&self, image: &Tensor<f32>, path: &Path) -> Result<()> {
        ppm::write(path, &self.overlay(image)?)
    }
}

/// Jet colormap: blue at 0, green at 0.5, red at 1.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f32| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Grad-CAM for `class` at `layer` (default: the model's last conv layer, or
/// the last conv of every branch for multi-patch models).
pub fn grad_cam(
    model: &Model<f32>,
    image: &Tensor<f32>,
    layer: Option<&str>,
    class: usize,
) -> Result<Heatmap> {
    let cfg = model.config();
    if class >= cfg.num_classes {
        return Err(Error::usage(format!(
            "class {class} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let layers = match layer {
        None => model.default_cam_layers(),
        Some(name) => {
            let valid = model.layer_names();
            if !valid.iter().any(|v| v == name) {
                return Err(Error::usage(format!(
                    "unknown layer `{name}`; valid layers: {}",
                    valid.join(", ")
                )));
            }
            vec![name.to_string()]
        }
    };
    let img = batch_of_one(image)?;
    let size = cfg.input_size;
    let mut g = Graph::<f32>::new();
    let x = g.param(img);
    let pass = model.forward(&mut g, x)?;
    let picked = g.select_columns(pass.logits, &[class])?;
    let target = g.sum(picked)?;
    g.backward(target)?;

    let mut acc = vec![0f32; size * size];
    for name in &layers {
        let a = pass.layer(name).expect("validated layer name");
        let act = g.value(a);
        let grad = g.grad(a).unwrap_or_else(|| Tensor::zeros(act.shape()));
        let (k, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
        let plane = h * w;
        let mut raw = vec![0f32; plane];
        for ch in 0..k {
            let gs = &grad.data()[ch * plane..(ch + 1) * plane];
            let weight = gs.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let a_ch = &act.data()[ch * plane..(ch + 1) * plane];
            for (r, &v) in raw.iter_mut().zip(a_ch) {
                *r += (weight * v as f64) as f32;
            }
        }
        raw.iter_mut().for_each(|v| *v = v.max(0.0));
        let up = ppm::resize(&Tensor::new(vec![1, h, w], raw)?, size, size)?;
        for (s, &v) in acc.iter_mut().zip(up.data()) {
            *s += v / layers.len() as f32;
        }
    }
    let (lo, hi) = acc
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let values = if hi > lo {
        acc.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; acc.len()]
    };
    Ok(Heatmap {
        height: size,
        width: size,
        values,
        layers,
        class,
    })
}
