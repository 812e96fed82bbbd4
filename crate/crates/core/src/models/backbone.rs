//! Truncated residual backbone: a 3×3 stem followed by basic blocks, cut
//! after a fixed number of conv layers.

use super::config::{ArchConfig, BLOCKS_PER_STAGE};
use super::params::{Bound, Init, ParamSpec};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Scalar;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Skip {
    Identity,
    Projection { in_c: usize, stride: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PlanConv {
    /// 1-based conv layer index (`conv<t>`).
    pub t: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    /// `Some` when this conv closes a basic block.
    pub closes: Option<Skip>,
}

/// Retained convs after the stem, in order. A block cut after its first
/// conv keeps that conv (with norm and relu) and drops the skip.
pub(crate) fn plan(cfg: &ArchConfig) -> Vec<PlanConv> {
    let mut out = Vec::new();
    let mut t = 1;
    let mut in_c = cfg.stem_width;
    'stages: for (si, &w) in cfg.stage_widths.iter().enumerate() {
        for bi in 0..BLOCKS_PER_STAGE {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            if t >= cfg.truncation {
                break 'stages;
            }
            t += 1;
            out.push(PlanConv {
                t,
                in_c,
                out_c: w,
                stride,
                closes: None,
            });
            if t >= cfg.truncation {
                break 'stages;
            }
            t += 1;
            let skip = if stride != 1 || in_c != w {
                Skip::Projection { in_c, stride }
            } else {
                Skip::Identity
            };
            out.push(PlanConv {
                t,
                in_c: w,
                out_c: w,
                stride: 1,
                closes: Some(skip),
            });
            in_c = w;
        }
    }
    out
}

/// Width of the last retained layer.
pub(crate) fn output_width(cfg: &ArchConfig) -> usize {
    plan(cfg).last().map_or(cfg.stem_width, |p| p.out_c)
}

pub(crate) fn param_specs(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let mut specs = vec![
        ParamSpec::new(
            "conv1.weight",
            &[cfg.stem_width, IMAGE_CHANNELS, 3, 3],
            Init::He {
                fan_in: IMAGE_CHANNELS * 9,
            },
        ),
        ParamSpec::new("conv1.bias", &[cfg.stem_width], Init::Zeros),
    ];
    for p in plan(cfg) {
        let n = format!("conv{}", p.t);
        specs.push(ParamSpec::new(
            format!("{n}.weight"),
            &[p.out_c, p.in_c, 3, 3],
            Init::He { fan_in: p.in_c * 9 },
        ));
        specs.push(ParamSpec::new(
            format!("{n}.norm.gamma"),
            &[p.out_c],
            Init::Ones,
        ));
        specs.push(ParamSpec::new(
            format!("{n}.norm.beta"),
            &[p.out_c],
            Init::Zeros,
        ));
        if let Some(Skip::Projection { in_c, .. }) = p.closes {
            specs.push(ParamSpec::new(
                format!("{n}.proj.weight"),
                &[p.out_c, in_c, 1, 1],
                Init::FanIn { fan_in: in_c },
            ));
            specs.push(ParamSpec::new(
                format!("{n}.proj.bias"),
                &[p.out_c],
                Init::Zeros,
            ));
        }
    }
    specs
}

/// Run the backbone; returns every retained layer's output activation,
/// named `conv1..conv<T>`.
pub(crate) fn forward<T: Scalar>(
    cfg: &ArchConfig,
    g: &mut Graph<T>,
    x: Var,
    p: &Bound<'_, T>,
) -> Result<Vec<(String, Var)>> {
    let mut layers = Vec::with_capacity(cfg.truncation);
    let stem = g.conv2d(
        x,
        p.get("conv1.weight"),
        Some(p.get("conv1.bias")),
        cfg.stem_stride,
        1,
    )?;
    let mut h = g.relu(stem)?;
    layers.push(("conv1".to_string(), h));
    let mut block_in = h;
    for pc in plan(cfg) {
        let n = format!("conv{}", pc.t);
        let y = g.conv2d(h, p.get(&format!("{n}.weight")), None, pc.stride, 1)?;
        let y = g.instance_norm(
            y,
            p.get(&format!("{n}.norm.gamma")),
            p.get(&format!("{n}.norm.beta")),
        )?;
        h = match pc.closes {
            None => {
                block_in = h;
                g.relu(y)?
            }
            Some(skip) => {
                let skip = match skip {
                    Skip::Identity => block_in,
                    Skip::Projection { stride, .. } => g.conv2d(
                        block_in,
                        p.get(&format!("{n}.proj.weight")),
                        Some(p.get(&format!("{n}.proj.bias"))),
                        stride,
                        0,
                    )?,
                };
                let sum = g.add(y, skip)?;
                g.relu(sum)?
            }
        };
        layers.push((n, h));
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts_layers_and_projections() {
        let cfg = ArchConfig::default().with_truncation(9);
        let pl = plan(&cfg);
        assert_eq!(pl.len(), 8);
        assert_eq!(pl.last().unwrap().t, 9);
        let projections = pl
            .iter()
            .filter(|p| matches!(p.closes, Some(Skip::Projection { .. })))
            .count();
        assert_eq!(projections, 1);
        assert_eq!(output_width(&cfg), 32);

        let partial = ArchConfig::default().with_truncation(6);
        let pl = plan(&partial);
        assert_eq!(pl.last().unwrap().closes, None);
        assert_eq!(output_width(&partial), 32);
        assert!(plan(&ArchConfig::default().with_truncation(1)).is_empty());
    }
}
