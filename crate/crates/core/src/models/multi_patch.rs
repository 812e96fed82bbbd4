//! Three PatchGAN-style branches with disjoint final receptive fields.
//! Each branch ends in a class-score map; its spatial mean is the branch's
//! logit vector and the model's logits are the mean over branches.

use super::backbone::IMAGE_CHANNELS;
use super::config::ArchConfig;
use super::params::{Bound, Init, ParamSpec};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{s, Scalar};

pub(crate) fn param_specs(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for (b, layers) in cfg.branches.iter().enumerate() {
        let mut in_c = IMAGE_CHANNELS;
        for (i, l) in layers.iter().enumerate() {
            let fan_in = in_c * l.kernel * l.kernel;
            specs.push(ParamSpec::new(
                format!("branch{b}.conv{}.weight", i + 1),
                &[l.channels, in_c, l.kernel, l.kernel],
                Init::He { fan_in },
            ));
            specs.push(ParamSpec::new(
                format!("branch{b}.conv{}.bias", i + 1),
                &[l.channels],
                Init::Zeros,
            ));
            in_c = l.channels;
        }
        specs.push(ParamSpec::new(
            format!("branch{b}.score.weight"),
            &[cfg.num_classes, in_c, 1, 1],
            Init::FanIn { fan_in: in_c },
        ));
        specs.push(ParamSpec::new(
            format!("branch{b}.score.bias"),
            &[cfg.num_classes],
            Init::Zeros,
        ));
    }
    specs
}

pub(crate) struct BranchesOutput {
    pub logits: Var,
    pub branch_logits: Vec<Var>,
    pub layers: Vec<(String, Var)>,
}

pub(crate) fn forward<T: Scalar>(
    cfg: &ArchConfig,
    g: &mut Graph<T>,
    x: Var,
    p: &Bound<'_, T>,
) -> Result<BranchesOutput> {
    let mut layers = Vec::new();
    let mut branch_logits = Vec::with_capacity(cfg.branches.len());
    for (b, branch) in cfg.branches.iter().enumerate() {
        let mut h = x;
        for (i, l) in branch.iter().enumerate() {
            let n = format!("branch{b}.conv{}", i + 1);
            let y = g.conv2d(
                h,
                p.get(&format!("{n}.weight")),
                Some(p.get(&format!("{n}.bias"))),
                l.stride,
                0,
            )?;
            h = g.relu(y)?;
            layers.push((n, h));
        }
        let score = g.conv2d(
            h,
            p.get(&format!("branch{b}.score.weight")),
            Some(p.get(&format!("branch{b}.score.bias"))),
            1,
            0,
        )?;
        layers.push((format!("branch{b}.score"), score));
        branch_logits.push(g.spatial_mean(score)?);
    }
    let mut total = branch_logits[0];
    for &bl in &branch_logits[1..] {
        total = g.add(total, bl)?;
    }
    let logits = g.scale(total, s(1.0 / branch_logits.len() as f64))?;
    Ok(BranchesOutput {
        logits,
        branch_logits,
        layers,
    })
}
