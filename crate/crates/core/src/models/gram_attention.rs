//! Gram-matrix tokens pooled by additive attention.
//!
//! For every selected backbone layer the normalized Gram matrix is
//! flattened to its upper triangle and projected to a shared width `d`,
//! giving one token per layer. A learned query scores each token,
//! `s_l = qᵀ tanh(W e_l)`, the scores are softmax-normalized and the pooled
//! vector `z = Σ α_l e_l` feeds a two-layer MLP.

use super::config::ArchConfig;
use super::params::{Bound, Init, ParamSpec};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

/// Flat indices `i·C + j` of the upper triangle (`i <= j`) of a `C×C` matrix.
pub fn upper_triangle(c: usize) -> Vec<usize> {
    (0..c)
        .flat_map(|i| (i..c).map(move |j| i * c + j))
        .collect()
}

pub(crate) fn param_specs(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut specs = Vec::new();
    for name in cfg.resolved_gram_layers() {
        let t: usize = name[4..].parse().expect("validated layer name");
        let c = cfg.layer_width(t);
        let m = c * (c + 1) / 2;
        specs.push(ParamSpec::new(
            format!("gram.{name}.weight"),
            &[d, m],
            Init::FanIn { fan_in: m },
        ));
        specs.push(ParamSpec::new(
            format!("gram.{name}.bias"),
            &[d],
            Init::Zeros,
        ));
    }
    specs.push(ParamSpec::new("attn.w", &[d, d], Init::FanIn { fan_in: d }));
    specs.push(ParamSpec::new("attn.q", &[1, d], Init::FanIn { fan_in: d }));
    specs.push(ParamSpec::new(
        "mlp1.weight",
        &[d, d],
        Init::He { fan_in: d },
    ));
    specs.push(ParamSpec::new("mlp1.bias", &[d], Init::Zeros));
    specs.push(ParamSpec::new(
        "mlp2.weight",
        &[cfg.num_classes, d],
        Init::FanIn { fan_in: d },
    ));
    specs.push(ParamSpec::new("mlp2.bias", &[cfg.num_classes], Init::Zeros));
    specs
}

pub(crate) struct HeadOutput {
    pub logits: Var,
    pub pooled: Var,
    pub scores: Var,
    pub attention: Var,
    pub grams: Vec<Var>,
    pub tokens: Vec<Var>,
}

pub(crate) fn forward<T: Scalar>(
    cfg: &ArchConfig,
    g: &mut Graph<T>,
    layers: &[(String, Var)],
    p: &Bound<'_, T>,
    score_shift: f64,
) -> Result<HeadOutput> {
    let names = cfg.resolved_gram_layers();
    let mut grams = Vec::with_capacity(names.len());
    let mut tokens = Vec::with_capacity(names.len());
    let mut scores = Vec::with_capacity(names.len());
    let (attn_w, attn_q) = (p.get("attn.w"), p.get("attn.q"));
    for name in &names {
        let act = layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                Error::config(format!("gram layer `{name}` not produced by the backbone"))
            })?;
        let (n, c) = (g.shape(act)[0], g.shape(act)[1]);
        let gram = g.gram(act)?;
        grams.push(gram);
        let flat = g.reshape(gram, &[n, c * c])?;
        let upper = g.select_columns(flat, &upper_triangle(c))?;
        let e = g.linear(
            upper,
            p.get(&format!("gram.{name}.weight")),
            Some(p.get(&format!("gram.{name}.bias"))),
        )?;
        let hid = g.linear(e, attn_w, None)?;
        let hid = g.tanh(hid)?;
        scores.push(g.linear(hid, attn_q, None)?);
        tokens.push(e);
    }
    let n = g.shape(tokens[0])[0];
    let l = tokens.len();
    let mut score = g.concat(&scores, 1)?;
    if score_shift != 0.0 {
        let shift = g.constant(Tensor::full(&[n, l], s(score_shift)));
        score = g.add(score, shift)?;
    }
    let attention = g.softmax(score)?;
    let stacked = g.concat(&tokens, 1)?;
    let stacked = g.reshape(stacked, &[n, l, cfg.embed_dim])?;
    let pooled = g.weighted_sum(attention, stacked)?;
    let h = g.linear(pooled, p.get("mlp1.weight"), Some(p.get("mlp1.bias")))?;
    let h = g.relu(h)?;
    let logits = g.linear(h, p.get("mlp2.weight"), Some(p.get("mlp2.bias")))?;
    Ok(HeadOutput {
        logits,
        pooled,
        scores: score,
        attention,
        grams,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upper_triangle_length() {
        assert_eq!(upper_triangle(1), vec![0]);
        assert_eq!(upper_triangle(3), vec![0, 1, 2, 4, 5, 8]);
        assert_eq!(upper_triangle(16).len(), 136);
    }
}
