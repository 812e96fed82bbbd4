//! The three style classifiers: a truncated residual network, the same
//! backbone with a Gram-matrix attention head, and a multi-patch PatchGAN
//! classifier.

mod backbone;
pub mod config;
pub mod gram_attention;
mod multi_patch;
pub mod params;

pub use backbone::IMAGE_CHANNELS;
pub use config::{ArchConfig, BranchLayer, GramLayers, Variant};
pub use params::{Init, ParamSpec, ParamStore};

use crate::autodiff::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use params::Bound;

/// Normalized Gram matrix of one feature map `C×H×W`:
/// `G[i][j] = Σ_{h,w} F[i]·F[j] / (C·H·W)`.
pub fn gram<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let sh = features.shape();
    if sh.len() != 3 {
        return Err(Error::usage(format!(
            "gram expects a C×H×W tensor, got {sh:?}"
        )));
    }
    let mut g = Graph::inference();
    let x = g.constant(features.clone().reshape(&[1, sh[0], sh[1], sh[2]])?);
    let y = g.gram(x)?;
    g.value(y).clone().reshape(&[sh[0], sh[0]])
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// The vector feeding the final classifier: pooled backbone features,
    /// the attention-pooled Gram vector, or concatenated branch logits.
    pub embedding: Var,
    /// Output activation of every named conv layer, in forward order.
    pub layers: Vec<(String, Var)>,
    /// Gram-attention only: per-layer scores, weights, Gram matrices and tokens.
    pub scores: Option<Var>,
    pub attention: Option<Var>,
    pub grams: Vec<Var>,
    pub tokens: Vec<Var>,
    /// Multi-patch only: per-branch logit vectors.
    pub branch_logits: Vec<Var>,
    /// Parameter vars in store order.
    pub params: Vec<Var>,
}

impl ForwardPass {
    pub fn layer(&self, name: &str) -> Option<Var> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Constant added to every attention score before the softmax.
    pub score_shift: f64,
}

/// A named parameter set plus the architecture that consumes it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ArchConfig,
    params: ParamStore<T>,
}

pub fn param_specs(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    match cfg.variant {
        Variant::TruncatedResnet => {
            specs.extend(backbone::param_specs(cfg));
            let w = backbone::output_width(cfg);
            specs.push(ParamSpec::new(
                "fc.weight",
                &[cfg.num_classes, w],
                Init::FanIn { fan_in: w },
            ));
            specs.push(ParamSpec::new("fc.bias", &[cfg.num_classes], Init::Zeros));
        }
        Variant::GramAttention => {
            specs.extend(backbone::param_specs(cfg));
            specs.extend(gram_attention::param_specs(cfg));
        }
        Variant::MultiPatch => specs.extend(multi_patch::param_specs(cfg)),
    }
    specs
}

impl<T: Scalar> Model<T> {
    /// Build a freshly initialized model.
    pub fn build(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            params: ParamStore::from_specs(&param_specs(config), config.seed),
        })
    }

    /// Assemble a model from existing parameters; names and shapes must
    /// match what `config` defines.
    pub fn from_parts(config: ArchConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        let names: Vec<&str> = params.names().collect();
        if specs.len() != names.len() || specs.iter().zip(&names).any(|(s, n)| s.name != *n) {
            return Err(Error::config(
                "parameter names do not match the architecture",
            ));
        }
        for spec in &specs {
            let t = params.get(&spec.name).expect("checked");
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(&spec.name, &spec.shape, t.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Names of conv layers whose activations can be inspected.
    pub fn layer_names(&self) -> Vec<String> {
        match self.config.variant {
            Variant::MultiPatch => self
                .config
                .branches
                .iter()
                .enumerate()
                .flat_map(|(b, layers)| {
                    (1..=layers.len()).map(move |i| format!("branch{b}.conv{i}"))
                })
                .collect(),
            _ => self.config.retained_layers(),
        }
    }

    /// Last conv layer(s): the backbone's last retained layer, or the last
    /// conv of every branch.
    pub fn default_cam_layers(&self) -> Vec<String> {
        match self.config.variant {
            Variant::MultiPatch => self
                .config
                .branches
                .iter()
                .enumerate()
                .map(|(b, layers)| format!("branch{b}.conv{}", layers.len()))
                .collect(),
            _ => vec![format!("conv{}", self.config.truncation)],
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != IMAGE_CHANNELS || shape[2] != s || shape[3] != s {
            return Err(Error::usage(format!(
                "model expects images [N, {IMAGE_CHANNELS}, {s}, {s}], got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Forward pass registering the stored parameters on `g`.
    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<ForwardPass> {
        self.forward_with(g, images, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        images: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardPass> {
        let vars = self.params.register(g);
        self.forward_vars(g, images, &vars, opts)
    }

    /// Forward pass using caller-supplied parameter vars (store order).
    pub fn forward_vars(
        &self,
        g: &mut Graph<T>,
        images: Var,
        vars: &[Var],
        opts: ForwardOptions,
    ) -> Result<ForwardPass> {
        self.check_input(g.shape(images))?;
        if vars.len() != self.params.len() {
            return Err(Error::usage(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let p = Bound {
            store: &self.params,
            vars,
        };
        let cfg = &self.config;
        let mut pass = ForwardPass {
            logits: images,
            embedding: images,
            layers: Vec::new(),
            scores: None,
            attention: None,
            grams: Vec::new(),
            tokens: Vec::new(),
            branch_logits: Vec::new(),
            params: vars.to_vec(),
        };
        match cfg.variant {
            Variant::TruncatedResnet => {
                pass.layers = backbone::forward(cfg, g, images, &p)?;
                let last = pass.layers.last().expect("stem always retained").1;
                pass.embedding = g.spatial_mean(last)?;
                pass.logits =
                    g.linear(pass.embedding, p.get("fc.weight"), Some(p.get("fc.bias")))?;
            }
            Variant::GramAttention => {
                pass.layers = backbone::forward(cfg, g, images, &p)?;
                let head = gram_attention::forward(cfg, g, &pass.layers, &p, opts.score_shift)?;
                pass.logits = head.logits;
                pass.embedding = head.pooled;
                pass.scores = Some(head.scores);
                pass.attention = Some(head.attention);
                pass.grams = head.grams;
                pass.tokens = head.tokens;
            }
            Variant::MultiPatch => {
                let out = multi_patch::forward(cfg, g, images, &p)?;
                pass.logits = out.logits;
                pass.embedding = g.concat(&out.branch_logits, 1)?;
                pass.branch_logits = out.branch_logits;
                pass.layers = out.layers;
            }
        }
        Ok(pass)
    }

    /// Frozen inference: `[N, 3, S, S]` → logits `[N, K]`.
    pub fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let pass = self.forward(&mut g, x)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Pre-classifier vector for one image (`[3, S, S]` or `[1, 3, S, S]`).
    pub fn embed(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let img = batch_of_one(image)?;
        let mut g = Graph::inference();
        let x = g.constant(img);
        let pass = self.forward(&mut g, x)?;
        Ok(g.value(pass.embedding).data().to_vec())
    }

    /// Reorder the multi-patch branches, carrying each branch's weights.
    pub fn with_branch_order(&self, order: &[usize]) -> Result<Self> {
        if self.config.variant != Variant::MultiPatch {
            return Err(Error::usage(
                "branch reordering applies to multi-patch models only",
            ));
        }
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.config.branches.len()).collect::<Vec<_>>() {
            return Err(Error::usage(format!(
                "{order:?} is not a permutation of the branches"
            )));
        }
        let mut cfg = self.config.clone();
        cfg.branches = order
            .iter()
            .map(|&b| self.config.branches[b].clone())
            .collect();
        let mut out = Model::build(&cfg)?;
        for (new_b, &old_b) in order.iter().enumerate() {
            let (old_prefix, new_prefix) = (format!("branch{old_b}."), format!("branch{new_b}."));
            for (name, t) in self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(&old_prefix))
            {
                out.params
                    .set(&name.replacen(&old_prefix, &new_prefix, 1), t.clone())?;
            }
        }
        Ok(out)
    }
}

pub fn batch_of_one<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    match image.rank() {
        3 => {
            let sh = image.shape();
            image.clone().reshape(&[1, sh[0], sh[1], sh[2]])
        }
        4 if image.shape()[0] == 1 => Ok(image.clone()),
        _ => Err(Error::usage(format!(
            "expected one image [3, H, W], got {:?}",
            image.shape()
        ))),
    }
}

/// Finite-difference check of the logits with respect to the input images
/// and every parameter.
pub fn grad_check_model(
    model: &Model<f64>,
    images: &Tensor<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut inputs = vec![images.clone()];
    inputs.extend(model.params().tensors().cloned());
    grad_check(
        |g, v| {
            let pass = model.forward_vars(g, v[0], &v[1..], ForwardOptions::default())?;
            Ok(pass.logits)
        },
        &inputs,
        opts,
    )
}

/// Build a model from a validated configuration.
pub fn build_model(config: &ArchConfig) -> Result<Model<f32>> {
    Model::build(config)
}
