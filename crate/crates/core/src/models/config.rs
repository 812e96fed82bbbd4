use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::receptive_field::{is_disjoint, output_len, LayerGeom};

/// Conv layers per residual basic block.
pub const CONVS_PER_BLOCK: usize = 2;
/// Basic blocks per stage (ResNet-18 layout).
pub const BLOCKS_PER_STAGE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    TruncatedResnet,
    GramAttention,
    MultiPatch,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::TruncatedResnet,
        Variant::GramAttention,
        Variant::MultiPatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TruncatedResnet => "truncated-resnet",
            Variant::GramAttention => "gram-attention",
            Variant::MultiPatch => "multi-patch",
        }
    }

    pub fn uses_backbone(self) -> bool {
        !matches!(self, Variant::MultiPatch)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}` (expected truncated-resnet, gram-attention or multi-patch)")))
    }
}

/// One conv layer of a multi-patch branch (padding is always zero).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BranchLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl BranchLayer {
    pub fn new(kernel: usize, stride: usize, channels: usize) -> Self {
        Self {
            kernel,
            stride,
            channels,
        }
    }

    pub fn geom(&self) -> LayerGeom {
        LayerGeom::new(self.kernel, self.stride, 0)
    }
}

impl fmt::Display for BranchLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}s{}c{}", self.kernel, self.stride, self.channels)
    }
}

impl FromStr for BranchLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::config(format!(
                "bad branch layer `{s}` (expected k<kernel>s<stride>c<channels>)"
            ))
        };
        let rest = s.strip_prefix('k').ok_or_else(bad)?;
        let (k, rest) = rest.split_once('s').ok_or_else(bad)?;
        let (st, c) = rest.split_once('c').ok_or_else(bad)?;
        Ok(Self {
            kernel: k.parse().map_err(|_| bad())?,
            stride: st.parse().map_err(|_| bad())?,
            channels: c.parse().map_err(|_| bad())?,
        })
    }
}

/// Which retained backbone layers feed the Gram-attention head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GramLayers {
    All,
    Named(Vec<String>),
}

/// Full description of one architecture instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub variant: Variant,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stage_widths: Vec<usize>,
    /// Retained conv layers: the stem counts 1, each basic block 2.
    pub truncation: usize,
    pub gram_layers: GramLayers,
    pub embed_dim: usize,
    pub branches: Vec<Vec<BranchLayer>>,
    pub num_classes: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::new(Variant::TruncatedResnet)
    }
}

pub fn default_branches() -> Vec<Vec<BranchLayer>> {
    let widths = [16, 32, 32, 64];
    [2usize, 3, 4]
        .iter()
        .map(|&depth| {
            widths[..depth]
                .iter()
                .map(|&c| BranchLayer::new(2, 2, c))
                .collect()
        })
        .collect()
}

impl ArchConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            stem_width: 16,
            stem_stride: 2,
            stage_widths: vec![16, 32, 64, 128],
            truncation: 9,
            gram_layers: GramLayers::All,
            embed_dim: 64,
            branches: default_branches(),
            num_classes: 4,
            input_size: 64,
            seed: 0,
        }
    }

    pub fn with_truncation(mut self, truncation: usize) -> Self {
        self.truncation = truncation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn max_truncation(&self) -> usize {
        1 + self.stage_widths.len() * BLOCKS_PER_STAGE * CONVS_PER_BLOCK
    }

    /// Names of the retained conv layers, `conv1` (stem) through `conv<T>`.
    pub fn retained_layers(&self) -> Vec<String> {
        (1..=self.truncation).map(|t| format!("conv{t}")).collect()
    }

    pub fn resolved_gram_layers(&self) -> Vec<String> {
        match &self.gram_layers {
            GramLayers::All => self.retained_layers(),
            GramLayers::Named(v) => v.clone(),
        }
    }

    /// Channel count of backbone layer `conv<t>`.
    pub fn layer_width(&self, t: usize) -> usize {
        if t <= 1 {
            self.stem_width
        } else {
            let block = (t - 2) / CONVS_PER_BLOCK;
            self.stage_widths[block / BLOCKS_PER_STAGE]
        }
    }

    pub fn branch_geoms(&self, branch: usize) -> Vec<LayerGeom> {
        let mut g: Vec<LayerGeom> = self.branches[branch]
            .iter()
            .map(BranchLayer::geom)
            .collect();
        // 1x1 score layer: leaves size and jump unchanged
        g.push(LayerGeom::new(1, 1, 0));
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.truncation < 1 {
            return Err(Error::config("truncation must be >= 1"));
        }
        if self.stage_widths.is_empty()
            || self.stage_widths.contains(&0)
            || self.stem_width == 0
            || self.stem_stride == 0
        {
            return Err(Error::config(
                "stem/stage widths and stem stride must be positive",
            ));
        }
        if self.truncation > self.max_truncation() {
            return Err(Error::config(format!(
                "truncation {} exceeds the {} conv layers defined by {} stages",
                self.truncation,
                self.max_truncation(),
                self.stage_widths.len()
            )));
        }
        if self.embed_dim == 0 || self.num_classes < 2 || self.input_size == 0 {
            return Err(Error::config(
                "embed_dim, input_size must be >= 1 and num_classes >= 2",
            ));
        }
        if let GramLayers::Named(names) = &self.gram_layers {
            if names.is_empty() {
                return Err(Error::config("gram_layers is empty"));
            }
            let retained = self.retained_layers();
            if let Some(n) = names.iter().find(|n| !retained.contains(n)) {
                return Err(Error::config(format!(
                    "gram layer `{n}` is not a retained layer (conv1..conv{})",
                    self.truncation
                )));
            }
        }
        if self.variant == Variant::MultiPatch {
            if self.branches.len() != 3 {
                return Err(Error::config(format!(
                    "multi-patch needs exactly 3 branches, got {}",
                    self.branches.len()
                )));
            }
            for (b, layers) in self.branches.iter().enumerate() {
                if layers.is_empty()
                    || layers
                        .iter()
                        .any(|l| l.kernel == 0 || l.stride == 0 || l.channels == 0)
                {
                    return Err(Error::config(format!("branch {b}: layers must be non-empty with positive kernel, stride, channels")));
                }
                let geoms = self.branch_geoms(b);
                let d = is_disjoint(&geoms);
                if !d.disjoint {
                    return Err(Error::config(format!(
                        "branch {b} has overlapping receptive fields (size {} > jump {})",
                        d.field.size, d.field.jump
                    )));
                }
                if output_len(&geoms, self.input_size).is_none() {
                    return Err(Error::config(format!(
                        "branch {b} does not fit a {0}x{0} input",
                        self.input_size
                    )));
                }
            }
        }
        Ok(())
    }

    fn fields(&self) -> BTreeMap<&'static str, String> {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let branches = self
            .branches
            .iter()
            .map(|b| {
                b.iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join("/");
        let gram = match &self.gram_layers {
            GramLayers::All => "all".to_string(),
            GramLayers::Named(v) => v.join(","),
        };
        BTreeMap::from([
            ("branch_configs", branches),
            ("embed_dim", self.embed_dim.to_string()),
            ("gram_layers", gram),
            ("input_size", self.input_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("seed", self.seed.to_string()),
            ("stage_widths", join(&self.stage_widths)),
            ("stem_stride", self.stem_stride.to_string()),
            ("stem_width", self.stem_width.to_string()),
            ("truncation", self.truncation.to_string()),
            ("variant", self.variant.to_string()),
        ])
    }

    /// Canonical `key=value` form: one key per line, keys sorted.
    pub fn to_text(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// The canonical form on a single line, entries separated by `;`.
    pub fn to_line(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Parse either the multi-line or the single-line canonical form.
    /// Missing keys take their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for entry in text
            .split(['\n', ';'])
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line `{entry}` is not key=value")))?;
            if kv
                .insert(k.trim().to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::config(format!("duplicate config key `{k}`")));
            }
        }
        let variant: Variant = kv
            .get("variant")
            .map_or(Ok(Variant::TruncatedResnet), |v| v.parse())?;
        let mut cfg = ArchConfig::new(variant);
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::config(format!("{k}: `{v}` is not a non-negative integer")))
        };
        for (k, v) in &kv {
            match k.as_str() {
                "variant" => {}
                "branch_configs" => {
                    cfg.branches = v
                        .split('/')
                        .map(|b| {
                            b.split(',')
                                .map(str::parse)
                                .collect::<Result<Vec<BranchLayer>>>()
                        })
                        .collect::<Result<_>>()?;
                }
                "embed_dim" => cfg.embed_dim = num(k, v)?,
                "gram_layers" => {
                    cfg.gram_layers = if v == "all" {
                        GramLayers::All
                    } else {
                        GramLayers::Named(v.split(',').map(str::to_string).collect())
                    }
                }
                "input_size" => cfg.input_size = num(k, v)?,
                "num_classes" => cfg.num_classes = num(k, v)?,
                "seed" => {
                    cfg.seed = v
                        .parse()
                        .map_err(|_| Error::config(format!("seed: `{v}` is not a u64")))?
                }
                "stage_widths" => {
                    cfg.stage_widths = v.split(',').map(|x| num(k, x)).collect::<Result<_>>()?
                }
                "stem_stride" => cfg.stem_stride = num(k, v)?,
                "stem_width" => cfg.stem_width = num(k, v)?,
                "truncation" => cfg.truncation = num(k, v)?,
                other => return Err(Error::config(format!("unknown config key `{other}`"))),
            }
        }
        Ok(cfg)
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_is_sorted_and_roundtrips() {
        let mut cfg = ArchConfig::new(Variant::GramAttention);
        cfg.gram_layers = GramLayers::Named(vec!["conv1".into(), "conv5".into()]);
        cfg.seed = 99;
        let text = cfg.to_text();
        let keys: Vec<_> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(ArchConfig::parse(&text).unwrap(), cfg);
        assert_eq!(ArchConfig::parse(&cfg.to_line()).unwrap(), cfg);
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(ArchConfig::default().validate().is_ok());
        assert!(ArchConfig::default().with_truncation(0).validate().is_err());
        assert!(ArchConfig::default()
            .with_truncation(18)
            .validate()
            .is_err());
        assert!(ArchConfig::default().with_truncation(17).validate().is_ok());

        let mut cfg = ArchConfig::new(Variant::GramAttention).with_truncation(3);
        cfg.gram_layers = GramLayers::Named(vec!["conv4".into()]);
        assert!(cfg.validate().is_err());

        let mut mp = ArchConfig::new(Variant::MultiPatch);
        assert!(mp.validate().is_ok());
        mp.branches.pop();
        assert!(mp.validate().is_err());
    }

    #[test]
    fn overlapping_branch_is_rejected_by_name() {
        let mut mp = ArchConfig::new(Variant::MultiPatch);
        mp.branches[1] = vec![BranchLayer::new(4, 2, 8), BranchLayer::new(4, 2, 8)];
        let err = mp.validate().unwrap_err().to_string();
        assert!(err.contains("branch 1"), "{err}");
    }

    #[test]
    fn layer_widths_follow_stages() {
        let cfg = ArchConfig::default();
        let widths: Vec<_> = (1..=17).map(|t| cfg.layer_width(t)).collect();
        assert_eq!(
            widths,
            vec![16, 16, 16, 16, 16, 32, 32, 32, 32, 64, 64, 64, 64, 128, 128, 128, 128]
        );
    }
}
