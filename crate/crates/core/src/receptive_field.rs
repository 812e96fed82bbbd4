//! Receptive-field arithmetic for conv stacks.
//!
//! For a stack of layers with kernel `k`, stride `s` and padding `p`, the
//! field size `r`, jump `j` (input distance between adjacent output
//! neurons) and center offset of the first neuron follow
//!
//! ```text
//! r_l = r_{l-1} + (k_l - 1) * j_{l-1}
//! j_l = j_{l-1} * s_l
//! offset_l = offset_{l-1} + ((k_l - 1) / 2 - p_l) * j_{l-1}
//! ```
//!
//! starting from `r_0 = j_0 = 1`, `offset_0 = 0` (pixel-index coordinates).

use std::fmt;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceptiveField {
    pub size: usize,
    pub jump: usize,
    pub offset: f64,
}

impl ReceptiveField {
    pub const INPUT: Self = Self {
        size: 1,
        jump: 1,
        offset: 0.0,
    };

    fn after(self, l: &LayerGeom) -> Self {
        Self {
            size: self.size + (l.kernel - 1) * self.jump,
            jump: self.jump * l.stride,
            offset: self.offset
                + ((l.kernel as f64 - 1.0) / 2.0 - l.padding as f64) * self.jump as f64,
        }
    }

    /// Inclusive pixel span of output neuron `i` along one axis.
    pub fn span(&self, i: usize) -> (f64, f64) {
        let center = self.offset + (i * self.jump) as f64;
        let half = (self.size as f64 - 1.0) / 2.0;
        (center - half, center + half)
    }
}

fn validate(layers: &[LayerGeom]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::usage("receptive field of an empty layer list"));
    }
    if let Some(l) = layers.iter().find(|l| l.kernel == 0 || l.stride == 0) {
        return Err(Error::config(format!(
            "kernel and stride must be >= 1, got {l:?}"
        )));
    }
    Ok(())
}

/// Per-layer receptive-field table.
pub fn receptive_field(layers: &[LayerGeom]) -> Result<Vec<ReceptiveField>> {
    validate(layers)?;
    let mut rf = ReceptiveField::INPUT;
    Ok(layers
        .iter()
        .map(|l| {
            rf = rf.after(l);
            rf
        })
        .collect())
}

fn final_field(layers: &[LayerGeom]) -> ReceptiveField {
    layers
        .iter()
        .filter(|l| l.kernel >= 1 && l.stride >= 1)
        .fold(ReceptiveField::INPUT, |rf, l| rf.after(l))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disjointness {
    pub disjoint: bool,
    /// `j_L - r_L`; non-negative exactly when adjacent fields do not overlap.
    pub margin: i64,
    pub field: ReceptiveField,
}

/// Whether adjacent final-layer neurons see non-overlapping input regions.
pub fn is_disjoint(layers: &[LayerGeom]) -> Disjointness {
    let field = final_field(layers);
    let margin = field.jump as i64 - field.size as i64;
    Disjointness {
        disjoint: margin >= 0,
        margin,
        field,
    }
}

/// Output length along one axis after the stack, or `None` if a layer does
/// not fit.
pub fn output_len(layers: &[LayerGeom], input: usize) -> Option<usize> {
    layers.iter().try_fold(input, |n, l| {
        let padded = n + 2 * l.padding;
        (padded >= l.kernel && l.stride > 0).then(|| (padded - l.kernel) / l.stride + 1)
    })
}

/// Output neurons along one axis whose analytic field lies fully inside
/// `[0, input)`; boundary neurons are clipped by padding.
pub fn interior_neurons(layers: &[LayerGeom], input: usize) -> Vec<usize> {
    let Some(n) = output_len(layers, input) else {
        return Vec::new();
    };
    let rf = final_field(layers);
    (0..n)
        .filter(|&i| {
            let (lo, hi) = rf.span(i);
            lo >= 0.0 && hi <= input as f64 - 1.0
        })
        .collect()
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.top <= other.bottom
            && other.top <= self.bottom
            && self.left <= other.right
            && other.left <= self.right
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rows {}..={}, cols {}..={}",
            self.top, self.bottom, self.left, self.right
        )
    }
}

/// Empirical footprint of output neuron `(row, col)` of a single-channel
/// conv/relu stack on a `size × size` input.
///
/// All weights are one and the input is positive, so no relu masks the
/// gradient and no contribution cancels; the bounding box of nonzero input
/// gradient is exactly the set of pixels the neuron depends on.
pub fn probe_footprint(
    layers: &[LayerGeom],
    size: usize,
    neuron: (usize, usize),
) -> Result<Option<BoundingBox>> {
    validate(layers)?;
    let n = output_len(layers, size)
        .ok_or_else(|| Error::config(format!("layer stack does not fit a {size}x{size} input")))?;
    if neuron.0 >= n || neuron.1 >= n {
        return Err(Error::usage(format!(
            "neuron {neuron:?} outside {n}x{n} output"
        )));
    }
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[1, 1, size, size], 1.0));
    let mut h = x;
    for l in layers {
        let w = g.constant(Tensor::full(&[1, 1, l.kernel, l.kernel], 1.0));
        let y = g.conv2d(h, w, None, l.stride, l.padding)?;
        h = g.relu(y)?;
    }
    let mut pick = vec![0.0; n * n];
    pick[neuron.0 * n + neuron.1] = 1.0;
    let mask = g.constant(Tensor::new(vec![1, 1, n, n], pick)?);
    let masked = g.mul(h, mask)?;
    let loss = g.sum(masked)?;
    g.backward(loss)?;
    let grad = g.grad(x).expect("input gradient");
    let mut bbox: Option<BoundingBox> = None;
    for (idx, &v) in grad.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let (r, c) = (idx / size, idx % size);
        bbox = Some(match bbox {
            None => BoundingBox {
                top: r,
                left: c,
                bottom: r,
                right: c,
            },
            Some(b) => BoundingBox {
                top: b.top.min(r),
                left: b.left.min(c),
                bottom: b.bottom.max(r),
                right: b.right.max(c),
            },
        });
    }
    Ok(bbox)
}

/// Parse a layer list: one layer per line as `k s [p]` or
/// `k=4 s=2 p=0` (padding defaults to 0). Blank lines and `#` comments are
/// skipped.
pub fn parse_layers(text: &str) -> Result<Vec<LayerGeom>> {
    let mut layers = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::config(format!("line {}: {what} in `{line}`", n + 1));
        let mut vals = [None, None, Some(0usize)];
        for (i, tok) in line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .enumerate()
        {
            let (slot, v) = match tok.split_once('=') {
                Some((key, v)) => {
                    let slot = match key.trim() {
                        "k" | "kernel" => 0,
                        "s" | "stride" => 1,
                        "p" | "padding" => 2,
                        other => return Err(bad(&format!("unknown key `{other}`"))),
                    };
                    (slot, v)
                }
                None if i < 3 => (i, tok),
                None => return Err(bad("too many values")),
            };
            vals[slot] = Some(
                v.trim()
                    .parse()
                    .map_err(|_| bad(&format!("bad number `{v}`")))?,
            );
        }
        match vals {
            [Some(k), Some(s), Some(p)] if k >= 1 && s >= 1 => layers.push(LayerGeom::new(k, s, p)),
            [Some(_), Some(_), _] => return Err(bad("kernel and stride must be >= 1")),
            _ => return Err(bad("need kernel and stride")),
        }
    }
    if layers.is_empty() {
        return Err(Error::usage("layer list is empty"));
    }
    Ok(layers)
}

/// Aligned per-layer table followed by the disjointness verdict.
pub fn render_table(layers: &[LayerGeom]) -> Result<String> {
    let table = receptive_field(layers)?;
    let mut out = String::from("layer  kernel  stride  padding  offset  field\n");
    for (i, (l, rf)) in layers.iter().zip(&table).enumerate() {
        out += &format!(
            "{:>5}  {:>6}  {:>6}  {:>7}  {:>6}  r={}, j={}\n",
            i + 1,
            l.kernel,
            l.stride,
            l.padding,
            rf.offset,
            rf.size,
            rf.jump
        );
    }
    let d = is_disjoint(layers);
    out += &format!(
        "disjoint: {} (margin j - r = {})\n",
        if d.disjoint { "yes" } else { "no" },
        d.margin
    );
    Ok(out)
}

/// `key=value` report: one `layer=` line per layer, then the verdict.
pub fn render_machine(layers: &[LayerGeom]) -> Result<String> {
    let table = receptive_field(layers)?;
    let mut out = String::new();
    for (i, (l, rf)) in layers.iter().zip(&table).enumerate() {
        out += &format!(
            "layer={} kernel={} stride={} padding={} offset={:?} r={} j={}\n",
            i + 1,
            l.kernel,
            l.stride,
            l.padding,
            rf.offset,
            rf.size,
            rf.jump
        );
    }
    let d = is_disjoint(layers);
    out += &format!("disjoint={} margin={}\n", d.disjoint, d.margin);
    Ok(out)
}

/// Smallest square input on which the stack has at least `count` interior
/// neurons per axis.
pub fn probe_input_size(layers: &[LayerGeom], count: usize) -> usize {
    let rf = final_field(layers);
    let mut size = rf.size + rf.jump * count;
    while interior_neurons(layers, size).len() < count {
        size += rf.jump.max(1);
    }
    size
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(spec: &[(usize, usize)]) -> Vec<LayerGeom> {
        spec.iter().map(|&(k, s)| LayerGeom::new(k, s, 0)).collect()
    }

    #[test]
    fn table_examples() {
        let t = receptive_field(&stack(&[(3, 1)])).unwrap();
        assert_eq!((t[0].size, t[0].jump), (3, 1));
        let t = receptive_field(&stack(&[(3, 1), (3, 1)])).unwrap();
        assert_eq!((t[1].size, t[1].jump), (5, 1));
        let t = receptive_field(&stack(&[(4, 2), (4, 2), (4, 1)])).unwrap();
        let sizes: Vec<_> = t.iter().map(|r| r.size).collect();
        assert_eq!(sizes, vec![4, 10, 22]);
        assert_eq!(t[2].jump, 4);
    }

    #[test]
    fn empty_stack_is_usage_error() {
        assert!(matches!(receptive_field(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn disjointness_examples() {
        let d = is_disjoint(&stack(&[(2, 2), (2, 2)]));
        assert!(d.disjoint);
        assert_eq!((d.field.size, d.field.jump, d.margin), (4, 4, 0));
        assert!(!is_disjoint(&stack(&[(3, 1)])).disjoint);
        let d = is_disjoint(&stack(&[(4, 4)]));
        assert!(d.disjoint && d.field.size == 4);
    }

    #[test]
    fn offset_tracks_padding() {
        let t = receptive_field(&[LayerGeom::new(3, 1, 1)]).unwrap();
        assert_eq!(t[0].offset, 0.0);
        let t = receptive_field(&[LayerGeom::new(3, 2, 0), LayerGeom::new(3, 1, 0)]).unwrap();
        assert_eq!(t[1].offset, 3.0);
    }

    #[test]
    fn layer_list_formats() {
        let l = parse_layers("# patch\n4 2\nk=4 s=2 p=1\n4,1,0\n").unwrap();
        assert_eq!(
            l,
            vec![
                LayerGeom::new(4, 2, 0),
                LayerGeom::new(4, 2, 1),
                LayerGeom::new(4, 1, 0)
            ]
        );
        assert!(matches!(parse_layers("3"), Err(Error::Config(_))));
        assert!(matches!(parse_layers("0 1"), Err(Error::Config(_))));
        assert!(matches!(parse_layers("# none\n"), Err(Error::Usage(_))));
    }

    #[test]
    fn table_ends_with_final_field_and_verdict() {
        let t = render_table(&stack(&[(4, 2), (4, 2), (4, 1)])).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[3].ends_with("r=22, j=4"), "{t}");
        assert!(lines[4].starts_with("disjoint: no"), "{t}");
    }

    #[test]
    fn single_layer_footprint_is_kernel() {
        let layers = stack(&[(3, 1)]);
        let b = probe_footprint(&layers, 7, (2, 2)).unwrap().unwrap();
        assert_eq!((b.height(), b.width()), (3, 3));
        assert_eq!((b.top, b.left), (2, 2));
    }
}
