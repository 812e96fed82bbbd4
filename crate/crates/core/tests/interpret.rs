use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stylenet::data::synth::{Style, SynthConfig};
use stylenet::interpret::{grad_cam, silhouette, tsne, tsne_keyed, Projection, TsneOptions};
use stylenet::{ArchConfig, Error, Model, Tensor, Variant};

fn model(v: Variant) -> Model<f32> {
    let mut a = ArchConfig::new(v).with_truncation(5).with_seed(3);
    a.input_size = 32;
    Model::build(&a).unwrap()
}

fn image() -> Tensor<f32> {
    SynthConfig {
        size: 32,
        seed: 2,
        ..Default::default()
    }
    .image(Style::Rain, 0)
}

#[test]
fn heatmaps_are_normalized_for_every_variant() {
    for v in Variant::ALL {
        let m = model(v);
        for class in 0..4 {
            let h = grad_cam(&m, &image(), None, class).unwrap();
            assert_eq!((h.height, h.width, h.values.len()), (32, 32, 1024));
            assert!(h.values.iter().all(|&x| (0.0..=1.0).contains(&x)), "{v}");
            let max = h.values.iter().cloned().fold(0.0f32, f32::max);
            assert!(max == 1.0 || max == 0.0);
        }
        assert_eq!(
            grad_cam(&m, &image(), None, 0).unwrap().layers,
            m.default_cam_layers()
        );
    }
}

#[test]
fn explicit_layer_and_unknown_layer() {
    let m = model(Variant::TruncatedResnet);
    let h = grad_cam(&m, &image(), Some("conv3"), 1).unwrap();
    assert_eq!(h.layers, vec!["conv3".to_string()]);
    let err = grad_cam(&m, &image(), Some("conv99"), 1).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    assert!(err.to_string().contains("conv5"), "{err}");
    assert!(matches!(
        grad_cam(&m, &image(), None, 4),
        Err(Error::Usage(_))
    ));
}

#[test]
fn zeroed_class_row_gives_all_zero_map() {
    let mut m = model(Variant::TruncatedResnet);
    let w = m.params_mut().get_mut("fc.weight").unwrap();
    let cols = w.shape()[1];
    w.data_mut()[2 * cols..3 * cols].fill(0.0);
    let h = grad_cam(&m, &image(), None, 2).unwrap();
    assert!(h.values.iter().all(|&x| x == 0.0));
    assert_eq!(h.total(), 0.0);
}

#[test]
fn constant_logit_shift_leaves_heatmap_unchanged() {
    let m = model(Variant::TruncatedResnet);
    let mut shifted = m.clone();
    shifted
        .params_mut()
        .get_mut("fc.bias")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|b| *b += 5.0);
    for class in 0..4 {
        assert_eq!(
            grad_cam(&m, &image(), None, class).unwrap(),
            grad_cam(&shifted, &image(), None, class).unwrap()
        );
    }
}

#[test]
fn overlay_blends_half() {
    let m = model(Variant::MultiPatch);
    let img = image();
    let h = grad_cam(&m, &img, None, 1).unwrap();
    let o = h.overlay(&img).unwrap();
    let jet = stylenet::interpret::jet(h.values[0]);
    assert!((o.data()[0] - (0.5 * img.data()[0] + 0.5 * jet[0])).abs() < 1e-6);
}

fn two_clusters(seed: u64, per: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        // centers 10 standard deviations apart
        let offset = if c == 0 { 0.0 } else { 10.0 / (64f64).sqrt() };
        for _ in 0..per {
            pts.push((0..64).map(|_| offset + noise.sample(&mut rng)).collect());
            labels.push(c);
        }
    }
    (pts, labels)
}

fn points(p: &Projection) -> Vec<Vec<f64>> {
    p.points.iter().map(|q| q.to_vec()).collect()
}

#[test]
fn separated_clusters_stay_separated() {
    for seed in 0..5 {
        let (x, labels) = two_clusters(seed, 50);
        let opts = TsneOptions {
            perplexity: 20.0,
            seed,
            ..Default::default()
        };
        let p = tsne(&x, &opts).unwrap();
        assert_eq!(p.points.len(), 100);
        let s = silhouette(&points(&p), &labels).unwrap();
        assert!(s > 0.5, "seed {seed}: silhouette {s}");
        assert!(p.kl < p.kl_after_exaggeration.unwrap());
        assert!(p.kl >= 0.0);
    }
}

#[test]
fn tsne_is_deterministic_and_permutation_equivariant() {
    let (x, _) = two_clusters(7, 15);
    let opts = TsneOptions {
        perplexity: 6.0,
        iterations: 300,
        seed: 11,
        ..Default::default()
    };
    let a = tsne(&x, &opts).unwrap();
    assert_eq!(a, tsne(&x, &opts).unwrap());

    let n = x.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
    let keys: Vec<u64> = perm.iter().map(|&i| i as u64).collect();
    let b = tsne_keyed(&xp, &keys, &opts).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(b.points[k], a.points[i], "point {i}");
    }
}
