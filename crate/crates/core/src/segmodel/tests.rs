use super::*;
use crate::grid::LabelMap;
use rand::Rng as _;

fn tiny() -> ArchConfig {
    ArchConfig {
        height: 8,
        width: 8,
        levels: 2,
        base_width: 2,
    }
}

fn image(seed: u64, arch: &ArchConfig) -> Image {
    let mut rng = seeding::stream(seed, "test-image", 0);
    let data = (0..arch.height * arch.width).map(|_| rng.random_range(-1.0..1.0)).collect();
    Image::from_vec(arch.height, arch.width, data).unwrap()
}

#[test]
fn zero_weights_give_zero_logits() {
    let mut m = Segmenter::new(tiny(), &[1, 2], 3).unwrap();
    let z = vec![0.0; m.num_params()];
    m.set_params(&z).unwrap();
    let out = m.forward(&image(1, &tiny()), 1).unwrap();
    assert_eq!(out.channels, 3);
    assert!(out.data.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let a = Segmenter::new(tiny(), &[1], 9).unwrap();
    let b = Segmenter::new(tiny(), &[1], 9).unwrap();
    let img = image(2, &tiny());
    assert_eq!(a.forward(&img, 1).unwrap(), a.forward(&img, 1).unwrap());
    assert_eq!(a.forward(&img, 1).unwrap(), b.forward(&img, 1).unwrap());
}

#[test]
fn wrong_input_size_is_shape_error() {
    let m = Segmenter::new(tiny(), &[1], 0).unwrap();
    let err = m.forward(&Image::zeros(4, 8), 1).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn param_count_is_sum_of_blocks_and_round_trips() {
    let mut m = Segmenter::new(tiny(), &[1], 0).unwrap();
    let total: usize = m.store().blocks().iter().map(|b| b.len).sum();
    assert_eq!(m.get_params().len(), total);
    let img = image(5, &tiny());
    let before = m.forward(&img, 1).unwrap();
    let p = m.get_params();
    m.set_params(&p).unwrap();
    assert_eq!(before, m.forward(&img, 1).unwrap());
    assert!(matches!(m.set_params(&p[1..]), Err(Error::Shape(_))));
}

#[test]
fn perturbing_one_coordinate_changes_one_weight() {
    let mut m = Segmenter::new(tiny(), &[1], 0).unwrap();
    let before: Vec<Vec<f64>> = (0..m.store().blocks().len()).map(|b| m.store().slice(b).to_vec()).collect();
    let mut p = m.get_params();
    p[17] += 0.25;
    m.set_params(&p).unwrap();
    let mut changed = 0;
    for (b, old) in before.iter().enumerate() {
        for (x, y) in old.iter().zip(m.store().slice(b)) {
            if x != y {
                changed += 1;
            }
        }
    }
    assert_eq!(changed, 1);
}

#[test]
fn expand_head_appends_channels_without_touching_old_ones() {
    let mut m = Segmenter::new(tiny(), &[1, 2, 3], 4).unwrap();
    let img = image(7, &tiny());
    let before = m.forward(&img, 1).unwrap();
    let n_before = m.num_params();
    m.expand_head(&[]).unwrap();
    assert_eq!(m.num_params(), n_before);
    m.expand_head(&[4, 5]).unwrap();
    let after = m.forward(&img, 1).unwrap();
    assert_eq!(before.channels, 4);
    assert_eq!(after.channels, 6);
    assert_eq!(&after.data[..before.data.len()], &before.data[..]);
    assert!(m.num_params() > n_before);
    assert!(matches!(m.expand_head(&[5]), Err(Error::Registration(5))));
}

#[test]
fn three_two_two_class_split_reaches_eight_channels() {
    let mut m = Segmenter::new(tiny(), &[1, 2, 3], 0).unwrap();
    m.expand_head(&[4, 5]).unwrap();
    m.expand_head(&[6, 7]).unwrap();
    assert_eq!(m.head_classes(1), vec![0, 1, 2, 3, 4, 5, 6, 7]);
}

#[test]
fn features_follow_requested_taps() {
    let m = Segmenter::new(tiny(), &[1], 0).unwrap();
    let img = image(3, &tiny());
    assert!(m.features(&img, 1, &[]).unwrap().is_empty());
    let f = m.features(&img, 1, &[0, 2]).unwrap();
    assert_eq!(f.len(), 2);
    assert_eq!((f[0].channels, f[0].height), (2, 8));
    assert_eq!((f[1].channels, f[1].height), (4, 2));
    assert!(matches!(m.features(&img, 1, &[3]), Err(Error::Config(_))));
}

#[test]
fn default_architecture_size() {
    let m = Segmenter::new(ArchConfig::default(), &[1], 0).unwrap();
    let n = m.num_params();
    assert!((50_000..=200_000).contains(&n), "{n}");
}

#[test]
fn constant_loss_has_zero_gradient() {
    let m = Segmenter::new(tiny(), &[1], 0).unwrap();
    let img = image(1, &tiny());
    let (l, g) = m
        .grad_params(&[&img], 1, |_, t| (3.0, Tensor::zeros(t.channels, t.height, t.width)))
        .unwrap();
    assert_eq!(l, 3.0);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn non_finite_loss_is_numeric_error() {
    let m = Segmenter::new(tiny(), &[1], 0).unwrap();
    let img = image(1, &tiny());
    let err = m
        .grad_params(&[&img], 1, |_, t| (f64::NAN, Tensor::zeros(t.channels, t.height, t.width)))
        .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}

fn ce_loss(m: &Segmenter, imgs: &[&Image], lbl: &LabelMap) -> (f64, Vec<f64>) {
    let classes = m.head_classes(1);
    m.grad_params(imgs, 1, |_, t| loss::cross_entropy(t, &classes, lbl, &[]).unwrap())
        .unwrap()
}

#[test]
fn cross_entropy_gradient_matches_central_differences() {
    let arch = tiny();
    let mut m = Segmenter::new(arch.clone(), &[1, 2], 11).unwrap();
    let img = image(4, &arch);
    let mut rng = seeding::stream(0, "labels", 0);
    let lbl = LabelMap::from_vec(8, 8, (0..64).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
    let (_, g) = ce_loss(&m, &[&img], &lbl);
    let p0 = m.get_params();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in (0..p0.len()).step_by(7) {
        let mut p = p0.clone();
        p[i] += h;
        m.set_params(&p).unwrap();
        let lp = ce_loss(&m, &[&img], &lbl).0;
        p[i] -= 2.0 * h;
        m.set_params(&p).unwrap();
        let lm = ce_loss(&m, &[&img], &lbl).0;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    m.set_params(&p0).unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn progressive_column_starts_as_standalone_and_freezes_old() {
    let arch = tiny();
    let mut m = Segmenter::new(arch.clone(), &[1], 5).unwrap();
    let img = image(8, &arch);
    let col1 = m.forward(&img, 1).unwrap();
    let n1 = m.body_params();
    let before = m.num_params();
    m.add_progressive_column(&[1]).unwrap();
    assert_eq!(m.n_routes(), 2);
    // task 1 still uses column 1
    assert_eq!(m.forward(&img, 1).unwrap(), col1);
    // zero adapters: column 2 behaves like a standalone column with its weights
    let mut solo = Segmenter::new(arch.clone(), &[1], 0).unwrap();
    let len = solo.num_params();
    solo.set_params(&m.params()[before..before + len]).unwrap();
    assert_eq!(m.forward(&img, 2).unwrap(), solo.forward(&img, 1).unwrap());
    assert!(m.body_params() >= 2 * n1);
    let g = {
        let classes = m.head_classes(2);
        let lbl = LabelMap::zeros(8, 8);
        m.grad_params(&[&img], 2, |_, t| loss::cross_entropy(t, &classes, &lbl, &[]).unwrap())
            .unwrap()
            .1
    };
    let mask = m.trainable_mask();
    for (gi, mi) in g.iter().zip(&mask) {
        if *mi == 0.0 {
            assert_eq!(*gi, 0.0);
        }
    }
}

#[test]
fn identity_controllers_reproduce_base_features() {
    let arch = tiny();
    let mut m = Segmenter::new(arch.clone(), &[1], 5).unwrap();
    let img = image(9, &arch);
    let base_feats = m.features(&img, 1, &arch.depth_taps()).unwrap();
    m.add_controllers(&[1]).unwrap();
    let ctl_feats = m.features(&img, 2, &arch.depth_taps()).unwrap();
    for (a, b) in base_feats.iter().zip(&ctl_feats) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let added = m.body_params() as f64 / Segmenter::new(arch, &[1], 5).unwrap().body_params() as f64 - 1.0;
    assert!(added < 1.0);
}
