use super::*;
use crate::scenarios::imageio;
use proptest::prelude::*;

fn small() -> SynthOptions {
    SynthOptions {
        size: 16,
        ..SynthOptions::default()
    }
}

#[test]
fn split_of_hundred_cases() {
    assert_eq!(split_sizes(100).unwrap(), (60, 15, 25));
    assert_eq!(split_sizes(7).unwrap(), (4, 1, 2));
    assert!(matches!(split_sizes(3), Err(Error::Config(_))));
}

#[test]
fn six_domains_share_the_foreground_label() {
    let s = make_domain_cl(6, 10, 1, &small()).unwrap();
    assert_eq!(s.n_tasks(), 6);
    assert!(s.tasks.iter().all(|t| t.label_set == vec![1]));
    assert_eq!(s.full_label_set, vec![1]);
    assert!(matches!(make_domain_cl(1, 10, 1, &small()), Err(Error::Config(_))));
    assert!(matches!(make_domain_cl(3, 2, 1, &small()), Err(Error::Config(_))));
}

#[test]
fn domain_means_are_separated_by_the_gap() {
    let opts = SynthOptions {
        size: 32,
        mean_gap: 0.3,
        ..SynthOptions::default()
    };
    let s = make_domain_cl(4, 100, 7, &opts).unwrap();
    let means: Vec<f64> = s
        .tasks
        .iter()
        .map(|t| {
            let all: Vec<&Sample> = t.train.iter().chain(&t.val).chain(&t.test).collect();
            all.iter().map(|x| x.image.mean()).sum::<f64>() / all.len() as f64
        })
        .collect();
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            assert!((means[a] - means[b]).abs() >= opts.mean_gap, "{means:?}");
        }
    }
}

#[test]
fn class_groups_mask_other_structures_to_background() {
    let groups = vec![vec![1, 2, 3], vec![4, 5], vec![6, 7]];
    let s = make_class_cl(&groups, 20, 3, &small()).unwrap();
    let sizes: Vec<usize> = s.tasks.iter().map(|t| t.label_set.len()).collect();
    assert_eq!(sizes, vec![3, 2, 2]);
    assert_eq!(s.full_label_set, (1..=7).collect::<Vec<u32>>());
    let mut saw_four = false;
    for t in &s.tasks {
        for x in t.train.iter().chain(&t.val).chain(&t.test) {
            let full = x.full_label.as_ref().unwrap();
            assert_eq!(x.label, full.restrict_to(&t.label_set));
            if t.id == 1 {
                for (l, f) in x.label.data.iter().zip(&full.data) {
                    if *f == 4 {
                        saw_four = true;
                        assert_eq!(*l, 0);
                    }
                }
            }
        }
    }
    assert!(saw_four);
    let overlapping = vec![vec![1, 2], vec![2, 3]];
    assert!(matches!(make_class_cl(&overlapping, 20, 3, &small()), Err(Error::Config(_))));
}

#[test]
fn class_cl_shared_pool_reuses_images() {
    let groups = vec![vec![1], vec![2]];
    let opts = SynthOptions {
        shared_pool: true,
        ..small()
    };
    let s = make_class_cl(&groups, 10, 3, &opts).unwrap();
    assert_eq!(s.tasks[0].train[0].image, s.tasks[1].train[0].image);
    let fresh = make_class_cl(&groups, 10, 3, &small()).unwrap();
    assert_ne!(fresh.tasks[0].train[0].image, fresh.tasks[1].train[0].image);
}

#[test]
fn organ_tasks_have_disjoint_singletons() {
    let s = make_organ_cl(4, 10, 5, &small()).unwrap();
    let sets: Vec<Vec<u32>> = s.tasks.iter().map(|t| t.label_set.clone()).collect();
    assert_eq!(sets, vec![vec![1], vec![2], vec![3], vec![4]]);
}

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn organ_intensity_distributions_differ() {
    let s = make_organ_cl(3, 200, 11, &SynthOptions::default()).unwrap();
    let means = |t: &Task| -> Vec<f64> { t.train.iter().chain(&t.val).chain(&t.test).map(|x| x.image.mean()).collect() };
    let (a, b) = (means(&s.tasks[0]), means(&s.tasks[2]));
    let d = ks_statistic(a.clone(), b.clone());
    let n = a.len() as f64;
    // asymptotic critical value at alpha = 0.01
    let crit = 1.628 * (2.0 / n).sqrt();
    assert!(d > crit, "D={d} crit={crit}");
}

#[test]
fn generators_are_pure() {
    let a = make_organ_cl(2, 10, 9, &small()).unwrap();
    let b = make_organ_cl(2, 10, 9, &small()).unwrap();
    assert_eq!(a, b);
    let c = make_organ_cl(2, 10, 10, &small()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn permutation_laws() {
    let s = make_organ_cl(4, 10, 2, &small()).unwrap();
    assert_eq!(s.permute(&[1, 2, 3, 4]).unwrap(), s);
    let r = s.permute(&[4, 3, 2, 1]).unwrap();
    assert_eq!(r.tasks[0].label_set, vec![4]);
    assert_eq!(r.tasks[0].id, 1);
    assert_eq!(r.tasks[0].origin, 4);
    assert_eq!(permute(&r, &[4, 3, 2, 1]).unwrap(), s);
    r.check_laws().unwrap();
    assert!(s.permute(&[1, 1, 2, 3]).is_err());
    assert!(s.permute(&[1, 2, 3]).is_err());
    assert_eq!(random_orders(4, 10, 1), random_orders(4, 10, 1));
    for o in random_orders(4, 10, 1) {
        s.permute(&o).unwrap();
    }
}

#[test]
fn law_violations_are_detected() {
    let mut s = make_domain_cl(2, 10, 1, &small()).unwrap();
    s.tasks[1].distribution_tag = s.tasks[0].distribution_tag.clone();
    assert!(matches!(s.check_laws(), Err(Error::Scenario(_))));
    let mut o = make_organ_cl(2, 10, 1, &small()).unwrap();
    o.tasks[0].train[0].label.data[0] = 2;
    assert!(matches!(o.check_laws(), Err(Error::Scenario(_))));
}

fn write_case(dir: &Path, name: &str, img: &Image, lbl: &LabelMap, png: bool) -> (String, String) {
    let img_name = if png { format!("{name}.png") } else { format!("{name}.csb") };
    if png {
        let px: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0) as u8).collect();
        image::GrayImage::from_raw(img.width as u32, img.height as u32, px)
            .unwrap()
            .save(dir.join(&img_name))
            .unwrap();
    } else {
        imageio::write_raw(&dir.join(&img_name), img).unwrap();
    }
    let lbl_name = format!("{name}_lbl.png");
    imageio::write_label(&dir.join(&lbl_name), lbl).unwrap();
    (img_name, lbl_name)
}

use std::path::Path;

fn write_manifest(dir: &Path, scenario: &str, tasks: &[(Vec<u32>, &str, Vec<(String, String)>)]) -> std::path::PathBuf {
    let mut text = format!("scenario = \"{scenario}\"\n");
    for (k, (set, dist, cases)) in tasks.iter().enumerate() {
        text.push_str(&format!(
            "\n[[task]]\nid = {}\nlabel_set = {:?}\ndistribution = \"{dist}\"\ncases = [\n",
            k + 1,
            set
        ));
        for (i, l) in cases {
            text.push_str(&format!("  [\"{i}\", \"{l}\"],\n"));
        }
        text.push_str("]\n");
    }
    let p = dir.join("manifest.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn manifest_with_two_domains_ingests() {
    let dir = tempfile::tempdir().unwrap();
    let src = make_domain_cl(2, 8, 4, &small()).unwrap();
    let mut tasks = Vec::new();
    for t in &src.tasks {
        let cases: Vec<(String, String)> = t
            .train
            .iter()
            .chain(&t.val)
            .chain(&t.test)
            .enumerate()
            .map(|(i, s)| write_case(dir.path(), &format!("t{}_{i}", t.id), &s.image, &s.label, t.id == 1))
            .collect();
        tasks.push((vec![1], if t.id == 1 { "a" } else { "b" }, cases));
    }
    let p = write_manifest(dir.path(), "domain-cl", &tasks);
    let s = ingest_dataset(&p).unwrap();
    assert_eq!(s.kind, ScenarioKind::DomainCl);
    assert_eq!(s.n_tasks(), 2);
    assert_eq!((s.tasks[0].train.len(), s.tasks[0].val.len(), s.tasks[0].test.len()), (5, 1, 2));
    for x in &s.tasks[1].train {
        assert!(x.image.mean().abs() < 1e-9);
    }
    assert_eq!(s.tasks[1].train[0].label, src.tasks[1].train[0].label);
}

#[test]
fn manifest_errors_name_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_vec(4, 4, (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
    let mut lbl = LabelMap::zeros(4, 4);
    lbl.data[3] = 2;
    let cases: Vec<(String, String)> = (0..4).map(|i| write_case(dir.path(), &format!("c{i}"), &img, &lbl, false)).collect();

    let p = write_manifest(dir.path(), "class-cl", &[(vec![1, 2], "s", cases.clone()), (vec![2, 3], "s", cases.clone())]);
    assert!(matches!(ingest_dataset(&p), Err(Error::Ingestion { .. })));

    let p = write_manifest(dir.path(), "organ-cl", &[(vec![1], "x", cases.clone()), (vec![3], "y", cases.clone())]);
    match ingest_dataset(&p) {
        Err(Error::Ingestion { entry, .. }) => assert!(entry.starts_with("task 1 case 1"), "{entry}"),
        other => panic!("{other:?}"),
    }

    let mut missing = cases.clone();
    missing[2].0 = "nope.png".into();
    let p = write_manifest(dir.path(), "domain-cl", &[(vec![2], "x", missing), (vec![2], "y", cases)]);
    match ingest_dataset(&p) {
        Err(Error::Ingestion { entry, .. }) => assert!(entry.contains("nope.png"), "{entry}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn raw_format_round_trip_and_header_checks() {
    let img = Image::from_vec(2, 3, vec![0.5, -1.25, 3.0, 0.0, 1.0, 2.0]).unwrap();
    let bytes = imageio::encode_raw(&img);
    assert_eq!(bytes.len(), 16 + 24);
    assert_eq!(&bytes[..4], b"CSB1");
    assert_eq!(imageio::decode_raw(&bytes).unwrap(), img);
    assert!(imageio::decode_raw(&bytes[..20]).is_err());
    assert!(imageio::decode_raw(b"XXXX000000000000").is_err());
}

#[test]
fn sixteen_bit_png_reads_full_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 1, vec![0u16, 65535]).unwrap();
    buf.save(&p).unwrap();
    let img = imageio::read_image(&p).unwrap();
    assert_eq!(img.data, vec![0.0, 65535.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn generators_satisfy_scenario_laws(seed in any::<u64>(), n in 2usize..5) {
        let o = SynthOptions { size: 8, ..SynthOptions::default() };
        make_domain_cl(n, 7, seed, &o).unwrap().check_laws().unwrap();
        make_organ_cl(n, 7, seed, &o).unwrap().check_laws().unwrap();
        let groups: Vec<Vec<u32>> = (0..n as u32).map(|k| vec![2 * k + 1, 2 * k + 2]).collect();
        let s = make_class_cl(&groups, 7, seed, &o).unwrap();
        s.check_laws().unwrap();
        for t in &s.tasks {
            for x in &t.train {
                prop_assert_eq!(&x.label, &x.full_label.as_ref().unwrap().restrict_to(&t.label_set));
            }
        }
    }
}
