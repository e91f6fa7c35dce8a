use nalgebra::DMatrix;
use proptest::prelude::*;

use super::*;
use super::Strategy;
use crate::buffers::BufferEntry;
use crate::grid::IGNORE_LABEL;
use crate::scenarios::{make_class_cl, make_domain_cl, SynthOptions};
use crate::segmodel::ArchConfig;

fn arch() -> ArchConfig {
    ArchConfig {
        height: 8,
        width: 8,
        levels: 2,
        base_width: 2,
    }
}

fn opts() -> SynthOptions {
    SynthOptions {
        size: 8,
        ..SynthOptions::default()
    }
}

fn class_stream() -> TaskStream {
    make_class_cl(&[vec![1, 2], vec![3]], 12, 4, &opts()).unwrap()
}

fn domain_stream() -> TaskStream {
    make_domain_cl(3, 12, 4, &opts()).unwrap()
}

fn pixel(values: &[f64]) -> Tensor {
    let mut t = Tensor::zeros(values.len(), 1, 1);
    t.data.copy_from_slice(values);
    t
}

/// Run `steps` SGD steps of the strategy on task `ctx.t`.
fn advance(s: &mut dyn Strategy, m: &mut Segmenter, ctx: &TaskContext, env: &mut Env, steps: usize) {
    let items = s.training_items(ctx);
    for k in 0..steps {
        let lo = (k * 4) % items.len();
        let batch: Vec<TrainItem> = items.iter().cycle().skip(lo).take(4).copied().collect();
        let (_, mut g) = s.loss(m, &batch, ctx, env).unwrap();
        s.adjust_gradient(m, &mut g, ctx, env).unwrap();
        m.sgd_step(&g, 0.05).unwrap();
    }
}

/// Strategy trained through task 1 and positioned a few steps into task 2.
fn into_task_two(name: &str, hyper: &Hyper, stream: &TaskStream) -> (Box<dyn Strategy>, Segmenter, Env) {
    let mut s = create(name, hyper, 8).unwrap();
    let mut m = Segmenter::new(arch(), &[], 7).unwrap();
    let mut env = Env::new(3, 4);
    let c1 = TaskContext::new(stream, 1);
    s.on_task_start(&mut m, &c1, &mut env).unwrap();
    advance(s.as_mut(), &mut m, &c1, &mut env, 3);
    s.on_task_end(&mut m, &c1, &mut env).unwrap();
    let c2 = TaskContext::new(stream, 2);
    s.on_task_start(&mut m, &c2, &mut env).unwrap();
    advance(s.as_mut(), &mut m, &c2, &mut env, 2);
    (s, m, env)
}

/// `‖fd − g‖ / ‖g‖` over at most 200 evenly spaced trainable coordinates,
/// with central differences at `h = 1e-4`. A coordinate whose difference
/// quotients at `h` and `h/10` disagree has a ReLU kink within `±h`, where
/// finite differences say nothing; such coordinates are set aside, and at
/// most 2% of the probe may be.
fn fd_error(m: &Segmenter, mut f: impl FnMut(&Segmenter) -> (f64, Vec<f64>)) -> f64 {
    let (_, g) = f(m);
    let mask = m.trainable_mask();
    let live: Vec<usize> = (0..m.num_params()).filter(|&j| mask[j] != 0.0).collect();
    let stride = live.len().div_ceil(200).max(1);
    let theta = m.get_params();
    let mut probe = m.clone();
    let mut central = |j: usize, h: f64| {
        let mut t = theta.clone();
        t[j] += h;
        probe.set_params(&t).unwrap();
        let up = f(&probe).0;
        t[j] -= 2.0 * h;
        probe.set_params(&t).unwrap();
        let down = f(&probe).0;
        (up - down) / (2.0 * h)
    };
    let h = 1e-4;
    let (mut num, mut den) = (0.0, 0.0);
    let (mut probed, mut kinks) = (0, 0);
    for &j in live.iter().step_by(stride) {
        probed += 1;
        let fd = central(j, h);
        let fine = central(j, h / 10.0);
        if (fd - fine).abs() > 1e-5 * fd.abs().max(fine.abs()).max(1e-3) {
            kinks += 1;
            continue;
        }
        num += (fd - g[j]).powi(2);
        den += g[j] * g[j];
    }
    assert!(kinks * 50 <= probed, "{kinks} of {probed} probe coordinates sit on kinks");
    assert!(den > 0.0, "probe gradient is identically zero");
    (num / den).sqrt()
}

fn strategy_fd(name: &str, hyper: &Hyper, stream: &TaskStream) -> f64 {
    let (mut s, m, mut env) = into_task_two(name, hyper, stream);
    let ctx = TaskContext::new(stream, 2);
    let batch: Vec<TrainItem> = ctx.current_items().into_iter().take(2).collect();
    fd_error(&m, |mm| s.loss(mm, &batch, &ctx, &mut env).unwrap())
}

// ---- registry -------------------------------------------------------------

#[test]
fn registry_builds_every_name() {
    for name in STRATEGY_NAMES {
        let s = create(name, &Hyper::default(), 8).unwrap();
        assert_eq!(s.name(), name);
    }
}

#[test]
fn unknown_name_is_config_error() {
    assert!(matches!(create("regu-foo", &Hyper::default(), 8), Err(Error::Config(_))));
}

#[test]
fn class_specific_methods_reject_other_scenarios() {
    for name in ["classcl-mib", "classcl-plop"] {
        let s = create(name, &Hyper::default(), 8).unwrap();
        assert!(s.supports(ScenarioKind::ClassCl));
        assert!(!s.supports(ScenarioKind::DomainCl));
        assert!(!s.supports(ScenarioKind::OrganCl));
    }
}

#[test]
fn gpm_threshold_outside_unit_interval_is_config_error() {
    let mut h = Hyper::default();
    h.gpm_threshold = 0.0;
    assert!(matches!(create("repl-gpm", &h, 8), Err(Error::Config(_))));
    h.gpm_threshold = 1.5;
    assert!(matches!(create("repl-gpm", &h, 8), Err(Error::Config(_))));
}

// ---- EWC ------------------------------------------------------------------

#[test]
fn fisher_is_mean_of_squares() {
    assert_eq!(fisher_from_grads(&[vec![2.0], vec![-2.0]]).unwrap(), vec![4.0]);
    assert_eq!(fisher_from_grads(&vec![vec![0.0, 0.0]; 3]).unwrap(), vec![0.0, 0.0]);
    assert!(fisher_from_grads(&[]).is_err());
}

#[test]
fn fisher_estimate_is_reproducible_and_nonnegative() {
    let stream = domain_stream();
    let ctx = TaskContext::new(&stream, 1);
    let m = Segmenter::new(arch(), &[1], 2).unwrap();
    let items = ctx.current_items();
    let a = ewc_estimate_fisher(&m, 1, &items, 5, &ctx, &mut Env::new(9, 4)).unwrap();
    let b = ewc_estimate_fisher(&m, 1, &items, 5, &ctx, &mut Env::new(9, 4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), m.num_params());
    assert!(a.iter().all(|&f| f >= 0.0));
    assert!(ewc_estimate_fisher(&m, 1, &[], 5, &ctx, &mut Env::new(9, 4)).is_err());
}

#[test]
fn ewc_penalty_examples() {
    let (p, g) = ewc_penalty(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 2.0], 1.0).unwrap();
    assert!((p - 1.5).abs() < 1e-12);
    assert_eq!(g, vec![1.0, 2.0]);
    let (p2, _) = ewc_penalty(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 2.0], 2.0).unwrap();
    assert!((p2 - 3.0).abs() < 1e-12);
    assert_eq!(ewc_penalty(&[0.3, 0.4], &[0.3, 0.4], &[5.0, 5.0], 9.0).unwrap().0, 0.0);
    assert!(ewc_penalty(&[0.0], &[0.0, 0.0], &[1.0, 1.0], 1.0).is_err());
}

#[test]
fn ewc_anchor_is_stable_during_the_next_task() {
    let stream = domain_stream();
    let mut h = Hyper::default();
    h.ewc_lambda = 1.0;
    let mut s = Ewc::new(h);
    let mut m = Segmenter::new(arch(), &[], 7).unwrap();
    let mut env = Env::new(3, 4);
    let c1 = TaskContext::new(&stream, 1);
    s.on_task_start(&mut m, &c1, &mut env).unwrap();
    advance(&mut s, &mut m, &c1, &mut env, 2);
    s.on_task_end(&mut m, &c1, &mut env).unwrap();
    let before = s.anchors().to_vec();
    let c2 = TaskContext::new(&stream, 2);
    s.on_task_start(&mut m, &c2, &mut env).unwrap();
    advance(&mut s, &mut m, &c2, &mut env, 3);
    assert_eq!(s.anchors(), &before[..]);
}

// ---- SI -------------------------------------------------------------------

#[test]
fn si_single_step_and_no_step() {
    let mut st = SiState::new(&[0.0], 0.5, 1e-3);
    si_update(&mut st, &[1.0], &[-0.1]).unwrap();
    assert!((st.omega[0] - 0.1).abs() < 1e-15);

    let mut idle = SiState::new(&[1.0, 2.0], 0.5, 1e-3);
    idle.big_omega = vec![0.25, 0.5];
    si_consolidate(&mut idle, &[1.0, 2.0]);
    assert_eq!(idle.big_omega, vec![0.25, 0.5]);
}

#[test]
fn si_consolidation_folds_path_integral() {
    let mut st = SiState::new(&[0.0], 0.5, 1e-3);
    si_update(&mut st, &[1.0], &[-0.1]).unwrap();
    si_consolidate(&mut st, &[-0.1]);
    // 0.1 / (0.01 + 0.001)
    assert!((st.big_omega[0] - 0.1 / 0.011).abs() < 1e-12);
    assert_eq!(st.omega, vec![0.0]);
    assert_eq!(st.anchor, vec![-0.1]);
    let (p, g) = si_penalty(&[0.9], &st).unwrap();
    assert!((p - 0.5 * st.big_omega[0] * 1.0).abs() < 1e-12);
    assert!((g[0] - 2.0 * 0.5 * st.big_omega[0] * 1.0).abs() < 1e-12);
}

#[test]
fn si_importance_is_nonnegative_after_training() {
    let stream = domain_stream();
    let mut s = Si::new(Hyper::default());
    let mut m = Segmenter::new(arch(), &[], 7).unwrap();
    let mut env = Env::new(3, 4);
    let c1 = TaskContext::new(&stream, 1);
    s.on_task_start(&mut m, &c1, &mut env).unwrap();
    advance(&mut s, &mut m, &c1, &mut env, 4);
    s.on_task_end(&mut m, &c1, &mut env).unwrap();
    let st = s.state().unwrap();
    assert!(st.big_omega.iter().all(|&w| w >= 0.0));
    assert!(st.big_omega.iter().any(|&w| w > 0.0));
}

// ---- LwF and MiB ----------------------------------------------------------

#[test]
fn lwf_examples() {
    let old = pixel(&[0.0, 1.0]);
    let new = pixel(&[1.0, 0.0]);
    let (l, _) = lwf_distill_loss(&new, &[0, 1], &old, &[0, 1], 1.0).unwrap();
    assert!((l - 0.462_117_157_260_009_8).abs() < 1e-12, "{l}");
    assert_eq!(lwf_distill_loss(&old, &[0, 1], &old, &[0, 1], 2.0).unwrap().0, 0.0);
    assert_eq!(lwf_distill_loss(&new, &[0, 1], &old, &[], 2.0).unwrap().0, 0.0);
}

#[test]
fn mib_unbiased_ce_examples() {
    let logits = pixel(&[0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]);
    let bg = LabelMap::zeros(1, 1);
    let (l, _) = mib_unbiased_ce(&logits, &[0, 1, 2], &bg, &[1]).unwrap();
    assert!((l + 0.7f64.ln()).abs() < 1e-12);
    let plain = loss::cross_entropy(&logits, &[0, 1, 2], &bg, &[]).unwrap();
    assert_eq!(mib_unbiased_ce(&logits, &[0, 1, 2], &bg, &[]).unwrap(), plain);
    let stray = LabelMap::from_vec(1, 1, vec![9]).unwrap();
    assert!(mib_unbiased_ce(&logits, &[0, 1, 2], &stray, &[1]).is_err());
}

#[test]
fn mib_unbiased_kd_reductions() {
    let old = pixel(&[0.3, -0.2]);
    // new class with vanishing probability
    let new = pixel(&[0.3, -0.2, -800.0]);
    let (l, _) = mib_unbiased_kd(&new, &[0, 1, 2], &old, &[0, 1], 2.0).unwrap();
    assert!(l.abs() < 1e-12);
    let cand = pixel(&[1.0, 0.5]);
    let a = mib_unbiased_kd(&cand, &[0, 1], &old, &[0, 1], 2.0).unwrap();
    let b = lwf_distill_loss(&cand, &[0, 1], &old, &[0, 1], 2.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mib_head_init_preserves_the_folded_distribution() {
    let stream = class_stream();
    let mut m = Segmenter::new(arch(), &[1, 2], 5).unwrap();
    let old = m.clone();
    m.ensure_classes(1, &[3]).unwrap();
    mib_init_head(&mut m, 1, &[3]).unwrap();
    let img = &stream.tasks[0].train[0].image;
    let (l, _) = mib_unbiased_kd(&m.forward(img, 1).unwrap(), &[0, 1, 2, 3], &old.forward(img, 1).unwrap(), &[0, 1, 2], 1.0).unwrap();
    assert!(l.abs() < 1e-12, "{l}");
}

// ---- projections ----------------------------------------------------------

#[test]
fn agem_examples() {
    assert_eq!(agem_project(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), vec![1.0, 1.0]);
    assert_eq!(agem_project(&[1.0, -1.0], &[0.0, 1.0]).unwrap(), vec![1.0, 0.0]);
    assert_eq!(agem_project(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), vec![1.0, -1.0]);
}

/// Nearest feasible point by exhaustive search on a 2-D grid.
fn grid_qp(g: [f64; 2], rows: &[[f64; 2]], margin: f64) -> [f64; 2] {
    let mut best = [f64::NAN; 2];
    let mut best_d = f64::INFINITY;
    let step = 1e-3;
    for i in -3000..=3000 {
        for j in -3000..=3000 {
            let p = [i as f64 * step, j as f64 * step];
            if rows.iter().all(|r| r[0] * p[0] + r[1] * p[1] >= margin - 1e-12) {
                let d = (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = p;
                }
            }
        }
    }
    best
}

#[test]
fn gem_matches_the_grid_oracle() {
    let out = gem_project(&[1.0, -1.0], &[vec![0.0, 1.0], vec![1.0, 0.0]], 0.0).unwrap();
    let oracle = grid_qp([1.0, -1.0], &[[0.0, 1.0], [1.0, 0.0]], 0.0);
    assert_eq!(oracle, [1.0, 0.0]);
    assert!((out[0] - 1.0).abs() < 1e-6 && out[1].abs() < 1e-6, "{out:?}");

    let g = [-0.5, -1.0];
    let rows = [[1.0, 0.5], [-0.3, 1.0]];
    let out = gem_project(&g, &[rows[0].to_vec(), rows[1].to_vec()], 0.0).unwrap();
    let oracle = grid_qp(g, &rows, 0.0);
    assert!((out[0] - oracle[0]).abs() < 2e-3 && (out[1] - oracle[1]).abs() < 2e-3, "{out:?} vs {oracle:?}");
}

#[test]
fn gem_leaves_feasible_gradients_alone() {
    let g = vec![0.5, 2.0, -1.0];
    assert_eq!(gem_project(&g, &[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]], 0.0).unwrap(), g);
}

#[test]
fn gpm_examples() {
    let m = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    assert_eq!(gpm_project(&m, &[3.0, 4.0]).unwrap(), vec![0.0, 4.0]);
    assert_eq!(gpm_project(&m, &[5.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    assert_eq!(gpm_project(&m, &[0.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    assert!(gpm_project(&m, &[1.0]).is_err());
}

#[test]
fn gpm_rank_one_adds_the_left_singular_direction() {
    let mut mem = GpmMemory::default();
    // u = (3, 4)/5, v = (1, -2, 2)
    let r = DMatrix::from_fn(2, 3, |i, j| [3.0, 4.0][i] * [1.0, -2.0, 2.0][j]);
    gpm_update_memory(&mut mem, &[r.clone()], 0.95).unwrap();
    assert_eq!(mem.bases[0].ncols(), 1);
    let c = mem.bases[0].column(0);
    assert!(((c[0] * 3.0 + c[1] * 4.0) / 5.0).abs() > 1.0 - 1e-12);
    gpm_update_memory(&mut mem, &[r * 2.0], 0.95).unwrap();
    assert_eq!(mem.bases[0].ncols(), 1);
    assert!(gpm_update_memory(&mut mem, &[DMatrix::zeros(2, 1)], 0.0).is_err());
}

#[test]
fn gpm_im2col_rows_match_conv_weights() {
    let mut x = Tensor::zeros(2, 3, 3);
    for (i, v) in x.data.iter_mut().enumerate() {
        *v = i as f64;
    }
    let p = im2col(&x, 3);
    assert_eq!(p.shape(), (18, 9));
    // centre tap of channel 1 reproduces that channel
    for q in 0..9 {
        assert_eq!(p[(9 + 4, q)], x.plane(1)[q]);
    }
    // top-left tap at the top-left pixel falls in the padding
    assert_eq!(p[(0, 0)], 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn agem_is_idempotent_and_feasible(g in prop::collection::vec(-3.0f64..3.0, 4), r in prop::collection::vec(-3.0f64..3.0, 4)) {
        let once = agem_project(&g, &r).unwrap();
        let twice = agem_project(&once, &r).unwrap();
        let dot: f64 = once.iter().zip(&r).map(|(a, b)| a * b).sum();
        prop_assert!(dot >= -1e-9);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gem_single_constraint_equals_agem(g in prop::collection::vec(-3.0f64..3.0, 3), r in prop::collection::vec(-3.0f64..3.0, 3)) {
        prop_assume!(r.iter().map(|v| v * v).sum::<f64>() > 0.1);
        let a = agem_project(&g, &r).unwrap();
        let b = gem_project(&g, &[r.clone()], 0.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn gem_output_is_feasible(g in prop::collection::vec(-3.0f64..3.0, 4), rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..4)) {
        let out = gem_project(&g, &rows, 0.0).unwrap();
        for r in &rows {
            let d: f64 = out.iter().zip(r).map(|(a, b)| a * b).sum();
            prop_assert!(d >= -GEM_TOL);
        }
    }

    #[test]
    fn gpm_bases_stay_orthonormal_and_projection_is_idempotent(
        a in prop::collection::vec(-2.0f64..2.0, 5 * 6),
        b in prop::collection::vec(-2.0f64..2.0, 5 * 4),
        g in prop::collection::vec(-2.0f64..2.0, 5),
        eps in 0.3f64..1.0,
    ) {
        let mut mem = GpmMemory::default();
        gpm_update_memory(&mut mem, &[DMatrix::from_vec(5, 6, a)], eps).unwrap();
        gpm_update_memory(&mut mem, &[DMatrix::from_vec(5, 4, b)], eps).unwrap();
        prop_assert!(mem.orthonormality_error() < 1e-6);
        let once = gpm_project(&mem.bases[0], &g).unwrap();
        let twice = gpm_project(&mem.bases[0], &once).unwrap();
        for (x, y) in once.iter().zip(&twice) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let resid = mem.bases[0].transpose() * nalgebra::DVector::from_vec(once);
        prop_assert!(resid.norm() < 1e-6);
    }
}

// ---- DER / FDR ------------------------------------------------------------

#[test]
fn output_matching_examples() {
    let (l, _) = loss::logit_mse(&pixel(&[0.0, 1.0]), &pixel(&[1.0, 0.0])).unwrap();
    assert!((l - 1.0).abs() < 1e-12);
    let (l, _) = loss::softmax_mse(&pixel(&[50.0, -50.0]), &pixel(&[0.5, 0.5])).unwrap();
    assert!((l - 0.25).abs() < 1e-12);
}

fn stored_entries(m: &Segmenter, stream: &TaskStream) -> Vec<BufferEntry> {
    stream.tasks[0].train[..3]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut e = BufferEntry::new(s.image.clone(), s.label.clone(), 1, i);
            let lg = m.forward(&s.image, 1).unwrap();
            e.stored_output = Some(loss::softmax(&lg));
            e.stored_logits = Some(lg);
            e.stored_classes = m.head_classes(1);
            e
        })
        .collect()
}

#[test]
fn der_and_fdr_reductions() {
    let stream = domain_stream();
    let ctx = TaskContext::new(&stream, 2);
    let m = Segmenter::new(arch(), &[1], 3).unwrap();
    let entries = stored_entries(&m, &stream);
    let refs: Vec<&BufferEntry> = entries.iter().collect();
    assert!(der_loss(&m, &refs, &[], 1.0, 0.0, &ctx).unwrap().0.abs() < 1e-15);
    assert_eq!(der_loss(&m, &refs, &refs, 0.0, 0.0, &ctx).unwrap().0, 0.0);
    assert!(fdr_loss(&m, &refs, 1.0).unwrap().0.abs() < 1e-15);

    let mut other = m.clone();
    let shifted: Vec<f64> = m.params().iter().map(|v| v + 0.05).collect();
    other.set_params(&shifted).unwrap();
    let one = fdr_loss(&other, &refs, 1.0).unwrap().0;
    let two = fdr_loss(&other, &refs, 2.0).unwrap().0;
    assert!(one > 0.0);
    assert!((two - 2.0 * one).abs() < 1e-12);

    let bare = BufferEntry::new(entries[0].image.clone(), entries[0].label.clone(), 1, 0);
    assert!(der_loss(&m, &[&bare], &[], 1.0, 0.0, &ctx).is_err());
    assert!(fdr_loss(&m, &[&bare], 1.0).is_err());
}

// ---- PLOP -----------------------------------------------------------------

#[test]
fn pod_is_zero_on_identical_features() {
    let mut x = Tensor::zeros(2, 4, 4);
    for (i, v) in x.data.iter_mut().enumerate() {
        *v = (i as f64 * 0.37).sin();
    }
    let (l, g) = plop_pod_loss(&[x.clone()], &[x.clone()], &[1, 2]).unwrap();
    assert_eq!(l, 0.0);
    assert!(g[0].data.iter().all(|&v| v == 0.0));
    assert!(plop_pod_loss(&[x.clone()], &[], &[1]).is_err());
}

#[test]
fn uniform_old_output_pseudo_labels_nothing() {
    let old = Tensor::zeros(3, 2, 2);
    let labels = LabelMap::zeros(2, 2);
    let t = plop_entropy_threshold(&[old.clone()], &[&labels]).unwrap();
    let out = plop_pseudo_label(&old, &[0, 1, 2], &labels, t).unwrap();
    assert!(out.data.iter().all(|&y| y == 0));
}

#[test]
fn confident_old_predictions_become_pseudo_labels() {
    let mut old = Tensor::zeros(2, 1, 3);
    // pixel 0 sure of class 1, pixel 1 unsure leaning class 1, pixel 2 background
    old.data = vec![0.0, 0.0, 5.0, 9.0, 0.1, 0.0];
    let labels = LabelMap::zeros(1, 3);
    let out = plop_pseudo_label(&old, &[0, 1], &labels, 0.3).unwrap();
    assert_eq!(out.data, vec![1, IGNORE_LABEL, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pseudo_labels_never_touch_foreground(
        logits in prop::collection::vec(-4.0f64..4.0, 3 * 9),
        labels in prop::collection::vec(prop::sample::select(vec![0u8, 0, 3, 4]), 9),
        thr in 0.0f64..1.2,
    ) {
        let mut old = Tensor::zeros(3, 3, 3);
        old.data = logits;
        let lm = LabelMap::from_vec(3, 3, labels.clone()).unwrap();
        let out = plop_pseudo_label(&old, &[0, 1, 2], &lm, thr).unwrap();
        for (a, b) in labels.iter().zip(&out.data) {
            if *a != 0 {
                prop_assert_eq!(a, b);
            }
        }
    }
}

// ---- gradient checks ------------------------------------------------------

const FD_TOL: f64 = 1e-4;

#[test]
fn ewc_total_loss_gradient() {
    let mut h = Hyper::default();
    h.ewc_lambda = 50.0;
    let e = strategy_fd("regu-ewc", &h, &domain_stream());
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn si_total_loss_gradient() {
    let e = strategy_fd("regu-si", &Hyper::default(), &domain_stream());
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn lwf_total_loss_gradient() {
    let e = strategy_fd("regu-lwf", &Hyper::default(), &class_stream());
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn mib_total_loss_gradient() {
    let e = strategy_fd("classcl-mib", &Hyper::default(), &class_stream());
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn plop_total_loss_gradient() {
    let e = strategy_fd("classcl-plop", &Hyper::default(), &class_stream());
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn pod_gradient() {
    let stream = class_stream();
    let old = Segmenter::new(arch(), &[1, 2], 1).unwrap();
    let m = Segmenter::new(arch(), &[1, 2], 2).unwrap();
    let img = &stream.tasks[0].train[0].image;
    let taps = arch().depth_taps();
    let old_feats = old.features(img, 1, &taps).unwrap();
    let e = fd_error(&m, |mm| {
        super::grad_with_taps(mm, &[img], 1, |_, tr| {
            let new: Vec<Tensor> = taps.iter().map(|&l| tr.tap(l).clone()).collect();
            let (l, dt) = plop_pod_loss(&old_feats, &new, &[1, 2])?;
            Ok((l, None, taps.iter().copied().zip(dt).collect()))
        })
        .unwrap()
    });
    assert!(e < FD_TOL, "{e}");
}

#[test]
fn der_and_fdr_gradients() {
    let stream = class_stream();
    let ctx = TaskContext::new(&stream, 2);
    let old = Segmenter::new(arch(), &[1, 2], 1).unwrap();
    let mut m = Segmenter::new(arch(), &[1, 2], 2).unwrap();
    m.ensure_classes(1, &[3]).unwrap();
    let entries = stored_entries(&old, &stream);
    let refs: Vec<&BufferEntry> = entries.iter().collect();
    let e = fd_error(&m, |mm| der_loss(mm, &refs, &refs, 0.5, 0.5, &ctx).unwrap());
    assert!(e < FD_TOL, "der {e}");
    let e = fd_error(&m, |mm| fdr_loss(mm, &refs, 1.0).unwrap());
    assert!(e < FD_TOL, "fdr {e}");
}

// ---- bounds and isolation -------------------------------------------------

#[test]
fn joint_training_pools_all_tasks_so_far() {
    let stream = domain_stream();
    let s = JointTrain;
    let total: usize = stream.tasks.iter().map(|t| t.train.len()).sum();
    assert_eq!(s.training_items(&TaskContext::new(&stream, 3)).len(), total);
    assert_eq!(s.training_items(&TaskContext::new(&stream, 1)).len(), stream.tasks[0].train.len());
}

#[test]
fn isolation_keeps_task_one_bytes() {
    let stream = domain_stream();
    for name in ["pariso-pnn", "pariso-dan"] {
        let mut s = create(name, &Hyper::default(), 8).unwrap();
        let mut m = Segmenter::new(arch(), &[], 7).unwrap();
        let mut env = Env::new(3, 4);
        let c1 = TaskContext::new(&stream, 1);
        s.on_task_start(&mut m, &c1, &mut env).unwrap();
        advance(s.as_mut(), &mut m, &c1, &mut env, 3);
        s.on_task_end(&mut m, &c1, &mut env).unwrap();
        let img = &stream.tasks[0].test[0].image;
        let before = m.forward(img, 1).unwrap();
        let body = m.body_params();
        let c2 = TaskContext::new(&stream, 2);
        s.on_task_start(&mut m, &c2, &mut env).unwrap();
        let digest = m.frozen_digest();
        advance(s.as_mut(), &mut m, &c2, &mut env, 3);
        assert_eq!(m.frozen_digest(), digest, "{name}");
        assert_eq!(m.forward(img, s.route(1)).unwrap(), before, "{name}");
        assert!(m.body_params() > body, "{name}");
        assert_eq!(s.route(2), 2);
    }
}

#[test]
fn shared_head_methods_keep_the_body_size() {
    let stream = class_stream();
    for name in STRATEGY_NAMES.iter().filter(|n| !n.starts_with("pariso")) {
        let (_, m, _) = into_task_two(name, &Hyper::default(), &stream);
        let fresh = Segmenter::new(arch(), &[], 7).unwrap();
        assert_eq!(m.body_params(), fresh.body_params(), "{name}");
    }
}

