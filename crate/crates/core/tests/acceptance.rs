//! Acceptance suite. Each test prints one `criterion N ...: PASS` line on
//! success (visible with `--nocapture`); a failing criterion fails its test.

use ioodg::autodiff::Tape;
use ioodg::data::{build_benchmark, generate_shape, BenchmarkConfig, CorruptionSuite, ShapeKind};
use ioodg::geometry::{
    apply_param_transform, chamfer_distance, farthest_point_sample, invert_param_transform,
    sample_param_transform, AnchorSet, NonParamKind, NonParamTransform, PointCloud,
    TransformDistribution,
};
use ioodg::losses::LossWeights;
use ioodg::network::{
    forward_two_branch, ForwardOptions, ForwardPass, ModelDims, ModelParams,
};
use ioodg::train::{fit, train_epoch, Ablation, TrainConfig, TrainState};
use ioodg::verify::{gradcheck_dims, model_gradient_check};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

#[test]
fn criterion_1_gradient_fidelity() {
    let start = std::time::Instant::now();
    for seed in 0..5u64 {
        let reports = model_gradient_check(gradcheck_dims(), seed, 1e-4, 1e-4, None).unwrap();
        for r in &reports {
            assert!(
                r.max_rel_err < 1e-4,
                "seed {seed} group {} rel err {:.3e} (param {})",
                r.group,
                r.max_rel_err,
                r.worst_param
            );
        }
    }
    assert!(start.elapsed().as_secs() < 120, "exceeded 2-minute budget");
    println!("criterion 1 gradient fidelity: PASS");
}

#[test]
fn criterion_2_permutation_invariance() {
    let start = std::time::Instant::now();
    let dims = ModelDims {
        n_classes: 3,
        m_anchors: 8,
        feat_dim: 16,
        hidden_dim: 16,
        attn_dim: 8,
        ..ModelDims::default()
    };
    let params = ModelParams::init(dims, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let n = rng.gen_range(12..40);
        let cloud = random_cloud(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permuted =
            PointCloud::new(perm.iter().map(|&i| cloud.point(i)).collect()).unwrap();
        let a0 = farthest_point_sample(&cloud, 8, 0).unwrap();

        let mut tape = Tape::new();
        let mut pass = ForwardPass::new(&mut tape, &params, false).unwrap();
        let x1 = pass
            .tape
            .constant(ioodg::autodiff::Tensor::from_points(cloud.points()))
            .unwrap();
        let x2 = pass
            .tape
            .constant(ioodg::autodiff::Tensor::from_points(permuted.points()))
            .unwrap();
        let h1 = pass.extract_features(1, x1).unwrap();
        let h2 = pass.extract_features(1, x2).unwrap();

        // Features: exactly permutation-equivariant (bitwise).
        let t1 = pass.tape.value(h1).clone();
        let t2 = pass.tape.value(h2).clone();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(
                t2.row(new_row),
                t1.row(old_row),
                "features not exactly equivariant"
            );
        }

        // Anchors: invariant within 1e-6 with A0 held fixed.
        let (a1, _, _) = pass.learn_anchors(1, h1, &a0).unwrap();
        let (a2, _, _) = pass.learn_anchors(1, h2, &a0).unwrap();
        let v1 = pass.tape.value(a1).clone();
        let v2 = pass.tape.value(a2).clone();
        for k in 0..v1.numel() {
            assert!(
                (v1.data()[k] - v2.data()[k]).abs() < 1e-6,
                "anchor coordinate drifted under permutation"
            );
        }
    }
    assert!(start.elapsed().as_secs() < 60, "exceeded 1-minute budget");
    println!("criterion 2 permutation invariance: PASS");
}

#[test]
fn criterion_3_transform_round_trips() {
    let dist = TransformDistribution {
        rot_x_half: std::f64::consts::PI,
        rot_y_half: std::f64::consts::PI,
        rot_z_half: std::f64::consts::PI,
        scale_min: 0.2,
        scale_max: 5.0,
        translation_max: 2.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..1000u64 {
        let t = sample_param_transform(&dist, seed).unwrap();
        let inv = invert_param_transform(&t).unwrap();
        let cloud = random_cloud(&mut rng, 4);
        let rt = apply_param_transform(&apply_param_transform(&cloud, &t).unwrap(), &inv).unwrap();
        for (a, b) in rt.points().iter().zip(cloud.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9, "round trip error at seed {seed}");
            }
        }
    }

    // The two-branch forward keeps its anchor sets aligned: applying t1 to
    // the original-pose anchors reproduces the augmented-branch anchors.
    let dims = ModelDims {
        n_classes: 3,
        m_anchors: 8,
        feat_dim: 16,
        hidden_dim: 16,
        attn_dim: 8,
        ..ModelDims::default()
    };
    let params = ModelParams::init(dims, 7);
    let cloud = generate_shape(ShapeKind::Torus, 48, 21).unwrap().cloud;
    let t1 = sample_param_transform(&dist, 17).unwrap();
    let t2 = NonParamTransform {
        kind: NonParamKind::DropRandom { keep_ratio: 0.9 },
        seed: 5,
    };
    let mut tape = Tape::new();
    let mut pass = ForwardPass::new(&mut tape, &params, false).unwrap();
    let out = forward_two_branch(&mut pass, &cloud, &t1, &t2, ForwardOptions::default()).unwrap();
    for (o, a) in out.anchors_orig.iter().zip(&out.anchors_aug) {
        let orig = tape.value(*o).to_points();
        let aug = tape.value(*a).to_points();
        for (po, pa) in orig.iter().zip(&aug) {
            let fwd = t1.apply_point(*po);
            for k in 0..3 {
                assert!((fwd[k] - pa[k]).abs() < 1e-9, "t1(A) != A~");
            }
        }
    }
    println!("criterion 3 transform round trips: PASS");
}

fn brute_chamfer(a: &[[f64; 3]], x: &[[f64; 3]]) -> f64 {
    let d2 = |p: [f64; 3], q: [f64; 3]| {
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
    };
    let min_to = |p: [f64; 3], set: &[[f64; 3]]| {
        set.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min)
    };
    a.iter().map(|&p| min_to(p, x)).sum::<f64>() / a.len() as f64
        + x.iter().map(|&p| min_to(p, a)).sum::<f64>() / x.len() as f64
}

fn brute_fps(cloud: &PointCloud, m: usize, start: usize) -> Vec<usize> {
    let d2 = |p: [f64; 3], q: [f64; 3]| {
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
    };
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best = (0usize, -1.0f64);
        for i in 0..cloud.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| d2(cloud.point(i), cloud.point(c)))
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        chosen.push(best.0);
    }
    chosen
}

#[test]
fn criterion_4_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200 {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=4.min(n));
        let a = random_cloud(&mut rng, m.max(1));
        let x = random_cloud(&mut rng, n);

        let got = chamfer_distance(&AnchorSet::new(a.points().to_vec()).unwrap(), &x);
        let want = brute_chamfer(a.points(), x.points());
        assert!((got - want).abs() <= 1e-12, "chamfer mismatch in case {case}");

        let start = rng.gen_range(0..n);
        let fps = farthest_point_sample(&x, m, start).unwrap();
        let oracle = brute_fps(&x, m, start);
        for (got, &want) in fps.anchors().iter().zip(&oracle) {
            assert_eq!(*got, x.point(want), "fps index mismatch in case {case}");
        }
    }
    println!("criterion 4 oracle equivalence: PASS");
}

fn small_benchmark(seed: u64) -> (Vec<ioodg::data::LabeledCloud>, Vec<ioodg::data::LabeledCloud>) {
    let config = BenchmarkConfig {
        classes: vec![ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus],
        train_per_class: 6,
        test_per_class: 3,
        points_per_cloud: 48,
        corruption: CorruptionSuite::default(),
    };
    build_benchmark(&config, seed).unwrap()
}

fn small_dims() -> ModelDims {
    ModelDims {
        n_layers: 2,
        feat_dim: 8,
        hidden_dim: 8,
        attn_dim: 4,
        m_anchors: 6,
        n_classes: 3,
        radius_sq: 0.25,
        leaky_slope: 0.2,
    }
}

#[test]
fn criterion_5_degenerate_augmentation_zeroing() {
    let (train, _) = small_benchmark(50);
    let config = TrainConfig {
        epochs: 5,
        batch_size: 6,
        dims: small_dims(),
        augment: TransformDistribution::identity(),
        drop_keep_ratio: 1.0,
        seed: 50,
        ..TrainConfig::default()
    };
    let mut state = TrainState::init(&config);
    for epoch in 0..5 {
        let stats = train_epoch(&mut state, &config, &train, epoch).unwrap();
        assert_eq!(
            stats.mean.local, 0.0,
            "local alignment loss nonzero at epoch {epoch}"
        );
        assert_eq!(
            stats.mean.global, 0.0,
            "global alignment loss nonzero at epoch {epoch}"
        );
        state.quantize_f32();
    }
    println!("criterion 5 degenerate-augmentation zeroing: PASS");
}

#[test]
fn criterion_6_normalization_sums() {
    let (train, _) = small_benchmark(60);
    let config = TrainConfig {
        epochs: 1,
        batch_size: 6,
        dims: small_dims(),
        seed: 60,
        ..TrainConfig::default()
    };
    let mut state = TrainState::init(&config);
    let stats = train_epoch(&mut state, &config, &train, 0).unwrap();
    assert!(
        stats.s_row_err < 1e-6,
        "selection row sums off by {}",
        stats.s_row_err
    );
    assert!(
        stats.attn_sum_err < 1e-6,
        "attention sums off by {}",
        stats.attn_sum_err
    );
    println!("criterion 6 selection and attention normalization: PASS");
}

#[test]
fn criterion_9_determinism_and_resume() {
    let (train, test) = small_benchmark(90);
    let config = TrainConfig {
        epochs: 4,
        batch_size: 6,
        dims: small_dims(),
        seed: 90,
        ..TrainConfig::default()
    };

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    fit(&config, &train, &test, a.path(), None).unwrap();
    fit(&config, &train, &test, b.path(), None).unwrap();
    let ma = std::fs::read(a.path().join("metrics.csv")).unwrap();
    assert_eq!(
        ma,
        std::fs::read(b.path().join("metrics.csv")).unwrap(),
        "identical runs produced different metrics"
    );

    // Interrupt at epoch 2, resume to 4: bit-exact against the straight run.
    let c = tempfile::tempdir().unwrap();
    let half = TrainConfig {
        epochs: 2,
        ..config.clone()
    };
    fit(&half, &train, &test, c.path(), None).unwrap();
    let ckpt = c.path().join("checkpoint.bin");
    fit(&config, &train, &test, c.path(), Some(&ckpt)).unwrap();
    assert_eq!(
        std::fs::read(a.path().join("checkpoint.bin")).unwrap(),
        std::fs::read(c.path().join("checkpoint.bin")).unwrap(),
        "resumed run diverged"
    );
    assert_eq!(
        ma,
        std::fs::read(c.path().join("metrics.csv")).unwrap(),
        "resumed metrics diverged"
    );
    println!("criterion 9 determinism and checkpointing: PASS");
}

#[test]
fn criterion_10_hyperparameter_fidelity() {
    let c = TrainConfig::default();
    assert_eq!(c.lr, 0.001);
    assert_eq!(c.weight_decay, 0.0001);
    assert_eq!(c.batch_size, 16);
    assert_eq!(c.weights, LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 });
    assert_eq!(c.dims.n_layers, 2);
    assert_eq!(c.epochs, 200);
    assert_eq!(c.lr_decay_every, 20);

    // An anchor count equal to the cloud size is accepted: init and one
    // forward at M=256.
    let dims = ModelDims {
        m_anchors: 256,
        ..ModelDims::default()
    };
    let params = ModelParams::init(dims, 0);
    let cloud = generate_shape(ShapeKind::Torus, 256, 1).unwrap().cloud;
    let t1 = sample_param_transform(&c.augment, 2).unwrap();
    let t2 = NonParamTransform {
        kind: NonParamKind::DropRandom { keep_ratio: 0.9 },
        seed: 3,
    };
    let mut tape = Tape::new();
    let mut pass = ForwardPass::new(&mut tape, &params, false).unwrap();
    forward_two_branch(&mut pass, &cloud, &t1, &t2, ForwardOptions::default())
        .expect("M=256 forward failed");
    println!("criterion 10 hyperparameter fidelity: PASS");
}

/// Shared full-scale benchmark for criteria 7 and 8.
fn convergence_config(seed: u64) -> (TrainConfig, BenchmarkConfig) {
    let benchmark = BenchmarkConfig::default(); // 400 train / 200 test, N=256
    let train = TrainConfig {
        epochs: 100,
        seed,
        ..TrainConfig::default()
    };
    (train, benchmark)
}

#[test]
#[ignore = "long-running; exercised via criterion 7/8 wrappers"]
fn criterion_7_training_convergence() {
    for seed in [0u64, 1, 2] {
        let (config, bench) = convergence_config(seed);
        let (train, test) = build_benchmark(&bench, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = fit(&config, &train, &test, dir.path(), None).unwrap();
        assert!(
            report.final_train_acc >= 0.95,
            "seed {seed}: train accuracy {:.4} < 0.95",
            report.final_train_acc
        );
    }
    println!("criterion 7 training convergence: PASS");
}

#[test]
#[ignore = "long-running; run explicitly"]
fn criterion_8_ablation_ordering() {
    // Full benchmark scale; a 60-epoch budget. Training accuracy saturates
    // much earlier, but the invariance terms keep improving OOD accuracy
    // past saturation and the ranking stabilizes in the 40-60 range.
    let bench = BenchmarkConfig::default();
    let modes = [
        Ablation::None,
        Ablation::NoAnchor,
        Ablation::NoLocal,
        Ablation::NoGlobal,
        Ablation::Baseline,
    ];
    let mut mean_acc = std::collections::BTreeMap::new();
    for mode in modes {
        let mut total = 0.0;
        for seed in [0u64, 1, 2] {
            let (train, test) = build_benchmark(&bench, seed).unwrap();
            let config = TrainConfig {
                epochs: 60,
                seed,
                ablation: mode,
                ..TrainConfig::default()
            };
            let dir = tempfile::tempdir().unwrap();
            let report = fit(&config, &train, &test, dir.path(), None).unwrap();
            total += report.final_test_acc;
        }
        mean_acc.insert(mode.name(), total / 3.0 * 100.0);
    }
    eprintln!("ablation matrix (mean OOD accuracy %): {mean_acc:?}");
    let full = mean_acc["none"];
    for mode in ["no_anchor", "no_local", "no_global"] {
        assert!(
            full >= mean_acc[mode] + 1.0,
            "full ({full:.1}) does not beat {mode} ({:.1}) by 1 point",
            mean_acc[mode]
        );
        assert!(
            mean_acc[mode] > mean_acc["baseline"],
            "{mode} ({:.1}) does not beat baseline ({:.1})",
            mean_acc[mode],
            mean_acc["baseline"]
        );
    }
    assert!(full > mean_acc["baseline"]);
    println!("criterion 8 ablation ordering: PASS");
}
