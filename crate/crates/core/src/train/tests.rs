use super::*;
use crate::data::{SyntheticWorld, Rendering, UnlabeledDataset};
use crate::models::BlockSpec;

fn tiny_model(distill: Option<usize>) -> ModelConfig {
    ModelConfig {
        input_shape: [3, 8, 8],
        backbone_blocks: vec![
            BlockSpec {
                out_channels: 4,
                stride: 2,
            },
            BlockSpec {
                out_channels: 8,
                stride: 2,
            },
        ],
        d_face: 8,
        dropout_rate: 0.1,
        fec_dim: 32,
        num_classes: 8,
        distill_dim: distill,
    }
}

fn tiny_data(unlabeled: usize) -> TrainingData {
    let world = SyntheticWorld::new([3, 8, 8], 8, Rendering::plain(0.1)).unwrap();
    TrainingData {
        triplets: world.triplets(40, 1).unwrap(),
        labeled: world.labeled(32, 2).unwrap(),
        unlabeled: if unlabeled > 0 {
            world.unlabeled(unlabeled, 3).unwrap()
        } else {
            UnlabeledDataset::empty([3, 8, 8])
        },
    }
}

fn tiny_cfg(unlabeled: usize) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch: BatchSizes {
            triplets: 4,
            labeled: 4,
            unlabeled,
        },
        seed: 11,
        ..TrainConfig::desk_teacher()
    }
}

fn ensemble() -> TeacherEnsemble<f64> {
    TeacherEnsemble::new(vec![
        FeverNet::init(tiny_model(None), 21).unwrap(),
        FeverNet::init(tiny_model(None), 22).unwrap(),
    ])
    .unwrap()
}

fn totals(log: &[StepMetrics]) -> Vec<u64> {
    log.iter().map(|m| m.total.to_bits()).collect()
}

#[test]
fn epochs_define_total_steps() {
    let data = tiny_data(0);
    let t = Trainer::teacher(tiny_cfg(0), &data, FeverNet::<f64>::init(tiny_model(None), 0).unwrap()).unwrap();
    assert_eq!(t.steps_per_epoch(), 10);
    assert_eq!(t.total_steps(), 20);
    let mut cfg = tiny_cfg(0);
    cfg.n_steps = Some(7);
    let t = Trainer::teacher(cfg, &data, FeverNet::<f64>::init(tiny_model(None), 0).unwrap()).unwrap();
    assert_eq!(t.total_steps(), 7);
}

#[test]
fn fixed_seed_runs_are_bitwise_identical() {
    let data = tiny_data(0);
    let run = || {
        let net = FeverNet::<f32>::init(tiny_model(None), 5).unwrap();
        let mut cfg = tiny_cfg(0);
        cfg.n_steps = Some(12);
        train_teacher(cfg, &data, net).unwrap()
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(totals(&la), totals(&lb));
    assert_eq!(a.checksum(), b.checksum());
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let data = tiny_data(8);
    let mut cfg = tiny_cfg(4);
    cfg.n_steps = Some(5);
    let mut t = Trainer::student(cfg, &data, FeverNet::<f32>::init(tiny_model(Some(80)), 1).unwrap(), ensemble_f32()).unwrap();
    let w = LossWeights::default();
    for m in t.run_to_end(&data, |_| {}).unwrap() {
        let sum = crate::losses::student_total_loss(m.l_fec, m.l_aff, m.l_rkd_d, m.l_rkd_a, &w);
        assert!((m.total - sum).abs() <= 1e-6 * sum.abs().max(1.0), "{m:?}");
        assert!(m.l_rkd_d > 0.0 && m.l_rkd_a > 0.0);
    }
}

fn ensemble_f32() -> TeacherEnsemble<f32> {
    TeacherEnsemble::new(vec![
        FeverNet::init(tiny_model(None), 21).unwrap(),
        FeverNet::init(tiny_model(None), 22).unwrap(),
    ])
    .unwrap()
}

#[test]
fn zero_alpha_leaves_classifier_head_untouched() {
    let data = tiny_data(0);
    let mut cfg = tiny_cfg(0);
    cfg.weights.alpha = 0.0;
    cfg.n_steps = Some(30);
    let net = FeverNet::<f32>::init(tiny_model(None), 3).unwrap();
    let before = net.clone();
    let (after, _) = train_teacher(cfg, &data, net).unwrap();
    for name in before.head_param_names("head_cls") {
        assert!(before.param(&name).unwrap().bitwise_eq(after.param(&name).unwrap()), "{name}");
    }
    assert!(!before.param("head_fec.weight").unwrap().bitwise_eq(after.param("head_fec.weight").unwrap()));
}

#[test]
fn undistilled_student_matches_teacher_trajectory() {
    let data = tiny_data(0);
    let mut cfg = tiny_cfg(0);
    cfg.weights.lambda_dist = 0.0;
    cfg.weights.lambda_angle = 0.0;
    cfg.n_steps = Some(15);
    let net = FeverNet::<f64>::init(tiny_model(Some(80)), 9).unwrap();
    let (tn, tl) = train_teacher(cfg.clone(), &data, net.clone()).unwrap();
    let (sn, sl) = train_student(cfg, &data, ensemble(), net).unwrap();
    assert_eq!(totals(&tl), totals(&sl));
    for (a, b) in tn.params().iter().zip(sn.params()) {
        if !a.name.starts_with("head_distill") {
            assert!(a.value.bitwise_eq(&b.value), "{}", a.name);
        }
    }
}

#[test]
fn student_without_unlabeled_stream_runs() {
    let data = tiny_data(0);
    let mut cfg = tiny_cfg(0);
    cfg.n_steps = Some(3);
    let (_, log) = train_student(cfg, &data, ensemble(), FeverNet::init(tiny_model(Some(80)), 1).unwrap()).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|m| m.l_rkd_d > 0.0));
}

#[test]
fn student_training_leaves_ensemble_intact() {
    let data = tiny_data(8);
    let ens = ensemble();
    let before = ens.checksum();
    let mut cfg = tiny_cfg(4);
    cfg.n_steps = Some(6);
    let mut t = Trainer::student(cfg, &data, FeverNet::init(tiny_model(Some(80)), 1).unwrap(), ens).unwrap();
    t.run_to_end(&data, |_| {}).unwrap();
    assert_eq!(t.ensemble().unwrap().checksum(), before);
    t.verify_ensemble().unwrap();
}

#[test]
fn student_head_must_match_target_width() {
    let data = tiny_data(8);
    let err = Trainer::student(tiny_cfg(4), &data, FeverNet::init(tiny_model(Some(40)), 1).unwrap(), ensemble());
    assert!(matches!(err, Err(FeverError::Config { key, .. }) if key == "distill_dim"));
}

#[test]
fn teacher_rejects_unlabeled_batches() {
    let data = tiny_data(8);
    let err = Trainer::teacher(tiny_cfg(4), &data, FeverNet::<f64>::init(tiny_model(None), 1).unwrap());
    assert!(matches!(err, Err(FeverError::Config { .. })));
}

#[test]
fn loss_trends_down_on_tiny_problem() {
    let data = tiny_data(0);
    let mut cfg = tiny_cfg(0);
    cfg.n_steps = Some(200);
    let (_, log) = train_teacher(cfg, &data, FeverNet::<f32>::init(tiny_model(None), 2).unwrap()).unwrap();
    let mean = |s: &[StepMetrics]| s.iter().map(|m| m.total).sum::<f64>() / s.len() as f64;
    assert!(mean(&log[180..]) < mean(&log[..20]), "{} vs {}", mean(&log[180..]), mean(&log[..20]));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(8);
    let mut cfg = tiny_cfg(4);
    cfg.n_steps = Some(25);
    let fresh = || Trainer::student(cfg.clone(), &data, FeverNet::<f32>::init(tiny_model(Some(80)), 4).unwrap(), ensemble_f32()).unwrap();

    let mut full = fresh();
    let whole = full.run(&data, 25, |_| {}).unwrap();

    let mut part = fresh();
    part.run(&data, 15, |_| {}).unwrap();
    let path = tmp.path().join("s.fevr");
    part.save(&path).unwrap();
    drop(part);
    let mut resumed = Trainer::<f32>::load(&path, &data, Some(ensemble_f32())).unwrap();
    assert_eq!(resumed.step_count(), 15);
    let rest = resumed.run_to_end(&data, |_| {}).unwrap();
    assert_eq!(rest.len(), 10);
    assert_eq!(totals(&rest), totals(&whole[15..]));
    assert_eq!(resumed.net().checksum(), full.net().checksum());
}

#[test]
fn resume_across_epoch_boundary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(0);
    let cfg = tiny_cfg(0);
    let mut full = Trainer::teacher(cfg.clone(), &data, FeverNet::<f64>::init(tiny_model(None), 4).unwrap()).unwrap();
    let whole = full.run(&data, 20, |_| {}).unwrap();
    let mut part = Trainer::teacher(cfg, &data, FeverNet::<f64>::init(tiny_model(None), 4).unwrap()).unwrap();
    part.run(&data, 9, |_| {}).unwrap();
    let path = tmp.path().join("t.fevr");
    part.save(&path).unwrap();
    let mut resumed = Trainer::<f64>::load(&path, &data, None).unwrap();
    let rest = resumed.run(&data, 11, |_| {}).unwrap();
    assert_eq!(totals(&rest), totals(&whole[9..]));
    assert_eq!(resumed.epoch(), full.epoch());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(0);
    let mut cfg = tiny_cfg(0);
    cfg.n_steps = Some(3);
    let (net, _) = train_teacher(cfg, &data, FeverNet::<f32>::init(tiny_model(None), 6).unwrap()).unwrap();
    let path = tmp.path().join("net.fevr");
    save_net(&net, Role::Teacher, &path).unwrap();
    let back = load_net::<f32>(&path).unwrap();
    for (a, b) in net.params().iter().zip(back.params()) {
        assert!(a.value.bitwise_eq(&b.value), "{}", a.name);
    }
    assert_eq!(net.checksum(), back.checksum());
    assert!(load_net::<f64>(&path).is_err());
    assert!(Trainer::<f32>::load(&path, &data, None).is_err());
}

#[test]
fn checkpoint_shape_mismatch_rejected() {
    let net = FeverNet::<f32>::init(tiny_model(None), 6).unwrap();
    let mut ckpt = CheckpointFile {
        config: serde_json::json!({
            "role": "teacher",
            "dtype": "f32",
            "model": tiny_model(None),
            "train": null,
            "step": 0,
            "sampler_epoch": 0,
            "ensemble_checksum": null,
        }),
        arrays: net_arrays(&net),
    };
    assert!(net_from_checkpoint::<f32>(&ckpt).is_ok());
    ckpt.arrays[0] = NamedArray::float("param/block0.conv.weight", &Array::<f32>::zeros(&[4, 3, 3, 2]));
    assert!(matches!(net_from_checkpoint::<f32>(&ckpt), Err(FeverError::Checkpoint(_))));
}

#[test]
fn metrics_jsonl_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let m = vec![
        StepMetrics {
            step: 1,
            l_fec: 0.4,
            l_aff: 2.0794415416798357,
            l_rkd_d: 0.0,
            l_rkd_a: 0.0,
            total: 0.6079441541679836,
        };
        3
    ];
    let p = tmp.path().join("m.jsonl");
    write_metrics(&p, &m).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("{\"step\":1,\"l_fec\":0.4,"));
    assert_eq!(read_metrics(&p).unwrap(), m);
}

#[test]
fn invalid_config_names_key() {
    let mut cfg = tiny_cfg(0);
    cfg.optim.momentum = 1.5;
    assert!(matches!(cfg.validate(), Err(FeverError::Config { key, .. }) if key == "momentum"));
    let mut cfg = tiny_cfg(0);
    cfg.n_steps = Some(0);
    assert!(matches!(cfg.validate(), Err(FeverError::Config { key, .. }) if key == "n_steps"));
}
