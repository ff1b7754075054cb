use fever_web::{rkd_pair, triplet_eval, TinyTrainer};

#[test]
fn rkd_pair_matches_the_teacher_only_up_to_noise() {
    let t = [0.1, 0.9, -0.7, 0.3, 0.5, -0.5, -0.2, -0.8, 0.9, 0.2];
    let [d, a] = rkd_pair(&t, &t, 2).unwrap();
    assert_eq!((d, a), (0.0, 0.0));
    let z: Vec<f64> = t.iter().enumerate().map(|(i, v)| v + if i == 3 { 0.6 } else { 0.0 }).collect();
    let [d, a] = rkd_pair(&z, &t, 2).unwrap();
    assert!(d > 0.0 && a > 0.0);
}

#[test]
fn normalising_changes_the_loss_but_not_the_reported_distances() {
    let p = [2.0, 0.0, 0.0, 3.0, 0.0, 0.0, -4.0, 0.0, 0.0];
    let raw = triplet_eval(&p, 3, 13, 0.2, false).unwrap();
    let unit = triplet_eval(&p, 3, 13, 0.2, true).unwrap();
    assert_eq!(raw[2..], [1.0, 36.0, 49.0]);
    assert_eq!(raw[2..], unit[2..]);
    assert_eq!((raw[1], unit[1]), (12.0, 12.0));
    // Raw distances: 36.2 - 1 = 35.2, and 36.2 - 49 clips to 0.
    // Unit rows 1, 2 coincide and row 3 is antipodal: 4.2 - 0 and 4.2 - 4 -> 4.4.
    assert!((raw[0] - 35.2).abs() < 1e-12, "{}", raw[0]);
    assert!((unit[0] - 4.4).abs() < 1e-12, "{}", unit[0]);
}

#[test]
fn tiny_trainer_is_seed_deterministic() {
    let mut a = TinyTrainer::build(3, 0.1, 0.01).unwrap();
    let mut b = TinyTrainer::build(3, 0.1, 0.01).unwrap();
    let la = a.run(5).unwrap();
    let lb = b.run(5).unwrap();
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.accuracy().unwrap(), b.accuracy().unwrap());
}
