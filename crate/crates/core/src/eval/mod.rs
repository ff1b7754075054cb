//! Triplet accuracy, feature extraction and the linear probe.

mod features;
mod probe;

pub use features::{FeatureFile, FEATURE_MAGIC};
pub use probe::{fit_linear_probe, fit_linear_probe_from, LinearProbe, ProbeConfig, ProbeFit};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FeverError, Result};
use crate::losses::SimilarPair;
use crate::models::FeverNet;
use crate::ndgrad::{Array, Float, Mode};

/// The pair with the smallest squared distance. Ties go to the earlier of
/// 12, 13, 23.
pub fn predict_pair<T: Float>(a: &[T], b: &[T], c: &[T]) -> SimilarPair {
    let d = |x: &[T], y: &[T]| -> f64 { x.iter().zip(y).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum() };
    let dist = [d(a, b), d(a, c), d(b, c)];
    let mut best = 0;
    for k in 1..3 {
        if dist[k] < dist[best] {
            best = k;
        }
    }
    SimilarPair::ALL[best]
}

/// Fraction of triplets whose annotated pair is the closest. `embeddings`
/// holds `3n` rows (three consecutive per triplet) or has shape `[n, 3, d]`.
pub fn triplet_accuracy<T: Float>(embeddings: &Array<T>, pairs: &[SimilarPair]) -> Result<f64> {
    let n = pairs.len();
    let ok_shape = match embeddings.shape() {
        [rows, _] => *rows == 3 * n,
        [rows, 3, _] => *rows == n,
        _ => false,
    };
    if n == 0 || !ok_shape {
        return Err(FeverError::Shape {
            op: "triplet_accuracy",
            lhs: embeddings.shape().to_vec(),
            rhs: vec![3 * n],
        });
    }
    let d = embeddings.last_dim();
    let data = embeddings.data();
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let hits = (0..n)
        .filter(|&t| predict_pair(row(3 * t), row(3 * t + 1), row(3 * t + 2)) == pairs[t])
        .count();
    Ok(hits as f64 / n as f64)
}

/// `w_c = N / (K * N_c)`, so that `sum_c N_c * w_c = N`.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(FeverError::Data(format!("label {l} out of range 0..{num_classes}")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(FeverError::Data(format!("class {c} has no samples")));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (num_classes as f64 * c as f64)).collect())
}

/// Which network output to extract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureHead {
    /// The shared `d_face` expression vector.
    Face,
    /// The triplet embedding.
    Fec,
}

/// Eval-mode features, one row per image in input order.
pub fn extract_features<T: Float>(
    net: &FeverNet<T>,
    images: &Array<f32>,
    head: FeatureHead,
    labels: Option<&[usize]>,
) -> Result<FeatureFile> {
    let out = net.infer(&images.cast(), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    let a = match head {
        FeatureHead::Face => &out.e,
        FeatureHead::Fec => &out.v,
    };
    let labels = labels.map(|l| l.iter().map(|&v| v as u32).collect());
    FeatureFile::from_array(a, labels)
}

/// Fraction of matching entries.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || labels.is_empty() {
        return Err(FeverError::InvalidArgument(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticWorld;
    use crate::models::ModelConfig;

    #[test]
    fn coincident_pair_is_predicted() {
        let e = Array::<f64>::from_f64(&[3, 2], &[0.0, 0.0, 0.0, 0.0, 5.0, 5.0]).unwrap();
        assert_eq!(triplet_accuracy(&e, &[SimilarPair::P12]).unwrap(), 1.0);
        assert_eq!(triplet_accuracy(&e, &[SimilarPair::P13]).unwrap(), 0.0);
    }

    #[test]
    fn identical_embeddings_tie_to_first_pair() {
        let v = [0.3f64, -1.0];
        assert_eq!(predict_pair(&v, &v, &v), SimilarPair::P12);
        // A tie between 13 and 23 resolves to 13.
        assert_eq!(predict_pair(&[0.0f64], &[2.0], &[1.0]), SimilarPair::P13);
    }

    #[test]
    fn random_embeddings_give_chance() {
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Array::<f64>::randn(&[n, 3, 8], 1.0, &mut rng);
        let pairs: Vec<SimilarPair> = (0..n).map(|i| SimilarPair::ALL[(i * 7 + i / 3) % 3]).collect();
        let acc = triplet_accuracy(&e, &pairs).unwrap();
        assert!((acc - 1.0 / 3.0).abs() <= 0.02, "{acc}");
    }

    #[test]
    fn invariant_to_rotation_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = Array::<f64>::randn(&[300, 2], 1.0, &mut rng);
        let pairs: Vec<SimilarPair> = (0..100).map(|i| SimilarPair::ALL[i % 3]).collect();
        let (s, c) = 0.7f64.sin_cos();
        let moved: Vec<f64> = e
            .data()
            .chunks(2)
            .flat_map(|p| [c * p[0] - s * p[1] + 3.0, s * p[0] + c * p[1] - 1.0])
            .collect();
        let moved = Array::new(&[300, 2], moved).unwrap();
        assert_eq!(triplet_accuracy(&e, &pairs).unwrap(), triplet_accuracy(&moved, &pairs).unwrap());
    }

    #[test]
    fn bad_shapes_rejected() {
        let e = Array::<f64>::zeros(&[4, 2]);
        assert!(triplet_accuracy(&e, &[SimilarPair::P12]).is_err());
        assert!(triplet_accuracy(&Array::<f64>::zeros(&[0, 2]), &[]).is_err());
    }

    #[test]
    fn class_weight_formula() {
        let w = class_weights(&[vec![0; 10], vec![1; 30]].concat(), 2).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-15 && (w[1] - 2.0 / 3.0).abs() < 1e-15);
        let w = class_weights(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
        let labels = [vec![0], vec![1], vec![2; 998]].concat();
        let w = class_weights(&labels, 3).unwrap();
        let expect = [1000.0 / 3.0, 1000.0 / 3.0, 1000.0 / 2994.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let total: f64 = [1.0, 1.0, 998.0].iter().zip(&w).map(|(n, w)| n * w).sum();
        assert!((total - 1000.0).abs() < 1e-9);
        assert!(class_weights(&[0, 0], 2).is_err());
    }

    #[test]
    fn extraction_counts_rows_and_is_deterministic() {
        let world = SyntheticWorld::new([3, 16, 16], 8, crate::data::Rendering::plain(0.1)).unwrap();
        let d = world.labeled(100, 0).unwrap();
        let mut cfg = ModelConfig::desk_teacher(32);
        cfg.input_shape = [3, 16, 16];
        let net = FeverNet::<f32>::init(cfg, 1).unwrap();
        let a = extract_features(&net, &d.all_images(), FeatureHead::Face, Some(&d.labels)).unwrap();
        assert_eq!((a.dims, a.count()), (32, 100));
        let b = extract_features(&net, &d.all_images(), FeatureHead::Face, Some(&d.labels)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let v = extract_features(&net, &d.all_images(), FeatureHead::Fec, None).unwrap();
        assert_eq!(v.dims, 32);
    }

    #[test]
    fn wide_student_features_are_256_wide() {
        let mut cfg = ModelConfig::desk_student(256, 80);
        cfg.input_shape = [3, 8, 8];
        let net = FeverNet::<f32>::init(cfg, 0).unwrap();
        let x = Array::<f32>::zeros(&[2, 3, 8, 8]);
        let f = extract_features(&net, &x, FeatureHead::Face, None).unwrap();
        assert_eq!(f.dims, 256);
    }
}
