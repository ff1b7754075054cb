//! Browser demo: an RKD loss explorer, a triplet playground and a tiny
//! trainer that streams its loss curve.

use fever_core::data::{TrainingData, TripletDataset};
use fever_core::losses::{fec_triplet_loss, rkd_angle_loss, rkd_distance_loss, SimilarPair, TripletLossConfig};
use fever_core::eval::predict_pair;
use fever_core::models::{BlockSpec, FeverNet, ModelConfig};
use fever_core::ndgrad::{Array, Graph, Mode};
use fever_core::pipeline::{generate_suite, net_class_accuracy, net_triplet_accuracy, SyntheticSpec};
use fever_core::train::{TrainConfig, Trainer};
use fever_core::{FeverError, Result};
use wasm_bindgen::prelude::*;

fn js(e: FeverError) -> JsError {
    JsError::new(&e.to_string())
}

fn points(flat: &[f64], dim: usize) -> Result<Array<f64>> {
    if dim == 0 || flat.len() % dim != 0 {
        return Err(FeverError::InvalidArgument(format!(
            "{} values do not form points of dimension {dim}",
            flat.len()
        )));
    }
    Array::new(&[flat.len() / dim, dim], flat.to_vec())
}

/// `[distance loss, angle loss]` between two equally sized point sets.
pub fn rkd_pair(student: &[f64], teacher: &[f64], dim: usize) -> Result<[f64; 2]> {
    let s = points(student, dim)?;
    let t = points(teacher, dim)?;
    if s.shape() != t.shape() || s.rows() < 3 {
        return Err(FeverError::InvalidArgument("need two sets of at least 3 matching points".into()));
    }
    let mut g = Graph::<f64>::new(Mode::Eval);
    let z = g.input(s);
    let d = rkd_distance_loss(&mut g, z, &t)?;
    let a = rkd_angle_loss(&mut g, z, &t)?;
    Ok([g.value(d).data()[0], g.value(a).data()[0]])
}

/// `[loss, predicted pair code, d12, d13, d23]` for one triplet of points.
pub fn triplet_eval(flat: &[f64], dim: usize, pair_code: u32, margin: f64, normalize: bool) -> Result<[f64; 5]> {
    let p = points(flat, dim)?;
    if p.rows() != 3 {
        return Err(FeverError::InvalidArgument("a triplet has exactly 3 points".into()));
    }
    let pair = SimilarPair::from_code(pair_code)?;
    let cfg = TripletLossConfig {
        margin,
        normalize_embeddings: normalize,
    };
    let mut g = Graph::<f64>::new(Mode::Eval);
    let v = g.input(p.clone());
    let loss = fec_triplet_loss(&mut g, v, &[pair], &cfg)?;
    let row = |i: usize| &p.data()[i * dim..(i + 1) * dim];
    let d = |i: usize, j: usize| -> f64 { row(i).iter().zip(row(j)).map(|(a, b)| (a - b).powi(2)).sum() };
    Ok([
        g.value(loss).data()[0],
        predict_pair(row(0), row(1), row(2)).code() as f64,
        d(0, 1),
        d(0, 2),
        d(1, 2),
    ])
}

#[wasm_bindgen]
pub fn rkd_losses(student: &[f64], teacher: &[f64], dim: usize) -> std::result::Result<Vec<f64>, JsError> {
    rkd_pair(student, teacher, dim).map(|r| r.to_vec()).map_err(js)
}

#[wasm_bindgen]
pub fn triplet_loss(
    points: &[f64],
    dim: usize,
    pair_code: u32,
    margin: f64,
    normalize: bool,
) -> std::result::Result<Vec<f64>, JsError> {
    triplet_eval(points, dim, pair_code, margin, normalize)
        .map(|r| r.to_vec())
        .map_err(js)
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        image_shape: [3, 8, 8],
        n_triplets: 400,
        n_labeled: 256,
        n_unlabeled: 0,
        n_eval_triplets: 200,
        n_eval_labeled: 160,
        n_transfer_train: 14,
        n_transfer_test: 14,
        ..Default::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_shape: [3, 8, 8],
        backbone_blocks: vec![
            BlockSpec {
                out_channels: 8,
                stride: 2,
            },
            BlockSpec {
                out_channels: 16,
                stride: 2,
            },
        ],
        d_face: 16,
        ..ModelConfig::desk_teacher(16)
    }
}

/// A small teacher on 8x8 synthetic images, trained a few steps at a time.
#[wasm_bindgen]
pub struct TinyTrainer {
    trainer: Trainer<f32>,
    data: TrainingData,
    eval_triplets: TripletDataset,
    eval_labeled: fever_core::data::LabeledDataset,
}

impl TinyTrainer {
    pub fn build(seed: u64, alpha: f64, lr: f64) -> Result<Self> {
        let suite = generate_suite(&tiny_spec(), seed)?;
        let mut cfg = TrainConfig::desk_teacher();
        cfg.n_steps = Some(usize::MAX);
        cfg.seed = seed;
        cfg.weights.alpha = alpha;
        cfg.optim.lr = lr;
        let net = FeverNet::init(tiny_model(), seed)?;
        Ok(TinyTrainer {
            trainer: Trainer::teacher(cfg, &suite.train, net)?,
            data: suite.train,
            eval_triplets: suite.eval_triplets,
            eval_labeled: suite.eval_labeled,
        })
    }

    /// `[triplet loss, classification loss, total]` per step, flattened.
    pub fn run(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let m = self.trainer.step(&self.data)?;
            out.extend([m.l_fec, m.l_aff, m.total]);
        }
        Ok(out)
    }

    /// `[triplet accuracy, 8-class accuracy]` on held-out data.
    pub fn accuracy(&self) -> Result<[f64; 2]> {
        let net = self.trainer.net();
        Ok([
            net_triplet_accuracy(net, &self.eval_triplets)?,
            net_class_accuracy(net, &self.eval_labeled)?,
        ])
    }
}

#[wasm_bindgen]
impl TinyTrainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, alpha: f64, lr: f64) -> std::result::Result<TinyTrainer, JsError> {
        Self::build(seed, alpha, lr).map_err(js)
    }

    pub fn step(&mut self, n: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.run(n).map_err(js)
    }

    pub fn evaluate(&self) -> std::result::Result<Vec<f64>, JsError> {
        self.accuracy().map(|a| a.to_vec()).map_err(js)
    }

    pub fn steps_done(&self) -> usize {
        self.trainer.step_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRI: [f64; 6] = [0.0, 0.0, 1.0, 0.0, 0.0, 1.5];

    #[test]
    fn rkd_is_zero_for_a_rotated_rescaled_copy() {
        let (s, c) = 0.4f64.sin_cos();
        let t = [0.0, 0.0, 1.0, 0.2, -0.3, 1.1, 0.8, -0.9];
        let z: Vec<f64> = t.chunks(2).flat_map(|p| [3.0 * (c * p[0] - s * p[1]) + 1.0, 3.0 * (s * p[0] + c * p[1])]).collect();
        let [d, a] = rkd_pair(&z, &t, 2).unwrap();
        assert!(d.abs() < 1e-9 && a.abs() < 1e-9, "{d} {a}");
        let [d, _] = rkd_pair(&TRI, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn triplet_prediction_and_distances() {
        let r = triplet_eval(&TRI, 2, 12, 0.2, false).unwrap();
        assert_eq!(r[1], 12.0);
        assert_eq!((r[2], r[3], r[4]), (1.0, 2.25, 3.25));
        // d12 + m - d13 = -1.05 and d12 + m - d23 = -2.05 both clip to zero.
        assert_eq!(r[0], 0.0);
        let r = triplet_eval(&TRI, 2, 23, 0.2, false).unwrap();
        assert!((r[0] - ((3.25 + 0.2 - 1.0) + (3.25 + 0.2 - 2.25))).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs_are_errors() {
        assert!(triplet_eval(&TRI, 2, 14, 0.2, true).is_err());
        assert!(triplet_eval(&TRI[..4], 2, 12, 0.2, true).is_err());
        assert!(rkd_pair(&TRI, &TRI[..4], 2).is_err());
        assert!(rkd_pair(&TRI, &TRI, 4).is_err());
    }

    #[test]
    fn tiny_trainer_reduces_its_loss() {
        let mut t = TinyTrainer::build(0, 0.1, 0.01).unwrap();
        let log = t.run(60).unwrap();
        assert_eq!(log.len(), 180);
        let first: f64 = log.chunks(3).take(10).map(|c| c[2]).sum();
        let last: f64 = log.chunks(3).skip(50).map(|c| c[2]).sum();
        assert!(last < first, "{first} -> {last}");
        let [tri, cls] = t.accuracy().unwrap();
        assert!((0.0..=1.0).contains(&tri) && (0.0..=1.0).contains(&cls));
        assert_eq!(t.trainer.step_count(), 60);
    }
}
