//! Training objectives: triplet similarity, expression classification and
//! relational distillation (distance- and angle-wise), plus the weighted sums
//! used by the teacher and student phases.

use serde::{Deserialize, Serialize};

use crate::error::{FeverError, Result};
use crate::ndgrad::{Array, Float, Graph, Var};

/// Huber threshold shared by both relational losses.
pub const HUBER_DELTA: f64 = 1.0;

/// Which two images of a triplet were annotated as most similar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimilarPair {
    P12,
    P13,
    P23,
}

impl SimilarPair {
    /// Tie-break order used when predicting a pair.
    pub const ALL: [SimilarPair; 3] = [SimilarPair::P12, SimilarPair::P13, SimilarPair::P23];

    pub fn code(self) -> u32 {
        match self {
            SimilarPair::P12 => 12,
            SimilarPair::P13 => 13,
            SimilarPair::P23 => 23,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            12 => Ok(SimilarPair::P12),
            13 => Ok(SimilarPair::P13),
            23 => Ok(SimilarPair::P23),
            _ => Err(FeverError::InvalidArgument(format!(
                "invalid similar-pair code {code} (expected 12, 13 or 23)"
            ))),
        }
    }

    /// Zero-based positions `(a, b, c)`: `a`, `b` the similar pair, `c` the odd one out.
    pub fn positions(self) -> (usize, usize, usize) {
        match self {
            SimilarPair::P12 => (0, 1, 2),
            SimilarPair::P13 => (0, 2, 1),
            SimilarPair::P23 => (1, 2, 0),
        }
    }

    pub fn from_positions(i: usize, j: usize) -> Option<Self> {
        match (i.min(j), i.max(j)) {
            (0, 1) => Some(SimilarPair::P12),
            (0, 2) => Some(SimilarPair::P13),
            (1, 2) => Some(SimilarPair::P23),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the classification loss.
    pub alpha: f64,
    pub lambda_dist: f64,
    pub lambda_angle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            lambda_dist: 25.0,
            lambda_angle: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("alpha", self.alpha),
            ("lambda_dist", self.lambda_dist),
            ("lambda_angle", self.lambda_angle),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FeverError::config(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletLossConfig {
    pub margin: f64,
    /// L2-normalise embeddings before measuring squared distances.
    pub normalize_embeddings: bool,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        TripletLossConfig {
            margin: 0.2,
            normalize_embeddings: true,
        }
    }
}

/// Mean over triplets of `[d(a,b) + m - d(a,c)]+ + [d(a,b) + m - d(b,c)]+`.
///
/// `v` holds `3n` rows, three consecutive rows per triplet; `d` is the
/// squared Euclidean distance.
pub fn fec_triplet_loss<T: Float>(
    g: &mut Graph<T>,
    v: Var,
    pairs: &[SimilarPair],
    cfg: &TripletLossConfig,
) -> Result<Var> {
    let rows = g.value(v).rows();
    if g.value(v).ndim() != 2 || rows != 3 * pairs.len() || pairs.is_empty() {
        return Err(FeverError::Shape {
            op: "fec_triplet_loss",
            lhs: g.shape(v).to_vec(),
            rhs: vec![3 * pairs.len()],
        });
    }
    if cfg.margin <= 0.0 {
        return Err(FeverError::InvalidArgument("triplet margin must be positive".into()));
    }
    let v = if cfg.normalize_embeddings {
        g.l2_normalize(v)?
    } else {
        v
    };
    let mut ia = Vec::with_capacity(pairs.len());
    let mut ib = Vec::with_capacity(pairs.len());
    let mut ic = Vec::with_capacity(pairs.len());
    for (t, p) in pairs.iter().enumerate() {
        let (a, b, c) = p.positions();
        ia.push(3 * t + a);
        ib.push(3 * t + b);
        ic.push(3 * t + c);
    }
    let a = g.gather_rows(v, &ia)?;
    let b = g.gather_rows(v, &ib)?;
    let c = g.gather_rows(v, &ic)?;
    let d_ab = row_sq_dist(g, a, b)?;
    let d_ac = row_sq_dist(g, a, c)?;
    let d_bc = row_sq_dist(g, b, c)?;
    let base = g.add_scalar(d_ab, cfg.margin)?;
    let h1 = g.sub(base, d_ac)?;
    let h1 = g.relu(h1)?;
    let h2 = g.sub(base, d_bc)?;
    let h2 = g.relu(h2)?;
    let total = g.add(h1, h2)?;
    g.mean(total)
}

fn row_sq_dist<T: Float>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.sum_last_axis(sq)
}

/// Mean negative log-likelihood of the true class under a softmax.
pub fn cross_entropy_loss<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if g.value(logits).ndim() != 2 || g.shape(logits)[0] != labels.len() || labels.is_empty() {
        return Err(FeverError::Shape {
            op: "cross_entropy_loss",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let k = g.shape(logits)[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(FeverError::InvalidArgument(format!(
            "class label {bad} out of range [0, {k})"
        )));
    }
    let mut onehot = Array::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * k + y] = T::one();
    }
    let logp = g.log_softmax(logits)?;
    let mask = g.input(onehot);
    let picked = g.mul(logp, mask)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0 / labels.len() as f64)
}

/// Pairwise distances divided by their mean over distinct pairs.
fn normalized_distances<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let sq = g.pairwise_sq_dist(x)?;
    let d = g.sqrt(sq)?;
    let total = g.sum(d)?;
    let mu = g.scale(total, 1.0 / (n * (n - 1)) as f64)?;
    g.div_scalar(d, mu)
}

/// Cosines of the angle at each vertex: `out[j, i, k] = <e(j->i), e(j->k)>`.
fn vertex_cosines<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let diff = g.pairwise_diff(x)?;
    let unit = g.l2_normalize(diff)?;
    g.gram(unit)
}

fn check_relational<T: Float>(
    g: &Graph<T>,
    op: &'static str,
    z: Var,
    t: &Array<T>,
    min_batch: usize,
) -> Result<usize> {
    let zs = g.shape(z);
    if zs.len() != 2 || t.ndim() != 2 || zs[0] != t.shape()[0] {
        return Err(FeverError::Shape {
            op,
            lhs: zs.to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let n = zs[0];
    if n < min_batch {
        return Err(FeverError::InvalidArgument(format!(
            "{op} needs a batch of at least {min_batch}, got {n}"
        )));
    }
    Ok(n)
}

/// Distance-wise relational distillation: Huber mismatch between the
/// mean-normalised pairwise distances of `z` and of the target `t`,
/// averaged over pairs `i < j`.
pub fn rkd_distance_loss<T: Float>(g: &mut Graph<T>, z: Var, t: &Array<T>) -> Result<Var> {
    let n = check_relational(g, "rkd_distance_loss", z, t, 2)?;
    let zd = normalized_distances(g, z)?;
    let tv = g.input(t.clone());
    let td = normalized_distances(g, tv)?;
    let h = g.huber(zd, td, HUBER_DELTA)?;
    let mut mask = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            mask.data_mut()[i * n + j] = T::one();
        }
    }
    let mask = g.input(mask);
    let masked = g.mul(h, mask)?;
    let s = g.sum(masked)?;
    g.scale(s, 2.0 / (n * (n - 1)) as f64)
}

/// Angle-wise relational distillation: Huber mismatch between the cosines of
/// the angle at `j` formed with `i` and `k`, over ordered triples with
/// `i < k` and `j` distinct from both.
pub fn rkd_angle_loss<T: Float>(g: &mut Graph<T>, z: Var, t: &Array<T>) -> Result<Var> {
    let n = check_relational(g, "rkd_angle_loss", z, t, 3)?;
    let za = vertex_cosines(g, z)?;
    let tv = g.input(t.clone());
    let ta = vertex_cosines(g, tv)?;
    let h = g.huber(za, ta, HUBER_DELTA)?;
    let mut mask = Array::zeros(&[n, n, n]);
    for j in 0..n {
        for i in 0..n {
            for k in i + 1..n {
                if j != i && j != k {
                    mask.data_mut()[(j * n + i) * n + k] = T::one();
                }
            }
        }
    }
    let count = n * (n - 1) * (n - 2) / 2;
    let mask = g.input(mask);
    let masked = g.mul(h, mask)?;
    let s = g.sum(masked)?;
    g.scale(s, 1.0 / count as f64)
}

/// `L_fec + alpha * L_aff`.
pub fn teacher_total_loss(l_fec: f64, l_aff: f64, w: &LossWeights) -> f64 {
    l_fec + w.alpha * l_aff
}

/// `L_fec + alpha * L_aff + lambda_dist * L_rkd_d + lambda_angle * L_rkd_a`.
pub fn student_total_loss(l_fec: f64, l_aff: f64, l_rkd_d: f64, l_rkd_a: f64, w: &LossWeights) -> f64 {
    teacher_total_loss(l_fec, l_aff, w) + w.lambda_dist * l_rkd_d + w.lambda_angle * l_rkd_a
}

/// Graph form of [`teacher_total_loss`].
pub fn teacher_total<T: Float>(g: &mut Graph<T>, l_fec: Var, l_aff: Var, w: &LossWeights) -> Result<Var> {
    let aff = g.scale(l_aff, w.alpha)?;
    g.add(l_fec, aff)
}

/// Graph form of [`student_total_loss`].
pub fn student_total<T: Float>(
    g: &mut Graph<T>,
    l_fec: Var,
    l_aff: Var,
    l_rkd_d: Var,
    l_rkd_a: Var,
    w: &LossWeights,
) -> Result<Var> {
    let base = teacher_total(g, l_fec, l_aff, w)?;
    let d = g.scale(l_rkd_d, w.lambda_dist)?;
    let a = g.scale(l_rkd_a, w.lambda_angle)?;
    let base = g.add(base, d)?;
    g.add(base, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{finite_diff_check, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn eval<F>(f: F) -> f64
    where
        F: FnOnce(&mut Graph<f64>) -> Result<Var>,
    {
        let mut g = Graph::new(Mode::Eval);
        let out = f(&mut g).unwrap();
        g.value(out).item()
    }

    fn triplet(v: Array<f64>, pairs: &[SimilarPair], cfg: TripletLossConfig) -> f64 {
        eval(|g| {
            let x = g.input(v);
            fec_triplet_loss(g, x, pairs, &cfg)
        })
    }

    #[test]
    fn triplet_all_equal_is_two_margins() {
        let v = Array::full(&[3, 4], 0.5);
        let got = triplet(v, &[SimilarPair::P13], TripletLossConfig::default());
        assert!((got - 0.4).abs() < 1e-12);
    }

    #[test]
    fn triplet_satisfied_margins_give_zero() {
        // a = b, c at squared distance 1 from both.
        let v = Array::from_f64(&[3, 2], &[0., 0., 0., 0., 1., 0.]).unwrap();
        let cfg = TripletLossConfig {
            margin: 0.2,
            normalize_embeddings: false,
        };
        assert_eq!(triplet(v, &[SimilarPair::P12], cfg), 0.0);
    }

    #[test]
    fn triplet_rejects_bad_batch() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(Array::zeros(&[4, 2]));
        assert!(fec_triplet_loss(&mut g, x, &[SimilarPair::P12], &TripletLossConfig::default()).is_err());
    }

    #[test]
    fn similar_pair_codes_round_trip() {
        for p in SimilarPair::ALL {
            assert_eq!(SimilarPair::from_code(p.code()).unwrap(), p);
            let (a, b, _) = p.positions();
            assert_eq!(SimilarPair::from_positions(b, a), Some(p));
        }
        assert!(SimilarPair::from_code(14).is_err());
    }

    #[test]
    fn cross_entropy_anchors() {
        let uniform = eval(|g| {
            let x = g.input(Array::zeros(&[3, 8]));
            cross_entropy_loss(g, x, &[0, 4, 7])
        });
        assert!((uniform - 8f64.ln()).abs() < 1e-12);
        let saturated = eval(|g| {
            let mut a = Array::zeros(&[1, 8]);
            a.data_mut()[2] = 1000.0;
            let x = g.input(a);
            cross_entropy_loss(g, x, &[2])
        });
        assert!(saturated.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(Array::zeros(&[1, 8]));
        assert!(matches!(
            cross_entropy_loss(&mut g, x, &[8]),
            Err(FeverError::InvalidArgument(_))
        ));
    }

    #[test]
    fn rkd_distance_scale_and_single_pair_cases() {
        let t = Array::<f64>::randn(&[6, 5], 1.0, &mut rng(1));
        let z = t.map(|v| 3.7 * v);
        let got = eval(|g| {
            let zv = g.input(z);
            rkd_distance_loss(g, zv, &t)
        });
        assert!(got.abs() < 1e-12);

        let z2 = Array::<f64>::randn(&[2, 16], 1.0, &mut rng(2));
        let t2 = Array::<f64>::randn(&[2, 80], 1.0, &mut rng(3));
        let got = eval(|g| {
            let zv = g.input(z2);
            rkd_distance_loss(g, zv, &t2)
        });
        assert_eq!(got, 0.0);
    }

    #[test]
    fn rkd_distance_zero_spread_in_both_is_zero() {
        let z = Array::<f64>::full(&[4, 3], 1.0);
        let t = Array::<f64>::full(&[4, 7], -2.0);
        let got = eval(|g| {
            let zv = g.input(z);
            rkd_distance_loss(g, zv, &t)
        });
        assert_eq!(got, 0.0);
    }

    #[test]
    fn rkd_batch_size_errors() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let z = g.input(Array::zeros(&[1, 3]));
        assert!(rkd_distance_loss(&mut g, z, &Array::zeros(&[1, 3])).is_err());
        let z = g.input(Array::zeros(&[2, 3]));
        assert!(rkd_angle_loss(&mut g, z, &Array::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn rkd_angle_collinear_points() {
        let z = Array::from_f64(&[3, 2], &[0., 0., 1., 0., 2., 0.]).unwrap();
        let t = Array::from_f64(&[3, 3], &[0., 0., 0., 0., 0., 5., 0., 0., 10.]).unwrap();
        let got = eval(|g| {
            let zv = g.input(z);
            rkd_angle_loss(g, zv, &t)
        });
        assert!(got.abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert!((teacher_total_loss(1.0, 2.0, &w) - 1.2).abs() < 1e-15);
        let zero_alpha = LossWeights { alpha: 0.0, ..w };
        assert_eq!(teacher_total_loss(0.7, 3.0, &zero_alpha), 0.7);
        assert_eq!(student_total_loss(1.0, 1.0, 1.0, 1.0, &w), 76.1);
        assert_eq!(student_total_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        let no_rkd = LossWeights {
            lambda_dist: 0.0,
            lambda_angle: 0.0,
            ..w
        };
        assert_eq!(
            student_total_loss(0.3, 1.9, 4.0, 5.0, &no_rkd),
            teacher_total_loss(0.3, 1.9, &no_rkd)
        );
        assert_eq!(w.alpha, 0.1);
    }

    #[test]
    fn graph_totals_match_scalar_totals() {
        let w = LossWeights::default();
        let got = eval(|g| {
            let parts: Vec<Var> = [0.5, 1.5, 0.25, 0.125]
                .iter()
                .map(|&v| g.input(Array::scalar(v)))
                .collect();
            student_total(g, parts[0], parts[1], parts[2], parts[3], &w)
        });
        assert_eq!(got, student_total_loss(0.5, 1.5, 0.25, 0.125, &w));
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_angle: -1.0,
            ..LossWeights::default()
        };
        let err = w.validate().unwrap_err();
        assert!(err.to_string().contains("lambda_angle"));
    }

    #[test]
    fn losses_pass_gradient_check() {
        for seed in 0..3u64 {
            let t = Array::<f64>::randn(&[6, 10], 1.0, &mut rng(seed + 50));
            let x = Array::randn(&[6, 4], 1.0, &mut rng(seed));
            let err = finite_diff_check(|g, z| rkd_distance_loss(g, z, &t), &x, 1e-5).unwrap();
            assert!(err <= 1e-4, "distance {err}");
            let err = finite_diff_check(|g, z| rkd_angle_loss(g, z, &t), &x, 1e-5).unwrap();
            assert!(err <= 1e-4, "angle {err}");

            let labels: Vec<usize> = (0..5).map(|_| rng(seed).random_range(0..8)).collect();
            let logits = Array::randn(&[5, 8], 2.0, &mut rng(seed + 9));
            let err = finite_diff_check(|g, l| cross_entropy_loss(g, l, &labels), &logits, 1e-5).unwrap();
            assert!(err <= 1e-4, "ce {err}");
        }
    }
}
