//! Frozen teacher ensembles and the targets a student distils from.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledBatch, TripletBatch, UnlabeledBatch};
use crate::error::{FeverError, Result};
use crate::models::TeacherNet;
use crate::ndgrad::{Array, Float, Mode, L2_EPS};

/// Teachers whose outputs are concatenated into the distillation target.
/// There is no mutable access: the ensemble is frozen once built.
#[derive(Clone, Debug)]
pub struct TeacherEnsemble<T> {
    teachers: Vec<TeacherNet<T>>,
}

impl<T: Float> TeacherEnsemble<T> {
    pub fn new(teachers: Vec<TeacherNet<T>>) -> Result<Self> {
        let first = teachers
            .first()
            .ok_or_else(|| FeverError::InvalidArgument("teacher ensemble is empty".into()))?;
        let shape = first.config().input_shape;
        if let Some(t) = teachers.iter().find(|t| t.config().input_shape != shape) {
            return Err(FeverError::InvalidArgument(format!(
                "teachers disagree on input shape: {:?} vs {:?}",
                shape,
                t.config().input_shape
            )));
        }
        Ok(TeacherEnsemble { teachers })
    }

    pub fn teachers(&self) -> &[TeacherNet<T>] {
        &self.teachers
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.teachers[0].config().input_shape
    }

    /// Width of the concatenated target.
    pub fn target_dim(&self) -> usize {
        self.teachers
            .iter()
            .map(|t| t.config().fec_dim + t.config().num_classes)
            .sum()
    }

    /// Column ranges of each normalised segment in target order.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut at = 0;
        for t in &self.teachers {
            for w in [t.config().fec_dim, t.config().num_classes] {
                out.push(at..at + w);
                at += w;
            }
        }
        out
    }

    /// Order-sensitive combination of the member checksums.
    pub fn checksum(&self) -> u64 {
        self.teachers
            .iter()
            .fold(0xcbf2_9ce4_8422_2325, |h, t| (h ^ t.checksum()).wrapping_mul(0x100_0000_01b3))
    }

    /// `[n, target_dim]`: per teacher, the normalised triplet embedding then
    /// the normalised logits, teachers in ensemble order. Teachers run in
    /// eval mode so the result depends only on parameters and `x`.
    pub fn build_distill_target(&self, x: &Array<T>) -> Result<Array<T>> {
        let shape = self.input_shape();
        if x.ndim() != 4 || x.shape()[1..] != shape {
            return Err(FeverError::Shape {
                op: "build_distill_target",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let n = x.rows();
        let dim = self.target_dim();
        let mut out = vec![T::zero(); n * dim];
        let mut col = 0;
        // Eval mode draws nothing from the rng.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in &self.teachers {
            let o = t.infer(x, Mode::Eval, &mut rng)?;
            for head in [&o.v, &o.logits] {
                let w = head.last_dim();
                for (i, row) in head.data().chunks(w).enumerate() {
                    let dst = &mut out[i * dim + col..i * dim + col + w];
                    normalize_into(row, dst);
                }
                col += w;
            }
        }
        Array::new(&[n, dim], out)
    }
}

/// Mirrors the graph's `l2_normalize` exactly, including its zero guard.
fn normalize_into<T: Float>(src: &[T], dst: &mut [T]) {
    let nrm = src.iter().map(|&v| v * v).sum::<T>().sqrt();
    if nrm > T::of(L2_EPS) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s / nrm;
        }
    } else {
        dst.iter_mut().for_each(|d| *d = T::zero());
    }
}

/// Row ranges of each stream inside an assembled crop batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropLayout {
    pub fec: Range<usize>,
    pub aff: Range<usize>,
    pub unl: Range<usize>,
}

impl CropLayout {
    pub fn total(&self) -> usize {
        self.unl.end
    }
}

/// Concatenates one step's crops in the fixed order: every triplet image
/// (three consecutive rows per triplet), then labeled, then unlabeled.
pub fn assemble_distill_batch(
    b_fec: &TripletBatch,
    b_aff: &LabeledBatch,
    b_unl: &UnlabeledBatch,
) -> Result<(Array<f32>, CropLayout)> {
    let nf = b_fec.images.rows();
    let na = b_aff.images.rows();
    let nu = b_unl.images.rows();
    let mut parts = vec![&b_fec.images, &b_aff.images];
    if nu > 0 {
        parts.push(&b_unl.images);
    }
    let x = Array::concat_rows(&parts)?;
    Ok((
        x,
        CropLayout {
            fec: 0..nf,
            aff: nf..nf + na,
            unl: nf + na..nf + na + nu,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BlockSpec, FeverNet, ModelConfig};
    use crate::losses::SimilarPair;
    use rand::seq::SliceRandom;

    fn tiny(d_face: usize) -> ModelConfig {
        ModelConfig {
            input_shape: [3, 8, 8],
            backbone_blocks: vec![BlockSpec {
                out_channels: 4,
                stride: 2,
            }],
            d_face,
            dropout_rate: 0.1,
            fec_dim: 32,
            num_classes: 8,
            distill_dim: None,
        }
    }

    fn batch(n: usize, seed: u64) -> Array<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::uniform(&[n, 3, 8, 8], 0.0, 1.0, &mut rng)
    }

    fn two_teacher_ensemble() -> TeacherEnsemble<f64> {
        TeacherEnsemble::new(vec![
            FeverNet::init(tiny(256), 1).unwrap(),
            FeverNet::init(tiny(128), 2).unwrap(),
        ])
        .unwrap()
    }

    fn assert_unit_segments(ens: &TeacherEnsemble<f64>, t: &Array<f64>) {
        let dim = ens.target_dim();
        for row in t.data().chunks(dim) {
            for seg in ens.segments() {
                let nrm = row[seg].iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(nrm == 0.0 || (nrm - 1.0).abs() <= 1e-5, "{nrm}");
            }
        }
    }

    #[test]
    fn two_teachers_give_eighty_dims() {
        let ens = two_teacher_ensemble();
        assert_eq!(ens.target_dim(), 80);
        let t = ens.build_distill_target(&batch(5, 0)).unwrap();
        assert_eq!(t.shape(), &[5, 80]);
        assert_unit_segments(&ens, &t);
        assert_eq!(ens.segments(), vec![0..32, 32..40, 40..72, 72..80]);
    }

    #[test]
    fn one_teacher_gives_forty_dims() {
        let ens = TeacherEnsemble::new(vec![FeverNet::init(tiny(16), 3).unwrap()]).unwrap();
        let t = ens.build_distill_target(&batch(4, 1)).unwrap();
        assert_eq!(t.shape(), &[4, 40]);
        assert_unit_segments(&ens, &t);
    }

    #[test]
    fn segments_follow_teacher_then_head_order() {
        let ens = two_teacher_ensemble();
        let x = batch(3, 2);
        let t = ens.build_distill_target(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = ens.teachers()[1].infer(&x, Mode::Eval, &mut rng).unwrap();
        for i in 0..3 {
            let logits = &o.logits.data()[i * 8..(i + 1) * 8];
            let nrm = logits.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..8 {
                assert!((t.data()[i * 80 + 72 + k] - logits[k] / nrm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_heads_give_zero_segments() {
        let mut net: FeverNet<f64> = FeverNet::init(tiny(16), 4).unwrap();
        for name in net.head_param_names("head_fec").into_iter().chain(net.head_param_names("head_cls")) {
            net.param_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ens = TeacherEnsemble::new(vec![net]).unwrap();
        let t = ens.build_distill_target(&batch(3, 5)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_is_bitwise_deterministic() {
        let ens = two_teacher_ensemble();
        let x = batch(6, 6);
        let a = ens.build_distill_target(&x).unwrap();
        let b = ens.build_distill_target(&x).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn shape_mismatch_and_empty_ensemble_rejected() {
        let ens = two_teacher_ensemble();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = Array::<f64>::uniform(&[2, 3, 8, 9], 0.0, 1.0, &mut rng);
        assert!(matches!(ens.build_distill_target(&bad), Err(FeverError::Shape { .. })));
        assert!(TeacherEnsemble::<f64>::new(vec![]).is_err());
        let mut other = tiny(8);
        other.input_shape = [1, 8, 8];
        let mixed = vec![FeverNet::<f64>::init(tiny(8), 0).unwrap(), FeverNet::init(other, 0).unwrap()];
        assert!(TeacherEnsemble::new(mixed).is_err());
    }

    fn crops(n: usize, fill: f32) -> Array<f32> {
        Array::full(&[n, 1, 1, 1], fill)
    }

    #[test]
    fn full_mix_assembles_140_crops() {
        let fec = TripletBatch {
            images: crops(108, 0.0),
            pairs: vec![SimilarPair::P12; 36],
        };
        let aff = LabeledBatch {
            images: crops(16, 1.0),
            labels: vec![0; 16],
        };
        let unl = UnlabeledBatch { images: crops(16, 2.0) };
        let (x, layout) = assemble_distill_batch(&fec, &aff, &unl).unwrap();
        assert_eq!(x.rows(), 140);
        assert_eq!(layout.total(), 140);
        assert_eq!(layout.aff, 108..124);
        assert_eq!(x.data()[107], 0.0);
        assert_eq!(x.data()[108], 1.0);
        assert_eq!(x.data()[124], 2.0);

        let none = UnlabeledBatch {
            images: Array::zeros(&[0, 1, 1, 1]),
        };
        let (x, layout) = assemble_distill_batch(&fec, &aff, &none).unwrap();
        assert_eq!(x.rows(), 124);
        assert!(layout.unl.is_empty());
    }

    #[test]
    fn permuting_inputs_permutes_target_rows() {
        let ens = two_teacher_ensemble();
        let x = batch(7, 7);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let t = ens.build_distill_target(&x).unwrap();
        let tp = ens.build_distill_target(&x.select_rows(&perm)).unwrap();
        assert!(tp.bitwise_eq(&t.select_rows(&perm)));
    }

    #[test]
    fn checksum_tracks_parameters_and_order() {
        let a: FeverNet<f64> = FeverNet::init(tiny(8), 1).unwrap();
        let b: FeverNet<f64> = FeverNet::init(tiny(8), 2).unwrap();
        let ab = TeacherEnsemble::new(vec![a.clone(), b.clone()]).unwrap();
        let ba = TeacherEnsemble::new(vec![b, a]).unwrap();
        assert_ne!(ab.checksum(), ba.checksum());
        assert_eq!(ab.checksum(), ab.clone().checksum());
    }
}
