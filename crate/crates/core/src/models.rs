//! Teacher and student networks.
//!
//! Both share one topology: a stack of conv-BN-ReLU blocks, a 1x1 conv-BN-ReLU
//! projection to `d_face` channels and global average pooling produce the
//! expression vector `e`. Dropout is applied once to `e` and the masked vector
//! feeds every linear head: a 32-d triplet embedding, 8 class logits and,
//! for students only, the distillation head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FeverError, Result};
use crate::ndgrad::{
    Array, BnBatchStats, BnRunning, Float, Graph, Mode, Padding, Var, BN_MOMENTUM,
};

/// Rows per chunk when running inference over large image sets.
const INFER_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub backbone_blocks: Vec<BlockSpec>,
    pub d_face: usize,
    pub dropout_rate: f64,
    pub fec_dim: usize,
    pub num_classes: usize,
    /// Width of the distillation head; present only for students.
    pub distill_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_teacher(32)
    }
}

impl ModelConfig {
    pub fn desk_backbone() -> Vec<BlockSpec> {
        [16, 32, 64, 64]
            .into_iter()
            .map(|c| BlockSpec {
                out_channels: c,
                stride: 2,
            })
            .collect()
    }

    pub fn desk_teacher(d_face: usize) -> Self {
        ModelConfig {
            input_shape: [3, 32, 32],
            backbone_blocks: Self::desk_backbone(),
            d_face,
            dropout_rate: 0.1,
            fec_dim: 32,
            num_classes: 8,
            distill_dim: None,
        }
    }

    pub fn desk_student(d_face: usize, distill_dim: usize) -> Self {
        ModelConfig {
            dropout_rate: 0.2,
            distill_dim: Some(distill_dim),
            ..Self::desk_teacher(d_face)
        }
    }

    pub fn is_student(&self) -> bool {
        self.distill_dim.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_face == 0 {
            return Err(FeverError::config("d_face", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(FeverError::config(
                "dropout_rate",
                format!("must be in [0, 1), got {}", self.dropout_rate),
            ));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(FeverError::config("input_shape", "dimensions must be > 0"));
        }
        if self.fec_dim == 0 || self.num_classes < 2 {
            return Err(FeverError::config("head_dims", "fec_dim > 0 and num_classes >= 2 required"));
        }
        if self.distill_dim == Some(0) {
            return Err(FeverError::config("distill_dim", "must be > 0 when present"));
        }
        for b in &self.backbone_blocks {
            if b.out_channels == 0 || b.stride == 0 {
                return Err(FeverError::config("backbone_blocks", "channels and stride must be > 0"));
            }
        }
        Ok(())
    }

    /// Number of trainable scalars:
    /// `sum_i(9 c_{i-1} c_i + 2 c_i) + (c_last d + 2 d) + sum_heads(h d + h)`.
    pub fn param_count(&self) -> usize {
        let mut c_in = self.input_shape[0];
        let mut total = 0;
        for b in &self.backbone_blocks {
            total += 9 * c_in * b.out_channels + 2 * b.out_channels;
            c_in = b.out_channels;
        }
        total += c_in * self.d_face + 2 * self.d_face;
        for h in self.head_widths() {
            total += h * self.d_face + h;
        }
        total
    }

    fn head_widths(&self) -> Vec<usize> {
        let mut v = vec![self.fec_dim, self.num_classes];
        v.extend(self.distill_dim);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Array<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffer<T> {
    pub name: String,
    pub stats: BnRunning<T>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Pooled `d_face` vector before dropout.
    pub e: Var,
    /// `e` after the single dropout mask shared by all heads.
    pub dropped: Var,
    pub v: Var,
    pub logits: Var,
    pub z: Option<Var>,
    /// One leaf per parameter, in [`FeverNet::params`] order.
    pub params: Vec<Var>,
}

/// Plain-array outputs of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutputs<T> {
    pub e: Array<T>,
    pub v: Array<T>,
    pub logits: Array<T>,
    pub z: Option<Array<T>>,
}

/// Teacher or student network; the two differ only by the distillation head.
#[derive(Clone, Debug, PartialEq)]
pub struct FeverNet<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    bn: Vec<BnBuffer<T>>,
}

pub type TeacherNet<T> = FeverNet<T>;
pub type StudentNet<T> = FeverNet<T>;

fn he<T: Float>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Array<T> {
    Array::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl<T: Float> FeverNet<T> {
    /// Deterministic initialisation from `(config, seed)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let mut c_in = config.input_shape[0];
        let mut push_bn = |params: &mut Vec<Param<T>>, prefix: &str, c: usize| {
            params.push(Param {
                name: format!("{prefix}.bn.gamma"),
                value: Array::ones(&[c]),
            });
            params.push(Param {
                name: format!("{prefix}.bn.beta"),
                value: Array::zeros(&[c]),
            });
            bn.push(BnBuffer {
                name: format!("{prefix}.bn"),
                stats: BnRunning::new(c),
            });
        };
        for (i, b) in config.backbone_blocks.iter().enumerate() {
            let prefix = format!("block{i}");
            params.push(Param {
                name: format!("{prefix}.conv.weight"),
                value: he(&[b.out_channels, c_in, 3, 3], 9 * c_in, &mut rng),
            });
            push_bn(&mut params, &prefix, b.out_channels);
            c_in = b.out_channels;
        }
        params.push(Param {
            name: "proj.conv.weight".into(),
            value: he(&[config.d_face, c_in, 1, 1], c_in, &mut rng),
        });
        push_bn(&mut params, "proj", config.d_face);
        let heads = [
            ("head_fec", Some(config.fec_dim)),
            ("head_cls", Some(config.num_classes)),
            ("head_distill", config.distill_dim),
        ];
        for (name, width) in heads {
            let Some(width) = width else { continue };
            params.push(Param {
                name: format!("{name}.weight"),
                value: he(&[width, config.d_face], config.d_face, &mut rng),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Array::zeros(&[width]),
            });
        }
        Ok(FeverNet { config, params, bn })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Array<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn bn_buffers(&self) -> &[BnBuffer<T>] {
        &self.bn
    }

    pub fn bn_buffers_mut(&mut self) -> &mut [BnBuffer<T>] {
        &mut self.bn
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameter names belonging to one head (`"head_fec"`, `"head_cls"`, `"head_distill"`).
    pub fn head_param_names(&self, head: &str) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&format!("{head}.")))
            .map(|p| p.name.clone())
            .collect()
    }

    /// FNV-1a over the bit patterns of all parameters and running statistics.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |a: &Array<T>| {
            for v in a.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        for p in &self.params {
            feed(&p.value);
        }
        for b in &self.bn {
            feed(&b.stats.mean);
            feed(&b.stats.var);
        }
        h
    }

    /// Records the forward pass on `g`. In train mode the returned batch
    /// statistics should be folded in with [`FeverNet::apply_bn_updates`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        rng: &mut R,
    ) -> Result<(ForwardVars, Vec<BnBatchStats<T>>)> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != self.config.input_shape[..] {
            let mut want = vec![0];
            want.extend(self.config.input_shape);
            return Err(FeverError::Shape {
                op: "forward",
                lhs: xs,
                rhs: want,
            });
        }
        let pv: Vec<Var> = self.params.iter().map(|p| g.param(p.value.clone())).collect();
        let mut stats = Vec::new();
        let mut h = x;
        let mut k = 0;
        let mut bn_idx = 0;
        let blocks = self
            .config
            .backbone_blocks
            .iter()
            .map(|b| (b.stride, Padding::Same))
            .chain(std::iter::once((1, Padding::Same)));
        for (stride, padding) in blocks {
            h = g.conv2d(h, pv[k], None, stride, padding)?;
            let (y, s) = g.batchnorm2d(h, pv[k + 1], pv[k + 2], &self.bn[bn_idx].stats)?;
            stats.extend(s);
            h = g.relu(y)?;
            k += 3;
            bn_idx += 1;
        }
        let e = g.global_avg_pool(h)?;
        let dropped = g.dropout(e, self.config.dropout_rate, rng)?;
        let v = g.linear(dropped, pv[k], pv[k + 1])?;
        let logits = g.linear(dropped, pv[k + 2], pv[k + 3])?;
        let z = match self.config.distill_dim {
            Some(_) => Some(g.linear(dropped, pv[k + 4], pv[k + 5])?),
            None => None,
        };
        Ok((
            ForwardVars {
                e,
                dropped,
                v,
                logits,
                z,
                params: pv,
            },
            stats,
        ))
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, stats: &[BnBatchStats<T>]) -> Result<()> {
        if stats.len() != self.bn.len() {
            return Err(FeverError::Invariant(format!(
                "expected {} batch-norm updates, got {}",
                self.bn.len(),
                stats.len()
            )));
        }
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (buf, s) in self.bn.iter_mut().zip(stats) {
            for (r, &b) in buf.stats.mean.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in buf.stats.var.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * b;
            }
        }
        Ok(())
    }

    /// Runs the network without recording gradients.
    ///
    /// Eval mode is processed in chunks and is a pure function of the
    /// parameters and `x`. Train mode runs one batch (dropout active, batch
    /// statistics) and leaves the running statistics untouched.
    pub fn infer<R: Rng + ?Sized>(&self, x: &Array<T>, mode: Mode, rng: &mut R) -> Result<NetOutputs<T>> {
        let n = x.rows();
        let chunk = if mode == Mode::Eval { INFER_CHUNK } else { n.max(1) };
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n || (n == 0 && parts.is_empty()) {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let xb = x.select_rows(&idx);
            let mut g = Graph::new(mode);
            let xv = g.input(xb);
            let (fv, _) = self.forward(&mut g, xv, rng)?;
            parts.push(NetOutputs {
                e: g.value(fv.e).clone(),
                v: g.value(fv.v).clone(),
                logits: g.value(fv.logits).clone(),
                z: fv.z.map(|z| g.value(z).clone()),
            });
            if n == 0 {
                break;
            }
            start = end;
        }
        let cat = |f: &dyn Fn(&NetOutputs<T>) -> &Array<T>| -> Result<Array<T>> {
            let refs: Vec<&Array<T>> = parts.iter().map(f).collect();
            Array::concat_rows(&refs)
        };
        Ok(NetOutputs {
            e: cat(&|o| &o.e)?,
            v: cat(&|o| &o.v)?,
            logits: cat(&|o| &o.logits)?,
            z: if self.config.is_student() {
                Some(cat(&|o| o.z.as_ref().expect("student output"))?)
            } else {
                None
            },
        })
    }

    /// Class predictions from the classification head in eval mode.
    pub fn predict_classes(&self, x: &Array<T>) -> Result<Vec<usize>> {
        let out = self.infer(x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        let k = self.config.num_classes;
        Ok(out
            .logits
            .data()
            .chunks(k)
            .map(|row| argmax(row))
            .collect())
    }
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher forward pass returning `(e, v, logits)` arrays.
pub fn teacher_forward<T: Float, R: Rng + ?Sized>(
    net: &FeverNet<T>,
    x: &Array<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<NetOutputs<T>> {
    let mut out = net.infer(x, mode, rng)?;
    out.z = None;
    Ok(out)
}

/// Student forward pass; errors if the network has no distillation head.
pub fn student_forward<T: Float, R: Rng + ?Sized>(
    net: &FeverNet<T>,
    x: &Array<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<NetOutputs<T>> {
    if !net.config().is_student() {
        return Err(FeverError::InvalidArgument(
            "student_forward needs a network with a distillation head".into(),
        ));
    }
    net.infer(x, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d_face: usize) -> ModelConfig {
        ModelConfig {
            input_shape: [3, 8, 8],
            backbone_blocks: vec![
                BlockSpec {
                    out_channels: 4,
                    stride: 2,
                },
                BlockSpec {
                    out_channels: 6,
                    stride: 2,
                },
            ],
            d_face,
            ..ModelConfig::desk_teacher(d_face)
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = FeverNet::<f32>::init(small(8), 1).unwrap();
        let b = FeverNet::<f32>::init(small(8), 1).unwrap();
        let c = FeverNet::<f32>::init(small(8), 2).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.params().iter().zip(b.params()).all(|(p, q)| p.value.bitwise_eq(&q.value)));
        assert!(a.params().iter().zip(c.params()).any(|(p, q)| !p.value.bitwise_eq(&q.value)));
    }

    #[test]
    fn bottleneck_and_head_shapes_follow_d_face() {
        for d in [256, 128] {
            let mut cfg = ModelConfig::desk_teacher(d);
            cfg.input_shape = [3, 8, 8];
            let net = FeverNet::<f32>::init(cfg, 0).unwrap();
            assert_eq!(net.param("proj.conv.weight").unwrap().shape(), &[d, 64, 1, 1]);
            assert_eq!(net.param("head_fec.weight").unwrap().shape(), &[32, d]);
            assert_eq!(net.param("head_cls.weight").unwrap().shape(), &[8, d]);
        }
    }

    #[test]
    fn param_count_formula_matches() {
        for cfg in [
            small(8),
            ModelConfig::desk_teacher(32),
            ModelConfig::desk_student(32, 80),
            ModelConfig::desk_teacher(256),
        ] {
            let net = FeverNet::<f32>::init(cfg.clone(), 3).unwrap();
            assert_eq!(net.num_params(), cfg.param_count());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small(8);
        cfg.dropout_rate = 1.0;
        assert!(FeverNet::<f32>::init(cfg, 0).is_err());
        let mut cfg = small(8);
        cfg.d_face = 0;
        assert!(FeverNet::<f32>::init(cfg, 0).is_err());
    }

    #[test]
    fn output_shapes_and_eval_determinism() {
        let net = FeverNet::<f64>::init(ModelConfig::desk_student(32, 80), 5).unwrap();
        let x = Array::uniform(&[5, 3, 32, 32], 0.0, 1.0, &mut rng(1));
        let a = student_forward(&net, &x, Mode::Eval, &mut rng(2)).unwrap();
        let b = student_forward(&net, &x, Mode::Eval, &mut rng(99)).unwrap();
        assert_eq!(a.e.shape(), &[5, 32]);
        assert_eq!(a.v.shape(), &[5, 32]);
        assert_eq!(a.logits.shape(), &[5, 8]);
        assert_eq!(a.z.as_ref().unwrap().shape(), &[5, 80]);
        assert!(a.z.as_ref().unwrap().bitwise_eq(b.z.as_ref().unwrap()));
        assert!(a.v.bitwise_eq(&b.v));
    }

    #[test]
    fn teacher_rejects_student_call_and_wrong_input() {
        let net = FeverNet::<f32>::init(small(8), 0).unwrap();
        let x = Array::zeros(&[2, 3, 8, 8]);
        assert!(student_forward(&net, &x, Mode::Eval, &mut rng(0)).is_err());
        let bad = Array::zeros(&[2, 3, 9, 8]);
        assert!(matches!(
            teacher_forward(&net, &bad, Mode::Eval, &mut rng(0)),
            Err(FeverError::Shape { op: "forward", .. })
        ));
    }

    #[test]
    fn zero_heads_on_zero_input_give_zero_outputs() {
        let mut net = FeverNet::<f32>::init(small(8), 0).unwrap();
        for head in ["head_fec", "head_cls"] {
            for name in net.head_param_names(head) {
                let p = net.param_mut(&name).unwrap();
                *p = Array::zeros(p.shape());
            }
        }
        let x = Array::zeros(&[3, 3, 8, 8]);
        let out = teacher_forward(&net, &x, Mode::Eval, &mut rng(0)).unwrap();
        assert!(out.v.data().iter().all(|&v| v == 0.0));
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_share_the_masked_vector() {
        let net = FeverNet::<f64>::init(ModelConfig::desk_student(16, 40), 0).unwrap();
        let x = Array::uniform(&[4, 3, 32, 32], 0.0, 1.0, &mut rng(1));
        let mut g = Graph::new(Mode::Train);
        let xv = g.input(x);
        let (fv, _) = net.forward(&mut g, xv, &mut rng(2)).unwrap();
        let dropped = g.value(fv.dropped).clone();
        assert!(dropped.data().iter().any(|&v| v == 0.0));
        for (head, out) in [("head_fec", fv.v), ("head_cls", fv.logits), ("head_distill", fv.z.unwrap())] {
            let w = g.input(net.param(&format!("{head}.weight")).unwrap().clone());
            let b = g.input(net.param(&format!("{head}.bias")).unwrap().clone());
            let d = g.input(dropped.clone());
            let y = g.linear(d, w, b).unwrap();
            assert!(g.value(y).bitwise_eq(g.value(out)), "{head}");
            // Ablating the shared vector zeroes the pre-bias output.
            let zero = g.input(Array::zeros(dropped.shape()));
            let y0 = g.matmul_t(zero, w, false, true).unwrap();
            assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let net = FeverNet::<f64>::init(small(8), 4).unwrap();
        let x = Array::uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng(7));
        let perm = [2, 0, 3, 1];
        let a = net.infer(&x, Mode::Eval, &mut rng(0)).unwrap();
        let b = net.infer(&x.select_rows(&perm), Mode::Eval, &mut rng(0)).unwrap();
        assert!(a.v.select_rows(&perm).max_abs_diff(&b.v) < 1e-12);
        assert!(a.logits.select_rows(&perm).max_abs_diff(&b.logits) < 1e-12);
    }

    #[test]
    fn student_dropout_rate_is_configured() {
        let cfg = ModelConfig::desk_student(256, 80);
        assert_eq!(cfg.dropout_rate, 0.2);
        assert_eq!(cfg.d_face, 256);
        let mut g = Graph::<f64>::new(Mode::Train);
        let e = g.input(Array::ones(&[64, 256]));
        let d = g.dropout(e, cfg.dropout_rate, &mut rng(3)).unwrap();
        let zeros = g.value(d).data().iter().filter(|&&v| v == 0.0).count() as f64;
        let n = (64 * 256) as f64;
        let sigma = (0.2 * 0.8 / n).sqrt();
        assert!((zeros / n - 0.2).abs() < 3.0 * sigma);
    }

    #[test]
    fn train_forward_reports_batch_stats_per_bn_layer() {
        let mut net = FeverNet::<f32>::init(small(8), 0).unwrap();
        let x = Array::uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng(0));
        let mut g = Graph::new(Mode::Train);
        let xv = g.input(x);
        let (_, stats) = net.forward(&mut g, xv, &mut rng(1)).unwrap();
        assert_eq!(stats.len(), net.bn_buffers().len());
        let before = net.checksum();
        net.apply_bn_updates(&stats).unwrap();
        assert_ne!(before, net.checksum());
    }
}
