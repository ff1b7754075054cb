//! End-to-end runs on synthetic data: suite generation, evaluation and the
//! four-row ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{
    ImageShape, LabeledDataset, Rendering, SyntheticWorld, TrainingData, TripletDataset, UnlabeledDataset,
};
use crate::distill::TeacherEnsemble;
use crate::error::{FeverError, Result};
use crate::eval::{
    accuracy, extract_features, fit_linear_probe, triplet_accuracy, FeatureHead, ProbeConfig, ProbeFit,
};
use crate::models::{FeverNet, ModelConfig};
use crate::ndgrad::{Float, Mode};
use crate::train::{StepMetrics, TrainConfig, Trainer};

/// Sizes and renderings of every synthetic set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_shape: ImageShape,
    pub num_classes: usize,
    pub noise_sigma: f64,
    /// Brightness range of the training rendering.
    pub brightness: f64,
    /// Coarse prototype grid; `None` draws prototypes per pixel.
    pub prototype_grid: Option<usize>,
    /// Identity-pattern amplitude of the training rendering.
    pub identity: f64,
    /// Rendering of the unlabeled and transfer sets.
    pub transfer: Rendering,
    pub n_triplets: usize,
    pub n_labeled: usize,
    /// Unlabeled images, rendered like the transfer sets.
    pub n_unlabeled: usize,
    pub n_eval_triplets: usize,
    pub n_eval_labeled: usize,
    pub n_transfer_train: usize,
    pub n_transfer_test: usize,
    /// The transfer sets use classes `0..transfer_classes`.
    pub transfer_classes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_shape: [3, 32, 32],
            num_classes: 8,
            noise_sigma: 0.1,
            brightness: 0.1,
            prototype_grid: None,
            identity: 0.0,
            transfer: Rendering::transfer(),
            n_triplets: 3200,
            n_labeled: 2000,
            n_unlabeled: 2000,
            n_eval_triplets: 1000,
            n_eval_labeled: 800,
            n_transfer_train: 700,
            n_transfer_test: 700,
            transfer_classes: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("n_triplets", self.n_triplets),
            ("n_labeled", self.n_labeled),
            ("n_eval_triplets", self.n_eval_triplets),
            ("n_eval_labeled", self.n_eval_labeled),
            ("n_transfer_train", self.n_transfer_train),
            ("n_transfer_test", self.n_transfer_test),
        ] {
            if v == 0 {
                return Err(FeverError::config(key, "must be > 0"));
            }
        }
        if !(2..=self.num_classes).contains(&self.transfer_classes) {
            return Err(FeverError::config(
                "transfer_classes",
                format!("must lie in 2..={}", self.num_classes),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(FeverError::config("noise_sigma", "must be a finite value >= 0"));
        }
        if self.image_shape.contains(&0) {
            return Err(FeverError::config("image_shape", "dimensions must be > 0"));
        }
        Ok(())
    }

    pub fn rendering(&self) -> Rendering {
        Rendering {
            brightness: self.brightness,
            identity: self.identity,
            ..Rendering::plain(self.noise_sigma)
        }
    }

    pub fn world(&self) -> Result<SyntheticWorld> {
        SyntheticWorld::new(self.image_shape, self.num_classes, self.rendering())?
            .with_prototype_grid(self.prototype_grid)
    }
}

/// Training streams plus held-out evaluation sets.
#[derive(Clone, Debug)]
pub struct SyntheticSuite {
    pub train: TrainingData,
    pub eval_triplets: TripletDataset,
    pub eval_labeled: LabeledDataset,
    pub transfer_train: LabeledDataset,
    pub transfer_test: LabeledDataset,
}

/// Every set gets its own seed derived from `seed`.
pub fn generate_suite(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticSuite> {
    spec.validate()?;
    let world = spec.world()?;
    let transfer = world.with_rendering(spec.transfer);
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    let unlabeled = if spec.n_unlabeled > 0 {
        transfer.unlabeled(spec.n_unlabeled, s(3))?
    } else {
        UnlabeledDataset::empty(spec.image_shape)
    };
    let classes: Vec<usize> = (0..spec.transfer_classes).collect();
    // Generate over all classes, then keep the transfer subset.
    let per_class = |n: usize| n.div_ceil(spec.transfer_classes) * spec.num_classes;
    let subset = |n: usize, k: u64| -> Result<LabeledDataset> {
        let all = transfer.labeled(per_class(n), s(k))?.filter_classes(&classes)?;
        let idx: Vec<usize> = (0..n.min(all.len())).collect();
        Ok(all.subset(&idx))
    };
    Ok(SyntheticSuite {
        train: TrainingData {
            triplets: world.triplets(spec.n_triplets, s(1))?,
            labeled: world.labeled(spec.n_labeled, s(2))?,
            unlabeled,
        },
        eval_triplets: world.triplets(spec.n_eval_triplets, s(4))?,
        eval_labeled: world.labeled(spec.n_eval_labeled, s(5))?,
        transfer_train: subset(spec.n_transfer_train, 6)?,
        transfer_test: subset(spec.n_transfer_test, 7)?,
    })
}

/// Eval-mode triplet accuracy of the triplet head.
pub fn net_triplet_accuracy<T: Float>(net: &FeverNet<T>, triplets: &TripletDataset) -> Result<f64> {
    let out = net.infer(
        &triplets.all_images().cast(),
        Mode::Eval,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )?;
    triplet_accuracy(&out.v, &triplets.pairs)
}

/// Eval-mode accuracy of the classification head.
pub fn net_class_accuracy<T: Float>(net: &FeverNet<T>, labeled: &LabeledDataset) -> Result<f64> {
    let pred = net.predict_classes(&labeled.all_images().cast())?;
    accuracy(&pred, &labeled.labels)
}

/// Fits the probe on `d_face` features of `train` and scores it on `test`.
pub fn probe_accuracy<T: Float>(
    net: &FeverNet<T>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &ProbeConfig,
) -> Result<(f64, ProbeFit)> {
    let ftr = extract_features(net, &train.all_images(), FeatureHead::Face, None)?;
    let fte = extract_features(net, &test.all_images(), FeatureHead::Face, None)?;
    let (probe, fit) = fit_linear_probe(&ftr.to_array(), &train.labels, train.num_classes, cfg)?;
    Ok((probe.accuracy(&fte.to_array(), &test.labels)?, fit))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Teacher,
    StudentNoDistill,
    DistilledNoUnlabeled,
    Distilled,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [
        AblationRow::Teacher,
        AblationRow::StudentNoDistill,
        AblationRow::DistilledNoUnlabeled,
        AblationRow::Distilled,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Teacher => "teacher",
            AblationRow::StudentNoDistill => "student, no distillation",
            AblationRow::DistilledNoUnlabeled => "distilled student, no unlabeled",
            AblationRow::Distilled => "distilled student",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub spec: SyntheticSpec,
    /// The first teacher is also the teacher row of the table.
    pub teachers: Vec<ModelConfig>,
    pub student: ModelConfig,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub probe: ProbeConfig,
    pub seeds: Vec<u64>,
}

/// Model-initialisation and training seed of teacher `i` under run seed `seed`.
pub fn teacher_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(100).wrapping_add(i as u64)
}

/// Model-initialisation and training seed of the student under run seed `seed`.
pub fn student_seed(seed: u64) -> u64 {
    seed.wrapping_mul(100).wrapping_add(50)
}

/// Step budget of each desk ablation run, half the desk schedule.
pub const DESK_ABLATION_STEPS: usize = 1000;

impl AblationConfig {
    pub fn desk() -> Self {
        let mut teacher_train = TrainConfig::desk_teacher();
        teacher_train.n_steps = Some(DESK_ABLATION_STEPS);
        let mut student_train = TrainConfig::desk_student();
        student_train.n_steps = Some(DESK_ABLATION_STEPS);
        AblationConfig {
            spec: SyntheticSpec::default(),
            teachers: vec![ModelConfig::desk_teacher(32), ModelConfig::desk_teacher(16)],
            student: ModelConfig::desk_student(32, 80),
            teacher_train,
            student_train,
            probe: ProbeConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seed: u64,
    pub probe_accuracy: f64,
    pub probe_converged: bool,
    pub triplet_accuracy: f64,
    pub class_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub results: Vec<AblationResult>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    fn column(&self, row: AblationRow, f: impl Fn(&AblationResult) -> f64) -> Vec<f64> {
        self.results.iter().filter(|r| r.row == row).map(f).collect()
    }

    pub fn median_probe(&self, row: AblationRow) -> f64 {
        median(self.column(row, |r| r.probe_accuracy))
    }

    pub fn median_triplet(&self, row: AblationRow) -> f64 {
        median(self.column(row, |r| r.triplet_accuracy))
    }

    pub fn median_class(&self, row: AblationRow) -> f64 {
        median(self.column(row, |r| r.class_accuracy))
    }

    /// One line per row with medians over seeds, in percent.
    pub fn to_text(&self) -> String {
        let seeds = self.results.iter().filter(|r| r.row == AblationRow::Teacher).count();
        let mut s = format!(
            "{:<34} {:>10} {:>10} {:>10}   (median of {seeds} seeds)\n",
            "model", "probe %", "triplet %", "class %"
        );
        for row in AblationRow::ALL {
            let _ = writeln!(
                s,
                "{:<34} {:>10.1} {:>10.1} {:>10.1}",
                row.label(),
                100.0 * self.median_probe(row),
                100.0 * self.median_triplet(row),
                100.0 * self.median_class(row)
            );
        }
        s
    }

    /// Per-seed results followed by one `median` line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,seed,probe_accuracy,probe_converged,triplet_accuracy,class_accuracy\n");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                serde_json::to_value(r.row).unwrap().as_str().unwrap(),
                r.seed,
                r.probe_accuracy,
                r.probe_converged,
                r.triplet_accuracy,
                r.class_accuracy
            );
        }
        for row in AblationRow::ALL {
            let _ = writeln!(
                s,
                "{},median,{},,{},{}",
                serde_json::to_value(row).unwrap().as_str().unwrap(),
                self.median_probe(row),
                self.median_triplet(row),
                self.median_class(row)
            );
        }
        s
    }
}

/// Progress events emitted while the ablation runs.
#[derive(Clone, Debug)]
pub enum AblationEvent<'a> {
    Started { seed: u64, what: String },
    Finished(&'a AblationResult),
}

fn evaluate<T: Float>(
    net: &FeverNet<T>,
    suite: &SyntheticSuite,
    probe: &ProbeConfig,
    row: AblationRow,
    seed: u64,
) -> Result<AblationResult> {
    let (probe_accuracy, fit) = probe_accuracy(net, &suite.transfer_train, &suite.transfer_test, probe)?;
    Ok(AblationResult {
        row,
        seed,
        probe_accuracy,
        probe_converged: fit.converged,
        triplet_accuracy: net_triplet_accuracy(net, &suite.eval_triplets)?,
        class_accuracy: net_class_accuracy(net, &suite.eval_labeled)?,
    })
}

fn train<T: Float>(trainer: &mut Trainer<T>, data: &TrainingData) -> Result<Vec<StepMetrics>> {
    trainer.run_to_end(data, |_| {})
}

/// Trains the teachers once per seed, then the three student variants from
/// one shared student initialisation, and probes every model.
pub fn run_ablation(cfg: &AblationConfig, mut on_event: impl FnMut(AblationEvent<'_>)) -> Result<AblationTable> {
    if cfg.teachers.is_empty() {
        return Err(FeverError::config("teachers", "at least one teacher is required"));
    }
    let mut table = AblationTable::default();
    for &seed in &cfg.seeds {
        let suite = generate_suite(&cfg.spec, seed)?;
        let mut teachers = Vec::new();
        for (i, mc) in cfg.teachers.iter().enumerate() {
            on_event(AblationEvent::Started {
                seed,
                what: format!("teacher {i}"),
            });
            let net = FeverNet::<f32>::init(mc.clone(), teacher_seed(seed, i))?;
            let mut tc = cfg.teacher_train.clone();
            tc.seed = teacher_seed(seed, i);
            let mut t = Trainer::teacher(tc, &suite.train, net)?;
            train(&mut t, &suite.train)?;
            teachers.push(t.into_net());
        }
        let r = evaluate(&teachers[0], &suite, &cfg.probe, AblationRow::Teacher, seed)?;
        on_event(AblationEvent::Finished(&r));
        table.results.push(r);
        let ensemble = TeacherEnsemble::new(teachers)?;
        let student0 = FeverNet::<f32>::init(cfg.student.clone(), student_seed(seed))?;
        for row in &AblationRow::ALL[1..] {
            on_event(AblationEvent::Started {
                seed,
                what: row.label().to_string(),
            });
            let mut sc = cfg.student_train.clone();
            sc.seed = student_seed(seed);
            if *row != AblationRow::Distilled {
                sc.batch.unlabeled = 0;
            }
            if *row == AblationRow::StudentNoDistill {
                sc.weights.lambda_dist = 0.0;
                sc.weights.lambda_angle = 0.0;
            }
            let mut t = Trainer::student(sc, &suite.train, student0.clone(), ensemble.clone())?;
            train(&mut t, &suite.train)?;
            let r = evaluate(t.net(), &suite, &cfg.probe, *row, seed)?;
            on_event(AblationEvent::Finished(&r));
            table.results.push(r);
        }
    }
    Ok(table)
}
