//! Run configuration in TOML.
//!
//! Every key is optional; a missing key takes its documented default, so an
//! empty file is a valid configuration. Unknown keys, type mismatches and
//! constraint violations are rejected with the offending key named as
//! `section.key`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{BatchSizes, Rendering};
use crate::error::{FeverError, Result};
use crate::eval::ProbeConfig;
use crate::losses::{LossWeights, TripletLossConfig};
use crate::models::{BlockSpec, ModelConfig};
use crate::pipeline::{AblationConfig, SyntheticSpec, DESK_ABLATION_STEPS};
use crate::train::{OptimConfig, TrainConfig};

/// File name of the resolved-config echo written into the output directory.
pub const CONFIG_ECHO: &str = "resolved_config.toml";

/// Backbone and head widths shared by teachers and student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_shape: [usize; 3],
    /// Output channels of each conv-BN-ReLU block.
    pub channels: Vec<usize>,
    pub stride: usize,
    pub fec_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::desk_teacher(32);
        ModelSection {
            input_shape: t.input_shape,
            channels: t.backbone_blocks.iter().map(|b| b.out_channels).collect(),
            stride: 2,
            fec_dim: t.fec_dim,
            num_classes: t.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    /// One entry per teacher.
    pub d_face: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            d_face: vec![32, 16],
            dropout_rate: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub d_face: usize,
    pub dropout_rate: f64,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            d_face: 32,
            dropout_rate: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub lambda_dist: f64,
    pub lambda_angle: f64,
    pub margin: f64,
    pub normalize_embeddings: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let t = TripletLossConfig::default();
        LossSection {
            alpha: w.alpha,
            lambda_dist: w.lambda_dist,
            lambda_angle: w.lambda_angle,
            margin: t.margin,
            normalize_embeddings: t.normalize_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    /// Overrides `epochs` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    pub batch_triplets: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub drop_last: bool,
}

impl TrainSection {
    fn from_train(t: &TrainConfig) -> Self {
        TrainSection {
            epochs: t.epochs,
            n_steps: t.n_steps,
            batch_triplets: t.batch.triplets,
            batch_labeled: t.batch.labeled,
            batch_unlabeled: t.batch.unlabeled,
            drop_last: t.drop_last,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from_train(&TrainConfig::full_teacher())
    }
}

/// Manifest paths, relative to the config file, and synthetic-data settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplets: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labeled: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unlabeled: Option<PathBuf>,
    pub noise_sigma: f64,
    pub brightness: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototype_grid: Option<usize>,
    pub identity: f64,
    pub n_triplets: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_eval_triplets: usize,
    pub n_eval_labeled: usize,
    pub n_transfer_train: usize,
    pub n_transfer_test: usize,
    pub transfer_classes: usize,
    pub transfer_noise_sigma: f64,
    pub transfer_brightness: f64,
    pub transfer_contrast_min: f64,
    pub transfer_max_shift: usize,
    pub transfer_identity: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataSection {
            triplets: None,
            labeled: None,
            unlabeled: None,
            noise_sigma: s.noise_sigma,
            brightness: Rendering::plain(0.0).brightness,
            prototype_grid: s.prototype_grid,
            identity: s.identity,
            n_triplets: s.n_triplets,
            n_labeled: s.n_labeled,
            n_unlabeled: s.n_unlabeled,
            n_eval_triplets: s.n_eval_triplets,
            n_eval_labeled: s.n_eval_labeled,
            n_transfer_train: s.n_transfer_train,
            n_transfer_test: s.n_transfer_test,
            transfer_classes: s.transfer_classes,
            transfer_noise_sigma: s.transfer.noise_sigma,
            transfer_brightness: s.transfer.brightness,
            transfer_contrast_min: s.transfer.contrast_min,
            transfer_max_shift: s.transfer.max_shift,
            transfer_identity: s.transfer.identity,
        }
    }
}

/// Step budget and batch sizes of the ablation runs. Everything else comes
/// from the other sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub n_steps: usize,
    pub teacher_batch_triplets: usize,
    pub teacher_batch_labeled: usize,
    pub student_batch_triplets: usize,
    pub student_batch_labeled: usize,
    pub student_batch_unlabeled: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        let (t, s) = (TrainConfig::desk_teacher().batch, TrainConfig::desk_student().batch);
        AblationSection {
            seeds: vec![0, 1, 2],
            n_steps: DESK_ABLATION_STEPS,
            teacher_batch_triplets: t.triplets,
            teacher_batch_labeled: t.labeled,
            student_batch_triplets: s.triplets,
            student_batch_labeled: s.labeled,
            student_batch_unlabeled: s.unlabeled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub optim: OptimConfig,
    pub loss: LossSection,
    pub teacher_train: TrainSection,
    pub student_train: TrainSection,
    pub probe: ProbeConfig,
    pub data: DataSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            model: ModelSection::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            optim: OptimConfig::default(),
            loss: LossSection::default(),
            teacher_train: TrainSection::default(),
            student_train: TrainSection::from_train(&TrainConfig::full_student()),
            probe: ProbeConfig::default(),
            data: DataSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

/// Keys that have no default value and so are absent from the serialized
/// defaults, with a sample value of the expected type.
fn optional_keys() -> [(&'static str, &'static str, Value); 6] {
    [
        ("teacher_train", "n_steps", Value::Integer(0)),
        ("student_train", "n_steps", Value::Integer(0)),
        ("data", "triplets", Value::String(String::new())),
        ("data", "labeled", Value::String(String::new())),
        ("data", "unlabeled", Value::String(String::new())),
        ("data", "prototype_grid", Value::Integer(0)),
    ]
}

fn schema() -> Table {
    let mut t = Table::try_from(RunConfig::default()).expect("defaults serialize");
    for (section, key, sample) in optional_keys() {
        if let Some(Value::Table(s)) = t.get_mut(section) {
            s.insert(key.to_string(), sample);
        }
    }
    t
}

fn nearest<'a>(key: &str, candidates: impl Iterator<Item = &'a String>) -> Option<&'a String> {
    candidates.min_by_key(|c| strsim::levenshtein(key, c))
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Checks `user` against `schema`, converting integers to floats where a
/// float is expected.
fn check_table(user: &mut Table, schema: &Table, prefix: &str) -> Result<()> {
    for (key, value) in user.iter_mut() {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let Some(expected) = schema.get(key) else {
            let msg = match nearest(key, schema.keys()) {
                Some(s) => format!("unknown key; did you mean `{s}`?"),
                None => "unknown key".to_string(),
            };
            return Err(FeverError::config(path, msg));
        };
        check_value(value, expected, &path)?;
    }
    Ok(())
}

fn check_value(value: &mut Value, expected: &Value, path: &str) -> Result<()> {
    let mismatch = |v: &Value| {
        FeverError::config(
            path,
            format!("expected {}, found {}", type_name(expected), type_name(v)),
        )
    };
    match (expected, &mut *value) {
        (Value::Table(s), Value::Table(u)) => check_table(u, s, path),
        (Value::Float(_), Value::Integer(i)) => {
            *value = Value::Float(*i as f64);
            Ok(())
        }
        (Value::Array(s), Value::Array(u)) => match s.first() {
            Some(first) => {
                for (i, item) in u.iter_mut().enumerate() {
                    check_value(item, first, &format!("{path}[{i}]"))?;
                }
                Ok(())
            }
            None => Ok(()),
        },
        (e, v) if std::mem::discriminant(e) == std::mem::discriminant(v) => {
            if let Value::Integer(i) = v {
                if *i < 0 {
                    return Err(FeverError::config(path, format!("must be >= 0, got {i}")));
                }
            }
            Ok(())
        }
        (_, v) => Err(mismatch(v)),
    }
}

/// Prefixes the key of a config error with its section.
fn in_section<T>(section: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        FeverError::Config { key, msg } => FeverError::config(format!("{section}.{key}"), msg),
        FeverError::InvalidArgument(msg) => FeverError::config(section, msg),
        other => other,
    })
}

impl RunConfig {
    /// Parses TOML text, fills defaults and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| FeverError::config("toml", e.message().to_string()))?;
        check_table(&mut user, &schema(), "")?;
        let cfg: RunConfig = Value::Table(user)
            .try_into()
            .map_err(|e: toml::de::Error| FeverError::config("toml", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative manifest paths are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| FeverError::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.triplets, &mut cfg.data.labeled, &mut cfg.data.unlabeled]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the fully resolved config into `dir` and returns its path.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| FeverError::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_toml_string()).map_err(|e| FeverError::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.channels.is_empty() {
            return Err(FeverError::config("model.channels", "needs at least one block"));
        }
        if m.channels.contains(&0) {
            return Err(FeverError::config("model.channels", "channel counts must be > 0"));
        }
        if m.stride == 0 {
            return Err(FeverError::config("model.stride", "must be > 0"));
        }
        if self.teacher.d_face.is_empty() {
            return Err(FeverError::config("teacher.d_face", "needs at least one teacher"));
        }
        for i in 0..self.teacher.d_face.len() {
            in_section("teacher", self.teacher_model(i).validate())?;
        }
        in_section("student", self.student_model().validate())?;
        in_section("optim", self.optim.validate())?;
        in_section("loss", self.weights().validate())?;
        in_section("teacher_train", self.teacher_train(0).validate())?;
        in_section("student_train", self.student_train().validate())?;
        if self.teacher_train.batch_unlabeled != 0 {
            return Err(FeverError::config(
                "teacher_train.batch_unlabeled",
                "teachers do not use unlabeled data; must be 0",
            ));
        }
        in_section("probe", self.probe.validate())?;
        let d = &self.data;
        for (key, v) in [
            ("brightness", d.brightness),
            ("transfer_noise_sigma", d.transfer_noise_sigma),
            ("transfer_brightness", d.transfer_brightness),
            ("identity", d.identity),
            ("transfer_identity", d.transfer_identity),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FeverError::config(format!("data.{key}"), format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&d.transfer_contrast_min) {
            return Err(FeverError::config("data.transfer_contrast_min", "must lie in [0, 1]"));
        }
        if d.prototype_grid == Some(0) {
            return Err(FeverError::config("data.prototype_grid", "must be > 0"));
        }
        in_section("data", self.synthetic_spec().validate())?;
        let a = &self.ablation;
        if a.seeds.is_empty() {
            return Err(FeverError::config("ablation.seeds", "needs at least one seed"));
        }
        for (key, v) in [
            ("n_steps", a.n_steps),
            ("teacher_batch_triplets", a.teacher_batch_triplets),
            ("teacher_batch_labeled", a.teacher_batch_labeled),
            ("student_batch_triplets", a.student_batch_triplets),
            ("student_batch_labeled", a.student_batch_labeled),
        ] {
            if v == 0 {
                return Err(FeverError::config(format!("ablation.{key}"), "must be > 0"));
            }
        }
        Ok(())
    }

    fn backbone(&self) -> Vec<BlockSpec> {
        self.model
            .channels
            .iter()
            .map(|&c| BlockSpec {
                out_channels: c,
                stride: self.model.stride,
            })
            .collect()
    }

    pub fn num_teachers(&self) -> usize {
        self.teacher.d_face.len()
    }

    pub fn teacher_model(&self, i: usize) -> ModelConfig {
        ModelConfig {
            input_shape: self.model.input_shape,
            backbone_blocks: self.backbone(),
            d_face: self.teacher.d_face[i],
            dropout_rate: self.teacher.dropout_rate,
            fec_dim: self.model.fec_dim,
            num_classes: self.model.num_classes,
            distill_dim: None,
        }
    }

    /// The student's distillation head matches an ensemble of all teachers.
    pub fn student_model(&self) -> ModelConfig {
        ModelConfig {
            input_shape: self.model.input_shape,
            backbone_blocks: self.backbone(),
            d_face: self.student.d_face,
            dropout_rate: self.student.dropout_rate,
            fec_dim: self.model.fec_dim,
            num_classes: self.model.num_classes,
            distill_dim: Some(self.num_teachers() * (self.model.fec_dim + self.model.num_classes)),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss.alpha,
            lambda_dist: self.loss.lambda_dist,
            lambda_angle: self.loss.lambda_angle,
        }
    }

    fn train_config(&self, s: &TrainSection, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: s.epochs,
            n_steps: s.n_steps,
            batch: BatchSizes {
                triplets: s.batch_triplets,
                labeled: s.batch_labeled,
                unlabeled: s.batch_unlabeled,
            },
            weights: self.weights(),
            triplet: TripletLossConfig {
                margin: self.loss.margin,
                normalize_embeddings: self.loss.normalize_embeddings,
            },
            optim: self.optim,
            seed,
            drop_last: s.drop_last,
        }
    }

    pub fn teacher_train(&self, i: usize) -> TrainConfig {
        self.train_config(&self.teacher_train, crate::pipeline::teacher_seed(self.seed, i))
    }

    pub fn student_train(&self) -> TrainConfig {
        self.train_config(&self.student_train, crate::pipeline::student_seed(self.seed))
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            image_shape: self.model.input_shape,
            num_classes: self.model.num_classes,
            noise_sigma: d.noise_sigma,
            brightness: d.brightness,
            prototype_grid: d.prototype_grid,
            identity: d.identity,
            transfer: Rendering {
                noise_sigma: d.transfer_noise_sigma,
                brightness: d.transfer_brightness,
                contrast_min: d.transfer_contrast_min,
                max_shift: d.transfer_max_shift,
                identity: d.transfer_identity,
            },
            n_triplets: d.n_triplets,
            n_labeled: d.n_labeled,
            n_unlabeled: d.n_unlabeled,
            n_eval_triplets: d.n_eval_triplets,
            n_eval_labeled: d.n_eval_labeled,
            n_transfer_train: d.n_transfer_train,
            n_transfer_test: d.n_transfer_test,
            transfer_classes: d.transfer_classes,
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        let a = &self.ablation;
        let mut teacher_train = self.teacher_train(0);
        teacher_train.n_steps = Some(a.n_steps);
        teacher_train.batch = BatchSizes {
            triplets: a.teacher_batch_triplets,
            labeled: a.teacher_batch_labeled,
            unlabeled: 0,
        };
        let mut student_train = self.student_train();
        student_train.n_steps = Some(a.n_steps);
        student_train.batch = BatchSizes {
            triplets: a.student_batch_triplets,
            labeled: a.student_batch_labeled,
            unlabeled: a.student_batch_unlabeled,
        };
        AblationConfig {
            spec: self.synthetic_spec(),
            teachers: (0..self.num_teachers()).map(|i| self.teacher_model(i)).collect(),
            student: self.student_model(),
            teacher_train,
            student_train,
            probe: self.probe,
            seeds: a.seeds.clone(),
        }
    }
}
