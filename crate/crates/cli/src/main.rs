//! `fever`: synthetic data, teacher and student training, and evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use fever_core::config::RunConfig;
use fever_core::data::{
    load_labeled_manifest, load_triplet_manifest, load_unlabeled_manifest, write_labeled_manifest,
    write_triplet_manifest, write_unlabeled_manifest, LabeledDataset, TrainingData, TripletDataset,
    UnlabeledDataset,
};
use fever_core::distill::TeacherEnsemble;
use fever_core::eval::{extract_features, fit_linear_probe, triplet_accuracy, FeatureFile, FeatureHead};
use fever_core::losses::SimilarPair;
use fever_core::models::FeverNet;
use fever_core::ndgrad::Array;
use fever_core::pipeline::{generate_suite, run_ablation, AblationEvent, SyntheticSuite};
use fever_core::train::{load_net, write_metrics, CheckpointFile, Trainer};
use fever_core::{FeverError, Result};

#[derive(Parser)]
#[command(name = "fever", version, about = "Expression embeddings with multi-task teachers and distilled students")]
struct Cli {
    /// TOML run config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets as PNG images plus CSV manifests.
    GenData,
    /// Train one teacher.
    TrainTeacher {
        /// Which entry of `teacher.d_face` to train.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Continue from a training checkpoint up to the configured length.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Distil one or more teacher checkpoints into a student.
    TrainStudent {
        #[arg(long = "teacher", required = true)]
        teachers: Vec<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write eval-mode features of a checkpoint.
    ExtractFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Head::Face)]
        head: Head,
        #[command(flatten)]
        source: Source,
        /// Output file stem inside the output directory.
        #[arg(long, default_value = "features")]
        name: String,
        /// Also write a CSV copy.
        #[arg(long)]
        csv: bool,
    },
    /// Triplet accuracy of a feature file or of a checkpoint's triplet head.
    EvalTriplet {
        /// Feature file with three rows per triplet labeled by pair code.
        #[arg(long, conflicts_with = "checkpoint")]
        features: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Triplet manifest; defaults to the synthetic held-out triplets.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Linear-probe accuracy from labeled feature files or a checkpoint.
    EvalProbe {
        #[arg(long, requires = "test", conflicts_with = "checkpoint")]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labeled manifests for the probe; default to the synthetic transfer sets.
        #[arg(long, requires = "test_manifest")]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
    },
    /// Teacher, undistilled student, distilled student without unlabeled
    /// data, and distilled student, over the configured seeds.
    Ablate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Face,
    Fec,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Labeled,
    Triplet,
    Unlabeled,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthSet {
    Triplets,
    Labeled,
    Unlabeled,
    EvalTriplets,
    EvalLabeled,
    TransferTrain,
    TransferTest,
}

#[derive(clap::Args)]
struct Source {
    /// Read images from a manifest instead of a synthetic set.
    #[arg(long, requires = "kind")]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long, value_enum, default_value_t = SynthSet::TransferTest)]
    set: SynthSet,
}

/// Images plus optional per-row labels.
enum Images {
    Labeled(LabeledDataset),
    Triplet(TripletDataset),
    Unlabeled(UnlabeledDataset),
}

impl Images {
    fn pixels(&self) -> Array<f32> {
        match self {
            Images::Labeled(d) => d.all_images(),
            Images::Triplet(d) => d.all_images(),
            Images::Unlabeled(d) => d.all_images(),
        }
    }

    /// Class labels, or the pair code repeated on all three rows of a triplet.
    fn row_labels(&self) -> Option<Vec<usize>> {
        match self {
            Images::Labeled(d) => Some(d.labels.clone()),
            Images::Triplet(d) => Some(d.pairs.iter().flat_map(|p| [p.code() as usize; 3]).collect()),
            Images::Unlabeled(_) => None,
        }
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    produced: Vec<PathBuf>,
}

impl Run {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(o) = &cli.out {
            cfg.out_dir = o.clone();
        }
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| FeverError::io(&out, e))?;
        let echo = cfg.write_echo(&out)?;
        Ok(Run {
            cfg,
            out,
            produced: vec![echo],
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| FeverError::io(&p, e))?;
        self.produced.push(p.clone());
        Ok(p)
    }

    fn write_json(&mut self, name: &str, v: &serde_json::Value) -> Result<PathBuf> {
        self.write(name, &format!("{}\n", serde_json::to_string_pretty(v).expect("json")))
    }

    /// Merges this run's outputs into `MANIFEST`, one relative path per line.
    fn finish(self) -> Result<()> {
        let path = self.out.join("MANIFEST");
        let mut entries: BTreeSet<String> = fs::read_to_string(&path)
            .map(|s| s.lines().map(str::to_string).collect())
            .unwrap_or_default();
        for p in &self.produced {
            let rel = p.strip_prefix(&self.out).unwrap_or(p);
            entries.insert(rel.to_string_lossy().replace('\\', "/"));
        }
        let text: String = entries.into_iter().map(|e| e + "\n").collect();
        fs::write(&path, text).map_err(|e| FeverError::io(&path, e))
    }

    fn suite(&self) -> Result<SyntheticSuite> {
        generate_suite(&self.cfg.synthetic_spec(), self.cfg.seed)
    }

    /// Manifests from the config when given, otherwise synthetic data.
    fn training_data(&self) -> Result<TrainingData> {
        let d = &self.cfg.data;
        match (&d.triplets, &d.labeled) {
            (None, None) => Ok(self.suite()?.train),
            (Some(t), Some(l)) => {
                let triplets = load_triplet_manifest(t)?;
                let labeled = load_labeled_manifest(l, self.cfg.model.num_classes)?;
                let unlabeled = match &d.unlabeled {
                    Some(u) => load_unlabeled_manifest(u)?,
                    None => UnlabeledDataset::empty(triplets.image_shape),
                };
                let data = TrainingData {
                    triplets,
                    labeled,
                    unlabeled,
                };
                data.validate()?;
                Ok(data)
            }
            (None, Some(_)) => Err(FeverError::config("data.triplets", "required when data.labeled is set")),
            (Some(_), None) => Err(FeverError::config("data.labeled", "required when data.triplets is set")),
        }
    }

    fn images(&self, src: &Source) -> Result<Images> {
        if let Some(m) = &src.manifest {
            return Ok(match src.kind.expect("clap enforces --kind") {
                Kind::Labeled => Images::Labeled(load_labeled_manifest(m, self.cfg.model.num_classes)?),
                Kind::Triplet => Images::Triplet(load_triplet_manifest(m)?),
                Kind::Unlabeled => Images::Unlabeled(load_unlabeled_manifest(m)?),
            });
        }
        let s = self.suite()?;
        Ok(match src.set {
            SynthSet::Triplets => Images::Triplet(s.train.triplets),
            SynthSet::Labeled => Images::Labeled(s.train.labeled),
            SynthSet::Unlabeled => Images::Unlabeled(s.train.unlabeled),
            SynthSet::EvalTriplets => Images::Triplet(s.eval_triplets),
            SynthSet::EvalLabeled => Images::Labeled(s.eval_labeled),
            SynthSet::TransferTrain => Images::Labeled(s.transfer_train),
            SynthSet::TransferTest => Images::Labeled(s.transfer_test),
        })
    }
}

fn load_teacher(path: &Path) -> Result<FeverNet<f32>> {
    let ckpt = CheckpointFile::load(path)?;
    if ckpt.config.get("role").and_then(|r| r.as_str()) != Some("teacher") {
        return Err(FeverError::Checkpoint(format!("{} is not a teacher checkpoint", path.display())));
    }
    fever_core::train::net_from_checkpoint(&ckpt)
}

fn run(cli: Cli) -> Result<()> {
    let mut run = Run::new(&cli)?;
    match cli.command {
        Command::GenData => {
            let s = run.suite()?;
            let dir = run.path("data");
            let mut files = Vec::new();
            files.extend(write_triplet_manifest(&dir, "triplets", &s.train.triplets)?);
            files.extend(write_labeled_manifest(&dir, "labeled", &s.train.labeled)?);
            if !s.train.unlabeled.is_empty() {
                files.extend(write_unlabeled_manifest(&dir, "unlabeled", &s.train.unlabeled)?);
            }
            files.extend(write_triplet_manifest(&dir, "eval_triplets", &s.eval_triplets)?);
            files.extend(write_labeled_manifest(&dir, "eval_labeled", &s.eval_labeled)?);
            files.extend(write_labeled_manifest(&dir, "transfer_train", &s.transfer_train)?);
            files.extend(write_labeled_manifest(&dir, "transfer_test", &s.transfer_test)?);
            println!("wrote {} files under {}", files.len(), dir.display());
            run.produced.extend(files);
        }
        Command::TrainTeacher { index, resume } => {
            if index >= run.cfg.num_teachers() {
                return Err(FeverError::config(
                    "teacher.d_face",
                    format!("teacher index {index} out of range for {} teachers", run.cfg.num_teachers()),
                ));
            }
            let data = run.training_data()?;
            let mut trainer = match resume {
                Some(p) => {
                    let mut t = Trainer::<f32>::load(&p, &data, None)?;
                    let s = &run.cfg.teacher_train;
                    t.set_run_length(s.epochs, s.n_steps)?;
                    t
                }
                None => {
                    let seed = fever_core::pipeline::teacher_seed(run.cfg.seed, index);
                    let net = FeverNet::init(run.cfg.teacher_model(index), seed)?;
                    Trainer::teacher(run.cfg.teacher_train(index), &data, net)?
                }
            };
            let log = trainer.run_to_end(&data, |_| {})?;
            let ckpt = run.path(&format!("teacher{index}.ckpt"));
            trainer.save(&ckpt)?;
            let metrics = run.path(&format!("teacher{index}_metrics.jsonl"));
            write_metrics(&metrics, &log)?;
            if let Some(last) = log.last() {
                println!("teacher {index}: step {} total loss {:.6}", last.step, last.total);
            }
            run.produced.extend([ckpt, metrics]);
        }
        Command::TrainStudent { teachers, resume } => {
            let nets = teachers.iter().map(|p| load_teacher(p)).collect::<Result<Vec<_>>>()?;
            let ensemble = TeacherEnsemble::new(nets)?;
            let data = run.training_data()?;
            let mut trainer = match resume {
                Some(p) => {
                    let mut t = Trainer::<f32>::load(&p, &data, Some(ensemble))?;
                    let s = &run.cfg.student_train;
                    t.set_run_length(s.epochs, s.n_steps)?;
                    t
                }
                None => {
                    let mut model = run.cfg.student_model();
                    model.distill_dim = Some(ensemble.target_dim());
                    let net = FeverNet::init(model, fever_core::pipeline::student_seed(run.cfg.seed))?;
                    Trainer::student(run.cfg.student_train(), &data, net, ensemble)?
                }
            };
            let log = trainer.run_to_end(&data, |_| {})?;
            trainer.verify_ensemble()?;
            let ckpt = run.path("student.ckpt");
            trainer.save(&ckpt)?;
            let metrics = run.path("student_metrics.jsonl");
            write_metrics(&metrics, &log)?;
            if let Some(last) = log.last() {
                println!("student: step {} total loss {:.6}", last.step, last.total);
            }
            run.produced.extend([ckpt, metrics]);
        }
        Command::ExtractFeatures {
            checkpoint,
            head,
            source,
            name,
            csv,
        } => {
            let net = load_net::<f32>(&checkpoint)?;
            let images = run.images(&source)?;
            let head = match head {
                Head::Face => FeatureHead::Face,
                Head::Fec => FeatureHead::Fec,
            };
            let labels = images.row_labels();
            let f = extract_features(&net, &images.pixels(), head, labels.as_deref())?;
            let p = run.path(&format!("{name}.feat"));
            f.save(&p)?;
            run.produced.push(p);
            if csv {
                let p = run.path(&format!("{name}.csv"));
                f.save_csv(&p)?;
                run.produced.push(p);
            }
            println!("{} rows of {} features", f.count(), f.dims);
        }
        Command::EvalTriplet {
            features,
            checkpoint,
            manifest,
        } => {
            let (emb, pairs) = match (features, checkpoint) {
                (Some(f), _) => {
                    let f = FeatureFile::load(&f)?;
                    let labels = f.labels_usize()?;
                    if labels.len() % 3 != 0 {
                        return Err(FeverError::Data(format!("{} rows do not form triplets", labels.len())));
                    }
                    let pairs = labels
                        .chunks(3)
                        .map(|c| {
                            SimilarPair::from_code(c[0] as u32).map_err(|e| FeverError::Data(e.to_string()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (f.to_array::<f64>(), pairs)
                }
                (None, Some(c)) => {
                    let net = load_net::<f32>(&c)?;
                    let t = match manifest {
                        Some(m) => load_triplet_manifest(&m)?,
                        None => run.suite()?.eval_triplets,
                    };
                    let f = extract_features(&net, &t.all_images(), FeatureHead::Fec, None)?;
                    (f.to_array::<f64>(), t.pairs)
                }
                (None, None) => {
                    return Err(FeverError::InvalidArgument("eval-triplet needs --features or --checkpoint".into()))
                }
            };
            let acc = triplet_accuracy(&emb, &pairs)?;
            run.write_json("eval_triplet.json", &json!({ "triplets": pairs.len(), "accuracy": acc }))?;
            println!("triplet accuracy {acc:.4} over {} triplets", pairs.len());
        }
        Command::EvalProbe {
            train,
            test,
            checkpoint,
            train_manifest,
            test_manifest,
        } => {
            let (ftr, fte) = match (train, checkpoint) {
                (Some(tr), _) => (
                    FeatureFile::load(&tr)?,
                    FeatureFile::load(&test.expect("clap enforces --test"))?,
                ),
                (None, Some(c)) => {
                    let net = load_net::<f32>(&c)?;
                    let k = run.cfg.model.num_classes;
                    let (tr, te) = match (train_manifest, test_manifest) {
                        (Some(a), Some(b)) => (load_labeled_manifest(&a, k)?, load_labeled_manifest(&b, k)?),
                        _ => {
                            let s = run.suite()?;
                            (s.transfer_train, s.transfer_test)
                        }
                    };
                    (
                        extract_features(&net, &tr.all_images(), FeatureHead::Face, Some(&tr.labels))?,
                        extract_features(&net, &te.all_images(), FeatureHead::Face, Some(&te.labels))?,
                    )
                }
                (None, None) => {
                    return Err(FeverError::InvalidArgument(
                        "eval-probe needs --train/--test or --checkpoint".into(),
                    ))
                }
            };
            let (ytr, yte) = (ftr.labels_usize()?, fte.labels_usize()?);
            let k = ytr.iter().max().map_or(0, |m| m + 1);
            let (probe, fit) = fit_linear_probe(&ftr.to_array(), &ytr, k, &run.cfg.probe)?;
            let acc = probe.accuracy(&fte.to_array(), &yte)?;
            run.write_json(
                "eval_probe.json",
                &json!({
                    "accuracy": acc,
                    "classes": k,
                    "train": ytr.len(),
                    "test": yte.len(),
                    "converged": fit.converged,
                    "iterations": fit.iterations,
                    "grad_norm": fit.grad_norm,
                }),
            )?;
            println!("probe accuracy {acc:.4} (converged: {})", fit.converged);
        }
        Command::Ablate => {
            let cfg = run.cfg.ablation_config();
            let table = run_ablation(&cfg, |e| match e {
                AblationEvent::Started { seed, what } => eprintln!("seed {seed}: training {what}"),
                AblationEvent::Finished(r) => {
                    eprintln!("seed {}: {:?} probe {:.4}", r.seed, r.row, r.probe_accuracy)
                }
            })?;
            let text = table.to_text();
            print!("{text}");
            run.write("ablation.txt", &text)?;
            run.write("ablation.csv", &table.to_csv())?;
            run.write_json("ablation.json", &serde_json::to_value(&table).expect("json"))?;
        }
    }
    run.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = json!({ "error": e.kind(), "exit_code": e.exit_code(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
