use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use neutra::config::TrainConfig;
use neutra::evaluation::{cosine_similarity, evaluate_checkpoint, nearest_gallery, per_vertex_csv, per_vertex_errors};
use neutra::mesh::{load_obj, save_obj, TriMesh};
use neutra::models::{Checkpoint, InferenceModel};
use neutra::synthetic::{generate_corpus, SyntheticSpec};
use neutra::training::{train_with_progress, write_loss_csv, Corpus, NEUTRAL_FILE};
use neutra::verify::{gradient_suite, invariant_suite, oracle_suite, CheckResult};

/// Expression neutralization and identity recognition on registered face meshes.
#[derive(Parser)]
#[command(name = "neutra", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of registered face meshes.
    GenData {
        /// `key = value` spec file; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` config file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Neutralize one expressive mesh.
    Neutralize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-vertex error CSV against `--gt`.
        #[arg(long, requires = "gt")]
        errors: Option<PathBuf>,
        /// Ground-truth neutral mesh.
        #[arg(long, requires = "errors")]
        gt: Option<PathBuf>,
    },
    /// Rank-1 identification of probe scans against a neutral gallery.
    Identify {
        #[arg(long)]
        ckpt: PathBuf,
        /// `<dir>/<subject>/neutral.obj` per enrolled subject.
        #[arg(long)]
        gallery: PathBuf,
        /// `<dir>/<subject>/*.obj`; the directory name is the true label.
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embed gallery faces through the translator as well.
        #[arg(long)]
        gallery_through_g: bool,
    },
    /// Evaluate on the subjects of a corpus the checkpoint was not trained on.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for `pairs.csv` and `summary.txt`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gallery_through_g: bool,
    },
    /// Finite-difference gradient checks of every layer, model and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Spectral filter oracle and randomized invariant checks.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        graphs: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` means a check ran but failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenData { spec, out } => {
            let spec = match spec {
                Some(p) => SyntheticSpec::load(&p)?,
                None => SyntheticSpec::default(),
            };
            let summary = generate_corpus(&spec, &out)?;
            println!(
                "wrote {} meshes to {} ({} train / {} test subjects)",
                summary.files,
                out.display(),
                summary.train_subjects.len(),
                summary.test_subjects.len()
            );
        }
        Command::Train {
            data,
            config,
            out,
            loss_csv,
        } => {
            let config = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let corpus = Corpus::load(&data)?;
            let outcome = train_with_progress(&corpus, &config, |epoch, r| {
                info!(
                    "epoch {epoch}: total {:.4} rec {:.4} id {:.4} l1 {:.4} gan_d {:.4} gan_g {:.4}",
                    r.total, r.rec, r.id, r.l1_latent, r.gan_d, r.gan_g
                )
            })?;
            outcome.checkpoint.save(&out)?;
            let loss_path = loss_csv.unwrap_or_else(|| suffixed(&out, ".loss.csv"));
            write_loss_csv(&loss_path, &outcome.history)?;
            println!(
                "trained on {} subjects ({} held out); checkpoint {}, losses {}",
                outcome.train_subjects.len(),
                outcome.test_subjects.len(),
                out.display(),
                loss_path.display()
            );
        }
        Command::Neutralize {
            ckpt,
            input,
            out,
            errors,
            gt,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let mesh = load_obj(&input)?;
            let model = InferenceModel::new(checkpoint, &mesh)?;
            let neutral = model.neutralize(&mesh)?;
            save_obj(&neutral, &out)?;
            if let (Some(errors), Some(gt)) = (errors, gt) {
                let per_vertex = per_vertex_errors(&neutral, &load_obj(&gt)?)?;
                write(&errors, &per_vertex_csv(&per_vertex))?;
                let mean = per_vertex.iter().sum::<f64>() / per_vertex.len() as f64;
                println!("mean vertex error {mean:.4} mm");
            }
        }
        Command::Identify {
            ckpt,
            gallery,
            probe,
            out,
            gallery_through_g,
        } => {
            let gallery = subject_scans(&gallery, true)?;
            let probes = subject_scans(&probe, false)?;
            let (Some(first), false) = (gallery.first(), probes.is_empty()) else {
                bail!("gallery and probe sets must both be non-empty");
            };
            let model = InferenceModel::new(Checkpoint::load(&ckpt)?, &first.2)?;
            let mut enrolled = Vec::with_capacity(gallery.len());
            for (subject, _, mesh) in &gallery {
                enrolled.push((subject.clone(), model.gallery_embedding(mesh, gallery_through_g)?.0));
            }
            let embeddings: Vec<Vec<f64>> = enrolled.iter().map(|(_, e)| e.clone()).collect();
            let mut csv = String::from("subject,file,predicted,cosine,correct\n");
            let mut correct = 0;
            for (subject, file, mesh) in &probes {
                let e = model.probe_embedding(mesh)?.0;
                let best = nearest_gallery(&embeddings, &e)?;
                let hit = enrolled[best].0 == *subject;
                correct += usize::from(hit);
                let cos = cosine_similarity(&embeddings[best], &e)?;
                csv.push_str(&format!("{subject},{file},{},{cos:.6},{}\n", enrolled[best].0, u8::from(hit)));
            }
            write(&out, &csv)?;
            println!("rank-1 {:.4} ({correct}/{})", correct as f64 / probes.len() as f64, probes.len());
        }
        Command::Eval {
            ckpt,
            data,
            out,
            gallery_through_g,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let corpus = Corpus::load(&data)?;
            let held_out: Vec<_> = corpus
                .subjects
                .into_iter()
                .filter(|s| !checkpoint.subjects.contains(&s.name))
                .collect();
            if held_out.is_empty() {
                bail!("every subject in {} was used for training", data.display());
            }
            let report = evaluate_checkpoint(&checkpoint, &Corpus::new(held_out)?, gallery_through_g)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write(&out.join("pairs.csv"), &report.pairs_csv())?;
            write(&out.join("summary.txt"), &report.summary())?;
            print!("{}", report.summary());
        }
        Command::Gradcheck { seed, points } => return Ok(report(gradient_suite(seed, points)?)),
        Command::OracleCheck { seed, graphs } => {
            let mut results = oracle_suite(seed, graphs)?;
            results.extend(invariant_suite(seed, graphs)?);
            return Ok(report(results));
        }
    }
    Ok(true)
}

fn report(results: Vec<CheckResult>) -> bool {
    for r in &results {
        println!("{}", r.line());
    }
    results.iter().all(|r| r.passed)
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `(subject, file name, mesh)` for every subject directory under `root`,
/// in sorted order. The gallery side takes only `neutral.obj`; the probe
/// side takes every other `.obj`.
fn subject_scans(root: &Path, gallery: bool) -> Result<Vec<(String, String, TriMesh)>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let subject = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if gallery {
            let path = dir.join(NEUTRAL_FILE);
            out.push((subject, NEUTRAL_FILE.to_string(), load_obj(&path)?));
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "obj") && p.file_name().is_some_and(|f| f != NEUTRAL_FILE))
            .collect();
        files.sort();
        for path in files {
            let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            out.push((subject.clone(), file, load_obj(&path)?));
        }
    }
    Ok(out)
}
