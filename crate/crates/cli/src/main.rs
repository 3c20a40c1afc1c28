//! Command-line front end of the cardiomech toolkit.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.

use cardiomech::classify::{
    confusion_matrix, learning_curve, predict, train_logreg, write_confusion_csv, write_curve_csv, CardiacClass, ClassifierSpec,
    Dataset, LogRegModel,
};
use cardiomech::cli_io::{
    list_case_dirs, read_case_dir, read_field, read_image, read_labels, read_volume_file, write_field, write_image, write_labels,
    write_phantom_case, CaseData, PipelineConfig, VolumeFile,
};
use cardiomech::features::{read_features_csv, write_features_csv, FeatureVector};
use cardiomech::kinematics::{deformation_gradient, nhe_density, nhe_total, DEFAULT_J_FLOOR};
use cardiomech::phantom::{cohort_params, generate_entry, PhantomParams};
use cardiomech::propagation::{dice, multi_frame_segment, Phase};
use cardiomech::registration::{gradient_check, register, LossTerm};
use cardiomech::selection::{cross_val_predict, select_features, SelectionResult};
use cardiomech::volgrid::{warp_labels, warp_volume};
use cardiomech::{biomech, pipeline, Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "cardiomech", version, about = "Hyperelastic cardiac registration, strain features and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    Ed,
    Es,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Ed => Phase::ED,
            PhaseArg::Es => Phase::ES,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TermArg {
    Similarity,
    Energy,
    Total,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded phantom cohort of case directories.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        cases_per_class: usize,
        /// Grid size in voxels (nx ny nz).
        #[arg(long, num_args = 3)]
        dims: Option<Vec<usize>>,
        /// Voxel spacing in mm (sx sy sz).
        #[arg(long, num_args = 3)]
        spacing: Option<Vec<f64>>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Register a moving image onto a fixed image.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output displacement field.
        #[arg(long)]
        out: PathBuf,
        /// Output diagnostics JSON.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Warp an image (trilinear) or label map (nearest neighbour) by a field.
    Warp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-label Dice between two label maps (CSV on stdout).
    Dice {
        a: PathBuf,
        b: PathBuf,
    },
    /// Multi-frame segmentation of the ED or ES frame of a case directory.
    Segment {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, value_enum)]
        target: PhaseArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Energy densities and local moduli of a displacement field.
    Strain {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Feature rows for case directories.
    Features {
        /// Case directory (repeatable).
        #[arg(long = "case")]
        cases: Vec<PathBuf>,
        /// Directory whose sub-directories are cases.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy forward-backward feature selection.
    Select {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a logistic-regression model.
    Train {
        #[arg(long)]
        features: PathBuf,
        /// Selection JSON restricting the feature columns.
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict classes with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated accuracy and confusion matrix.
    Evaluate {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output confusion CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Learning curve over training-set sizes.
    Curve {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training-set sizes, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of the analytic loss gradient.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        grid: usize,
        #[arg(long, default_value_t = 50)]
        probes: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, value_enum, default_value = "total")]
        term: TermArg,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Config with `--seed` applied to every seeded stage.
fn seeded_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.registration.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

fn open_csv(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(std::io::BufWriter::new(f))
}

/// Feature dataset, restricted to a selection when given.
fn load_dataset(features: &Path, selection: &Option<PathBuf>) -> Result<Dataset> {
    let rows = read_features_csv(open_csv(features)?)?;
    let ds = Dataset::from_feature_vectors(&rows)?;
    match selection {
        Some(p) => {
            let sel: SelectionResult = read_json(p)?;
            ds.with_feature_names(&sel.selected)
        }
        None => Ok(ds),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { out, cases_per_class, dims, spacing, frames, noise, seed } => {
            let mut base = PhantomParams::default();
            if dims.is_some() || spacing.is_some() || frames.is_some() {
                let d = dims.map(|d| [d[0], d[1], d[2]]).unwrap_or(base.dims);
                let s = spacing.map(|s| [s[0], s[1], s[2]]).unwrap_or(base.spacing);
                base = PhantomParams::on_grid(d, s, frames.unwrap_or(base.frames));
            }
            if let Some(n) = noise {
                base.noise_sigma = n;
            }
            let entries = cohort_params(cases_per_class, &base, seed)?;
            std::fs::create_dir_all(&out)?;
            for e in &entries {
                let case = generate_entry(e)?;
                write_phantom_case(&out.join(&e.case_id), &case)?;
                log::info!("wrote {}", e.case_id);
            }
            write_json(&out.join("cohort.json"), &entries)?;
            println!("{} cases written to {}", entries.len(), out.display());
        }
        Command::Register { fixed, moving, config, out, diagnostics, seed } => {
            let cfg = seeded_config(&config, seed)?;
            let f = read_image::<f64>(&fixed)?;
            let m = read_image::<f64>(&moving)?;
            let r = register(&f, &m, &cfg.registration)?;
            write_field(&out, &r.field)?;
            let d = r.diagnostics();
            if let Some(p) = diagnostics {
                write_json(&p, &d)?;
            }
            println!(
                "final loss {:.6} (similarity {:.6}, energy {:.6}), fold fraction {:.6}",
                d.final_loss.total, d.final_loss.sim, d.final_loss.nhe, d.fold_fraction
            );
        }
        Command::Warp { input, field, out } => {
            let u = read_field::<f64>(&field)?;
            match read_volume_file(&input)? {
                VolumeFile::Labels(l) => write_labels(&out, &warp_labels(&l, &u)?)?,
                VolumeFile::Image(_) => write_image(&out, &warp_volume(&read_image::<f64>(&input)?, &u)?)?,
                VolumeFile::VectorField(_) => return Err(Error::Schema("warp input must be an Image or a LabelMap".into())),
            }
        }
        Command::Dice { a, b } => {
            let la = read_labels(&a)?;
            let lb = read_labels(&b)?;
            la.grid.ensure_matches(&lb.grid, "dice")?;
            let mut labels: Vec<u8> = la.label_set().into_iter().chain(lb.label_set()).filter(|&l| l != 0).collect();
            labels.sort_unstable();
            labels.dedup();
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "label,dice")?;
            for l in labels {
                writeln!(stdout, "{l},{:?}", dice(&la, &lb, l)?)?;
            }
        }
        Command::Segment { case, target, config, out, seed } => {
            let cfg = seeded_config(&config, seed)?;
            let c = read_case_dir(&case)?;
            let (labels, _) = multi_frame_segment(&c.sequence, target.into(), cfg.n_adjacent, cfg.lwv_window, &cfg.registration)?;
            write_labels(&out, &labels)?;
        }
        Command::Strain { field, config, out_dir } => {
            let cfg = load_config(&config)?;
            let u = read_field::<f64>(&field)?;
            let mat = &cfg.registration.material;
            let f = deformation_gradient(&u)?;
            let e = nhe_density(&f, mat, DEFAULT_J_FLOOR)?;
            let m = biomech::local_moduli(&u, mat, cfg.moduli_window, cfg.energy_floor)?;
            std::fs::create_dir_all(&out_dir)?;
            write_image(&out_dir.join("phi_dis.vol"), &e.phi_dis)?;
            write_image(&out_dir.join("phi_vol.vol"), &e.phi_vol)?;
            write_image(&out_dir.join("phi.vol"), &e.phi)?;
            write_image(&out_dir.join("mu.vol"), &m.mu_map)?;
            write_image(&out_dir.join("kappa.vol"), &m.kappa_map)?;
            write_labels(&out_dir.join("validity.vol"), &m.validity_mask)?;
            let summary = StrainSummary {
                nhe_total: nhe_total(&u, mat)?,
                fold_count: e.fold_count,
                valid_voxels: m.validity_mask.count(1),
            };
            write_json(&out_dir.join("strain.json"), &summary)?;
            println!("nhe_total {:.6} kPa", summary.nhe_total);
        }
        Command::Features { cases, cohort, config, out, seed } => {
            let cfg = seeded_config(&config, seed)?;
            let mut dirs = cases;
            if let Some(root) = cohort {
                dirs.extend(list_case_dirs(&root)?);
            }
            if dirs.is_empty() {
                return Err(Error::InvalidArgument("give at least one --case or a --cohort directory".into()));
            }
            let mut rows: Vec<FeatureVector> = Vec::with_capacity(dirs.len());
            for d in &dirs {
                let CaseData { manifest, sequence } = read_case_dir(d)?;
                let (fv, warnings) = pipeline::case_features(&manifest.case_id, manifest.class, &sequence, &cfg)?;
                for w in warnings {
                    log::warn!("{}: {} has a near-zero denominator ({:e}); set to 0", manifest.case_id, w.feature, w.denominator);
                }
                log::info!("features for {}", manifest.case_id);
                rows.push(fv);
            }
            write_features_csv(create_file(&out)?, &rows)?;
        }
        Command::Select { features, config, out, seed } => {
            let cfg = seeded_config(&config, seed)?;
            let ds = load_dataset(&features, &None)?;
            let r = select_features(&ds, &cfg.classifier, &cfg.cv, cfg.seed)?;
            write_json(&out, &r)?;
            println!("selected {} of {} features, accuracy {:.4}", r.selected.len(), ds.n_features(), r.acc_max);
        }
        Command::Train { features, selection, config, out, seed } => {
            let cfg = seeded_config(&config, seed)?;
            let ds = load_dataset(&features, &selection)?;
            let mut hyper = match cfg.classifier {
                ClassifierSpec::Logreg(h) => h,
                ClassifierSpec::Knn { .. } => {
                    return Err(Error::InvalidArgument("train produces a logistic-regression model; set classifier.kind to logreg".into()))
                }
            };
            if seed.is_some() {
                hyper.seed = cfg.seed;
            }
            let model = train_logreg(&ds, &hyper)?;
            write_json(&out, &model)?;
            println!("trained on {} cases, {} features, final loss {:.6}", ds.len(), ds.n_features(), model.diagnostics.final_loss);
        }
        Command::Predict { model, features, out } => {
            let m: LogRegModel = read_json(&model)?;
            let rows = read_features_csv(open_csv(&features)?)?;
            let ds = Dataset::from_feature_vectors(&rows)?.with_feature_names(&m.feature_names)?;
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create_file(&out)?);
            let mut header = vec!["case_id".to_string(), "class".to_string(), "predicted".to_string()];
            header.extend(m.classes.iter().map(|c| format!("p_{c}")));
            w.write_record(&header).map_err(csv_err)?;
            let mut correct = 0;
            for ((id, x), y) in ds.case_ids.iter().zip(&ds.x).zip(&ds.y) {
                let (c, p) = predict(&m, x)?;
                correct += (c == *y) as usize;
                let mut rec = vec![id.clone(), y.to_string(), c.to_string()];
                rec.extend(p.iter().map(|v| format!("{v:?}")));
                w.write_record(&rec).map_err(csv_err)?;
            }
            w.flush()?;
            println!("accuracy {:.4} on {} cases", correct as f64 / ds.len() as f64, ds.len());
        }
        Command::Evaluate { features, selection, config, out, seed } => {
            let cfg = seeded_config(&config, seed)?;
            let ds = load_dataset(&features, &selection)?;
            let pred = cross_val_predict(&ds, &cfg.classifier, &cfg.cv, cfg.seed)?;
            let m = confusion_matrix(&ds.y, &pred, &CardiacClass::ALL)?;
            write_confusion_csv(create_file(&out)?, &m, &CardiacClass::ALL)?;
            let acc = pred.iter().zip(&ds.y).filter(|(a, b)| a == b).count() as f64 / ds.len() as f64;
            println!("cross-validated accuracy {acc:.4}");
        }
        Command::Curve { features, selection, config, sizes, repeats, out, seed } => {
            let cfg = seeded_config(&config, seed)?;
            let ds = load_dataset(&features, &selection)?;
            let pts = learning_curve(&ds, &sizes, repeats.unwrap_or(cfg.curve_repeats), &cfg.classifier, &cfg.cv, cfg.seed)?;
            write_curve_csv(create_file(&out)?, &pts)?;
        }
        Command::Gradcheck { config, grid, probes, eps, term, seed } => {
            let cfg = seeded_config(&config, seed)?;
            let t = match term {
                TermArg::Similarity => LossTerm::Similarity,
                TermArg::Energy => LossTerm::Energy,
                TermArg::Total => LossTerm::Total,
            };
            let err = gradient_check(&cfg.registration, grid, probes, eps, t)?;
            println!("max relative error {err:e}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct StrainSummary {
    nhe_total: f64,
    fold_count: usize,
    valid_voxels: usize,
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("CSV: {e}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for numerical failures, 1 for everything else.
fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}
