use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mtiqa::checkpoint::file_sha256;
use mtiqa::config::RunConfig;
use mtiqa::contrastive::{build_contrastive_classes, pretrain_encoder};
use mtiqa::data::{build_toy_corpus, load_manifest};
use mtiqa::gmad::{gmad_competition, gmad_report, score_database};
use mtiqa::metrics;
use mtiqa::pipeline::{load_encoder, run_protocol, save_encoder, train, LoadedDataset, QualityModel};
use mtiqa::report::{curve_svg, RunReport};
use mtiqa::Error;

#[derive(Parser, Debug)]
#[command(name = "mtiqa", version, about = "No-reference image quality assessment toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and pretraining seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_enum)]
    fusion: Option<Fusion>,
    #[arg(long, global = true, value_enum)]
    hf_conv: Option<HfConvArg>,
    #[arg(long, global = true)]
    no_hfen: bool,
    #[arg(long, global = true)]
    no_dan: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fusion {
    Aff,
    Add,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HfConvArg {
    Octave,
    Vanilla,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic toy corpus described by the [toy] section.
    ToyCorpus,
    /// Contrastive pretraining of the distortion encoder.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a quality model on a whole manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Repeated train/test split protocol.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Train on one manifest, test on the others.
    CrossEval {
        #[arg(long)]
        train: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        test: Vec<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// gMAD competition between two quality checkpoints.
    Gmad {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
    },
    /// Render CSV and plots from a saved run report.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
    Exists(PathBuf),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(Failure::Usage(e.to_string())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let (code, kind, msg) = match f {
        Failure::Usage(m) => (2, "usage", m),
        Failure::Exists(p) => (1, "exists", format!("{} exists; use --force", p.display())),
        Failure::Run(e) => (1, e.kind(), e.to_string()),
    };
    eprintln!("{}", json!({ "error": kind, "message": msg.trim() }));
    ExitCode::from(code)
}

fn load_config(g: &Global, required: bool) -> Outcome<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) if !p.is_file() => return Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Config(m) => Failure::Usage(format!("{}: {m}", p.display())),
            other => Failure::Run(other),
        })?,
        None if required => return Err(Failure::Usage("this command needs --config".into())),
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
        cfg.pretrain.seed = s;
    }
    if let Some(f) = g.fusion {
        cfg.train.addition_fusion = matches!(f, Fusion::Add);
    }
    if let Some(h) = g.hf_conv {
        cfg.train.vanilla_conv = matches!(h, HfConvArg::Vanilla);
    }
    cfg.train.no_hfen |= g.no_hfen;
    cfg.train.no_dan |= g.no_dan;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Refuses when any output exists, unless forced.
fn guard(g: &Global, names: &[&str]) -> Outcome<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = names.iter().map(|n| g.out_dir.join(n)).collect();
    if !g.force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Failure::Exists(p.clone()));
        }
    }
    std::fs::create_dir_all(&g.out_dir).map_err(|e| Failure::Run(io_err(&g.out_dir, e)))?;
    Ok(paths)
}

fn io_err(p: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome<()> {
    std::fs::write(path, contents).map_err(|e| Failure::Run(io_err(path, e)))
}

fn encoder_for(
    cfg: &RunConfig,
    flag: &Option<PathBuf>,
) -> Outcome<(Option<mtiqa::contrastive::EncoderModel>, Option<PathBuf>)> {
    if cfg.train.no_dan {
        return Ok((None, None));
    }
    let path = flag.clone().or_else(|| cfg.train.encoder_path.clone()).ok_or_else(|| {
        Failure::Run(Error::MissingEncoder(
            "no encoder checkpoint given (use --encoder, train.encoder_path or --no-dan)".into(),
        ))
    })?;
    Ok((Some(load_encoder(&path)?), Some(path)))
}

fn run(cli: Cli) -> Outcome<()> {
    let g = &cli.global;
    let started = Instant::now();
    match &cli.command {
        Command::ToyCorpus => {
            let cfg = load_config(g, false)?;
            let csv = format!("{}.csv", cfg.toy.name);
            guard(g, &[&csv])?;
            let m = build_toy_corpus(&cfg.toy, &g.out_dir)?;
            println!("{}", json!({ "manifest": g.out_dir.join(csv), "images": m.len() }));
        }
        Command::Pretrain { manifest } => {
            let cfg = load_config(g, true)?;
            let out = guard(g, &["encoder.ckpt", "pretrain_loss.csv", "pretrain_loss.svg"])?;
            let m = load_manifest(manifest)?;
            let classes = build_contrastive_classes(&m)?;
            let data = LoadedDataset::load(&m)?;
            let outcome = pretrain_encoder(&cfg.pretrain, &data.images, &classes)?;
            let meta = json!({ "manifest": m.name, "steps": outcome.losses.len() });
            save_encoder(&outcome.model, &out[0], &meta)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in outcome.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write(&out[1], csv)?;
            write(&out[2], curve_svg("contrastive pretraining", &outcome.losses))?;
            println!(
                "{}",
                json!({ "encoder": out[0], "final_loss": outcome.losses.last(), "seconds": started.elapsed().as_secs_f64() })
            );
        }
        Command::Train { manifest, encoder } => {
            let cfg = load_config(g, true)?;
            let out = guard(g, &["model.ckpt", "train_log.json"])?;
            let (enc, _) = encoder_for(&cfg, encoder)?;
            let data = LoadedDataset::load(&load_manifest(manifest)?)?;
            let (model, log) = train(&cfg.train, &data, enc, None)?;
            model.save(
                &out[0],
                &json!({ "manifest": data.manifest.name, "epochs": log.epochs }),
            )?;
            write(&out[1], serde_json::to_string_pretty(&log).map_err(Error::from)?)?;
            println!("{}", json!({ "model": out[0], "final_loss": log.final_loss() }));
        }
        Command::Eval { manifest, encoder } => {
            let cfg = load_config(g, true)?;
            let out = guard(g, &["report.json", "report.csv", "timing.json"])?;
            let (enc, enc_path) = encoder_for(&cfg, encoder)?;
            let m = load_manifest(manifest)?;
            let data = LoadedDataset::load(&m)?;
            let results = run_protocol(&cfg.train, &data, &cfg.split, enc.as_ref())?;
            let mut artifacts = BTreeMap::new();
            artifacts.insert("manifest".to_string(), file_sha256(manifest)?);
            if let Some(p) = enc_path {
                artifacts.insert("encoder".to_string(), file_sha256(&p)?);
            }
            let report = RunReport::new(&m.name, &cfg, results, artifacts)?;
            write(&out[0], report.to_json()?)?;
            write(&out[1], report.to_csv()?)?;
            write(
                &out[2],
                json!({ "seconds": started.elapsed().as_secs_f64() }).to_string(),
            )?;
            println!(
                "{}",
                json!({ "report": out[0], "median_srcc": report.srcc.median, "median_plcc": report.plcc.median })
            );
        }
        Command::CrossEval {
            train: train_path,
            test,
            encoder,
        } => {
            let cfg = load_config(g, true)?;
            let train_m = load_manifest(train_path)?;
            let tests = test.iter().map(|p| load_manifest(p)).collect::<Result<Vec<_>, _>>()?;
            if let Some(t) = tests.iter().find(|t| t.name == train_m.name) {
                return Err(Failure::Usage(format!(
                    "test manifest {} has the training manifest's name",
                    t.name
                )));
            }
            let out = guard(g, &["cross_eval.json", "cross_eval.csv"])?;
            let (enc, _) = encoder_for(&cfg, encoder)?;
            let (model, _) = train(&cfg.train, &LoadedDataset::load(&train_m)?, enc, None)?;
            let mut rows = Vec::new();
            let mut csv = String::from("train,test,srcc,plcc\n");
            for t in &tests {
                let data = LoadedDataset::load(t)?;
                let (s, p, _) = metrics::evaluate_split(&model, &data, cfg.train.test_patches, cfg.train.seed)?;
                csv.push_str(&format!("{},{},{s},{p}\n", train_m.name, t.name));
                rows.push(json!({ "train": train_m.name, "test": t.name, "srcc": s, "plcc": p }));
            }
            write(&out[0], serde_json::to_string_pretty(&rows).map_err(Error::from)?)?;
            write(&out[1], csv)?;
            println!("{}", json!({ "results": rows }));
        }
        Command::Gmad {
            manifest,
            model_a,
            model_b,
        } => {
            let cfg = load_config(g, false)?;
            guard(g, &["gmad.csv", "gmad.html"])?;
            let m = load_manifest(manifest)?;
            let data = LoadedDataset::load(&m)?;
            let cache = g.out_dir.join("score_cache");
            let name = |p: &Path| {
                p.file_stem()
                    .map_or("model".into(), |s| s.to_string_lossy().into_owned())
            };
            let (na, nb) = (name(model_a), name(model_b));
            if na == nb {
                return Err(Failure::Usage("the two models need distinct file names".into()));
            }
            let seed = cfg.train.seed;
            let sa = score_database(
                &QualityModel::load(model_a)?,
                model_a,
                &data,
                cfg.gmad.n_patches,
                seed,
                &cache,
            )?;
            let sb = score_database(
                &QualityModel::load(model_b)?,
                model_b,
                &data,
                cfg.gmad.n_patches,
                seed,
                &cache,
            )?;
            let results = gmad_competition(
                (&na, &sa.scores),
                (&nb, &sb.scores),
                cfg.gmad.levels,
                cfg.gmad.epsilon_fraction,
            )?;
            let (csv, html) = gmad_report(&results, &m, cfg.gmad.levels, &g.out_dir)?;
            println!("{}", json!({ "csv": csv, "html": html, "panels": results.len() }));
        }
        Command::Report { report } => {
            let out = guard(g, &["report.csv", "scatter.svg", "loss.svg"])?;
            let text = std::fs::read_to_string(report).map_err(|e| Failure::Run(io_err(report, e)))?;
            let r = RunReport::from_json(&text)?;
            write(&out[0], r.to_csv()?)?;
            write(&out[1], r.scatter_svg())?;
            write(&out[2], r.loss_svg())?;
            println!("{}", json!({ "csv": out[0], "scatter": out[1], "loss": out[2] }));
        }
    }
    Ok(())
}
