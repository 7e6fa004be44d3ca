use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wood_core::imageio::{load_gray, save_mask};
use wood_core::kv::KvFile;
use wood_core::localization::{
    cam, evaluate_seeds, per_class_report, seed_from_map, seeds_for_manifest, write_maps, SeedMetrics,
    DEFAULT_THETA,
};
use wood_core::manifest::{load_manifest, resolve, save_manifest, Manifest, Split};
use wood_core::net::checkpoint::load_classifier;
use wood_core::oodpipe::{
    assemble_hard_ood, expected_reviews, load_ranked, rank_candidates, read_decision_log, save_ranked,
};
use wood_core::runner::{
    self, ablate, dump_features, grid_tau_lambda, run_summary, sweep_ood_count, write_report, Dataset,
    ExperimentConfig,
};
use wood_core::synth::{self, GenSpec};
use wood_core::Error;
use wood_reviewd::{serve, ServeConfig, ServeError};

#[derive(Parser)]
#[command(name = "wood", version, about = "Hard-OoD curation and cluster-distance training for CAM seeds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long, short)]
    config: PathBuf,
    /// Override one key, e.g. `--set tau=30`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn kv(&self) -> Result<KvFile, Error> {
        let mut kv = KvFile::load(&self.config)?;
        for pair in &self.overrides {
            kv.set_pair(pair)?;
        }
        Ok(kv)
    }

    fn experiment(&self) -> Result<ExperimentConfig, Error> {
        let base = self.config.parent().unwrap_or(Path::new(""));
        ExperimentConfig::from_kv(self.kv()?, base)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one classifier.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score candidate OoD images and keep those with p(c) >= 0.5.
    Rank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the review queue over HTTP.
    ServeReview {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Directory served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Hard-OoD images wanted, for the remaining-cost estimate.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Assemble the hard-OoD manifest from the decision log.
    BuildHardOod {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Manifest the candidates came from; supplies the class list.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write CAM maps and seed masks for in-distribution images.
    Cam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f64,
    },
    /// Score CAM seeds against ground-truth masks.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f64,
        /// Where to write the metrics JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics JSON of a baseline; prints per-class deltas.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Run the six loss-term configurations.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Vary the amount of training data.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Grid over tau and lambda.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write penultimate features for every record.
    DumpFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expected number of reviews to collect n clean images.
    Cost {
        #[arg(long)]
        n: f64,
        #[arg(long)]
        r: f64,
    },
}

enum Failure {
    Config(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<ServeError> for Failure {
    fn from(e: ServeError) -> Self {
        match e {
            ServeError::Core(e) => e.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn absolute(p: &Path) -> Result<PathBuf, Error> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn gen(config: &ConfigArgs, out: &Path) -> CmdResult {
    let spec = GenSpec::from_kv(config.kv()?)?;
    let generated = synth::generate(&spec, out)?;
    let summary = synth::describe(&generated.train, &out.join(synth::TRAIN_MANIFEST))?;
    println!(
        "wrote {} in-distribution, {} candidate and {} test images to {}",
        summary.in_dist,
        summary.ood_candidate,
        generated.test.records.len(),
        out.display()
    );
    println!(
        "candidates containing a shape: {} ({:.1}%)",
        summary.candidates_with_foreground,
        100.0 * summary.contamination_rate
    );
    Ok(())
}

fn rank(model: &Path, manifest_path: &Path, out: &Path) -> CmdResult {
    let state = load_classifier(model)?;
    let manifest_path = absolute(manifest_path)?;
    let manifest = load_manifest(&manifest_path)?;
    let candidates: Vec<_> = manifest.by_split(Split::OodCandidate).cloned().collect();
    let ranked = rank_candidates(&state, &candidates, &manifest.classes, &manifest_path)?;
    save_ranked(out, &ranked)?;
    for name in manifest.classes.names() {
        let n = ranked.iter().filter(|r| &r.class_name == name).count();
        println!("{name}: {n} of {} candidates kept", candidates.len());
    }
    Ok(())
}

fn serve_review(
    host: &str,
    port: u16,
    candidates: PathBuf,
    log: PathBuf,
    static_dir: Option<PathBuf>,
    target: Option<usize>,
) -> CmdResult {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Failure::Config(format!("bad address {host}:{port}: {e}")))?;
    let cfg = ServeConfig {
        candidates,
        log,
        static_dir,
        target,
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Data(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServeError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        let local = listener.local_addr().map_err(ServeError::Runtime)?;
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
        serve(listener, cfg, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(())
}

fn build_hard_ood(candidates: &Path, log: &Path, manifest: &Path, out: &Path) -> CmdResult {
    let ranked = load_ranked(candidates)?;
    let decisions = read_decision_log(log)?;
    let source = load_manifest(manifest)?;
    let mut records = assemble_hard_ood(&ranked, &decisions, source.num_classes())?;
    for rec in &mut records {
        if rec.path.is_relative() {
            rec.path = absolute(&resolve(candidates, &rec.path))?;
        }
    }
    let n = records.len();
    save_manifest(&Manifest::new(source.classes.clone(), records)?, out)?;
    println!("{n} hard-OoD images from {} decisions", decisions.len());
    Ok(())
}

fn cam_cmd(model: &Path, manifest_path: &Path, out: &Path, theta: f64) -> CmdResult {
    let state = load_classifier(model)?;
    let manifest = load_manifest(manifest_path)?;
    let seeds_dir = out.join("seeds");
    fs::create_dir_all(&seeds_dir).map_err(|e| Error::io(&seeds_dir, e))?;
    let mut n = 0;
    for rec in manifest.by_split(Split::InDist) {
        let image = load_gray(resolve(manifest_path, &rec.path))?;
        let present: Vec<usize> = rec.positive_classes().collect();
        let mut map = cam(&state, &image, &present)?;
        map.image_id = rec.id.clone();
        write_maps(out, &map, &manifest.classes)?;
        save_mask(&seed_from_map(&map, theta), seeds_dir.join(format!("{}.png", rec.id)))?;
        n += 1;
    }
    println!("wrote maps and seeds for {n} images to {}", out.display());
    Ok(())
}

fn eval(model: &Path, manifest_path: &Path, theta: f64, out: Option<&Path>, compare: Option<&Path>) -> CmdResult {
    let state = load_classifier(model)?;
    let manifest = load_manifest(manifest_path)?;
    let seeds = seeds_for_manifest(&state, &manifest, manifest_path, theta)?;
    let pairs: Vec<_> = seeds.iter().map(|(_, pred, gt)| (pred, gt)).collect();
    let metrics = evaluate_seeds(&pairs, &manifest.classes)?;
    println!(
        "mIoU {:.1}  precision {:.1}  recall {:.1}  F1 {:.1}  ({} images)",
        100.0 * metrics.miou,
        100.0 * metrics.precision,
        100.0 * metrics.recall,
        100.0 * metrics.f1,
        seeds.len()
    );
    if let Some(out) = out {
        let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
        fs::write(out, json).map_err(|e| Error::io(out, e))?;
    }
    if let Some(path) = compare {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let baseline: SeedMetrics = serde_json::from_str(&text)
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        print!("{}", per_class_report(&baseline, &metrics)?.to_text());
    }
    Ok(())
}

fn ablate_cmd(config: &ConfigArgs) -> CmdResult {
    let cfg = config.experiment()?;
    let table = ablate(&Dataset::load(&cfg)?, &cfg)?;
    let text = table.to_text();
    write_report(&cfg.out_dir, "ablation", &table, &text)?;
    print!("{text}");
    Ok(())
}

fn sweep_cmd(config: &ConfigArgs) -> CmdResult {
    let cfg = config.experiment()?;
    let result = sweep_ood_count(&Dataset::load(&cfg)?, &cfg)?;
    let text = result.to_text();
    write_report(&cfg.out_dir, "sweep", &result, &text)?;
    print!("{text}");
    Ok(())
}

fn grid_cmd(config: &ConfigArgs) -> CmdResult {
    let cfg = config.experiment()?;
    let result = grid_tau_lambda(&Dataset::load(&cfg)?, &cfg)?;
    let text = result.to_text();
    write_report(&cfg.out_dir, "grid", &result, &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Gen { config, out } => gen(&config, &out),
        Command::Train { config } => {
            let cfg = config.experiment()?;
            let (_, report) = runner::train(&cfg)?;
            print!("{}", run_summary(&report));
            Ok(())
        }
        Command::Rank { model, manifest, out } => rank(&model, &manifest, &out),
        Command::ServeReview {
            port,
            host,
            candidates,
            log,
            static_dir,
            target,
        } => serve_review(&host, port, candidates, log, static_dir, target),
        Command::BuildHardOod {
            candidates,
            log,
            manifest,
            out,
        } => build_hard_ood(&candidates, &log, &manifest, &out),
        Command::Cam {
            model,
            manifest,
            out,
            theta,
        } => cam_cmd(&model, &manifest, &out, theta),
        Command::Eval {
            model,
            manifest,
            theta,
            out,
            compare,
        } => eval(&model, &manifest, theta, out.as_deref(), compare.as_deref()),
        Command::Ablate { config } => ablate_cmd(&config),
        Command::Sweep { config } => sweep_cmd(&config),
        Command::Grid { config } => grid_cmd(&config),
        Command::DumpFeatures { model, manifest, out } => {
            let state = load_classifier(&model)?;
            let m = load_manifest(&manifest)?;
            let n = dump_features(&state, &m, &manifest, &out)?;
            println!("wrote {n} feature rows to {}", out.display());
            Ok(())
        }
        Command::Cost { n, r } => {
            println!("{}", expected_reviews(n, r)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
