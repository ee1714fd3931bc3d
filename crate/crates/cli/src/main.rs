//! `fedvad` command-line interface.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, configs or input
//! files), 2 runtime or protocol error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use fedvad_core::dataset::{self, load_manifest, write_manifest, DatasetManifest, SplitRole, SyntheticSpec};
use fedvad_core::federation::{self, FederationError, RunOutcome};
use fedvad_core::harness::{self, EvalError};
use fedvad_core::splits::{self, SplitAssignment, SplitStrategy};
use fedvad_core::{spl, stats, vpl, DetectorParams, FederationConfig};
use log::info;

#[derive(Parser)]
#[command(name = "fedvad", version, about = "Collaborative unsupervised video anomaly detection on segment features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        videos: usize,
        #[arg(long = "anomaly-frac", default_value_t = 0.2)]
        anomaly_frac: f64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Partition a training manifest across participants.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "random")]
        strategy: SplitStrategy,
        #[arg(long)]
        participants: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector centrally, per participant, or collaboratively.
    Train(TrainArgs),
    /// Frame-level AUC of a saved model on a test manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Write per-frame score tracks to this file (stdout when no path).
        #[arg(long = "dump-tracks", num_args = 0..=1)]
        dump_tracks: Option<Option<PathBuf>>,
    },
    /// Video and segment pseudo-labels for one manifest.
    PseudoLabel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-video magnitude and entropy statistics.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Communication cost of a configuration.
    Comms {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dim: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Central,
    Local,
    Collab,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Test manifest for per-round AUC; overrides `test_manifest` in the config.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    participants: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long = "local-iters")]
    local_iters: Option<usize>,
    #[arg(long = "local-lr")]
    local_lr: Option<f64>,
    #[arg(long = "server-lr")]
    server_lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "plr-all-videos")]
    plr_all_videos: bool,
    #[arg(long = "use-weak-labels")]
    use_weak_labels: bool,
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn federation_failure(e: FederationError) -> Failure {
    match e {
        FederationError::Config(_)
        | FederationError::EmptyTrainingSet
        | FederationError::EmptyParticipant(_)
        | FederationError::UnknownVideo(_)
        | FederationError::ParticipantCount { .. } => invalid(e),
        _ => runtime(e),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::MissingGroundTruth(_) | EvalError::SingleClass { .. } => invalid(e),
        EvalError::Detector(fedvad_core::detector::DetectorError::WidthMismatch { .. }) => invalid(e),
        _ => runtime(e),
    }
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn load(path: &Path, role: SplitRole) -> Result<DatasetManifest, Failure> {
    load_manifest(path, role).map_err(invalid)
}

fn cmd_synth(out: &Path, videos: usize, anomaly_frac: f64, dim: usize, seed: u64) -> CmdResult {
    let spec = SyntheticSpec {
        num_videos: videos,
        num_test_videos: (videos / 4).max(1),
        anomaly_fraction: anomaly_frac,
        feature_dim: dim,
        seed,
        ..SyntheticSpec::default()
    };
    let (train, test) = dataset::synthesize_dataset(&spec).map_err(invalid)?;
    let tp = write_manifest(&train, &out.join("train")).map_err(runtime)?;
    let sp = write_manifest(&test, &out.join("test")).map_err(runtime)?;
    println!("train\t{}\t{} videos", tp.display(), train.len());
    println!("test\t{}\t{} videos", sp.display(), test.len());
    Ok(())
}

fn cmd_split(manifest: &Path, strategy: SplitStrategy, k: usize, seed: u64, out: &Path) -> CmdResult {
    let m = load(manifest, SplitRole::Train)?;
    let split = splits::split(&m, strategy, k, seed).map_err(invalid)?;
    if split.num_participants() != k {
        return Err(invalid(anyhow!(
            "{strategy} split yields {} participants; pass --participants {}",
            split.num_participants(),
            split.num_participants()
        )));
    }
    split.save(out).map_err(runtime)?;
    for (p, ids) in split.participants.iter().enumerate() {
        println!("participant {p}\t{} videos", ids.len());
    }
    Ok(())
}

fn load_config(args: &TrainArgs) -> Result<(FederationConfig, Option<PathBuf>), Failure> {
    let (mut cfg, extra) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(invalid)?;
            let (cfg, extra) = FederationConfig::parse_with(&text, &["test_manifest"]).map_err(invalid)?;
            // relative paths in the config resolve against its directory
            let base = path.parent().unwrap_or(Path::new(""));
            let extra = extra.into_iter().map(|(_, v)| base.join(v)).next();
            (cfg, extra)
        }
        None => (FederationConfig::default(), None),
    };
    if let Some(v) = args.participants {
        cfg.participants = v;
    }
    if let Some(v) = args.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = args.local_iters {
        cfg.local_iters = v;
    }
    if let Some(v) = args.local_lr {
        cfg.local_lr = v;
    }
    if let Some(v) = args.server_lr {
        cfg.server_lr = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.plr_all_videos |= args.plr_all_videos;
    cfg.use_weak_labels |= args.use_weak_labels;
    cfg.validate().map_err(invalid)?;
    Ok((cfg, args.test.clone().or(extra)))
}

fn save_outcome(dir: &Path, o: &RunOutcome) -> CmdResult {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    let model = dir.join("model.fvad");
    o.model.save(&model).map_err(runtime)?;
    let mut report = o.report.to_text();
    report.push_str(&format!("#model\t{}\n", model.display()));
    write_file(&dir.join("report.tsv"), &report)?;
    write_file(&dir.join("ledger.tsv"), &o.report.ledger.to_text())
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let (mut cfg, test_path) = load_config(args)?;
    let train = load(&args.manifest, SplitRole::Train)?;
    let test = test_path.map(|p| load(&p, SplitRole::Test)).transpose()?;
    let split = match (&args.split, args.mode) {
        (Some(p), _) => Some(SplitAssignment::load(p).map_err(invalid)?),
        (None, Mode::Central) => None,
        (None, _) => return Err(invalid(anyhow!("--split is required for local and collab modes"))),
    };
    if let Some(s) = &split {
        s.check_partition(&train).map_err(invalid)?;
        if args.participants.is_none() {
            cfg.participants = s.num_participants();
        }
    }
    let fed = federation_failure;
    match args.mode {
        Mode::Central => {
            let o = federation::run_centralized(&cfg, &train, test.as_ref()).map_err(fed)?;
            save_outcome(&args.out, &o)?;
            print_final("central", &o);
        }
        Mode::Collab => {
            let o = federation::run_collaborative(&cfg, split.as_ref().unwrap(), &train, test.as_ref()).map_err(fed)?;
            save_outcome(&args.out, &o)?;
            print_final("collab", &o);
        }
        Mode::Local => {
            let runs = federation::run_local(&cfg, split.as_ref().unwrap(), &train, test.as_ref()).map_err(fed)?;
            let mut summary = String::from("#participant\tfinal_auc\n");
            for (id, o) in &runs {
                save_outcome(&args.out.join(format!("participant_{id}")), o)?;
                print_final(&format!("local {id}"), o);
                let auc = o.report.final_auc().map_or("-".to_string(), |a| a.to_string());
                summary.push_str(&format!("{id}\t{auc}\n"));
            }
            let aucs: Vec<f64> = runs.iter().filter_map(|(_, o)| o.report.final_auc()).collect();
            if !aucs.is_empty() {
                let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
                summary.push_str(&format!("#mean\t{mean}\n"));
                println!("local mean\tauc\t{mean:.4}");
            }
            write_file(&args.out.join("summary.tsv"), &summary)?;
        }
    }
    info!("outputs written to {}", args.out.display());
    Ok(())
}

fn print_final(label: &str, o: &RunOutcome) {
    match o.report.final_auc() {
        Some(a) => println!("{label}\tauc\t{a:.4}"),
        None => println!("{label}\tdone"),
    }
}

fn cmd_eval(model: &Path, test: &Path, dump: Option<Option<PathBuf>>) -> CmdResult {
    let params = DetectorParams::load(model).map_err(invalid)?;
    let test = load(test, SplitRole::Test)?;
    let r = harness::evaluate_model(&params, &test, dump.is_some()).map_err(eval_failure)?;
    println!("auc\t{:.6}\tpositive_frames\t{}\tnegative_frames\t{}", r.auc, r.num_pos, r.num_neg);
    if let (Some(target), Some(tracks)) = (dump, r.tracks) {
        let text = harness::format_tracks(&tracks);
        match target {
            Some(path) => write_file(&path, &text)?,
            None => print!("{text}"),
        }
    }
    Ok(())
}

fn cmd_pseudo_label(manifest: &Path, beta: f64, seed: u64, out: &Path) -> CmdResult {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(invalid(anyhow!("beta must lie in (0, 1]")));
    }
    let m = load(manifest, SplitRole::Train)?;
    let v = vpl::video_pseudo_labels(&m.videos, seed).map_err(runtime)?;
    let null = spl::fit_null_gaussian(&m.videos, &v.labels).map_err(runtime)?;
    let mix = spl::build_mixture(&[null]).map_err(runtime)?;
    let seg = spl::generate_all(&m.videos, &v.labels, &mix, beta).map_err(runtime)?;
    write_file(out, &harness::format_segment_labels(&seg))?;
    let video_out = PathBuf::from(format!("{}.video", out.display()));
    write_file(&video_out, &harness::format_video_labels(&v.labels))?;
    println!(
        "{} videos, {} pseudo-anomalous, {} anomalous segments",
        v.labels.len(),
        v.labels.num_anomalous(),
        seg.num_positive()
    );
    Ok(())
}

fn cmd_stats(manifest: &Path, out: &Path) -> CmdResult {
    let m = load(manifest, SplitRole::Train)?;
    let summaries = m
        .videos
        .iter()
        .map(stats::summarize_video)
        .collect::<Result<Vec<_>, _>>()
        .map_err(invalid)?;
    write_file(out, &harness::format_summaries(&summaries))
}

fn cmd_comms(config: Option<&Path>, dim: usize) -> CmdResult {
    if dim == 0 {
        return Err(invalid(anyhow!("--dim must be positive")));
    }
    let cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(invalid)?;
            FederationConfig::parse_with(&text, &["test_manifest"]).map_err(invalid)?.0
        }
        None => FederationConfig::default(),
    };
    let ledger = federation::comms_accounting(&cfg, dim);
    let pc = fedvad_core::detector::param_count(dim);
    println!("param_count\t{pc}");
    println!("round_payload_bytes\t{}", pc * 4);
    for (p, b) in ledger.per_participant() {
        println!("participant {p}\t{b}\tbytes\t{:.2} MB", b as f64 / 1e6);
    }
    println!("total\t{}\tbytes", ledger.total());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth {
            out,
            videos,
            anomaly_frac,
            dim,
            seed,
        } => cmd_synth(&out, videos, anomaly_frac, dim, seed),
        Command::Split {
            manifest,
            strategy,
            participants,
            seed,
            out,
        } => cmd_split(&manifest, strategy, participants, seed, &out),
        Command::Train(args) => cmd_train(&args),
        Command::Eval { model, test, dump_tracks } => cmd_eval(&model, &test, dump_tracks),
        Command::PseudoLabel {
            manifest,
            beta,
            seed,
            out,
        } => cmd_pseudo_label(&manifest, beta, seed, &out),
        Command::Stats { manifest, out } => cmd_stats(&manifest, &out),
        Command::Comms { config, dim } => cmd_comms(config.as_deref(), dim),
    }
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
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
