use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use lookaround_core::disagreement::{build_disagreement_map, ScoreKind};
use lookaround_core::harness::{
    self, AblationAxis, EpisodeLog, MetricsFragment, MetricsReport, PolicyTraining, SceneSpec,
    SCHEMA_VERSION,
};
use lookaround_core::head::curve_csv;
use lookaround_core::policy::LearnedPolicyParams;
use lookaround_core::reconcile::PseudoDataset;
use lookaround_core::scene::generate_scene;
use lookaround_core::{PolicyKind, RunConfig};

#[derive(Parser)]
#[command(
    name = "lookaround",
    version,
    about = "Disagreement-driven exploration on synthetic voxel scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene and save it as JSON.
    GenerateScene {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one exploration episode.
    Explore(ExploreArgs),
    /// Turn an episode log into a pseudo-labelled dataset.
    Reconcile {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the classification head on a dataset.
    Finetune(FinetuneArgs),
    /// Run the full pipeline over the configured seeds.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare disagreement scores as the exploration reward.
    AblateScores {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one setting (score, alpha or policy).
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge metric files into one report.
    Report {
        /// metrics.json files written by `evaluate`.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train learned-policy weights with REINFORCE.
    TrainPolicy(TrainPolicyArgs),
}

#[derive(Args)]
struct ExploreArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    score: Option<ScoreKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learned-policy weights (JSON).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Also write the disagreement grid as h.csv.
    #[arg(long)]
    dump_h: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Config the dataset was produced with.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on per-view detections instead of reconciled labels.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
    /// Training curve; defaults to the output path with a .csv extension.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct TrainPolicyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Step budget of training episodes.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn require_steps(config: &RunConfig) -> Result<()> {
    if config.steps == 0 {
        bail!("steps must be > 0");
    }
    Ok(())
}

fn out_dir(explicit: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    explicit
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn generate(config: Option<PathBuf>, seed: u64, out: PathBuf) -> Result<()> {
    let config = load_config(config.as_deref())?;
    let SceneSpec::Generate(gen) = &config.scene else {
        bail!("config names a scene file; nothing to generate");
    };
    let scene = generate_scene(gen, seed)?;
    info!("scene: {} objects", scene.objects().len());
    write(&out, scene.save())
}

fn explore(a: ExploreArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(p) = a.policy {
        config.policy = p;
    }
    if let Some(s) = a.score {
        config.score = s;
    }
    if let Some(n) = a.steps {
        config.steps = n;
    }
    if let Some(path) = &a.params {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config.learned = serde_json::from_str::<LearnedPolicyParams>(&text)?;
        config.learned.validate()?;
    }
    require_steps(&config)?;
    let ep = harness::run_episode(&config, a.seed)?;
    info!(
        "{} frames, {} detections, {} instances{}",
        ep.frames.len(),
        ep.detections.len(),
        ep.map.n_instances(),
        if ep.ended_early {
            ", exploration complete"
        } else {
            ""
        }
    );
    write(&a.out.join("episode.json"), ep.to_log(&config).to_json())?;
    write(&a.out.join("map.json"), ep.map_json())?;
    if a.dump_h {
        let h = build_disagreement_map(&ep.map, config.score, config.map_k, ep.scene.extent());
        write(
            &a.out.join("h.csv"),
            format!("schema_version={SCHEMA_VERSION}\n{}", h.to_csv()),
        )?;
    }
    Ok(())
}

fn reconcile(episode: PathBuf, out: PathBuf) -> Result<()> {
    let text =
        fs::read_to_string(&episode).with_context(|| format!("reading {}", episode.display()))?;
    let log = EpisodeLog::from_json(&text)?;
    let dataset = harness::reconcile_log(&log)?;
    info!(
        "{} frames, {} labels",
        dataset.frames.len(),
        dataset.n_labels()
    );
    let mut buf = Vec::new();
    dataset.write_jsonl(&mut buf)?;
    write(&out, buf)
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    let hyper = &mut config.finetune.hyper;
    if let Some(x) = a.alpha {
        hyper.alpha = x;
    }
    if let Some(x) = a.margin {
        hyper.margin = x;
    }
    if let Some(n) = a.epochs {
        hyper.epochs = n;
    }
    let file =
        fs::File::open(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;
    let dataset = PseudoDataset::read_jsonl(std::io::BufReader::new(file))?;
    let (run, curve) = harness::finetune_dataset(&config, &dataset, a.raw, a.seed)?;
    info!(
        "{} samples; holdout accuracy {:.4} (untrained {:.4})",
        run.n_samples, run.holdout_accuracy, run.holdout_accuracy_untrained
    );
    write(&a.out, serde_json::to_string_pretty(&run)?)?;
    let curve_path = a.curve.unwrap_or_else(|| a.out.with_extension("csv"));
    write(&curve_path, curve_csv(&curve))
}

fn evaluate(config: Option<PathBuf>, seeds: Option<Vec<u64>>, out: Option<PathBuf>) -> Result<()> {
    let mut config = load_config(config.as_deref())?;
    if let Some(s) = seeds {
        config.seeds = s;
    }
    require_steps(&config)?;
    let mut fragments = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (_, m) = harness::run_pipeline(&config, seed)?;
        info!(
            "seed {seed}: raw acc {:.3}, reconciled acc {:.3}, head acc {:.3}",
            m.raw_accuracy, m.reconciled_accuracy, m.head_accuracy
        );
        fragments.push(m);
    }
    let report = harness::report(&fragments)?;
    let dir = out_dir(out, &config);
    report.write(&dir)?;
    info!("wrote {}", dir.display());
    Ok(())
}

fn ablate(
    config: Option<PathBuf>,
    axis: AblationAxis,
    values: Option<Vec<String>>,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = load_config(config.as_deref())?;
    require_steps(&config)?;
    let values = values.unwrap_or_else(|| axis.default_values());
    let table = harness::ablate(&config, axis, &values)?;
    let csv = table.to_csv();
    print!("{csv}");
    let dir = out_dir(out, &config);
    write(&dir.join(format!("ablation_{axis}.csv")), csv)?;
    write(&dir.join(format!("ablation_{axis}.json")), table.to_json())
}

fn merge_reports(inputs: Vec<PathBuf>, out: PathBuf) -> Result<()> {
    let mut fragments: Vec<MetricsFragment> = Vec::new();
    for path in &inputs {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r: MetricsReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if r.schema_version != SCHEMA_VERSION {
            bail!(
                "{}: unsupported schema_version {}",
                path.display(),
                r.schema_version
            );
        }
        fragments.extend(r.per_seed);
    }
    let report = harness::report(&fragments)?;
    report.write(&out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn train_policy(a: TrainPolicyArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    config.policy = PolicyKind::Learned;
    let mut t = PolicyTraining::default();
    if let Some(x) = a.scenes {
        t.scenes = x;
    }
    if let Some(x) = a.rollouts {
        t.rollouts = x;
    }
    if let Some(x) = a.lr {
        t.lr = x;
    }
    if let Some(x) = a.steps {
        t.steps = x;
    }
    let (params, curve) = harness::train_policy(&config, &config.learned, &t, a.seed)?;
    info!("weights {:?}", params.weights);
    write(&a.out, serde_json::to_string_pretty(&params)?)?;
    let mut csv = format!("schema_version={SCHEMA_VERSION}\nbatch,mean_return\n");
    for (k, r) in curve.iter().enumerate() {
        csv.push_str(&format!("{k},{r}\n"));
    }
    write(&a.out.with_extension("csv"), csv)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOOKAROUND_LOG", "info"))
        .init();
    match Cli::parse().command {
        Command::GenerateScene { config, seed, out } => generate(config, seed, out),
        Command::Explore(a) => explore(a),
        Command::Reconcile { episode, out } => reconcile(episode, out),
        Command::Finetune(a) => finetune(a),
        Command::Evaluate { config, seeds, out } => evaluate(config, seeds, out),
        Command::AblateScores { config, out } => ablate(config, AblationAxis::Score, None, out),
        Command::Ablate {
            config,
            axis,
            values,
            out,
        } => ablate(config, axis, values, out),
        Command::Report { inputs, out } => merge_reports(inputs, out),
        Command::TrainPolicy(a) => train_policy(a),
    }
}
