use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lesionseg::data::{
    build_manifest, class_name, generate_synthetic_dataset, ingest_patch, write_patch,
    Species, SpeciesProfile, SplitCounts, SplitRatios, SyntheticSpec,
};
use lesionseg::data::patch::class_id_from_name;
use lesionseg::experiments::report::{markdown_report, parse_csv};
use lesionseg::experiments::{
    check_consistency, load_scenario_data, parse_scenarios, predict_file, run_suite, train_scenario, RunConfig,
    Scenario,
};
use lesionseg::training::select_checkpoint;
use lesionseg::{Error, Result};

#[derive(Parser)]
#[command(name = "lesionseg", version, about = "Class-conditional lesion segmentation for glomerular patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize one raw image/mask pair into a working-size patch.
    Ingest(IngestArgs),
    /// Build a stratified train/val/test manifest for a dataset directory.
    Split(SplitArgs),
    /// Generate a synthetic two-species dataset with a manifest.
    Synth(SynthArgs),
    /// Train the model for a scenario's training set.
    Train(RunArgs),
    /// Evaluate a checkpoint on a scenario's test set.
    Evaluate(EvaluateArgs),
    /// Write the thresholded mask for one image and class.
    Predict(PredictArgs),
    /// Run scenarios end to end and write CSV/markdown reports, or re-render
    /// a report from an existing CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct Overrides {
    /// Run configuration (INI).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides [experiment] out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for both network init and data order.
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(e) = self.epochs {
            cfg.training.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.network.seed = s;
            cfg.training.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Class id (1-based) or name (GS, HN, ML, MA, NS, SS).
    #[arg(long = "class")]
    class: String,
    #[arg(long, default_value = "mouse")]
    species: Species,
    /// Dataset root; the patch goes to <out>/<species>/<CLASS>/<id>_img.png.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    id: String,
    /// Optional config supplying species profiles.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    num_classes: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    root: PathBuf,
    /// Manifest file (default <root>/manifest.tsv).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// train,val,test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    ratios: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "mouse,human")]
    species: String,
    /// Patches per class for each of train, val and test.
    #[arg(long, default_value_t = 5)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    working_size: usize,
    #[arg(long, default_value_t = 128)]
    capture_size: usize,
    /// Mouse/human appearance shift in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    #[arg(long, default_value_t = 0.04)]
    noise: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    /// Scenario whose training set is used (default: first in config).
    #[arg(long)]
    scenario: Option<Scenario>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Checkpoint directory to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long = "class")]
    class: String,
    #[arg(long, default_value = "human")]
    species: Species,
    /// Optional config supplying species profiles and threshold.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, conflicts_with = "csv")]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated scenarios or "all" (overrides the config).
    #[arg(long)]
    scenarios: Option<String>,
    /// Re-render the markdown table from an existing metrics CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_class(s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .ok()
        .or_else(|| class_id_from_name(&s.trim().to_ascii_uppercase()))
        .ok_or_else(|| Error::Config(format!("unknown class '{s}'")))
}

fn profile_for(config: Option<&Path>, species: Species) -> Result<(SpeciesProfile, Option<RunConfig>)> {
    match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            Ok((cfg.profiles[&species].clone(), Some(cfg)))
        }
        None => Ok((SpeciesProfile::default_for(species), None)),
    }
}

fn pick_scenario(cfg: &RunConfig, s: Option<Scenario>) -> Result<Scenario> {
    s.or_else(|| cfg.scenarios.first().copied())
        .ok_or_else(|| Error::Config("no scenario given (use --scenario or [experiment] scenarios)".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => {
            let class_id = parse_class(&a.class)?;
            let (profile, _) = profile_for(a.config.as_deref(), a.species)?;
            let patch = ingest_patch(&a.image, &a.mask, class_id, a.num_classes, a.species, &profile)?;
            let dir = a.out.join(a.species.as_str()).join(class_name(class_id));
            write_patch(&patch, &dir, &a.id)?;
            println!("{}", dir.join(format!("{}_img.png", a.id)).display());
        }
        Command::Split(a) => {
            let r: Vec<f64> = a
                .ratios
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad ratio '{v}'"))))
                .collect::<Result<_>>()?;
            let [train, val, test] = r[..] else {
                return Err(Error::Config("--ratios needs three values".into()));
            };
            let manifest = build_manifest(&a.root, SplitRatios::new(train, val, test)?, a.seed)?;
            let out = a.out.unwrap_or_else(|| a.root.join("manifest.tsv"));
            manifest.save(&out)?;
            println!("{} entries -> {}", manifest.entries.len(), out.display());
        }
        Command::Synth(a) => {
            let species = a
                .species
                .split(',')
                .map(|s| Ok((s.parse()?, SplitCounts::uniform(a.per_class))))
                .collect::<Result<Vec<_>>>()?;
            let spec = SyntheticSpec {
                working_size: a.working_size,
                capture_size: a.capture_size,
                species,
                noise: a.noise,
                species_shift: a.shift,
                seed: a.seed,
                ..Default::default()
            };
            let ds = generate_synthetic_dataset(&spec, &a.out)?;
            println!("{} patches -> {}", ds.manifest.entries.len(), ds.manifest_path.display());
        }
        Command::Train(a) => {
            let cfg = a.common.load()?;
            let sc = pick_scenario(&cfg, a.scenario)?;
            let data = load_scenario_data(&cfg, sc)?;
            let (history, dir) = train_scenario(&cfg, sc, &data)?;
            let best = select_checkpoint(&history, sc.criterion())?;
            println!(
                "trained {} epochs -> {}; best by {}: epoch {best}",
                history.records.len(),
                dir.display(),
                sc.criterion()
            );
        }
        Command::Evaluate(a) => {
            let mut cfg = a.common.load()?;
            let sc = pick_scenario(&cfg, a.scenario)?;
            cfg.scenarios = vec![sc];
            cfg.checkpoint = Some(a.checkpoint);
            let (report, _) = run_suite(&cfg)?;
            print!("{}", std::fs::read_to_string(&report.markdown_path).map_err(|e| Error::Io {
                path: report.markdown_path.clone(),
                source: e,
            })?);
        }
        Command::Predict(a) => {
            let class_id = parse_class(&a.class)?;
            let (profile, cfg) = profile_for(a.config.as_deref(), a.species)?;
            let threshold = a
                .threshold
                .or(cfg.map(|c| c.training.threshold))
                .unwrap_or(0.5);
            let mask = predict_file(&a.checkpoint, &a.image, class_id, &profile, threshold, &a.out)?;
            println!("{} foreground px -> {}", mask.count(), a.out.display());
        }
        Command::Report(a) => match (a.csv, a.config) {
            (Some(csv), _) => {
                let text = std::fs::read_to_string(&csv).map_err(|e| Error::Io {
                    path: csv.clone(),
                    source: e,
                })?;
                let md = markdown_report(&parse_csv(&text)?);
                check_consistency(&text, &md)?;
                match a.out {
                    Some(out) => std::fs::write(&out, &md).map_err(|e| Error::Io { path: out, source: e })?,
                    None => print!("{md}"),
                }
            }
            (None, Some(config)) => {
                let common = Overrides {
                    config,
                    out: a.out,
                    epochs: a.epochs,
                    seed: a.seed,
                };
                let mut cfg = common.load()?;
                if let Some(list) = a.scenarios {
                    cfg.scenarios = parse_scenarios(&list)?;
                }
                let (report, _) = run_suite(&cfg)?;
                let csv = std::fs::read_to_string(&report.csv_path).map_err(|e| Error::Io {
                    path: report.csv_path.clone(),
                    source: e,
                })?;
                let md = std::fs::read_to_string(&report.markdown_path).map_err(|e| Error::Io {
                    path: report.markdown_path.clone(),
                    source: e,
                })?;
                check_consistency(&csv, &md)?;
                print!("{md}");
            }
            (None, None) => return Err(Error::Config("report needs --config or --csv".into())),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
