mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use haicu::checkpoint::{self, dataset_hash, RunMetadata};
use haicu::counterfactual::CounterfactualSpec;
use haicu::dataset::{
    confusion_and_topk, dataset_statistics, load_scenes, split_scenes, write_scenes, DatasetSplit, GeneratorSpec,
};
use haicu::metrics::{compare, evaluate, EvalConfig};
use haicu::model::{count_flops, count_parameters, Haicu, ModelConfig, Variant};
use haicu::scene::Scene;
use haicu::training::train;
use haicu_service::{predict_payload, sweep_payload, whatif_payload, AppState, PredictRequest, SweepRequest, WhatIfRequest};

use config::FileConfig;

#[derive(Parser)]
#[command(name = "haicu", version, about = "Trajectory forecasting conditioned on class probabilities")]
struct Cli {
    /// TOML file with [model], [training] and [eval] tables; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (generation, initialization, splits, sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Urban,
    Confusable,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes as JSON lines.
    Generate {
        /// Generator spec (TOML or JSON) with `generator` and `noise` tables.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Override the number of scenes.
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-uncertainty statistics of a dataset.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Training-curve log, one JSON object per epoch.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Score a checkpoint and write a report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated horizons in seconds.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<f64>>,
        #[arg(long)]
        report: PathBuf,
        /// Scenes to score, using the split recorded in the checkpoint.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Second checkpoint to compare against with t-tests.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Predict distributions for the agents of one scene.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        scene_id: Option<String>,
        #[arg(long)]
        timestep: Option<i64>,
        #[arg(long, value_delimiter = ',')]
        agents: Option<Vec<String>>,
        /// Seconds.
        #[arg(long, default_value_t = 2.0)]
        horizon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict under overridden class probabilities.
    Whatif {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Counterfactual spec (JSON or TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        scene_id: Option<String>,
        #[arg(long)]
        timestep: Option<i64>,
        #[arg(long, default_value_t = 2.0)]
        horizon: f64,
        /// Also sweep this agent's probabilities towards --target.
        #[arg(long, requires = "target")]
        sweep_agent: Option<String>,
        #[arg(long, value_delimiter = ',')]
        target: Option<Vec<f64>>,
        #[arg(long, default_value_t = 11)]
        lambdas: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve predictions over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Longest horizon a request may ask for, seconds.
        #[arg(long, default_value_t = haicu_service::DEFAULT_MAX_HORIZON_S)]
        max_horizon: f64,
    },
    /// Parameter and FLOP counts for a checkpoint or a configuration.
    CountParams {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Number of classes when no checkpoint is given.
        #[arg(long, default_value_t = 11)]
        classes: usize,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: haicu::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

/// Prints to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn read_structured<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> anyhow::Result<Vec<Scene>> {
    let scenes = load_scenes(path)?;
    if scenes.is_empty() {
        bail!("{} contains no scenes", path.display());
    }
    Ok(scenes)
}

fn pick_scene(scenes: Vec<Scene>, id: Option<&str>) -> anyhow::Result<Scene> {
    match id {
        None => scenes.into_iter().next().context("no scenes in file"),
        Some(id) => scenes
            .into_iter()
            .find(|s| s.scene_id == id)
            .with_context(|| format!("unknown scene {id}")),
    }
}

/// The first timestep at which a full history window is available.
fn default_timestep(scene: &Scene, config: &ModelConfig) -> anyhow::Result<i64> {
    let (start, end) = scene.time_span().context("scene has no observations")?;
    Ok((start + config.history as i64).min(end))
}

fn select_split(scenes: &[Scene], seed: u64, which: SplitArg) -> anyhow::Result<Vec<Scene>> {
    if which == SplitArg::All {
        return Ok(scenes.to_vec());
    }
    let split = split_scenes(scenes, seed)?;
    let ids = match which {
        SplitArg::Train => &split.train,
        SplitArg::Val => &split.val,
        _ => &split.test,
    };
    Ok(DatasetSplit::select(scenes, ids).into_iter().cloned().collect())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::Generate {
            spec,
            preset,
            scenes,
            out,
        } => {
            let mut spec: GeneratorSpec = match (spec, preset) {
                (Some(path), _) => read_structured(&path)?,
                (None, Some(Preset::Confusable)) => GeneratorSpec::confusable_classes(300),
                (None, _) => GeneratorSpec {
                    generator: haicu::dataset::GeneratorConfig::urban_default(),
                    noise: haicu::dataset::PerceptionNoiseModel::identity(3),
                },
            };
            if let Some(n) = scenes {
                spec.generator.num_scenes = n;
            }
            let data = spec.generate(seed)?;
            write_scenes(&out, &data)?;
            log::info!("wrote {} scenes to {}", data.len(), out.display());
        }
        Command::Analyze { input, report } => {
            let scenes = load_data(&input)?;
            let stats = dataset_statistics(&scenes)?;
            let labelled = scenes.iter().flat_map(|s| &s.tracks).all(|t| t.true_class.is_some());
            let confusion = if labelled {
                Some(confusion_and_topk(scenes.iter().flat_map(|s| &s.tracks))?)
            } else {
                None
            };
            emit(&stats.to_table());
            write_json(&report, &json!({ "statistics": stats, "confusion": confusion }))?;
        }
        Command::Train {
            data,
            out,
            variant,
            epochs,
            curve,
        } => {
            let scenes = load_data(&data)?;
            let split = split_scenes(&scenes, seed)?;
            let pick = |ids: &[String]| DatasetSplit::select(&scenes, ids).into_iter().cloned().collect::<Vec<_>>();
            let (train_set, val_set) = (pick(&split.train), pick(&split.val));
            let model_cfg = file.model.build(scenes[0].class_names.clone(), scenes[0].dt, variant);
            let mut tc = file.training.clone();
            tc.seed = seed;
            if let Some(e) = epochs {
                tc.max_epochs = e;
            }
            let mut model = Haicu::new(model_cfg, seed)?;
            log::info!(
                "training {} ({} parameters) on {} scenes, validating on {}",
                model.config.variant,
                model.num_parameters(),
                train_set.len(),
                val_set.len()
            );
            let outcome = train(&mut model, &train_set, &val_set, &tc, curve.as_deref())?;
            let meta = RunMetadata {
                seed,
                dataset_hash: dataset_hash(&scenes),
                epoch: outcome.best_epoch,
                best_val_anll: Some(outcome.best_val_anll),
            };
            checkpoint::save(&model, &meta, &out)?;
            emit(&format!(
                "best epoch {} of {}: val ANLL {:.4}; wrote {}",
                outcome.best_epoch,
                outcome.epochs_run,
                outcome.best_val_anll,
                out.display()
            ));
        }
        Command::Eval {
            ckpt,
            data,
            horizons,
            report,
            split,
            compare: other,
            stride,
        } => {
            let (model, meta) = checkpoint::load(&ckpt)?;
            let scenes = load_data(&data)?;
            if split != SplitArg::All && dataset_hash(&scenes) != meta.dataset_hash {
                log::warn!("data differs from the training data; the split may overlap the training scenes");
            }
            let selected = select_split(&scenes, meta.seed, split)?;
            let defaults = EvalConfig::default();
            let cfg = EvalConfig {
                horizons_s: horizons.or(file.eval.horizons).unwrap_or(defaults.horizons_s),
                n_samples: file.eval.n_samples.unwrap_or(defaults.n_samples),
                seed,
                stride: stride.or(file.eval.stride).unwrap_or(defaults.stride),
                batch_size: file.eval.batch_size.unwrap_or(defaults.batch_size),
            };
            let name = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut rep = evaluate(&model, &name(&ckpt), &selected, &cfg)?;
            if let Some(path) = other {
                let (b, _) = checkpoint::load(&path)?;
                let rb = evaluate(&b, &name(&path), &selected, &cfg)?;
                rep.comparisons = compare(&rep, &rb)?;
            }
            emit(&rep.to_table());
            write_json(&report, &rep)?;
        }
        Command::Predict {
            ckpt,
            scene,
            scene_id,
            timestep,
            agents,
            horizon,
            out,
        } => {
            let (model, _) = checkpoint::load(&ckpt)?;
            let sc = pick_scene(load_data(&scene)?, scene_id.as_deref())?;
            let req = PredictRequest {
                scene_id: sc.scene_id.clone(),
                timestep: timestep.map_or_else(|| default_timestep(&sc, &model.config), Ok)?,
                agent_ids: agents,
                horizon_s: horizon,
                probe_id: None,
            };
            write_json(&out, &predict_payload(&model, &sc, &req, f64::INFINITY)?)?;
        }
        Command::Whatif {
            ckpt,
            scene,
            spec,
            scene_id,
            timestep,
            horizon,
            sweep_agent,
            target,
            lambdas,
            out,
        } => {
            let (model, _) = checkpoint::load(&ckpt)?;
            let sc = pick_scene(load_data(&scene)?, scene_id.as_deref())?;
            let spec: CounterfactualSpec = read_structured(&spec)?;
            let t = timestep.map_or_else(|| default_timestep(&sc, &model.config), Ok)?;
            let req = WhatIfRequest {
                predict: PredictRequest {
                    scene_id: sc.scene_id.clone(),
                    timestep: t,
                    agent_ids: None,
                    horizon_s: horizon,
                    probe_id: None,
                },
                spec,
            };
            let whatif = whatif_payload(&model, &sc, &req, f64::INFINITY)?;
            let sweep = match (sweep_agent, target) {
                (Some(agent_id), Some(target_probs)) => Some(sweep_payload(
                    &model,
                    &sc,
                    &SweepRequest {
                        scene_id: sc.scene_id.clone(),
                        timestep: t,
                        agent_id,
                        target_probs,
                        n_lambdas: lambdas,
                        horizon_s: horizon,
                        path: Default::default(),
                        probe_id: None,
                    },
                    f64::INFINITY,
                )?),
                _ => None,
            };
            write_json(&out, &json!({ "whatif": whatif, "sweep": sweep }))?;
        }
        Command::Serve {
            ckpt,
            data,
            port,
            max_horizon,
        } => {
            let (model, _) = checkpoint::load(&ckpt)?;
            let scenes = load_data(&data)?;
            let id = ckpt.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let state = AppState::new(model, id, scenes, max_horizon)?;
            tokio::runtime::Runtime::new()?.block_on(haicu_service::serve(state, port))?;
        }
        Command::CountParams { ckpt, classes, variant } => {
            let cfg = match ckpt {
                Some(p) => checkpoint::load(&p)?.0.config,
                None => {
                    if classes == 0 {
                        bail!("--classes must be positive");
                    }
                    let names = (0..classes).map(|i| format!("class{i}")).collect();
                    file.model.build(names, haicu::scene::DEFAULT_DT, variant)
                }
            };
            cfg.validate()?;
            emit(&format!("variant: {}", cfg.variant));
            emit(&format!("parameters: {}", count_parameters(&cfg)));
            emit(&format!(
                "flops (one agent, no neighbors, {} steps): {}",
                cfg.horizon,
                count_flops(&cfg, 1, 0, cfg.horizon)
            ));
        }
    }
    Ok(())
}
