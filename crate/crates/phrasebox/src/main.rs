//! Command-line driver: dataset generation, pretraining, two-stage
//! training, decoding, evaluation, ablations, and gradient checking, all
//! replayable from (config, seed).

use clap::{Args, Parser, Subcommand};
use phrasebox::ablate::{self, AblationConfig, MsbMode, PhraseOrder, SuiteReport};
use phrasebox::config::RunConfig;
use phrasebox::decision::{write_groundings, DecodeOptions};
use phrasebox::error::{Error, Result};
use phrasebox::model::{CandidateSource, GroundingModel};
use phrasebox::nn::ParamStore;
use phrasebox::order_embed;
use phrasebox::synth::{self, Dataset};
use phrasebox::trainer::{self, Stage};
use phrasebox::{checkpoint, metrics, verify};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "phrasebox", version, about = "Sequential phrase grounding on synthetic feature-level worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config's seed everywhere.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat dotted-key overrides, e.g. --set world.ambiguity_rate=0.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, order: Option<PhraseOrder>) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.set)?;
        cfg.apply_cli(self.seed, order);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_order(s: &str) -> Result<PhraseOrder> {
    match s {
        "l2r" => Ok(PhraseOrder::L2r),
        "r2l" => Ok(PhraseOrder::R2l),
        "random" => Ok(PhraseOrder::Random),
        other => Err(Error::Usage(format!("unknown order '{other}' (expected l2r|r2l|random)"))),
    }
}

fn parse_stage(n: u8) -> Result<Stage> {
    match n {
        1 => Ok(Stage::One),
        2 => Ok(Stage::Two),
        other => Err(Error::Usage(format!("stage must be 1 or 2, got {other}"))),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounding world and write its dataset files.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the phrase and visual encoders with the ranking loss.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the grounding network (stage 1: ground-truth boxes, stage 2:
    /// proposals, then hard-negative fine-tuning).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint base to initialize from (matching parameters load).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Run a single stage instead of the full schedule.
        #[arg(long)]
        stage: Option<u8>,
        /// Phrase grounding order: l2r | r2l | random.
        #[arg(long)]
        order: Option<String>,
        /// Ablation preset to train (see `ablate`).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Decode scenes with a trained model and write grounding JSON-lines.
    Ground {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset split to decode.
        #[arg(long, default_value = "test")]
        split: String,
        /// Candidate boxes: stage 1 decodes over ground-truth boxes,
        /// stage 2 over proposals.
        #[arg(long, default_value_t = 1)]
        stage: u8,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        nms_iou: Option<f64>,
        /// Feed the whole sentence, fillers included.
        #[arg(long)]
        unguided: bool,
        /// Feed only the groundable phrases.
        #[arg(long, conflicts_with = "unguided")]
        guided: bool,
    },
    /// Decode and score a split; writes metrics JSON and per-position CSV.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 1)]
        stage: u8,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        nms_iou: Option<f64>,
        #[arg(long)]
        unguided: bool,
        #[arg(long, conflicts_with = "unguided")]
        guided: bool,
    },
    /// Train (optionally) and evaluate the baselines and ablation presets.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Presets to include; defaults to the whole grid.
        #[arg(long)]
        preset: Vec<String>,
        /// Train missing checkpoints instead of reporting them absent.
        #[arg(long)]
        train: bool,
        #[arg(long)]
        order: Option<String>,
    },
    /// Finite-difference check of the end-to-end gradients on a toy scene.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    synth::read_dataset(dir)
}

fn split_of<'d>(ds: &'d Dataset, name: &str) -> Result<&'d [synth::SceneRecord]> {
    match name {
        "train" => Ok(&ds.train),
        "val" => Ok(&ds.val),
        "test" => Ok(&ds.test),
        other => Err(Error::Usage(format!("unknown split '{other}'"))),
    }
}

/// Builds a fresh model for this config over the dataset's vocabulary.
fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<(ParamStore, GroundingModel)> {
    let mut rng = phrasebox::rngs::stream(cfg.seed, "model/init");
    let mut store = ParamStore::new();
    let model =
        GroundingModel::new(&mut store, cfg.model.clone(), ds.embeddings.clone(), &mut rng)?;
    Ok((store, model))
}

fn decode_options(
    cfg: &RunConfig,
    threshold: Option<f64>,
    nms_iou: Option<f64>,
    unguided: bool,
    guided: bool,
) -> DecodeOptions {
    let unguided_mode = if unguided {
        true
    } else if guided {
        false
    } else {
        cfg.eval.unguided
    };
    DecodeOptions {
        threshold: threshold.unwrap_or(cfg.eval.threshold),
        nms_iou: nms_iou.unwrap_or(cfg.eval.nms_iou),
        guided: !unguided_mode,
        order_seed: cfg.seed,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.resolve(None)?;
            let ds = synth::generate(&cfg.world)?;
            synth::write_dataset(&ds, &out)?;
            cfg.write_echo(&out)?;
            println!(
                "wrote {} train / {} val / {} test scenes to {}",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Pretrain { cfg, data, out } => {
            let mut cfg = cfg.resolve(None)?;
            let ds = load_dataset(&data)?;
            cfg.world = ds.spec.clone();
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            cfg.write_echo(&out)?;
            let (mut store, model) = build_model(&cfg, &ds)?;
            let pairs = synth::extract_pairs(&ds.train);
            let losses =
                order_embed::pretrain(&mut store, &model.encoders, &pairs, &cfg.pretrain, cfg.seed)?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{e},{l:.8}\n"));
            }
            write_text(&out.join("pretrain_loss.csv"), &csv)?;
            model.save(&store, &out.join("pretrained"))?;
            let recall = order_embed::recall_at_1(&store, &model.encoders, &ds.val)?;
            write_text(
                &out.join("pretrain_report.json"),
                &serde_json::to_string_pretty(&serde_json::json!({
                    "pairs": pairs.len(),
                    "epochs": losses.len(),
                    "final_loss": losses.last(),
                    "val_recall_at_1": recall,
                }))?,
            )?;
            println!("pretrained on {} pairs; val recall@1 {recall:.4}", pairs.len());
            Ok(())
        }
        Command::Train { cfg, data, out, init, stage, order, preset } => {
            let order = order.as_deref().map(parse_order).transpose()?;
            let mut cfg = cfg.resolve(order)?;
            if let Some(p) = &preset {
                cfg.set_preset(p)?;
            }
            let ds = load_dataset(&data)?;
            cfg.world = ds.spec.clone();
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            cfg.write_echo(&out)?;
            let (mut store, model) = build_model(&cfg, &ds)?;
            if let Some(init) = &init {
                let (copied, total) =
                    checkpoint::load_matching(&mut store, &init.with_extension("ckpt"))?;
                println!("initialized {copied}/{} parameters from {} ({total} in file)", store.len(), init.display());
            }
            let mut logs = Vec::new();
            let stages: Vec<Stage> = match stage {
                Some(n) => vec![parse_stage(n)?],
                None => vec![Stage::One, Stage::Two],
            };
            for st in &stages {
                let stage_logs =
                    trainer::train_stage(&mut store, &model, &ds.train, Some(&ds.val), *st, &cfg.train)?;
                logs.extend(stage_logs);
                model.save(&store, &out.join(format!("stage{}", st.number())))?;
            }
            if stages.contains(&Stage::Two) && cfg.train.mine_hard_negatives {
                let labeled: Vec<trainer::LabeledScene> = ds
                    .train
                    .iter()
                    .map(|s| trainer::assign_labels(s, Stage::Two, &cfg.train))
                    .collect::<Result<_>>()?;
                let mined = trainer::hard_negative_mine(&store, &model, &ds.train, &labeled, &cfg.train)?;
                let mined_count: usize =
                    mined.values().flat_map(|v| v.iter()).map(|b| b.len()).sum();
                let log = trainer::fine_tune_with_mined(
                    &mut store, &model, &ds.train, &labeled, &mined, &cfg.train,
                )?;
                println!("hard-negative pass mined {mined_count} pairs; fine-tune loss {:.6}", log.loss);
                logs.push(log);
                model.save(&store, &out.join("mined"))?;
            }
            write_text(&out.join("train_log.csv"), &trainer::logs_to_csv(&logs))?;
            if let Some(last) = logs.last() {
                println!("final loss {:.6} (stage {})", last.loss, last.stage);
            }
            Ok(())
        }
        Command::Ground { cfg, model, data, out, split, stage, threshold, nms_iou, unguided, guided } => {
            let cfg = cfg.resolve(None)?;
            let ds = load_dataset(&data)?;
            let scenes = split_of(&ds, &split)?;
            let (store, model) = GroundingModel::load(&model)?;
            let opts = decode_options(&cfg, threshold, nms_iou, unguided, guided);
            let source = parse_stage(stage)?.candidate_source();
            let results = ablate::decode_scenes(&store, &model, scenes, source, &opts)?;
            std::fs::create_dir_all(&out)?;
            cfg.write_echo(&out)?;
            write_groundings(&results, &out.join("groundings.jsonl"))?;
            println!("decoded {} scenes into {}", results.len(), out.display());
            Ok(())
        }
        Command::Eval { cfg, model, data, out, split, stage, threshold, nms_iou, unguided, guided } => {
            let cfg = cfg.resolve(None)?;
            let ds = load_dataset(&data)?;
            let scenes = split_of(&ds, &split)?;
            let (store, model) = GroundingModel::load(&model)?;
            let opts = decode_options(&cfg, threshold, nms_iou, unguided, guided);
            let source = parse_stage(stage)?.candidate_source();
            let results = ablate::decode_scenes(&store, &model, scenes, source, &opts)?;
            let report = metrics::grounding_accuracy(&results, scenes)?;
            std::fs::create_dir_all(&out)?;
            cfg.write_echo(&out)?;
            write_groundings(&results, &out.join("groundings.jsonl"))?;
            write_text(
                &out.join("metrics.json"),
                &serde_json::to_string_pretty(&report.to_json())?,
            )?;
            write_text(&out.join("positions.csv"), &report.positions_csv())?;
            println!(
                "accuracy {:.4} ({}/{} noun phrases){}",
                report.overall,
                report.counts.correct,
                report.counts.total,
                report
                    .ambiguous_accuracy()
                    .map_or(String::new(), |a| format!("; relational subset {a:.4}")),
            );
            Ok(())
        }
        Command::Ablate { cfg, data, out, preset, train, order } => {
            let order = order.as_deref().map(parse_order).transpose()?;
            let cfg = cfg.resolve(order)?;
            let ds = load_dataset(&data)?;
            run_ablation_suite(cfg, &ds, &out, &preset, train)
        }
        Command::Gradcheck { eps, tol, seed } => {
            let mut rig = verify::build_toy_rig(seed)?;
            let grounding = verify::grounding_grad_check(&mut rig, eps, tol)?;
            println!(
                "grounding loss: max relative error {:.3e} over {} coordinates -> {}",
                grounding.max_rel_err,
                grounding.coords_checked,
                if grounding.passed() { "PASS" } else { "FAIL" }
            );
            let pretrain = verify::pretrain_grad_check(&mut rig, eps, tol)?;
            println!(
                "pretraining loss: max relative error {:.3e} over {} coordinates -> {}",
                pretrain.max_rel_err,
                pretrain.coords_checked,
                if pretrain.passed() { "PASS" } else { "FAIL" }
            );
            if !(grounding.passed() && pretrain.passed()) {
                std::process::exit(1);
            }
            Ok(())
        }
    }
}

/// Trains (when asked) and evaluates the preset grid on the test split,
/// writing the accuracy table and per-position curves.
fn run_ablation_suite(
    mut cfg: RunConfig,
    ds: &Dataset,
    out: &Path,
    presets: &[String],
    train: bool,
) -> Result<()> {
    cfg.world = ds.spec.clone();
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    cfg.write_echo(out)?;
    let default_presets: Vec<String> = ["MSB", "MSBs"]
        .iter()
        .map(|s| s.to_string())
        .chain(AblationConfig::trained_preset_names().iter().map(|s| s.to_string()))
        .collect();
    let presets: Vec<String> =
        if presets.is_empty() { default_presets } else { presets.to_vec() };
    let source = CandidateSource::GtBoxes;
    let opts = DecodeOptions {
        threshold: cfg.eval.threshold,
        nms_iou: cfg.eval.nms_iou,
        guided: !cfg.eval.unguided,
        order_seed: cfg.seed,
    };

    // shared pretrained encoders (and shared random init for everything else)
    let pretrained_base = out.join("pretrained");
    let needs_pretrained = presets.iter().any(|p| p == "MSB" || p == "MSBs") || train;
    let have_pretrained = pretrained_base.with_extension("ckpt").exists();
    if needs_pretrained && !have_pretrained && train {
        let mut full_cfg = cfg.clone();
        full_cfg.set_preset("full")?;
        let (mut store, model) = {
            let mut rng = phrasebox::rngs::stream(full_cfg.seed, "model/init");
            let mut store = ParamStore::new();
            let model = GroundingModel::new(
                &mut store,
                full_cfg.model.clone(),
                ds.embeddings.clone(),
                &mut rng,
            )?;
            (store, model)
        };
        let pairs = synth::extract_pairs(&ds.train);
        order_embed::pretrain(&mut store, &model.encoders, &pairs, &cfg.pretrain, cfg.seed)?;
        model.save(&store, &pretrained_base)?;
        println!("pretrained shared encoders");
    }

    let mut report = SuiteReport { rows: vec![] };
    for preset in &presets {
        let is_msb = preset == "MSB" || preset == "MSBs";
        if is_msb {
            if !pretrained_base.with_extension("ckpt").exists() {
                println!("{preset}: pretrained encoders absent, skipping");
                report.push_row(preset, None)?;
                continue;
            }
            let mut p_cfg = cfg.clone();
            p_cfg.set_preset(preset)?;
            let (mut store, model) = build_model(&p_cfg, ds)?;
            checkpoint::load_matching(&mut store, &pretrained_base.with_extension("ckpt"))?;
            let mode = if preset == "MSB" {
                MsbMode::Single
            } else {
                let slack = ablate::tune_msbs_slack(&store, &model, &ds.val, source)?;
                println!("MSBs slack tuned to {slack}");
                MsbMode::Multi { slack }
            };
            let results: Vec<_> = ds
                .test
                .iter()
                .map(|s| ablate::msb_ground(&store, &model, s, source, mode))
                .collect::<Result<_>>()?;
            report.push_row(preset, Some((&results, &ds.test)))?;
            continue;
        }

        let base = out.join(preset);
        if !base.with_extension("ckpt").exists() {
            if !train {
                println!("{preset}: checkpoint absent, skipping");
                report.push_row(preset, None)?;
                continue;
            }
            let mut p_cfg = cfg.clone();
            p_cfg.set_preset(preset)?;
            let (mut store, model) = build_model(&p_cfg, ds)?;
            if pretrained_base.with_extension("ckpt").exists() {
                checkpoint::load_matching(&mut store, &pretrained_base.with_extension("ckpt"))?;
            }
            let logs = trainer::train_stage(
                &mut store,
                &model,
                &ds.train,
                Some(&ds.val),
                Stage::One,
                &p_cfg.train,
            )?;
            model.save(&store, &base)?;
            if let Some(l) = logs.last() {
                println!(
                    "{preset}: trained, final loss {:.6}, val accuracy {}",
                    l.loss,
                    l.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
        }
        let (store, model) = GroundingModel::load(&base)?;
        let results = ablate::decode_scenes(&store, &model, &ds.test, source, &opts)?;
        report.push_row(preset, Some((&results, &ds.test)))?;
    }

    write_text(&out.join("report.md"), &report.to_markdown())?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    write_text(&out.join("positions.csv"), &report.positions_csv())?;
    println!("{}", report.to_markdown());
    Ok(())
}
