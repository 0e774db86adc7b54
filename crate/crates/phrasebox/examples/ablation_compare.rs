//! Similarity baselines against the trained network on an ambiguous world.
//! The relational phrases ("c02 near c05") cannot be resolved by similarity
//! alone; the sequential model reads the anchor's box from its history.

use phrasebox::ablate::{self, AblationConfig, MsbMode};
use phrasebox::config::RunConfig;
use phrasebox::decision::DecodeOptions;
use phrasebox::metrics::grounding_accuracy;
use phrasebox::model::{CandidateSource, GroundingModel};
use phrasebox::nn::ParamStore;
use phrasebox::order_embed::{pretrain, PretrainConfig};
use phrasebox::synth::{extract_pairs, generate, WorldSpec};
use phrasebox::trainer::{train_stage, Stage};

fn main() -> phrasebox::Result<()> {
    let spec = WorldSpec {
        ambiguity_rate: 0.7,
        plural_rate: 0.2,
        scenes_train: 200,
        scenes_val: 30,
        scenes_test: 60,
        ..WorldSpec::default()
    };
    let ds = generate(&spec)?;
    let mut cfg = RunConfig::default();
    cfg.world = spec;
    cfg.train.epochs_stage1 = 40;
    cfg.train.lr_stage1 = 5e-3;
    cfg.model.dropout_head = 0.2;
    cfg.model.dropout_stack = 0.1;
    cfg.model.encoder.dropout = 0.2;

    // shared pretrained encoders
    let mut rng = phrasebox::rngs::stream(cfg.seed, "model/init");
    let mut store = ParamStore::new();
    let model = GroundingModel::new(&mut store, cfg.model.clone(), ds.embeddings.clone(), &mut rng)?;
    let pairs = extract_pairs(&ds.train);
    pretrain(&mut store, &model.encoders, &pairs, &PretrainConfig { epochs: 10, ..Default::default() }, cfg.seed)?;

    // baseline: most similar box per phrase, no sequencing
    let msb: Vec<_> = ds
        .test
        .iter()
        .map(|s| ablate::msb_ground(&store, &model, s, CandidateSource::GtBoxes, MsbMode::Single))
        .collect::<phrasebox::Result<_>>()?;
    let msb_report = grounding_accuracy(&msb, &ds.test)?;
    println!(
        "MSB  accuracy {:.3} (relational subset {:?})",
        msb_report.overall,
        msb_report.ambiguous_accuracy()
    );

    // the full sequential model, trained from the same encoders
    train_stage(&mut store, &model, &ds.train, None, Stage::One, &cfg.train)?;
    let full = ablate::decode_scenes(
        &store,
        &model,
        &ds.test,
        CandidateSource::GtBoxes,
        &DecodeOptions::default(),
    )?;
    let full_report = grounding_accuracy(&full, &ds.test)?;
    println!(
        "full accuracy {:.3} (relational subset {:?})",
        full_report.overall,
        full_report.ambiguous_accuracy()
    );
    let _ = AblationConfig::trained_preset_names();
    Ok(())
}
