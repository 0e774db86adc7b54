//! Slower training integrations: the proposal stage and the hard-negative
//! mining pass, exercised on a small world with a compact model.

use phrasebox::ablate::AblationConfig;
use phrasebox::encoders::EncoderConfig;
use phrasebox::model::{CandidateSource, GroundingModel, ModelConfig};
use phrasebox::nn::ParamStore;
use phrasebox::order_embed::{pretrain, PretrainConfig};
use phrasebox::synth::{self, WorldSpec};
use phrasebox::trainer::{
    assign_labels, false_positive_rate, fine_tune_with_mined, hard_negative_mine, train_stage,
    LabeledScene, Stage, TrainConfig,
};

fn world() -> (WorldSpec, synth::Dataset) {
    let spec = WorldSpec {
        word_dim: 8,
        feat_dim: 16,
        n_concepts: 12,
        objects_per_scene: [3, 5],
        ambiguity_rate: 0.0,
        plural_rate: 0.2,
        scenes_train: 70,
        scenes_val: 25,
        scenes_test: 5,
        seed: 19,
        ..WorldSpec::default()
    };
    let ds = synth::generate(&spec).unwrap();
    (spec, ds)
}

fn compact_model(spec: &WorldSpec, ds: &synth::Dataset) -> (ParamStore, GroundingModel) {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            word_dim: spec.word_dim,
            feat_dim: spec.feat_dim,
            hidden: [32, 24],
            embed_dim: 16,
            dropout: 0.2,
            ..EncoderConfig::default()
        },
        head_hidden: [24, 16],
        dropout_stack: 0.1,
        dropout_head: 0.2,
        ablation: AblationConfig::full(),
    };
    let mut rng = phrasebox::rngs::stream(spec.seed, "model/init");
    let mut store = ParamStore::new();
    let model = GroundingModel::new(&mut store, cfg, ds.embeddings.clone(), &mut rng).unwrap();
    (store, model)
}

#[test]
fn stage_two_and_mining_do_not_degrade_false_positives() {
    let (spec, ds) = world();
    let (mut store, model) = compact_model(&spec, &ds);
    let pairs = synth::extract_pairs(&ds.train);
    pretrain(
        &mut store,
        &model.encoders,
        &pairs,
        &PretrainConfig { epochs: 6, ..Default::default() },
        spec.seed,
    )
    .unwrap();

    let cfg = TrainConfig {
        epochs_stage1: 25,
        epochs_stage2: 8,
        lr_stage1: 3e-3,
        lr_stage2: 5e-4,
        seed: spec.seed,
        ..TrainConfig::default()
    };
    let s1 = train_stage(&mut store, &model, &ds.train, None, Stage::One, &cfg).unwrap();
    assert!(s1.last().unwrap().loss < s1.first().unwrap().loss);

    // stage 2 consumes proposals with banded labels
    let s2 = train_stage(&mut store, &model, &ds.train, None, Stage::Two, &cfg).unwrap();
    assert!(s2.iter().all(|l| l.loss.is_finite()));
    assert!(s2.last().unwrap().loss < s2.first().unwrap().loss);

    // one mining pass plus one fine-tuning epoch must not make the model
    // meaningfully worse at rejecting wrong boxes
    let labeled: Vec<LabeledScene> = ds
        .train
        .iter()
        .map(|s| assign_labels(s, Stage::Two, &cfg).unwrap())
        .collect();
    let before = false_positive_rate(&store, &model, &ds.val, CandidateSource::Proposals, 0.5)
        .unwrap();
    let mined = hard_negative_mine(&store, &model, &ds.train, &labeled, &cfg).unwrap();
    fine_tune_with_mined(&mut store, &model, &ds.train, &labeled, &mined, &cfg).unwrap();
    let after = false_positive_rate(&store, &model, &ds.val, CandidateSource::Proposals, 0.5)
        .unwrap();
    println!("false-positive rate before {before:.4}, after mining epoch {after:.4}");
    assert!(
        after <= before + 0.01,
        "mining epoch raised the false-positive rate from {before:.4} to {after:.4}"
    );
}
