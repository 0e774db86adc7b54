//! A miniature end-to-end run: generate a world, pretrain the encoders,
//! train the grounding network on ground-truth boxes, then decode a test
//! scene and print where each phrase landed.

use phrasebox::config::RunConfig;
use phrasebox::decision::{greedy_decode, DecodeOptions};
use phrasebox::model::{CandidateSource, GroundingModel};
use phrasebox::nn::ParamStore;
use phrasebox::order_embed::{pretrain, PretrainConfig};
use phrasebox::synth::{extract_pairs, generate, WorldSpec};
use phrasebox::trainer::{train_stage, Stage};

fn main() -> phrasebox::Result<()> {
    let spec = WorldSpec {
        scenes_train: 120,
        scenes_val: 20,
        scenes_test: 20,
        ambiguity_rate: 0.0,
        ..WorldSpec::default()
    };
    let ds = generate(&spec)?;

    let mut cfg = RunConfig::default();
    cfg.world = spec;
    cfg.train.epochs_stage1 = 30;
    cfg.train.lr_stage1 = 5e-3;
    cfg.model.dropout_head = 0.2;
    cfg.model.dropout_stack = 0.1;
    cfg.model.encoder.dropout = 0.2;

    let mut rng = phrasebox::rngs::stream(cfg.seed, "model/init");
    let mut store = ParamStore::new();
    let model = GroundingModel::new(&mut store, cfg.model.clone(), ds.embeddings.clone(), &mut rng)?;

    let pairs = extract_pairs(&ds.train);
    let pre = PretrainConfig { epochs: 10, ..PretrainConfig::default() };
    pretrain(&mut store, &model.encoders, &pairs, &pre, cfg.seed)?;
    println!("encoders pretrained on {} pairs", pairs.len());

    let logs = train_stage(&mut store, &model, &ds.train, Some(&ds.val), Stage::One, &cfg.train)?;
    for l in logs.iter().step_by(5) {
        println!(
            "epoch {:>3}: loss {:.4}, val accuracy {:.3}",
            l.epoch,
            l.loss,
            l.val_accuracy.unwrap_or(0.0)
        );
    }

    let record = &ds.test[0];
    let result = greedy_decode(&store, &model, record, CandidateSource::GtBoxes, &DecodeOptions::default())?;
    println!("scene {}:", record.scene_id);
    for p in &result.phrases {
        if !p.groundable {
            continue;
        }
        println!(
            "  '{}' -> boxes {:?} (gold {:?})",
            p.tokens.join(" "),
            p.kept,
            record.phrases[p.phrase_index].gt_boxes
        );
    }
    Ok(())
}
