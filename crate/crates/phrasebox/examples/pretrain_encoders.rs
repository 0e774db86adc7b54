//! Contrastive pretraining of the encoders on ground-truth phrase-box
//! pairs, evaluated by retrieval: how often is the true box the most
//! similar one in its scene?

use phrasebox::config::RunConfig;
use phrasebox::model::GroundingModel;
use phrasebox::nn::ParamStore;
use phrasebox::order_embed::{pretrain, recall_at_1, PretrainConfig};
use phrasebox::synth::{extract_pairs, generate, WorldSpec};

fn main() -> phrasebox::Result<()> {
    let spec = WorldSpec {
        scenes_train: 150,
        scenes_val: 40,
        scenes_test: 10,
        ..WorldSpec::default()
    };
    let ds = generate(&spec)?;
    let pairs = extract_pairs(&ds.train);
    println!("{} scenes give {} ground-truth pairs", ds.train.len(), pairs.len());

    let mut cfg = RunConfig::default();
    cfg.world = spec;
    let mut rng = phrasebox::rngs::stream(cfg.seed, "model/init");
    let mut store = ParamStore::new();
    let model = GroundingModel::new(&mut store, cfg.model.clone(), ds.embeddings.clone(), &mut rng)?;

    let before = recall_at_1(&store, &model.encoders, &ds.val)?;
    println!("recall@1 before pretraining: {before:.4}");

    let pre = PretrainConfig { epochs: 12, ..PretrainConfig::default() };
    let losses = pretrain(&mut store, &model.encoders, &pairs, &pre, cfg.seed)?;
    for (e, l) in losses.iter().enumerate() {
        println!("epoch {e:>2}: ranking loss {l:.5}");
    }

    let after = recall_at_1(&store, &model.encoders, &ds.val)?;
    println!("recall@1 after pretraining:  {after:.4}");
    Ok(())
}
