//! Synthesizes a grounding world and inspects one scene: objects, jittered
//! proposals, and the sentence with its filler and relational phrases.

use phrasebox::geometry::iou;
use phrasebox::synth::{generate, write_dataset, WorldSpec};

fn main() -> phrasebox::Result<()> {
    let spec = WorldSpec {
        ambiguity_rate: 0.6,
        plural_rate: 0.3,
        scenes_train: 12,
        scenes_val: 4,
        scenes_test: 4,
        ..WorldSpec::default()
    };
    let ds = generate(&spec)?;

    let scene = ds
        .train
        .iter()
        .find(|s| s.phrases.iter().any(|p| p.tokens.iter().any(|t| t == "near" || t == "far")))
        .expect("an ambiguous scene exists at this rate");
    println!("scene {} ({}x{})", scene.scene_id, scene.width, scene.height);
    for (i, b) in scene.gt_boxes.iter().enumerate() {
        println!(
            "  box {i}: {:>6.1},{:>6.1} .. {:>6.1},{:>6.1}  concept {} ({})",
            b.rect.x1, b.rect.y1, b.rect.x2, b.rect.y2, b.concept, b.category
        );
    }
    println!("  sentence:");
    for p in &scene.phrases {
        println!(
            "    [{}] {:?} -> boxes {:?}",
            if p.groundable { "noun" } else { "fill" },
            p.tokens.join(" "),
            p.gt_boxes
        );
    }
    let jittered = scene.gt_boxes.len() * spec.proposals_per_gt;
    let mut high = 0;
    for p in &scene.proposals[..jittered] {
        let best = scene
            .gt_boxes
            .iter()
            .map(|g| iou(&p.rect, &g.rect).unwrap())
            .fold(0.0, f64::max);
        if best >= 0.7 {
            high += 1;
        }
    }
    println!(
        "  proposals: {} jittered ({high} with IoU >= 0.7) + {} background",
        jittered, spec.background_proposals
    );

    let dir = std::env::temp_dir().join("phrasebox-world-demo");
    write_dataset(&ds, &dir)?;
    println!("dataset written to {}", dir.display());
    Ok(())
}
