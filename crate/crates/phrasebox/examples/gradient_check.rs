//! Finite-difference verification of the end-to-end gradients: the full
//! grounding loss through encoders, all three stacks, and the decision
//! head, plus the pretraining ranking loss, on a 2-phrase/3-box toy scene.

use phrasebox::verify::{build_toy_rig, grounding_grad_check, pretrain_grad_check};

fn main() -> phrasebox::Result<()> {
    let mut rig = build_toy_rig(3)?;
    println!(
        "toy scene: {} boxes, {} phrases, {} parameters",
        rig.scene.gt_boxes.len(),
        rig.scene.phrases.len(),
        rig.store.total_params()
    );

    let start = std::time::Instant::now();
    let grounding = grounding_grad_check(&mut rig, 1e-5, 1e-4)?;
    println!(
        "grounding loss:   max relative error {:.3e} over {} coordinates -> {} ({:.1?})",
        grounding.max_rel_err,
        grounding.coords_checked,
        if grounding.passed() { "PASS" } else { "FAIL" },
        start.elapsed()
    );

    let start = std::time::Instant::now();
    let pre = pretrain_grad_check(&mut rig, 1e-5, 1e-4)?;
    println!(
        "pretraining loss: max relative error {:.3e} over {} coordinates -> {} ({:.1?})",
        pre.max_rel_err,
        pre.coords_checked,
        if pre.passed() { "PASS" } else { "FAIL" },
        start.elapsed()
    );
    Ok(())
}
