//! The asymmetric order-embedding similarity F(p, b) = -||max(0, b-p)||^2
//! and the margin ranking loss that pretrains the encoders.

use phrasebox::order_embed::{hinge, ranking_loss_reference, similarity};

fn main() -> phrasebox::Result<()> {
    let phrase = [2.0, 3.0];
    for b in [[1.0, 2.0], [1.0, 5.0], [4.0, 4.0]] {
        println!(
            "F(p={phrase:?}, b={b:?}) = {:>6.2}   (0 means b lies below p everywhere)",
            similarity(&phrase, &b)?
        );
    }

    // asymmetry: the entailment direction matters
    let p = [0.0, 2.0];
    let b = [1.0, 0.0];
    println!("F(p, b) = {}, F(b, p) = {}", similarity(&p, &b)?, similarity(&b, &p)?);

    // a margin hinge drives contrastive pairs below the true pair
    println!("hinge(margin 0.2, true 0.0, contrast -5.0) = {}", hinge(0.2, 0.0, -5.0));
    println!("hinge(margin 0.2, true -1.0, contrast -0.5) = {}", hinge(0.2, -1.0, -0.5));

    // a separable batch has zero loss; identical embeddings pay the margin
    let separable_p = vec![vec![5.0, 0.0], vec![0.0, 5.0]];
    let separable_b = vec![vec![1.0, -4.0], vec![-4.0, 1.0]];
    println!(
        "separable batch loss = {}",
        ranking_loss_reference(&separable_p, &separable_b, 0.05)
    );
    let collapsed = vec![vec![1.0, 1.0]; 4];
    println!(
        "collapsed batch loss = {} (4 positives x 2 sides x margin)",
        ranking_loss_reference(&collapsed, &collapsed, 0.05)
    );
    Ok(())
}
