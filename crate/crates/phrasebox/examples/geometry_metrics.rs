//! Box geometry used across training and evaluation: IoU, exact areas of
//! rectangle unions, region IoU against a rasterized reference, and NMS.

use phrasebox::geometry::{iou, nms, raster_region_iou, region_iou, union_area, Rect};

fn main() -> phrasebox::Result<()> {
    let a = Rect::new(0.0, 0.0, 2.0, 2.0)?;
    let b = Rect::new(1.0, 1.0, 3.0, 3.0)?;
    println!("iou(a, b) = {:.4} (1/7)", iou(&a, &b)?);

    // a phrase grounded to two boxes is scored as the union region
    let pred = vec![Rect::new(0.0, 0.0, 1.0, 1.0)?, Rect::new(0.5, 0.0, 2.0, 1.0)?];
    let gt = vec![Rect::new(0.0, 0.0, 2.0, 1.0)?];
    println!("union area of predictions = {}", union_area(&pred));
    println!("region IoU vs ground truth = {}", region_iou(&pred, &gt));
    println!(
        "rasterized reference (1000x1000) = {:.4}",
        raster_region_iou(&pred, &gt, 1000)
    );

    // NMS keeps one box per cluster, so duplicate detections collapse while
    // distinct instances survive
    let boxes = vec![
        Rect::new(0.0, 0.0, 2.0, 2.0)?,
        Rect::new(0.1, 0.0, 2.1, 2.0)?,
        Rect::new(5.0, 5.0, 6.0, 6.0)?,
    ];
    let scores = vec![0.9, 0.8, 0.7];
    let kept = nms(&boxes, &scores, 0.3)?;
    println!("nms keeps boxes {kept:?} of {}", boxes.len());
    Ok(())
}
