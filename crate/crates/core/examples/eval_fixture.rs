//! Walks through the detection metric on a hand-sized fixture: rotated-box
//! IoU, greedy matching and the 40-point interpolated AP.
//!
//! cargo run --example eval_fixture

use sd4r::eval::{ap_from_matches, bev_iou, iou_threshold, match_detections, region_filter_sensor, EvalRegion};
use sd4r::{ClassId, ObjectBox};

fn main() {
    let ped = |x: f64, y: f64| ObjectBox::new([x, y, 0.0], [0.6, 0.6, 1.7], 0.0, ClassId::PEDESTRIAN);
    let gts = vec![ped(8.0, 0.5), ped(15.0, -1.0), ped(30.0, 6.0)];
    // one detection per gt plus a spurious one ranked second
    let dets = vec![
        (0.95, ped(8.05, 0.5)),
        (0.90, ped(20.0, 3.0)),
        (0.80, ped(15.0, -0.95)),
        (0.60, ped(30.1, 6.0)),
    ];

    let thr = iou_threshold(ClassId::PEDESTRIAN);
    println!("pedestrian IoU threshold {thr}");
    for (score, d) in &dets {
        let best = gts.iter().map(|g| bev_iou(d, g)).fold(0.0, f64::max);
        println!("det score {score:.2} at ({:.2}, {:.2}): best IoU {best:.3}", d.center[0], d.center[1]);
    }
    let matches = match_detections(&dets, &gts, thr);
    let mut tp = 0;
    for (rank, (score, hit)) in matches.iter().enumerate() {
        tp += usize::from(*hit);
        println!(
            "rank {} score {score:.2} {}  precision {:.3} recall {:.3}",
            rank + 1,
            if *hit { "TP" } else { "FP" },
            tp as f64 / (rank + 1) as f64,
            tp as f64 / gts.len() as f64
        );
    }
    println!("AP(40) = {:.5}", ap_from_matches(&matches, gts.len()));

    let corridor = region_filter_sensor(&gts, EvalRegion::Corridor);
    println!("{} of {} ground-truth boxes fall inside the driving corridor", corridor.len(), gts.len());
}
