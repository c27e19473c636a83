//! Trains the full network and the plain pillar baseline on a synthetic
//! dataset and compares them on the held-out scenes.
//!
//! cargo run --release --example train_synthetic -- [epochs] [scenes]

use sd4r::eval::EvalRegion;
use sd4r::model::{evaluate_model, Sd4rModel, Trainer};
use sd4r::synth::{generate_dataset, split_point, SceneParams};
use sd4r::PipelineConfig;

fn main() -> sd4r::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let n: usize = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(200);

    let cfg = PipelineConfig::default();
    let scenes = generate_dataset(&SceneParams::default(), &cfg, n)?;
    let (train, test) = scenes.split_at(split_point(n));

    let mut baseline = cfg.clone();
    baseline.use_fpg = false;
    baseline.use_lqe = false;

    for (name, c) in [("fpg+lqe", &cfg), ("baseline", &baseline)] {
        let start = std::time::Instant::now();
        let untrained = Sd4rModel::init(c, c.seed);
        let before = evaluate_model(&untrained, test, c, EvalRegion::Entire)?;
        let mut trainer = Trainer::new(untrained);
        let reports = trainer.train_until(train, c, epochs, |r| {
            if r.epoch % 10 == 0 || r.epoch == 1 {
                println!(
                    "{name} epoch {:3}  total {:.4}  det {:.4}  seg {:.4}  vote {:.4}",
                    r.epoch, r.loss.total, r.loss.det, r.loss.seg, r.loss.vote
                );
            }
        })?;
        let windows: Vec<String> = reports
            .chunks(10)
            .map(|w| format!("{:.4}", w.iter().map(|r| r.loss.total).sum::<f64>() / w.len() as f64))
            .collect();
        println!("{name} 10-epoch window means: {}", windows.join(" "));

        let after = evaluate_model(&trainer.model, test, c, EvalRegion::Entire)?;
        println!(
            "{name}: mAP {:.4} (untrained {:.4})  accuracy {:.3}  vote distance {:?} -> {:?}  ({:.1?})",
            after.report.map,
            before.report.map,
            after.accuracy,
            before.report.vote_distance,
            after.report.vote_distance,
            start.elapsed()
        );
        for c in &after.report.per_class {
            println!("  {:<10} AP {:?}  gt {}  det {}", c.class, c.ap, c.num_gt, c.num_det);
        }
    }
    Ok(())
}
