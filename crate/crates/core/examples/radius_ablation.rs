//! Trains the full network once and re-evaluates it under each of the ten
//! radius triples, printing the resulting AP matrix.
//!
//! cargo run --release --example radius_ablation -- [epochs] [scenes]

use sd4r::cli::ablation_csv;
use sd4r::eval::EvalRegion;
use sd4r::model::{ablate_radius, Sd4rModel, Trainer, RADIUS_GRID};
use sd4r::synth::{generate_dataset, split_point, SceneParams};
use sd4r::PipelineConfig;

fn main() -> sd4r::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let n: usize = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(200);

    let cfg = PipelineConfig::default();
    let scenes = generate_dataset(&SceneParams::default(), &cfg, n)?;
    let (train, test) = scenes.split_at(split_point(n));
    let mut trainer = Trainer::new(Sd4rModel::init(&cfg, cfg.seed));
    trainer.train_until(train, &cfg, epochs, |r| {
        if r.epoch % 20 == 0 {
            eprintln!("epoch {} loss {:.4}", r.epoch, r.loss.total);
        }
    })?;

    let grid: Vec<Vec<f64>> = RADIUS_GRID.iter().map(|r| r.to_vec()).collect();
    let rows = ablate_radius(&trainer.model, test, &cfg, &grid, EvalRegion::Entire)?;
    print!("{}", ablation_csv(&rows, cfg.num_classes));
    Ok(())
}
