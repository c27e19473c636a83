//! Prints the absorption radius of every pillar of a scene next to its
//! class composition, for the default and a uniform weight vector.
//!
//! cargo run --release --example inspect_radii -- [scene index]

use sd4r::lqe::{adaptive_radius, class_counts};
use sd4r::model::{forward, Sd4rModel, Trainer};
use sd4r::pillars::pillarize;
use sd4r::synth::{generate_dataset, generate_scene, SceneParams};
use sd4r::PipelineConfig;

fn main() -> sd4r::Result<()> {
    let index: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1000);
    let cfg = PipelineConfig::default();
    let params = SceneParams::default();

    // a few epochs are enough for the class logits to separate
    let mut trainer = Trainer::new(Sd4rModel::init(&cfg, cfg.seed));
    trainer.train_until(&generate_dataset(&params, &cfg, 40)?, &cfg, 20, |_| {})?;

    let scene = generate_scene(&params, &cfg, index)?;
    let trace = forward(&trainer.model, &scene.cloud, &cfg)?;
    let grid = pillarize(&trace.dense, &cfg, cfg.max_points_per_pillar)?;
    let counts = class_counts(&grid);
    let mixed = adaptive_radius(&counts, &cfg.radius_weights, cfg.default_radius);
    let uniform = adaptive_radius(&counts, &[0.3, 0.3, 0.3], cfg.default_radius);

    println!("{:>4} {:>4}  {:>3} {:>3} {:>3}  {:>6}  {:>6}", "ix", "iy", "ped", "cyc", "car", "R", "R(0.3)");
    for (p, c) in grid.coords.iter().enumerate() {
        if counts.fore[p] == 0 {
            continue;
        }
        let n = &counts.per_class[p];
        println!(
            "{:>4} {:>4}  {:>3} {:>3} {:>3}  {:>6.3}  {:>6.3}",
            c[0], c[1], n[0], n[1], n[2], mixed.radii[p], uniform.radii[p]
        );
    }
    let empty = counts.fore.iter().filter(|&&f| f == 0).count();
    println!("{} pillars, {empty} without foreground (radius {})", grid.len(), cfg.default_radius);
    Ok(())
}
