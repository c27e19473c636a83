//! Densifies one synthetic scene with a briefly trained model and reports
//! how the foreground and virtual points compare with the ground truth.
//!
//! cargo run --release --example densify_scene -- [epochs] [out.csv]

use sd4r::eval::densify_metrics;
use sd4r::io::write_dense_csv;
use sd4r::model::{forward, Sd4rModel, Trainer};
use sd4r::synth::{generate_dataset, SceneParams};
use sd4r::PipelineConfig;

fn main() -> sd4r::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(30);

    let cfg = PipelineConfig::default();
    let scenes = generate_dataset(&SceneParams::default(), &cfg, 41)?;
    let (train, probe) = scenes.split_at(40);
    let scene = &probe[0];

    let mut trainer = Trainer::new(Sd4rModel::init(&cfg, cfg.seed));
    trainer.train_until(train, &cfg, epochs, |_| {})?;

    let trace = forward(&trainer.model, &scene.cloud, &cfg)?;
    let dense = &trace.dense;
    println!(
        "raw points {}  objects {}  kept foreground {}  virtual {}  dense total {}",
        scene.cloud.len(),
        scene.boxes.len(),
        trace.foreground.len(),
        dense.virtual_count(),
        dense.len()
    );
    let m = densify_metrics(dense, &scene.cloud, &scene.boxes, cfg.num_classes);
    println!(
        "foreground precision {:?}  recall {:?}  mean virtual-to-centre distance {:?}  densification ratio {:?}",
        m.precision, m.recall, m.vote_distance, m.densification_ratio
    );
    if let Some(path) = args.get(2) {
        write_dense_csv(std::path::Path::new(path), dense)?;
        println!("wrote {path}");
    }
    Ok(())
}
