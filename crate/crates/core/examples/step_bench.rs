//! Times training steps for a few model sizes.

use std::time::Instant;

use sdvit::data::generate_all;
use sdvit::distill::{BlockSelection, DistillConfig};
use sdvit::protocol::{make_splits, train, Seeds, TrainConfig};
use sdvit::vit::{ViTConfig, ViTModel};

fn main() -> sdvit::Result<()> {
    let domains = generate_all(20, 0)?;
    let sizes: Vec<usize> = domains.iter().map(|d| d.len()).collect();
    let plan = make_splits(&sizes, 2, 0)?;
    for (patch, dim) in [(4, 64), (8, 64), (8, 32), (4, 32)] {
        let cfg = ViTConfig {
            patch_size: patch,
            embed_dim: dim,
            ..ViTConfig::default()
        };
        for selection in [BlockSelection::None, BlockSelection::full(6)] {
            let tc = TrainConfig {
                steps: 20,
                eval_interval: 1000,
                distill: DistillConfig {
                    selection,
                    ..DistillConfig::default()
                },
                seeds: Seeds::from_base(1),
                ..TrainConfig::default()
            };
            let t = Instant::now();
            let out = train(ViTModel::init(cfg.clone(), 1)?, &domains, &plan, &tc)?;
            println!(
                "patch {patch} dim {dim} {selection}: {:.1} ms/step (wall {:.2}s)",
                1000.0 * out.train_secs / tc.steps as f64,
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
