//! Validation-only choice of one `(lambda, tau)` cell for fixed-cell
//! experiments: runs the default grid on every target with a calibration
//! seed and prints pooled source-validation accuracy per cell.
//!
//! `select_cell [seed] [steps]`

use sdvit::autodiff::AdamWConfig;
use sdvit::data::generate_all;
use sdvit::distill::{BlockSelection, DistillConfig};
use sdvit::protocol::{grid_search, Grid, TrainConfig};
use sdvit::vit::ViTConfig;

fn main() -> sdvit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(1000, |s| s.parse().expect("seed"));
    let steps: usize = args.get(2).map_or(2000, |s| s.parse().expect("steps"));
    let domains = generate_all(400, 0)?;
    let model = ViTConfig {
        patch_size: 8,
        embed_dim: 32,
        ..ViTConfig::default()
    };
    let cfg = TrainConfig {
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        steps,
        distill: DistillConfig {
            selection: BlockSelection::full(6),
            ..DistillConfig::default()
        },
        ..TrainConfig::default()
    };
    let grid = Grid::default();
    let mut totals = vec![0.0; grid.cells().len()];
    for target in 0..domains.len() {
        let out = grid_search(&domains, target, &grid, &[seed], &model, &cfg, 1)?;
        for (c, cell) in out.report.trials[0].cells.iter().enumerate() {
            println!(
                "target {} lambda {} tau {} val {:.4}",
                domains[target].domain, cell.lambda, cell.tau, cell.val_accuracy
            );
            totals[c] += cell.val_accuracy / domains.len() as f64;
        }
    }
    for ((lambda, tau), v) in grid.cells().into_iter().zip(totals) {
        println!("mean lambda {lambda} tau {tau} val {v:.4}");
    }
    Ok(())
}
