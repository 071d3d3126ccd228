//! ERM vs SD on one target: `calibrate <dim> <patch> <lr> <target> <lambda> <tau> <seeds...>`.

use sdvit::autodiff::AdamWConfig;
use sdvit::data::generate_all;
use sdvit::distill::{BlockSelection, DistillConfig};
use sdvit::protocol::{grid_search, Grid, TrainConfig};
use sdvit::vit::ViTConfig;

fn main() -> sdvit::Result<()> {
    let a: Vec<String> = std::env::args().collect();
    let dim: usize = a[1].parse().unwrap();
    let patch: usize = a[2].parse().unwrap();
    let lr: f64 = a[3].parse().unwrap();
    let target: usize = a[4].parse().unwrap();
    let lambda: f64 = a[5].parse().unwrap();
    let tau: f64 = a[6].parse().unwrap();
    let steps: usize = std::env::var("STEPS")
        .map(|s| s.parse().unwrap())
        .unwrap_or(2000);
    let sel: BlockSelection = std::env::var("SEL").unwrap_or("range:0-5".into()).parse()?;
    let seeds: Vec<u64> = a[7..].iter().map(|s| s.parse().unwrap()).collect();
    let domains = generate_all(400, 0)?;
    let model = ViTConfig {
        patch_size: patch,
        embed_dim: dim,
        num_heads: 4,
        ..ViTConfig::default()
    };
    let only = std::env::var("ONLY").unwrap_or_default();
    for (name, selection) in [("erm", BlockSelection::None), ("sd", sel)] {
        if !only.is_empty() && only != name {
            continue;
        }
        let cfg = TrainConfig {
            optimizer: AdamWConfig {
                lr,
                ..AdamWConfig::default()
            },
            steps,
            eval_interval: 200,
            distill: DistillConfig {
                lambda,
                tau,
                selection,
                ..DistillConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = grid_search(
            &domains,
            target,
            &Grid::single(lambda, tau),
            &seeds,
            &model,
            &cfg,
            1,
        )?;
        for t in &out.report.trials {
            println!(
                "{name} seed {} val {:.4} step {} target {:.4} overlap {:.4} fg {:.4} probe {:?} secs {:.1}",
                t.seed, t.val_accuracy, t.best_step, t.target_accuracy, t.overlap, t.foreground_ratio,
                t.block_probe.accuracy.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(), t.train_secs
            );
        }
        println!(
            "{name} mean {:.4} curve {:?}",
            out.report.mean,
            out.report.trials[0]
                .curve
                .iter()
                .map(|p| (
                    p.step,
                    (p.val_accuracy * 1000.0).round() / 1000.0,
                    (p.train_loss * 100.0).round() / 100.0
                ))
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
