//! Leave-one-domain-out protocol: what may and may not influence training,
//! selection and reports.

use sdvit::analysis::DatasetProbe;
use sdvit::autodiff::{AdamWConfig, Tape};
use sdvit::data::{generate_all, DomainDataset};
use sdvit::distill::{BlockSelection, DistillConfig};
use sdvit::protocol::{evaluate, grid_search, make_splits, train, Grid, Seeds, TrainConfig};
use sdvit::vit::{ViTConfig, ViTModel};

const SKETCH: usize = 2;

fn small() -> ViTConfig {
    ViTConfig {
        patch_size: 8,
        embed_dim: 16,
        num_heads: 2,
        num_blocks: 3,
        mlp_ratio: 2,
        ..ViTConfig::default()
    }
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        batch_size: 16,
        steps,
        eval_interval: 10,
        distill: DistillConfig {
            selection: BlockSelection::full(3),
            ..DistillConfig::default()
        },
        seeds: Seeds::from_base(4),
    }
}

fn sizes(domains: &[DomainDataset]) -> Vec<usize> {
    domains.iter().map(DomainDataset::len).collect()
}

#[test]
fn zero_lambda_is_plain_erm() {
    let domains = generate_all(6, 1).unwrap();
    let plan = make_splits(&sizes(&domains), SKETCH, 7).unwrap();
    let mut zero = cfg(60);
    zero.distill.lambda = 0.0;
    let mut erm = cfg(60);
    erm.distill = DistillConfig::erm();
    let a = train(ViTModel::init(small(), 3).unwrap(), &domains, &plan, &zero).unwrap();
    let b = train(ViTModel::init(small(), 3).unwrap(), &domains, &plan, &erm).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.model, b.model);
}

#[test]
fn corrupting_the_target_changes_nothing_upstream() {
    let domains = generate_all(4, 2).unwrap();
    let mut corrupted = domains.clone();
    corrupted[SKETCH] = corrupted[SKETCH].with_images_filled(0);
    corrupted[SKETCH].labels.iter_mut().for_each(|y| *y = 0);
    let grid = Grid {
        lambdas: vec![0.1, 0.5],
        taus: vec![3.0, 5.0],
    };
    let run = |d: &[DomainDataset]| {
        grid_search(d, SKETCH, &grid, &[11, 111], &small(), &cfg(30), 1).unwrap()
    };
    let (a, b) = (run(&domains), run(&corrupted));
    assert_eq!(a.models, b.models);
    for (x, y) in a.report.trials.iter().zip(&b.report.trials) {
        assert_eq!(
            (x.lambda, x.tau, x.best_step),
            (y.lambda, y.tau, y.best_step)
        );
        assert_eq!(x.curve, y.curve);
        let strip = |c: &[sdvit::protocol::CellResult]| {
            c.iter()
                .map(|c| (c.lambda, c.tau, c.best_step, c.val_accuracy))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&x.cells), strip(&y.cells));
    }
    assert_eq!(
        (a.report.lambda, a.report.tau),
        (b.report.lambda, b.report.tau)
    );
}

#[test]
fn identical_trials_have_zero_spread() {
    let domains = generate_all(3, 3).unwrap();
    let out = grid_search(
        &domains,
        0,
        &Grid::single(0.2, 5.0),
        &[9, 9, 9],
        &small(),
        &cfg(20),
        1,
    )
    .unwrap();
    assert_eq!(out.report.std, 0.0);
    let accs: Vec<f64> = out
        .report
        .trials
        .iter()
        .map(|t| t.target_accuracy)
        .collect();
    assert!(accs.iter().all(|&a| a == accs[0]));
}

#[test]
fn runs_are_reproducible() {
    let domains = generate_all(3, 4).unwrap();
    let run = || {
        grid_search(
            &domains,
            1,
            &Grid::default(),
            &[0, 100],
            &small(),
            &cfg(20),
            2,
        )
        .unwrap()
        .report
        .without_timings()
    };
    let first = run();
    assert_eq!(first, run());
    assert_eq!(first.trials[0].cells.len(), 6);
}

#[test]
fn split_counts_are_exact_at_full_size() {
    let plan = make_splits(&[2800, 2800, 2800, 2800], SKETCH, 3).unwrap();
    assert!(plan.sources.iter().all(|s| s.domain != SKETCH));
    for s in &plan.sources {
        assert_eq!((s.train.len(), s.val.len()), (2240, 560));
    }
    assert_eq!(plan.pooled_train().len(), 6720);
    assert_eq!(plan.pooled_val().len(), 1680);
}

#[test]
fn first_batch_loss_is_near_uniform() {
    let domains = generate_all(10, 5).unwrap();
    let plan = make_splits(&sizes(&domains), 0, 1).unwrap();
    let mut c = cfg(1);
    c.distill = DistillConfig::erm();
    c.batch_size = 32;
    c.eval_interval = 1;
    let model = ViTModel::init(ViTConfig::default(), 0).unwrap();
    let out = train(model, &domains, &plan, &c).unwrap();
    let loss = out.curve[0].train_loss;
    assert!((loss - 7f64.ln()).abs() < 0.3, "initial loss {loss}");
}

#[test]
fn duplicated_data_keeps_accuracy() {
    let ds = generate_all(5, 6).unwrap().remove(3);
    let model = ViTModel::init(small(), 2).unwrap();
    let mut twice = ds.clone();
    twice.images.extend_from_slice(&ds.images);
    twice.labels.extend_from_slice(&ds.labels);
    twice.masks.extend_from_slice(&ds.masks);
    assert_eq!(
        evaluate(&model, &ds).unwrap(),
        evaluate(&model, &twice).unwrap()
    );
}

#[test]
fn single_cell_grid_is_train_then_evaluate() {
    let domains = generate_all(4, 8).unwrap();
    let c = cfg(30);
    let out = grid_search(&domains, 3, &Grid::single(0.5, 3.0), &[21], &small(), &c, 1).unwrap();
    let seeds = Seeds::from_base(21);
    let plan = make_splits(&sizes(&domains), 3, seeds.split).unwrap();
    let mut direct = c.clone();
    direct.seeds = seeds;
    direct.distill.lambda = 0.5;
    direct.distill.tau = 3.0;
    let trained = train(
        ViTModel::init(small(), seeds.init).unwrap(),
        &domains,
        &plan,
        &direct,
    )
    .unwrap();
    assert_eq!(out.models[0], trained.model);
    let t = &out.report.trials[0];
    assert_eq!(
        t.target_accuracy,
        evaluate(&trained.model, &domains[3]).unwrap()
    );
    assert_eq!(
        t.block_probe,
        DatasetProbe::run(&trained.model, &domains[3])
            .unwrap()
            .block_probe()
    );
    assert_eq!(t.curve, trained.curve);
}

#[test]
fn inference_does_not_depend_on_chunking() {
    let ds = generate_all(20, 9).unwrap().remove(0);
    let model = ViTModel::init(small(), 5).unwrap();
    let probe = DatasetProbe::run(&model, &ds).unwrap();
    let tape = Tape::inference();
    let all: Vec<usize> = (0..ds.len()).collect();
    let trace = model.forward(&tape, &ds.batch(&all).unwrap()).unwrap();
    let logits = trace.logits.value();
    let direct: Vec<usize> = logits
        .data()
        .chunks(7)
        .map(sdvit::analysis::argmax)
        .collect();
    assert_eq!(probe.predictions.last().unwrap(), &direct);
}
