//! Randomized invariants of the numerical core, the model, the loss and the
//! analysis tools.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdvit::analysis::{cosine_of_means, ConfusionMatrix};
use sdvit::autodiff::{kl_teacher_student, AdamWConfig, AdamWState, Tape, Tensor};
use sdvit::data::{DomainDataset, DomainSpec, Style};
use sdvit::distill::{sdvit_loss, select_block, BlockSelection, DistillConfig, Selected};
use sdvit::vit::{patchify, unpatchify, ViTConfig, ViTModel};

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(-30.0f64..30.0, r * c),
        )
    })
}

fn small_vit() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        num_blocks: 3,
        mlp_ratio: 2,
        num_classes: 7,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant((r, c, data) in rows(5, 9), shift in -50.0f64..50.0) {
        let tape = Tape::inference();
        let x = tape.constant(tensor(vec![r, c], data.clone()));
        let y = x.softmax(1).unwrap().value();
        for row in y.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let shifted = tape.constant(tensor(vec![r, c], data.iter().map(|v| v + shift).collect()));
        let ys = shifted.softmax(1).unwrap().value();
        for (a, b) in y.data().iter().zip(ys.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_non_negative_and_zero_on_self((r, c, t) in rows(4, 8), s in prop::collection::vec(-30.0f64..30.0, 32), tau in 0.5f64..8.0) {
        let tape = Tape::inference();
        let teacher = tape.constant(tensor(vec![r, c], t.clone()));
        let student = tape.constant(tensor(vec![r, c], s[..r * c].to_vec()));
        prop_assert!(kl_teacher_student(teacher, student, tau).unwrap().value().item().unwrap() >= 0.0);
        let same = kl_teacher_student(teacher, teacher, tau).unwrap().value().item().unwrap();
        prop_assert!(same.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c(c in 2usize..20, b in 1usize..6, v in -10.0f64..10.0) {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::full(&[b, c], v));
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let ce = x.cross_entropy(&labels).unwrap().value().item().unwrap();
        prop_assert!((ce - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn adamw_without_decay_is_adam(p in prop::collection::vec(-2.0f64..2.0, 6), g in prop::collection::vec(-2.0f64..2.0, 6), lr in 1e-4f64..1e-1) {
        let cfg = AdamWConfig { lr, ..AdamWConfig::default() };
        let mut params = vec![tensor(vec![6], p.clone())];
        let mut opt = AdamWState::new(cfg.clone(), &params);
        // plain Adam, written out
        let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
        let mut expect = p.clone();
        for step in 1..=3 {
            opt.step(&mut params, &[tensor(vec![6], g.clone())]).unwrap();
            for i in 0..6 {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / (1.0 - cfg.beta1.powi(step));
                let vh = v[i] / (1.0 - cfg.beta2.powi(step));
                expect[i] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        prop_assert_eq!(params[0].data(), &expect[..]);
    }

    #[test]
    fn patchify_round_trip(grid in 1usize..4, patch in 1usize..5, channels in 1usize..4, seed in any::<u64>()) {
        let side = grid * patch;
        let n = channels * side * side;
        let data: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
        let img = tensor(vec![channels, side, side], data);
        let p = patchify(&img, patch).unwrap();
        prop_assert_eq!(p.shape(), &[grid * grid, channels * patch * patch]);
        prop_assert_eq!(unpatchify(&p, channels, side, side, patch).unwrap(), img);
    }

    #[test]
    fn cosine_overlap_is_scale_invariant(a in prop::collection::vec(0.1f64..5.0, 12), b in prop::collection::vec(-5.0f64..5.0, 12), k in 0.01f64..100.0) {
        let src: Vec<Vec<f64>> = a.chunks(4).map(<[f64]>::to_vec).collect();
        let tgt: Vec<Vec<f64>> = b.chunks(4).map(<[f64]>::to_vec).collect();
        let Ok(base) = cosine_of_means(&src, &tgt) else { return Ok(()) };
        let scaled = |s: &Vec<Vec<f64>>| s.iter().map(|r| r.iter().map(|v| v * k).collect()).collect::<Vec<Vec<f64>>>();
        let c = cosine_of_means(&scaled(&src), &scaled(&tgt)).unwrap();
        prop_assert!((-1.0..=1.0).contains(&base));
        prop_assert!((c - base).abs() < 1e-12);
    }

    #[test]
    fn confusion_rows_match_class_counts(pairs in prop::collection::vec((0usize..7, 0usize..7), 1..200)) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = ConfusionMatrix::from_predictions(&labels, &preds, 7).unwrap();
        let mut counts = vec![0u64; 7];
        for &y in &labels { counts[y] += 1; }
        prop_assert_eq!(m.row_sums(), counts);
        prop_assert_eq!(m.total(), labels.len() as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_invariants(seed in any::<u64>(), input in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 64)) {
        let model = ViTModel::init(small_vit(), seed).unwrap();
        let batch = tensor(vec![2, 3, 8, 8], input);
        let tape = Tape::inference();
        let a = model.forward(&tape, &batch).unwrap();
        let b = model.forward(&tape, &batch).unwrap();
        let (la, lb) = (a.logits.value(), b.logits.value());
        prop_assert_eq!(la.data(), lb.data());
        let last = a.sub_model_logits(2).unwrap().value();
        prop_assert_eq!(last.data(), la.data());
        for tok in &a.class_tokens {
            prop_assert_eq!(tok.shape(), vec![2, 8]);
        }
        let att = a.attention.value();
        for row in att.data().chunks(5) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_rows_are_independent(seed in any::<u64>(), input in prop::collection::vec(-1.0f64..1.0, 3 * 3 * 64)) {
        let model = ViTModel::init(small_vit(), seed).unwrap();
        let tape = Tape::inference();
        let all = model.forward(&tape, &tensor(vec![3, 3, 8, 8], input.clone())).unwrap().logits.value();
        for i in 0..3 {
            let one = tensor(vec![1, 3, 8, 8], input[i * 192..(i + 1) * 192].to_vec());
            let single = model.forward(&tape, &one).unwrap().logits.value();
            for (a, b) in single.data().iter().zip(&all.data()[i * 7..(i + 1) * 7]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_bounds_ce_and_ignores_batch_order(seed in any::<u64>(), lambda in 0.0f64..2.0, tau in 0.5f64..6.0, input in prop::collection::vec(-1.0f64..1.0, 4 * 3 * 64)) {
        let model = ViTModel::init(small_vit(), seed).unwrap();
        let cfg = DistillConfig { lambda, tau, detach_teacher: true, selection: BlockSelection::full(3) };
        let labels = [0, 3, 6, 2];
        let loss = |data: Vec<f64>, labels: &[usize]| {
            let tape = Tape::inference();
            let trace = model.forward(&tape, &tensor(vec![4, 3, 8, 8], data)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sdvit_loss(&trace, labels, &cfg, &mut rng).unwrap().1
        };
        let parts = loss(input.clone(), &labels);
        prop_assert!(parts.total >= parts.ce);
        // reverse the batch
        let img = 3 * 64;
        let reversed: Vec<f64> = input.chunks(img).rev().flatten().copied().collect();
        let rl: Vec<usize> = labels.iter().rev().copied().collect();
        let swapped = loss(reversed, &rl);
        prop_assert!((swapped.total - parts.total).abs() < 1e-12);
    }

    #[test]
    fn selection_stays_in_range(lo in 0usize..12, width in 0usize..12, seed in any::<u64>()) {
        let hi = lo + width;
        let sel = BlockSelection::RandomRange { lo, hi };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            match select_block(&sel, &mut rng) {
                Selected::Block(b) => prop_assert!((lo..=hi).contains(&b)),
                other => prop_assert!(false, "unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn generation_is_a_pure_function(seed in any::<u64>(), style_idx in 0usize..4) {
        let spec = DomainSpec::standard(Style::ALL[style_idx]);
        let a = DomainDataset::generate(&spec, 1, seed).unwrap();
        prop_assert_eq!(&a, &DomainDataset::generate(&spec, 1, seed).unwrap());
        prop_assert_eq!(a.class_counts(), [1; 7]);
    }
}

#[test]
fn selection_range_exhaustive_million_draws() {
    let sel = BlockSelection::RandomRange { lo: 2, hi: 7 };
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut counts = [0usize; 12];
    for _ in 0..1_000_000 {
        match select_block(&sel, &mut rng) {
            Selected::Block(b) => counts[b] += 1,
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(counts[..2].iter().chain(&counts[8..]).all(|&c| c == 0));
    for &c in &counts[2..8] {
        // each of the 6 blocks within 5% of its expected share
        assert!((c as f64 / (1_000_000.0 / 6.0) - 1.0).abs() < 0.05);
    }
}
