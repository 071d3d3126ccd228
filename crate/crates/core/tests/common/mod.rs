//! Finite-difference gradient checking shared by the gradcheck and
//! acceptance targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdvit::autodiff::{Tape, Tensor, Var, LAYER_NORM_EPS};
use sdvit::distill::{sdvit_loss, select_block, BlockSelection, DistillConfig, Selected};
use sdvit::vit::{ViTConfig, ViTModel};

pub const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Fixed, irregular weights used to reduce a tensor output to a scalar.
fn weights(shape: &[usize]) -> Tensor {
    let n = shape.iter().product::<usize>();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|i| (1.3 * i as f64 + 0.7).cos()).collect(),
    )
    .unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn scalarize<'t>(tape: &'t Tape, out: Var<'t>) -> Var<'t> {
    if out.value().numel() == 1 {
        return out;
    }
    let w = tape.constant(weights(&out.shape()));
    out.mul(w).unwrap().sum()
}

/// Largest relative error between tape gradients of every input and
/// central differences.
pub fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = scalarize(&tape, f(&tape, &vars));
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        scalarize(&tape, f(&tape, &vars)).value().item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

pub type Named = (String, f64);

pub fn elementwise(seed: u64) -> Vec<Named> {
    let a = random(&[2, 3, 4], seed);
    let b = random(&[2, 3, 4], seed + 1);
    let c = random(&[4], seed + 2);
    vec![
        (
            "add".into(),
            check(&[a.clone(), b.clone()], |_, v| v[0].add(v[1]).unwrap()),
        ),
        (
            "add_broadcast".into(),
            check(&[a.clone(), c], |_, v| v[0].add(v[1]).unwrap()),
        ),
        (
            "mul".into(),
            check(&[a.clone(), b], |_, v| v[0].mul(v[1]).unwrap()),
        ),
        (
            "scale".into(),
            check(std::slice::from_ref(&a), |_, v| v[0].scale(-2.5)),
        ),
        (
            "sum".into(),
            check(std::slice::from_ref(&a), |_, v| v[0].sum()),
        ),
        (
            "mean".into(),
            check(std::slice::from_ref(&a), |_, v| v[0].mean()),
        ),
        (
            "gelu".into(),
            check(&[a.map(|x| 3.0 * x)], |_, v| v[0].gelu()),
        ),
    ]
}

pub fn products(seed: u64) -> Vec<Named> {
    vec![
        (
            "matmul_5x4_4x3".into(),
            check(
                &[random(&[5, 4], seed), random(&[4, 3], seed + 1)],
                |_, v| v[0].matmul(v[1]).unwrap(),
            ),
        ),
        (
            "matmul_batched".into(),
            check(
                &[random(&[2, 3, 4], seed + 2), random(&[4, 5], seed + 3)],
                |_, v| v[0].matmul(v[1]).unwrap(),
            ),
        ),
        (
            "bmm".into(),
            check(
                &[random(&[2, 3, 4], seed + 4), random(&[2, 4, 5], seed + 5)],
                |_, v| v[0].bmm(v[1], false).unwrap(),
            ),
        ),
        (
            "bmm_transposed".into(),
            check(
                &[
                    random(&[2, 2, 3, 4], seed + 6),
                    random(&[2, 2, 5, 4], seed + 7),
                ],
                |_, v| v[0].bmm(v[1], true).unwrap(),
            ),
        ),
    ]
}

pub fn normalizations(seed: u64) -> Vec<Named> {
    let x = random(&[2, 3, 4], seed).map(|v| 2.0 * v);
    let mut out: Vec<Named> = (0..3)
        .map(|axis| {
            (
                format!("softmax_{axis}"),
                check(std::slice::from_ref(&x), move |_, v| {
                    v[0].softmax(axis).unwrap()
                }),
            )
        })
        .collect();
    out.push((
        "softmax_3x7".into(),
        check(&[random(&[3, 7], seed + 1).map(|v| 4.0 * v)], |_, v| {
            v[0].softmax(1).unwrap()
        }),
    ));
    out.push((
        "layer_norm_2x8".into(),
        check(
            &[
                random(&[2, 8], seed + 2),
                random(&[8], seed + 3),
                random(&[8], seed + 4),
            ],
            |_, v| v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS).unwrap(),
        ),
    ));
    out
}

pub fn shape_ops(seed: u64) -> Vec<Named> {
    let x = random(&[2, 3, 4], seed);
    vec![
        (
            "reshape".into(),
            check(std::slice::from_ref(&x), |_, v| {
                v[0].reshape(&[6, 4]).unwrap()
            }),
        ),
        (
            "permute".into(),
            check(std::slice::from_ref(&x), |_, v| {
                v[0].permute(&[2, 0, 1]).unwrap()
            }),
        ),
        (
            "narrow".into(),
            check(std::slice::from_ref(&x), |_, v| {
                v[0].narrow(1, 1, 2).unwrap()
            }),
        ),
        (
            "expand_leading".into(),
            check(&[random(&[1, 4], seed + 1)], |_, v| {
                v[0].expand_leading(3).unwrap()
            }),
        ),
        (
            "concat_0".into(),
            check(&[x.clone(), random(&[1, 3, 4], seed + 2)], |_, v| {
                Var::concat(&[v[0], v[1]], 0).unwrap()
            }),
        ),
        (
            "concat_1".into(),
            check(&[x, random(&[2, 2, 4], seed + 3)], |_, v| {
                Var::concat(&[v[0], v[1]], 1).unwrap()
            }),
        ),
    ]
}

pub fn losses(seed: u64) -> Vec<Named> {
    let logits = random(&[4, 7], seed).map(|v| 3.0 * v);
    let mut out: Vec<Named> = vec![(
        "cross_entropy".into(),
        check(std::slice::from_ref(&logits), |_, v| {
            v[0].cross_entropy(&[0, 3, 6, 1]).unwrap()
        }),
    )];
    let teacher = random(&[4, 7], seed + 1).map(|v| 3.0 * v);
    for tau in [1.0, 3.0, 5.0] {
        out.push((
            format!("kl_joint_{tau}"),
            check(&[teacher.clone(), logits.clone()], move |_, v| {
                v[0].kl_divergence(v[1], tau, false).unwrap()
            }),
        ));
        // With the teacher detached only the student is differentiated.
        let fixed = teacher.clone();
        out.push((
            format!("kl_detached_{tau}"),
            check(std::slice::from_ref(&logits), move |tape, v| {
                tape.constant(fixed.clone())
                    .kl_divergence(v[0], tau, true)
                    .unwrap()
            }),
        ));
    }
    out
}

pub fn all_ops(seed: u64) -> Vec<Named> {
    [
        elementwise(seed),
        products(seed + 10),
        normalizations(seed + 20),
        shape_ops(seed + 30),
        losses(seed + 40),
    ]
    .concat()
}

pub fn tiny() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        num_blocks: 3,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

/// Largest relative error over all parameters of the full loss. With a
/// detached teacher the numerical loss holds the teacher logits at their
/// unperturbed values.
pub fn end_to_end(cfg: &DistillConfig, seed: u64) -> f64 {
    let model = ViTModel::init(tiny(), seed).unwrap();
    let batch = random(&[2, 3, 8, 8], seed + 1);
    let labels = [2, 0];
    let frozen_teacher = {
        let tape = Tape::inference();
        (*model.forward(&tape, &batch).unwrap().logits.value()).clone()
    };
    let loss_of = |m: &ViTModel, tape: &Tape| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trace = m.forward(tape, &batch).unwrap();
        if !cfg.detach_teacher || !cfg.distills() {
            return sdvit_loss(&trace, &labels, cfg, &mut rng).unwrap().1.total;
        }
        let teacher = tape.constant(frozen_teacher.clone());
        let kl_at = |b: usize| {
            let student = trace.sub_model_logits(b).unwrap();
            teacher
                .kl_divergence(student, cfg.tau, true)
                .unwrap()
                .value()
                .item()
                .unwrap()
        };
        let blocks = trace.class_tokens.len();
        let kl = match select_block(&cfg.selection, &mut rng) {
            Selected::Block(b) => kl_at(b),
            Selected::All => (0..blocks).map(kl_at).sum::<f64>() / blocks as f64,
            Selected::Nothing => unreachable!(),
        };
        trace
            .logits
            .cross_entropy(&labels)
            .unwrap()
            .value()
            .item()
            .unwrap()
            + cfg.lambda * kl
    };

    let tape = Tape::new();
    let bound = model.bind(&tape);
    let trace = bound.forward(&batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (loss, _) = sdvit_loss(&trace, &labels, cfg, &mut rng).unwrap();
    let analytic = bound.gradients(&tape.backward(loss).unwrap());

    let mut all_a = Vec::new();
    let mut all_n = Vec::new();
    let mut probe = model.clone();
    for (p, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = probe.params()[p].data()[j];
            probe.params_mut()[p].data_mut()[j] = orig + H;
            let up = loss_of(&probe, &Tape::inference());
            probe.params_mut()[p].data_mut()[j] = orig - H;
            let down = loss_of(&probe, &Tape::inference());
            probe.params_mut()[p].data_mut()[j] = orig;
            all_a.push(grad.data()[j]);
            all_n.push((up - down) / (2.0 * H));
        }
    }
    rel_err(&all_a, &all_n)
}

pub fn loss_variants() -> Vec<DistillConfig> {
    vec![
        DistillConfig::erm(),
        DistillConfig {
            lambda: 0.5,
            tau: 3.0,
            detach_teacher: true,
            selection: BlockSelection::full(3),
        },
        DistillConfig {
            lambda: 0.5,
            tau: 3.0,
            detach_teacher: false,
            selection: BlockSelection::full(3),
        },
        DistillConfig {
            lambda: 0.2,
            tau: 5.0,
            detach_teacher: true,
            selection: BlockSelection::AllBlocks,
        },
    ]
}
