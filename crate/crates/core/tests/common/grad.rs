//! Central finite differences against reverse-mode gradients.

use bijou::config::TrainConfig;
use bijou::distiller::{self, Objective};
use bijou::params::{Binder, ParamSet};
use bijou::prenet::Example;
use bijou::tensor::{ConvGeometry, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PRIMITIVE_STEP: f64 = 1e-5;

/// `(f(x + h) − f(x − h)) / 2h` with `h = PRIMITIVE_STEP`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = PRIMITIVE_STEP;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub const STENCIL_STEP: f64 = 1e-4;

/// Fourth-order central stencil. Its O(h⁴) truncation error lets the step
/// stay large enough that roundoff does not swamp gradients near 1e-7, which
/// occur in the full objective.
pub fn central_difference4(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = STENCIL_STEP;
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, with a floor so an
/// all-zero gradient compares absolutely.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

pub type Inputs = Vec<(Vec<usize>, Vec<f64>)>;
pub type Scalar = Box<dyn Fn(&[Tensor]) -> Tensor>;

/// Largest per-input relative error of `f`'s gradient.
pub fn check(inputs: &Inputs, f: &Scalar) -> f64 {
    let leaves: Vec<Tensor> = inputs.iter().map(|(s, d)| Tensor::param(s, d.clone()).unwrap()).collect();
    f(&leaves).backward().unwrap();
    let eval = |values: &Inputs| {
        let consts: Vec<Tensor> = values.iter().map(|(s, d)| Tensor::new(s, d.clone()).unwrap()).collect();
        f(&consts).item()
    };
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);
        let mut numeric = Vec::with_capacity(leaf.len());
        let mut probe = inputs.clone();
        for i in 0..leaf.len() {
            let x = inputs[k].1[i];
            numeric.push(central_difference(
                |v| {
                    probe[k].1[i] = v;
                    eval(&probe)
                },
                x,
            ));
            probe[k].1[i] = x;
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Contracts an output with fixed weights so every element matters.
fn weigh(out: Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(out.shape(), randn(&mut rng, out.len())).unwrap();
    out.mul(&w).unwrap().sum()
}

/// One case per differentiable primitive.
pub fn primitive_cases() -> Vec<(&'static str, Inputs, Scalar)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut m = |shape: &[usize]| (shape.to_vec(), randn(&mut rng, shape.iter().product()));
    let mut cases: Vec<(&'static str, Inputs, Scalar)> = Vec::new();
    cases.push(("add", vec![m(&[3, 4]), m(&[3, 4])], Box::new(|t| weigh(t[0].add(&t[1]).unwrap(), 1))));
    cases.push(("sub", vec![m(&[3, 4]), m(&[3, 4])], Box::new(|t| weigh(t[0].sub(&t[1]).unwrap(), 2))));
    cases.push(("mul", vec![m(&[3, 4]), m(&[3, 4])], Box::new(|t| weigh(t[0].mul(&t[1]).unwrap(), 3))));
    cases.push(("scale", vec![m(&[5])], Box::new(|t| weigh(t[0].scale(-1.7), 4))));
    cases.push(("add_row", vec![m(&[3, 4]), m(&[4])], Box::new(|t| weigh(t[0].add_row(&t[1]).unwrap(), 5))));
    cases.push(("matmul", vec![m(&[3, 4]), m(&[4, 2])], Box::new(|t| weigh(t[0].matmul(&t[1]).unwrap(), 6))));
    cases.push(("transpose", vec![m(&[3, 4])], Box::new(|t| weigh(t[0].transpose().unwrap(), 7))));
    cases.push(("softmax.last", vec![m(&[3, 4])], Box::new(|t| weigh(t[0].softmax(1).unwrap(), 8))));
    cases.push(("softmax.first", vec![m(&[3, 4])], Box::new(|t| weigh(t[0].softmax(0).unwrap(), 9))));
    cases.push(("softmax.middle", vec![m(&[2, 3, 4])], Box::new(|t| weigh(t[0].softmax(1).unwrap(), 10))));
    cases.push((
        "layer_norm",
        vec![m(&[3, 5]), m(&[5]), m(&[5])],
        Box::new(|t| weigh(t[0].layer_norm(&t[1], &t[2], 1e-5).unwrap(), 11)),
    ));
    cases.push(("gelu", vec![m(&[3, 4])], Box::new(|t| weigh(t[0].gelu(), 12))));
    cases.push((
        "conv1d",
        vec![m(&[4, 11]), m(&[6, 2, 3]), m(&[6])],
        Box::new(|t| weigh(t[0].conv1d(&t[1], Some(&t[2]), ConvGeometry::new(2, 1, 2)).unwrap(), 13)),
    ));
    cases.push((
        "conv1d.no_bias",
        vec![m(&[2, 9]), m(&[3, 2, 4])],
        Box::new(|t| weigh(t[0].conv1d(&t[1], None, ConvGeometry::new(1, 0, 1)).unwrap(), 14)),
    ));
    cases.push((
        "gather_rows",
        vec![m(&[4, 3])],
        Box::new(|t| weigh(t[0].gather_rows(&[2, 0, 2, 3]).unwrap(), 15)),
    ));
    cases.push((
        "scatter_rows",
        vec![m(&[2, 3]), m(&[3])],
        Box::new(|t| weigh(Tensor::scatter_rows(&t[0], &t[1], &[None, Some(1), None, Some(0)]).unwrap(), 16)),
    ));
    cases.push(("slice_cols", vec![m(&[3, 5])], Box::new(|t| weigh(t[0].slice_cols(1, 3).unwrap(), 17))));
    cases.push((
        "concat_cols",
        vec![m(&[3, 2]), m(&[3, 3])],
        Box::new(|t| weigh(Tensor::concat_cols(&[t[0].clone(), t[1].clone()]).unwrap(), 18)),
    ));
    cases.push(("sum", vec![m(&[3, 4])], Box::new(|t| t[0].mul(&t[0]).unwrap().sum())));
    cases.push(("mean", vec![m(&[3, 4])], Box::new(|t| t[0].mul(&t[0]).unwrap().mean())));
    cases.push((
        "cross_entropy",
        vec![m(&[4, 5])],
        Box::new(|t| t[0].scale(2.0).cross_entropy(&[1, 4, 0, 1]).unwrap()),
    ));
    cases
}

/// Small text model (d = 8, T = 6, two clones, two layers) with the MLM
/// term on.
pub fn tiny_text_config() -> TrainConfig {
    TrainConfig::parse(
        "preset = text-base-mlm
prenet.vocab_size = 12
prenet.max_positions = 8
encoder.layers = 2
encoder.heads = 2
encoder.d_model = 8
encoder.d_ff = 16
distill.top_k = 2
decoder.layers = 2
decoder.dim = 8
decoder.kernel = 3
mask.length = 2
mask.ratio = 0.5
mask.adjust = 0.0
mask.clones = 2
lambda.start = 3.0
lambda.end = 1.0
lambda.steps = 10
",
    )
    .unwrap()
}

/// Same shape for speech, with a narrow conv feature extractor.
pub fn tiny_speech_config() -> TrainConfig {
    TrainConfig::parse(
        "preset = speech-base
prenet.conv_channels = 4
prenet.pos_conv_kernel = 3
prenet.pos_conv_groups = 2
encoder.layers = 2
encoder.heads = 2
encoder.d_model = 8
encoder.d_ff = 16
encoder.layerdrop = 0.0
distill.top_k = 2
decoder.layers = 1
decoder.dim = 8
decoder.groups = 2
decoder.kernel = 3
mask.length = 2
mask.ratio = 0.5
mask.adjust = 0.0
mask.clones = 2
",
    )
    .unwrap()
}

/// Relative error of the full per-example objective's gradient with respect
/// to every student parameter. The teacher is an independent constant
/// parameter set and the mask rng is reseeded for every evaluation.
pub fn full_loss_check(cfg: &TrainConfig, example: &Example) -> f64 {
    let student = distiller::init_student(&cfg.model, &cfg.distill, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let teacher = distiller::init_student(&cfg.model, &cfg.distill, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap()
        .subset(&distiller::TEACHER_PREFIXES);
    let objective = Objective { model: &cfg.model, mask: &cfg.mask, distill: &cfg.distill };
    let loss_of = |ps: &ParamSet, track: bool| {
        let s = Binder::new(ps, track);
        let t = Binder::new(&teacher, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (loss, _) = distiller::pretrain_step_loss(example, &s, &t, objective, 3, &mut rng).unwrap();
        if track {
            loss.backward().unwrap();
        }
        (loss.item(), s.grads())
    };
    let (_, analytic) = loss_of(&student, true);
    let mut worst: f64 = 0.0;
    let mut probe = student.clone();
    for (k, p) in student.iter().enumerate() {
        let mut numeric = Vec::with_capacity(p.value.len());
        for i in 0..p.value.len() {
            let x = p.value[i];
            numeric.push(central_difference4(
                |v| {
                    probe.get_mut(&p.name).unwrap().value[i] = v;
                    loss_of(&probe, false).0
                },
                x,
            ));
            probe.get_mut(&p.name).unwrap().value[i] = x;
        }
        worst = worst.max(rel_error(&analytic[k], &numeric));
    }
    worst
}

pub fn tiny_text_example() -> Example {
    Example::Text(vec![5, 7, 9, 11, 6, 8])
}

/// Enough samples for exactly six feature frames.
pub fn tiny_speech_example() -> Example {
    let n = (0..).map(|k| 400 + k).find(|&n| bijou::prenet::audio_frame_count(n) == Some(6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    Example::Speech((0..n).map(|_| rng.random_range(-0.5..0.5)).collect())
}
