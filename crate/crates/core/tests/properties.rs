mod common;

use bijou::data;
use bijou::distiller::{self, EmaSchedule, LambdaSchedule, Objective};
use bijou::masking::{self, MaskSpec};
use bijou::optim::{self, OptimConfig};
use bijou::params::Binder;
use bijou::prenet::{self, Example};
use bijou::tensor::{self, Tensor};
use common::grad;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, seed: u64, spread: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..50.0) {
        let s = matrix(rows, cols, seed, spread).softmax(1).unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_slices_are_centred(rows in 1usize..6, cols in 2usize..9, seed in any::<u64>(), spread in 0.1f64..100.0) {
        let x = matrix(rows, cols, seed, spread);
        let y = x.layer_norm(&Tensor::new(&[cols], vec![1.0; cols]).unwrap(), &Tensor::zeros(&[cols]), 1e-5).unwrap();
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() / cols as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn audio_frames_follow_the_floor_ladder(samples in 0usize..6000) {
        // (kernel, stride) of each unpadded convolution.
        let ladder = [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];
        let mut len = Some(samples);
        for (k, s) in ladder {
            len = len.and_then(|l| (l >= k).then(|| (l - k) / s + 1));
        }
        prop_assert_eq!(prenet::audio_frame_count(samples), len);
    }

    #[test]
    fn masks_partition_every_clone(
        len in 2usize..120,
        length in 1usize..12,
        ratio in 0.05f64..0.95,
        adjust in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        let spec = MaskSpec { length, ratio, adjust, clones: 3 };
        let set = masking::sample_masks(len, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(set.len(), 3);
        for m in &set.masks {
            prop_assert_eq!(m.len(), len);
            let masked = m.iter().filter(|&&b| b).count();
            prop_assert!(masked >= 1);
            prop_assert!(len - masked >= 1);
            prop_assert!(masked as f64 <= (0.95 * len as f64).floor().max(1.0));
        }
    }

    #[test]
    fn schedules_are_monotone_ramps_that_clamp(
        start in -50.0f64..50.0,
        end in -50.0f64..50.0,
        steps in 1u64..10_000,
        a in 0u64..20_000,
        b in 0u64..20_000,
    ) {
        let lam = LambdaSchedule { start, end, steps };
        let ema = EmaSchedule { start, end, anneal_steps: steps };
        let (lo, hi) = (a.min(b), a.max(b));
        let check = |f: &dyn Fn(u64) -> f64| -> Result<(), TestCaseError> {
            prop_assert_eq!(f(0), start);
            prop_assert_eq!(f(steps), end);
            prop_assert_eq!(f(steps + 1 + a), end);
            // Monotone in the direction of travel.
            prop_assert!((f(hi) - f(lo)) * (end - start) >= -1e-12);
            // Linear inside the ramp: the midpoint of two steps lands halfway.
            if hi <= steps && (lo + hi) % 2 == 0 {
                let mid = f((lo + hi) / 2);
                prop_assert!((mid - 0.5 * (f(lo) + f(hi))).abs() < 1e-9 * (1.0 + start.abs() + end.abs()));
            }
            Ok(())
        };
        check(&|s| distiller::lambda_at(s, &lam))?;
        check(&|s| distiller::ema_decay(s, &ema))?;
    }

    #[test]
    fn lr_is_continuous_at_warmup_and_falls_after(
        warmup in 1u64..500,
        extra in 2u64..5000,
        lr_max in 1e-5f64..1e-2,
        a in 0u64..6000,
        b in 0u64..6000,
    ) {
        let mut cfg = OptimConfig::new(lr_max, warmup, warmup + extra, None);
        cfg.lr_min = lr_max * 0.01;
        let at = |s| optim::lr_at(s, &cfg);
        let w = warmup;
        prop_assert!((at(w) - lr_max).abs() < 1e-15);
        prop_assert!((at(w + 1) - at(w)).abs() <= lr_max * (std::f64::consts::PI / extra as f64).powi(2));
        prop_assert!((at(w) - at(w - 1)).abs() <= (lr_max - cfg.lr_min) / w as f64 + 1e-15);
        let (lo, hi) = (w + a.min(b), w + a.max(b));
        prop_assert!(at(hi) <= at(lo) + 1e-18);
        prop_assert_eq!(at(cfg.max_steps), cfg.lr_min);
    }

    #[test]
    fn packing_keeps_sentences_whole(
        sentences in prop::collection::vec(prop::collection::vec(0usize..50, 0..12), 0..30),
        max_len in 1usize..16,
    ) {
        let packed = data::pack_ids(sentences.clone(), max_len).unwrap();
        let mut rebuilt: Vec<Vec<usize>> = Vec::new();
        for sample in &packed {
            prop_assert!(sample.ids.len() <= max_len);
            for s in sample.sentences() {
                rebuilt.push(s.to_vec());
            }
        }
        let expected: Vec<Vec<usize>> = sentences
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| s[..s.len().min(max_len)].to_vec())
            .collect();
        prop_assert_eq!(&rebuilt, &expected);
        let long = sentences.iter().filter(|s| s.len() > max_len).count();
        prop_assert_eq!(packed.iter().filter(|s| s.truncated).count(), long);
        for sample in packed.iter().filter(|s| s.truncated) {
            prop_assert_eq!(&sample.sentence_ends, &vec![max_len]);
        }
    }

    #[test]
    fn embedding_commutes_with_permutation(
        ids in prop::collection::vec(0usize..10, 1..8),
        seed in any::<u64>(),
    ) {
        let table = matrix(10, 4, seed, 1.0);
        let mut perm: Vec<usize> = (0..ids.len()).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % ids.len());
        let permuted: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
        let a = prenet::embed_text(&ids, &table, None).unwrap().frames;
        let b = prenet::embed_text(&permuted, &table, None).unwrap().frames;
        for (row, &p) in perm.iter().enumerate() {
            prop_assert_eq!(&b.data()[row * 4..row * 4 + 4], &a.data()[p * 4..p * 4 + 4]);
        }
        let zeros = Tensor::zeros(&[8, 4]);
        let c = prenet::embed_text(&permuted, &table, Some(&zeros)).unwrap().frames;
        prop_assert_eq!(c.data(), b.data());
    }
}

/// Mean masked fraction over `draws` independent masks of length `len`.
fn masked_fraction(len: usize, length: usize, ratio: f64, draws: usize) -> f64 {
    let spec = MaskSpec { length, ratio, adjust: 0.0, clones: 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut total = 0usize;
    for _ in 0..draws {
        let m = masking::sample_masks(len, &spec, &mut rng).unwrap();
        total += m.masks[0].iter().filter(|&&b| b).count();
    }
    total as f64 / (draws * len) as f64
}

#[test]
fn masked_fraction_tracks_ratio() {
    for (length, ratio) in [(3, 0.6), (5, 0.5), (1, 0.15), (10, 0.65)] {
        let f = masked_fraction(100, length, ratio, 1000);
        assert!((f - ratio).abs() <= 0.03, "L={length} R={ratio}: {f}");
    }
    let f = masked_fraction(50, 3, 0.6, 1000);
    assert!((f - 0.6).abs() <= 0.03, "T=50: {f}");
}

#[test]
fn clones_are_independent() {
    let (len, draws) = (60, 2000);
    let spec = MaskSpec { length: 5, ratio: 0.5, adjust: 0.1, clones: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut marginal = vec![0.0; len];
    let mut agreement = Vec::with_capacity(draws);
    for _ in 0..draws {
        let set = masking::sample_masks(len, &spec, &mut rng).unwrap();
        let (a, b) = (&set.masks[0], &set.masks[1]);
        for t in 0..len {
            marginal[t] += (f64::from(u8::from(a[t])) + f64::from(u8::from(b[t]))) / (2 * draws) as f64;
        }
        agreement.push(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / len as f64);
    }
    let expected = marginal.iter().map(|p| p * p + (1.0 - p) * (1.0 - p)).sum::<f64>() / len as f64;
    let (mean, var) = tensor::mean_var(&agreement);
    let sigma = (var / draws as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * sigma, "agreement {mean} vs {expected} ± {sigma}");
}

fn tiny_setup() -> (bijou::config::TrainConfig, bijou::params::ParamSet, bijou::params::ParamSet) {
    let cfg = grad::tiny_text_config();
    let student = distiller::init_student(&cfg.model, &cfg.distill, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let teacher = distiller::init_student(&cfg.model, &cfg.distill, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap()
        .subset(&distiller::TEACHER_PREFIXES);
    (cfg, student, teacher)
}

#[test]
fn clone_order_does_not_change_the_loss() {
    let (mut cfg, student, teacher) = tiny_setup();
    cfg.mask.clones = 5;
    let objective = Objective { model: &cfg.model, mask: &cfg.mask, distill: &cfg.distill };
    let example = Example::Text(vec![5, 6, 7, 8, 9, 10, 11, 5]);
    let t = Binder::new(&teacher, false);
    let targets = distiller::teacher_targets(&example, &t, objective).unwrap();
    let mut clones = distiller::draw_clones(8, objective, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let loss = |c: &[(Vec<bool>, Vec<bool>)]| {
        let s = Binder::new(&student, false);
        distiller::student_loss(&example, &s, &targets, c, objective, 2).unwrap().0.item()
    };
    let forward = loss(&clones);
    clones.reverse();
    let backward = loss(&clones);
    clones.swap(0, 3);
    let shuffled = loss(&clones);
    assert!((forward - backward).abs() <= 1e-12 * forward.abs());
    assert!((forward - shuffled).abs() <= 1e-12 * forward.abs());
}

#[test]
fn no_gradient_reaches_the_teacher() {
    let (cfg, student, teacher) = tiny_setup();
    let objective = Objective { model: &cfg.model, mask: &cfg.mask, distill: &cfg.distill };
    let example = Example::Text(vec![5, 6, 7, 8, 9, 10]);
    let s = Binder::new(&student, true);
    let t = Binder::new(&teacher, false);
    let targets = distiller::teacher_targets(&example, &t, objective).unwrap();
    assert!(!targets.values.requires_grad() && !targets.values.has_graph());
    let (loss, _) = distiller::pretrain_step_loss(&example, &s, &t, objective, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    loss.backward().unwrap();
    let leaves = t.bound_leaves();
    assert_eq!(leaves.len(), teacher.len());
    for (name, leaf) in leaves {
        assert!(!leaf.requires_grad() && leaf.grad().is_none(), "{name}");
    }
    assert!(s.grads().iter().flatten().any(|g| *g != 0.0));
}

#[test]
fn same_seed_same_bits() {
    let (cfg, student, teacher) = tiny_setup();
    let objective = Objective { model: &cfg.model, mask: &cfg.mask, distill: &cfg.distill };
    let example = Example::Text(vec![5, 6, 7, 8, 9, 10]);
    let run = || {
        let s = Binder::new(&student, true);
        let t = Binder::new(&teacher, false);
        let (loss, _) = distiller::pretrain_step_loss(&example, &s, &t, objective, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        loss.backward().unwrap();
        (loss.item().to_bits(), s.grads())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn one_teacher_pass_per_example() {
    let (mut cfg, student, teacher) = tiny_setup();
    let batch = [Example::Text(vec![5, 6, 7, 8, 9, 10]), Example::Text(vec![7, 7, 8]), Example::Text(vec![9, 10, 11, 5])];
    let refs: Vec<&Example> = batch.iter().collect();
    for m in [1, 8, 12] {
        cfg.mask.clones = m;
        let objective = Objective { model: &cfg.model, mask: &cfg.mask, distill: &cfg.distill };
        let s = Binder::new(&student, true);
        let t = Binder::new(&teacher, false);
        let (s0, t0) = bijou::encoder::forward_counts();
        let (_, diag) = distiller::pretrain_batch_loss(&refs, &s, &t, objective, 1, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (s1, t1) = bijou::encoder::forward_counts();
        assert_eq!(t1 - t0, 3, "M={m}");
        assert_eq!(s1 - s0, 3 * m as u64, "M={m}");
        assert_eq!(diag.teacher_forwards, 3);
    }
}
