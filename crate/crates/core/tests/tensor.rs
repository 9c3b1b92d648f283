mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecgdg::tensor::{adam_step, checkpoint, AdamConfig, LossKind, Mode, ParamSet, RngStreams, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, u64)> {
    (1usize..=4, 1usize..=4, 1usize..=16, 1usize..=4, 1usize..=7, 1usize..=3, 0usize..=3, any::<u64>())
        .prop_filter("window fits", |&(_, _, l, _, k, _, p, _)| l + 2 * p >= k)
}

proptest! {
    #[test]
    fn conv_matches_nested_loops((n, c, l, co, k, s, p, seed) in conv_case()) {
        let xt = random(&[n, c, l], seed);
        let wt = random(&[co, c, k], seed ^ 1);
        let bt = random(&[co], seed ^ 2);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let w = tape.constant(wt.clone());
        let b = tape.constant(bt.clone());
        let y = tape.conv1d(x, w, Some(b), s, p).unwrap();
        let lo = common::out_len(l, k, s, p);
        prop_assert_eq!(tape.value(y).shape(), &[n, co, lo]);
        let want = common::naive_conv(xt.data(), (n, c, l), wt.data(), (co, k), bt.data(), s, p);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences((n, c, l, co, k, s, p, seed) in conv_case()) {
        let xt = random(&[n, c, l], seed);
        let wt = random(&[co, c, k], seed ^ 1);
        let eval = |w: &Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(xt.clone());
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv1d(x, wv, None, s, p).unwrap();
            let sq = tape.square(y).unwrap();
            let loss = tape.sum(sq).unwrap();
            let g = tape.gradients(loss).unwrap().get(wv).unwrap().to_vec();
            (tape.value(loss).data()[0], g)
        };
        let (_, grad) = eval(&wt);
        let h = 1e-6;
        for (i, g) in grad.iter().enumerate() {
            let mut plus = wt.clone();
            plus.data_mut()[i] += h;
            let mut minus = wt.clone();
            minus.data_mut()[i] -= h;
            let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            prop_assert!((num - g).abs() <= 1e-5 * num.abs().max(1.0), "weight {}: {} vs {}", i, g, num);
        }
    }

    #[test]
    fn concat_then_slice_recovers_parts(
        n in 1usize..4,
        widths in prop::collection::vec(1usize..5, 1..4),
        l in 1usize..10,
        seed in any::<u64>(),
    ) {
        let parts: Vec<Tensor<f64>> = widths.iter().enumerate().map(|(i, &c)| random(&[n, c, l], seed + i as u64)).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = parts.iter().map(|t| tape.constant(t.clone())).collect();
        let joined = tape.concat(&vars).unwrap();
        prop_assert_eq!(tape.value(joined).dim(1), widths.iter().sum::<usize>());
        let mut start = 0;
        for (t, &c) in parts.iter().zip(&widths) {
            let s = tape.slice(joined, start, c).unwrap();
            prop_assert_eq!(tape.value(s), t);
            start += c;
        }
    }

    #[test]
    fn checkpoint_file_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..6),
        seed in any::<u64>(),
    ) {
        let build = |fill: Option<f32>| {
            let mut p = ParamSet::<f32>::new();
            for (i, s) in shapes.iter().enumerate() {
                let mut t = random(s, seed + i as u64).cast::<f32>();
                if let Some(v) = fill {
                    t.data_mut().fill(v);
                }
                p.add(&format!("layer{i}.weight"), t, i % 2 == 0).unwrap();
            }
            p
        };
        let original = build(None);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("w.ckpt");
        checkpoint::save(&original, &path).unwrap();
        let mut restored = build(Some(7.0));
        checkpoint::load(&mut restored, &path).unwrap();
        for (a, b) in original.entries().iter().zip(restored.entries()) {
            prop_assert_eq!(&a.value, &b.value);
        }
    }
}

#[test]
fn adam_converges_on_quadratic() {
    let mut params = ParamSet::<f64>::new();
    let theta = params.add("theta", Tensor::scalar(0.0), true).unwrap();
    let cfg = AdamConfig::with_lr(0.1);
    for _ in 0..100 {
        params.zero_grad();
        let mut tape = Tape::new();
        let t = tape.param(&params, theta);
        let shift = tape.constant(Tensor::scalar(-3.0));
        let d = tape.add(t, shift).unwrap();
        let sq = tape.square(d).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss, &mut params).unwrap();
        adam_step(&mut params, &cfg).unwrap();
    }
    let v = params.value(theta).data()[0];
    assert!((v - 3.0).abs() < 0.1, "theta = {v}");
}

#[test]
fn same_seed_gives_identical_forward_and_backward() {
    let run = |seed: u64| {
        let streams = RngStreams::new(seed);
        let mut rng = streams.stream("dropout", 0);
        let mut params = ParamSet::<f32>::new();
        let w = params.add("w", random(&[6, 3, 5], seed).cast(), true).unwrap();
        let fc = params.add("fc.w", random(&[4, 6], seed ^ 3).cast(), true).unwrap();
        let fb = params.add("fc.b", Tensor::zeros(&[4]), true).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random(&[8, 3, 40], 99).cast());
        let wv = tape.param(&params, w);
        let y = tape.conv1d(x, wv, None, 2, 2).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.spatial_dropout(y, 0.3, Mode::Train, &mut rng).unwrap();
        let g = tape.global_avg_pool(y).unwrap();
        let fw = tape.param(&params, fc);
        let fbv = tape.param(&params, fb);
        let logits = tape.dense(g, fw, fbv).unwrap();
        let targets = Tensor::new(vec![8, 4], (0..32).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();
        let loss = tape.loss(logits, &targets, LossKind::SigmoidBce).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let grads: Vec<Vec<u32>> = params.ids().map(|id| params.grad(id).iter().map(|v| v.to_bits()).collect()).collect();
        (tape.value(loss).data()[0].to_bits(), grads)
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}
