use molakd::autograd::Tape;
use molakd::gradcheck::{finite_difference_grad, max_relative_error};
use molakd::losses::{
    balance_loss, coarse_loss, export_score_map, fine_loss, gen_loss, token_importance, GenHead, RouterStats,
    RoutingStats,
};
use molakd::mola::Router;
use molakd::optim::{Adam, AdamConfig};
use molakd::params::ParamId;
use molakd::{Model, ParamGroup, ParamStore, Stage, Tensor, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn scores(teacher: &Tensor, instr: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let (t, i) = (tape.constant(teacher.clone()), tape.constant(instr.clone()));
    let s = token_importance(&mut tape, t, i).unwrap();
    assert_eq!(tape.shape(s), &[1, teacher.rows()]);
    tape.value(s).to_vec()
}

/// Token importance written out as explicit loops over queries, keys and features.
fn scores_by_loops(teacher: &Tensor, instr: &Tensor) -> Vec<f64> {
    let (m, l, d) = (teacher.rows(), instr.rows(), teacher.cols());
    let t = |i: usize, k: usize| teacher.data()[i * d + k];
    let query = |q: usize, k: usize| if q < m { t(q, k) } else { instr.data()[(q - m) * d + k] };
    let mut out = vec![0.0; m];
    for q in 0..m + l {
        let mut logits = vec![0.0; m];
        for (j, logit) in logits.iter_mut().enumerate() {
            for k in 0..d {
                *logit += query(q, k) * t(j, k);
            }
            *logit /= (d as f64).sqrt();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        for j in 0..m {
            out[j] += (logits[j] - max).exp() / z / (m + l) as f64;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn token_importance_matches_loops(seed in any::<u64>(), m in 1usize..=4, l in 1usize..=4, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = randn(&mut rng, &[m, d]);
        let instr = randn(&mut rng, &[l, d]);
        let fast = scores(&teacher, &instr);
        let slow = scores_by_loops(&teacher, &instr);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn scores_are_a_distribution(seed in any::<u64>(), m in prop::sample::select(vec![1usize, 2, 4, 16]), l in 1usize..=8, d in 1usize..=8, spread in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = randn(&mut rng, &[m, d]);
        let instr = randn(&mut rng, &[l, d]);
        let teacher = Tensor::new(teacher.shape().to_vec(), teacher.data().iter().map(|v| v * spread).collect()).unwrap();
        let s = scores(&teacher, &instr);
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        if m == 1 {
            prop_assert_eq!(s, vec![1.0]);
        }
    }

    #[test]
    fn scores_ignore_instruction_order(seed in any::<u64>(), m in 1usize..=6, l in 2usize..=6, d in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = randn(&mut rng, &[m, d]);
        let instr = randn(&mut rng, &[l, d]);
        let rows: Vec<Vec<f64>> = instr.data().chunks(d).rev().map(<[f64]>::to_vec).collect();
        let reversed = Tensor::from_rows(&rows).unwrap();
        for (a, b) in scores(&teacher, &instr).iter().zip(scores(&teacher, &reversed)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn fine_loss_matches_loops(seed in any::<u64>(), nt in 1usize..=3, m in 1usize..=4, d in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let mut expected = 0.0;
        let (mut ss, mut ts, mut ws) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..nt {
            let s = randn(&mut rng, &[m, d]);
            let t = randn(&mut rng, &[m, d]);
            let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            for j in 0..m {
                let mse: f64 = (0..d).map(|k| (s.data()[j * d + k] - t.data()[j * d + k]).powi(2)).sum::<f64>() / d as f64;
                expected += w[j] * mse / nt as f64;
            }
            ss.push(tape.constant(s));
            ts.push(tape.constant(t));
            ws.push(tape.constant(Tensor::new(vec![1, m], w).unwrap()));
        }
        let loss = fine_loss(&mut tape, &ss, &ts, &ws).unwrap();
        prop_assert!(tape.scalar(loss) >= 0.0);
        prop_assert!((tape.scalar(loss) - expected).abs() <= 1e-12);
        let same = fine_loss(&mut tape, &ss, &ss, &ws).unwrap();
        prop_assert_eq!(tape.scalar(same), 0.0);
    }

    #[test]
    fn uniform_scores_reduce_to_mse(seed in any::<u64>(), m in 1usize..=6, d in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let s = tape.constant(randn(&mut rng, &[m, d]));
        let t = tape.constant(randn(&mut rng, &[m, d]));
        let w = tape.constant(Tensor::filled(&[1, m], 1.0 / m as f64));
        let fine = fine_loss(&mut tape, &[s], &[t], &[w]).unwrap();
        let coarse = coarse_loss(&mut tape, s, t).unwrap();
        prop_assert!((tape.scalar(fine) - tape.scalar(coarse)).abs() <= 1e-12);
    }

    #[test]
    fn routing_merge_is_additive_and_order_free(seed in any::<u64>(), steps in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parts = Vec::new();
        for _ in 0..steps {
            let mut s = RoutingStats::new(2, 3, 2);
            for layer in &mut s.layers {
                for r in layer.iter_mut() {
                    let e = r.counts.len();
                    let n = rng.random_range(1..10);
                    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..e)).collect();
                    let probs: Vec<f64> = (0..n * e).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
                    r.observe(&idx, &probs);
                }
            }
            parts.push(s);
        }
        let mut forward = RoutingStats::default();
        parts.iter().for_each(|p| forward.merge(p));
        let mut backward = RoutingStats::default();
        parts.iter().rev().for_each(|p| backward.merge(p));
        prop_assert_eq!(&forward, &backward);
        for (l, layer) in forward.layers.iter().enumerate() {
            for (k, r) in layer.iter().enumerate() {
                let counts: u64 = parts.iter().map(|p| p.layers[l][k].tokens).sum();
                prop_assert_eq!(r.tokens, counts);
                prop_assert_eq!(r.counts.iter().sum::<u64>(), counts);
            }
        }
    }
}

#[test]
fn coarse_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = randn(&mut rng, &[4, 3]);
    let t = randn(&mut rng, &[4, 3]);
    let mut tape = Tape::new();
    let sv = tape.leaf(s.clone().with_requires_grad(true));
    let tv = tape.constant(t.clone());
    let loss = coarse_loss(&mut tape, sv, tv).unwrap();
    let analytic = tape.backward(loss).unwrap().wrt(sv).unwrap().to_vec();
    let numeric = finite_difference_grad(
        |x| {
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(x.clone()), tape.constant(t.clone()));
            let l = coarse_loss(&mut tape, a, b)?;
            Ok(tape.scalar(l))
        },
        &s,
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(&analytic, numeric.data()) < 1e-6);
}

fn router_store(experts: usize, collapse_bias: f64) -> (ParamStore, Router) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let router = Router::new(&mut store, "router", 4, 4, experts, &mut rng);
    let mut bias = vec![0.0; experts];
    bias[0] = collapse_bias;
    store.get_mut(router.fc2.bias.unwrap()).set_data(&bias).unwrap();
    (store, router)
}

#[test]
fn balance_loss_falls_from_collapse() {
    let (mut store, router) = router_store(4, 4.0);
    store.set_trainable(&[ParamGroup::Routers]);
    let h = randn(&mut ChaCha8Rng::seed_from_u64(3), &[32, 4]);
    let mut adam = Adam::new(AdamConfig::with_lr(0.01));
    let mut history = Vec::new();
    for _ in 0..50 {
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(h.clone());
        let routing = router.route(&mut tape, x).unwrap();
        let loss = balance_loss(&mut tape, &[&routing]).unwrap();
        history.push(tape.scalar(loss));
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&grads).unwrap();
        adam.step(&mut store).unwrap();
        store.zero_grad();
    }
    assert!(history[0] > 3.5, "start is not collapsed: {}", history[0]);
    assert!(history[49] < 0.8 * history[0], "{history:?}");
}

fn head_setup() -> (ParamStore, GenHead, Tensor, Vec<usize>, Vec<usize>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let head = GenHead::new(&mut store, 8, 8, 10, &mut rng);
    let student = randn(&mut rng, &[4, 8]);
    (store, head, student, vec![1, 7, 3], vec![2, 5, 9, 0])
}

fn head_loss(store: &ParamStore, head: &GenHead, student: &Tensor, instr: &[usize], targets: &[usize]) -> (f64, Vec<(ParamId, Vec<f64>)>) {
    let mut tape = Tape::with_params(store);
    let s = tape.constant(student.clone());
    let i = head.embed_tokens(&mut tape, instr).unwrap();
    let loss = gen_loss(head, &mut tape, s, i, targets).unwrap();
    let value = tape.scalar(loss);
    let grads = tape.backward(loss).unwrap();
    (value, grads.params().map(|(id, g)| (id, g.to_vec())).collect())
}

#[test]
fn uniform_decoder_gives_log_vocab() {
    let (mut store, head, student, instr, targets) = head_setup();
    store.get_mut(head.decoder.weight).set_data(&vec![0.0; 8 * 10]).unwrap();
    let (loss, _) = head_loss(&store, &head, &student, &instr, &targets);
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn head_overfits_one_sample() {
    let (mut store, head, student, instr, targets) = head_setup();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
    let mut last = f64::INFINITY;
    for step in 0..100 {
        let (loss, grads) = head_loss(&store, &head, &student, &instr, &targets);
        assert!(loss < last, "step {step}: {loss} after {last}");
        last = loss;
        if step == 0 {
            let fp = head.projector.fc1.weight;
            let g = grads.iter().find(|(id, _)| *id == fp).expect("projector reached");
            assert!(g.1.iter().any(|&v| v != 0.0));
        }
        for (id, g) in &grads {
            store.get_mut(*id).accumulate_grad(g).unwrap();
        }
        adam.step(&mut store).unwrap();
        store.zero_grad();
    }
    assert!(last < 0.1, "final loss {last}");
}

/// Gradient of the model objective under the given weights, summed per parameter.
fn objective_gradient(model: &mut Model, lambda1: f64, lambda2: f64) -> Vec<f64> {
    model.lambda1 = lambda1;
    model.lambda2 = lambda2;
    let cfg = TrainConfig::minimal();
    let sample = molakd::data::Dataset::from_config(&cfg).sample(0);
    let raw = model.teachers.unshuffled(&sample.image).unwrap();
    let mut tape = Tape::with_params(&model.store);
    let out = model.forward(&mut tape, &sample, &raw).unwrap();
    let grads = tape.backward(out.total).unwrap();
    let mut flat: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
    for (id, g) in grads.params() {
        flat[id.index()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    flat.concat()
}

#[test]
fn total_gradient_is_linear_in_the_weights() {
    let mut cfg = TrainConfig::minimal();
    cfg.stage = Stage::Finetune;
    let mut model = Model::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ups: Vec<ParamId> = model.store.iter().filter(|(_, p)| p.name.ends_with(".up")).map(|(id, _)| id).collect();
    for id in ups {
        let n = model.store.get(id).numel();
        let data: Vec<f64> = (0..n).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        model.store.get_mut(id).set_data(&data).unwrap();
    }
    let gen = objective_gradient(&mut model, 0.0, 0.0);
    let distill = objective_gradient(&mut model, 1.0, 0.0);
    let balance = objective_gradient(&mut model, 0.0, 1.0);
    let mixed = objective_gradient(&mut model, 0.5, 0.05);
    let doubled = objective_gradient(&mut model, 1.0, 0.05);
    for i in 0..gen.len() {
        let d = distill[i] - gen[i];
        let b = balance[i] - gen[i];
        let scale = 1.0 + gen[i].abs() + d.abs() + b.abs();
        assert!((mixed[i] - (gen[i] + 0.5 * d + 0.05 * b)).abs() <= 1e-12 * scale);
        assert!(((doubled[i] - mixed[i]) - 0.5 * d).abs() <= 1e-12 * scale);
    }
}

#[test]
fn total_with_zero_weights_is_generation_loss() {
    let mut cfg = TrainConfig::minimal();
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    let model = Model::new(&cfg).unwrap();
    let sample = molakd::data::Dataset::from_config(&cfg).sample(1);
    let raw = model.teachers.unshuffled(&sample.image).unwrap();
    let mut tape = Tape::with_params(&model.store);
    let out = model.forward(&mut tape, &sample, &raw).unwrap();
    assert_eq!(out.losses.total, out.losses.gen);
}

#[test]
fn balance_loss_endpoints_and_empty_input() {
    for e in [2usize, 3, 4, 8] {
        for (probs, idx, expected) in [
            (vec![1.0 / e as f64; e * e], (0..e).collect::<Vec<_>>(), 1.0),
            ((0..e * e).map(|i| if i % e == 0 { 1.0 } else { 0.0 }).collect(), vec![0; e], e as f64),
        ] {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::new(vec![e, e], probs).unwrap());
            let routing = molakd::mola::Routing {
                indices: idx,
                probs: p,
                num_experts: e,
            };
            let loss = balance_loss(&mut tape, &[&routing]).unwrap();
            assert!((tape.scalar(loss) - expected).abs() <= 1e-12);
        }
    }
    let mut tape = Tape::new();
    assert!(balance_loss(&mut tape, &[]).is_err());
}

#[test]
fn router_stats_normalize() {
    let mut r = RouterStats::new(3);
    r.observe(&[0, 2, 2], &[0.5, 0.2, 0.3, 0.1, 0.1, 0.8, 0.2, 0.2, 0.6]);
    assert_eq!(r.counts, vec![1, 0, 2]);
    assert!((r.mean_probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!((r.fractions().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
}

#[test]
fn score_map_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    export_score_map(&[vec![0.25, 0.75], vec![1.0, 0.0]], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "teacher_index,token_index,score\n0,0,0.25\n0,1,0.75\n1,0,1\n1,1,0\n"
    );
}
