use approx::assert_abs_diff_eq;
use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::metrics::{accuracy, HeadPredictor};
use crate::nn::Batch;
use crate::stream::{make_scenario, Preset, ScenarioConfig};

fn small_stream(preset: Preset, family: Option<Scenario>, tasks: Option<usize>, seed: u64) -> TaskStream {
    let cfg = ScenarioConfig {
        preset,
        family,
        tasks,
        n_train: 64,
        n_test: 16,
        ..ScenarioConfig::preset(preset)
    };
    make_scenario(&cfg, seed).unwrap()
}

fn quick_hyper() -> HyperConfig {
    HyperConfig {
        epochs: 3,
        batch_size: 16,
        hidden: vec![16, 8],
        ..HyperConfig::default()
    }
}

fn run(method: Method, hyper: HyperConfig, stream: &TaskStream, seed: u64) -> TrainerState {
    let mut state = TrainerState::new(method, hyper, TrainerOptions::default(), stream, seed).unwrap();
    for t in 0..stream.task_count() {
        state.train_task(t, &stream.train[t]).unwrap();
    }
    state
}

#[test]
fn ewc_penalty_examples() {
    let theta = vec![vec![1.0, 2.0]];
    let fisher = vec![vec![1.0, 1.0]];
    assert_eq!(ewc_penalty(&theta, &theta, &fisher, 3.0).unwrap(), 0.0);
    let anchor = vec![vec![0.0, 0.0]];
    assert_eq!(ewc_penalty(&theta, &anchor, &fisher, 0.0).unwrap(), 0.0);
    assert_eq!(ewc_penalty(&theta, &anchor, &fisher, 2.0).unwrap(), 5.0);
    assert!(ewc_penalty(&theta, &anchor, &[vec![1.0]], 2.0).is_err());
}

#[test]
fn ewc_consolidation_examples() {
    let task = vec![vec![4.0, 1.0]];
    assert_eq!(ewc_consolidate(&[], &task, 0).unwrap(), task);
    assert_eq!(ewc_consolidate(&task, &task, 3).unwrap(), task);
    assert_eq!(ewc_consolidate(&[vec![2.0]], &[vec![4.0]], 1).unwrap(), vec![vec![3.0]]);
    // a widened tensor pads the old side with zeros
    assert_eq!(ewc_consolidate(&[vec![2.0]], &[vec![4.0, 2.0]], 1).unwrap(), vec![vec![3.0, 1.0]]);
    assert!(ewc_consolidate(&[vec![-1.0]], &[vec![1.0]], 1).is_err());
}

#[test]
fn groupdro_examples() {
    let q = [0.5, 0.5];
    let next = groupdro_reweight(&q, &[Some(2f64.ln()), Some(0.0)], 1.0).unwrap();
    assert_abs_diff_eq!(next[0], 2.0 / 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(next[1], 1.0 / 3.0, epsilon = 1e-15);
    assert_eq!(groupdro_reweight(&q, &[Some(3.0), Some(0.1)], 0.0).unwrap(), q);
    let q3 = [0.2, 0.3, 0.5];
    let same = groupdro_reweight(&q3, &[Some(0.7), Some(0.7), Some(0.7)], 5.0).unwrap();
    for (a, b) in same.iter().zip(q3) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }
    // absent group keeps its weight
    let carried = groupdro_reweight(&q3, &[Some(1.0), None, Some(0.0)], 2.0).unwrap();
    assert_abs_diff_eq!(carried[1], 0.3, epsilon = 1e-15);
    assert_abs_diff_eq!(carried.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    assert!(carried[0] > carried[2]);
    assert!(groupdro_reweight(&[0.0, 1.0], &[None, None], 1.0).is_err());
}

#[test]
fn groupdro_argmax_follows_worst_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let eta = 10f64.powf(rng.random_range(-3.0..2.0));
        let losses: Vec<Option<f64>> = (0..4).map(|_| Some(rng.random_range(0.0..3.0))).collect();
        let next = groupdro_reweight(&[0.25; 4], &losses, eta).unwrap();
        let worst = (0..4).max_by(|&a, &b| losses[a].unwrap().total_cmp(&losses[b].unwrap())).unwrap();
        let top = (0..4).max_by(|&a, &b| next[a].total_cmp(&next[b])).unwrap();
        assert_eq!(top, worst);
        assert!(next.iter().all(|&w| w > 0.0));
    }
}

#[test]
fn cell_weights_realize_weighted_cell_means() {
    let cells = [Some(0), Some(0), Some(1), None];
    let w = cell_weights(&cells, &[0.25, 0.5, 0.25], 3);
    // present mass 0.75; cell 0: 0.25/0.75 split over 2, cell 1: 0.5/0.75
    let share = 0.75;
    assert_abs_diff_eq!(w[0], share * (1.0 / 3.0) / 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(w[2], share * (2.0 / 3.0), epsilon = 1e-15);
    assert_abs_diff_eq!(w[3], 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
}

struct GradCase {
    model: MlpModel,
    batch: Batch,
    routing: HeadRouting,
}

fn grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpModel::new(5, &[6, 4], 3, HeadMode::Multi, &mut rng);
    model.add_head(3, &mut rng).unwrap();
    // fresh biases are exactly zero, which can park a unit on the ReLU kink
    for i in 0..model.tensor_count() {
        for v in model.tensor_mut(i) {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let n = 7;
    let inputs = Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.5..1.5));
    let tasks: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let classes: Vec<usize> = tasks.iter().map(|&t| 3 * t + rng.random_range(0..3)).collect();
    let groups: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    GradCase {
        model,
        batch: Batch::new(inputs, classes, groups, tasks).unwrap(),
        routing: HeadRouting::PerTask { offsets: vec![0, 3] },
    }
}

/// Central differences over every tensor that received a gradient.
fn check_gradients(model: &MlpModel, batch: &Batch, objective: &dyn Objective) {
    let (_, grads) = objective.evaluate(model, batch).unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for i in 0..model.tensor_count() {
        let Some(analytic) = grads.slot(i) else { continue };
        for k in 0..analytic.len() {
            let mut plus = model.clone();
            plus.tensor_mut(i)[k] += h;
            let mut minus = model.clone();
            minus.tensor_mut(i)[k] -= h;
            let fd = (objective.evaluate(&plus, batch).unwrap().0
                - objective.evaluate(&minus, batch).unwrap().0)
                / (2.0 * h);
            let a = analytic[k];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-5);
            assert!(rel < 1e-4, "tensor {i}[{k}]: analytic {a}, numeric {fd}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for seed in 0..20 {
        let c = grad_case(seed);
        check_gradients(&c.model, &c.batch, &MethodObjective::cross_entropy(&c.routing, true));
    }
}

#[test]
fn lwf_gradients_match_finite_differences() {
    for seed in 0..20 {
        let c = grad_case(100 + seed);
        let old = grad_case(200 + seed).model;
        let objective = MethodObjective {
            lwf: Some(LwfTerm {
                old: &old,
                heads: vec![(0, 3), (1, 2)],
                lambda: 1.7,
                temperature: 2.0,
            }),
            ..MethodObjective::cross_entropy(&c.routing, true)
        };
        check_gradients(&c.model, &c.batch, &objective);
    }
}

#[test]
fn ewc_gradients_match_finite_differences() {
    for seed in 0..20 {
        let c = grad_case(300 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors: Vec<Vec<f64>> = c
            .model
            .snapshot()
            .into_iter()
            .map(|t| t.into_iter().map(|v| v + rng.random_range(-0.3..0.3)).collect())
            .collect();
        let fisher: Vec<Vec<f64>> = anchors
            .iter()
            .map(|t| t.iter().map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        let objective = MethodObjective {
            ewc: Some(EwcTerm {
                anchors: &anchors,
                fisher: &fisher,
                lambda: 3.5,
            }),
            ..MethodObjective::cross_entropy(&c.routing, true)
        };
        // every tensor carries a gradient here, so the penalty is fully checked
        let (loss, _) = objective.evaluate(&c.model, &c.batch).unwrap();
        let (ce, _) = MethodObjective::cross_entropy(&c.routing, true)
            .evaluate(&c.model, &c.batch)
            .unwrap();
        let penalty = ewc_penalty(&c.model.snapshot(), &anchors, &fisher, 3.5).unwrap();
        assert_abs_diff_eq!(loss, ce + penalty, epsilon = 1e-10);
        check_gradients(&c.model, &c.batch, &objective);
    }
}

#[test]
fn groupdro_gradients_match_finite_differences() {
    for seed in 0..20 {
        let c = grad_case(400 + seed);
        let cells: Vec<Option<usize>> = c
            .batch
            .class_labels
            .iter()
            .zip(&c.batch.group_labels)
            .map(|(&y, &g)| Some((y % 3) * 2 + usize::from(g)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let objective = MethodObjective {
            sample_weights: Some(cell_weights(&cells, &q, cells.len())),
            ..MethodObjective::cross_entropy(&c.routing, true)
        };
        check_gradients(&c.model, &c.batch, &objective);
    }
}

#[test]
fn lwf_with_zero_lambda_is_cross_entropy() {
    let c = grad_case(7);
    let old = grad_case(8).model;
    let ce = MethodObjective::cross_entropy(&c.routing, true).evaluate(&c.model, &c.batch).unwrap();
    let lwf = MethodObjective {
        lwf: Some(LwfTerm {
            old: &old,
            heads: vec![(0, 3)],
            lambda: 0.0,
            temperature: 2.0,
        }),
        ..MethodObjective::cross_entropy(&c.routing, true)
    }
    .evaluate(&c.model, &c.batch)
    .unwrap();
    assert_eq!(ce, lwf);
    // identical old and new logits distill to zero
    let same = MethodObjective {
        lwf: Some(LwfTerm {
            old: &c.model,
            heads: vec![(0, 3), (1, 3)],
            lambda: 5.0,
            temperature: 2.0,
        }),
        ..MethodObjective::cross_entropy(&c.routing, true)
    }
    .evaluate(&c.model, &c.batch)
    .unwrap();
    assert_abs_diff_eq!(same.0, ce.0, epsilon = 1e-12);
}

#[test]
fn fine_tuning_one_task_is_plain_supervised_training() {
    let stream = small_stream(Preset::TwoTaskForward, None, None, 4).truncated(1);
    let hyper = quick_hyper();
    let state = run(Method::FineTuning, hyper.clone(), &stream, 11);
    // reference: the same loop written against the nn primitives
    let seeds = SeedStreams::new(11);
    let mut model = MlpModel::new(
        stream.feature_dim(),
        &hyper.hidden,
        2,
        HeadMode::Multi,
        &mut seeds.rng(Purpose::Init),
    );
    let routing = stream.routing();
    let ce = crate::nn::loss::CrossEntropy {
        routing: routing.clone(),
        train_trunk: true,
    };
    let mut opt = AdamWState::new(&model, hyper.optimizer);
    let mut order = seeds.rng_indexed(Purpose::BatchOrder, 0);
    for epoch in 0..hyper.epochs {
        opt.hyper.learning_rate = cosine_lr(epoch, hyper.epochs, 0.001).unwrap();
        for idx in epoch_batches(stream.train[0].len(), hyper.batch_size, &mut order) {
            let s: Vec<&BiasedSample> = idx.iter().map(|&i| &stream.train[0][i]).collect();
            train_step(&mut model, &mut opt, &to_batch(&s).unwrap(), &ce, &[]).unwrap();
        }
    }
    assert_eq!(state.model, model);
}

#[test]
fn model_freezing_keeps_trunk_after_first_task() {
    let stream = small_stream(Preset::AccumulationSameBias, None, Some(3), 2);
    let hyper = quick_hyper();
    let mut state = TrainerState::new(Method::ModelFreezing, hyper, TrainerOptions::default(), &stream, 1).unwrap();
    state.train_task(0, &stream.train[0]).unwrap();
    let trunk = state.model.trunk_snapshot();
    let head0 = state.model.heads()[0].clone();
    state.train_task(1, &stream.train[1]).unwrap();
    state.train_task(2, &stream.train[2]).unwrap();
    assert_eq!(state.model.trunk_snapshot(), trunk);
    assert_eq!(state.model.heads()[0], head0);
    assert!(state.train_task(2, &stream.train[2]).is_err());
}

#[test]
fn disabled_mechanisms_reproduce_fine_tuning() {
    let stream = small_stream(Preset::AccumulationSameBias, None, Some(3), 6);
    let base = quick_hyper();
    let ft = run(Method::FineTuning, base.clone(), &stream, 5);
    let cases = [
        (Method::Ewc, HyperConfig { lambda: 0.0, ..base.clone() }),
        (Method::Lwf, HyperConfig { lambda: 0.0, ..base.clone() }),
        (Method::Er, HyperConfig { memory_fraction: 0.0, ..base.clone() }),
        (Method::PackNet, HyperConfig { pruning_ratio: 0.0, ..base.clone() }),
    ];
    for (method, hyper) in cases {
        let state = run(method, hyper, &stream, 5);
        assert_eq!(state.model, ft.model, "{method}");
    }
}

#[test]
fn mechanisms_change_the_trajectory() {
    let stream = small_stream(Preset::TwoTaskForward, None, None, 6);
    let base = quick_hyper();
    let ft = run(Method::FineTuning, base.clone(), &stream, 5);
    for method in [Method::Ewc, Method::Lwf, Method::Er, Method::PackNet] {
        let hyper = HyperConfig {
            lambda: 10.0,
            memory_fraction: 0.5,
            ..base.clone()
        };
        assert_ne!(run(method, hyper, &stream, 5).model, ft.model, "{method}");
    }
}

#[test]
fn packnet_has_no_backward_transfer() {
    let stream = small_stream(Preset::AccumulationSameBias, None, Some(3), 9);
    let hyper = HyperConfig {
        pruning_ratio: 0.4,
        ..quick_hyper()
    };
    let mut state = TrainerState::new(Method::PackNet, hyper, TrainerOptions::default(), &stream, 2).unwrap();
    let originals: Vec<&BiasedSample> = stream.test[0].iter().map(|p| &p.original).collect();
    let batch = to_batch(&originals).unwrap();
    state.train_task(0, &stream.train[0]).unwrap();
    let before = state.eval_model(0).unwrap().forward_batch(&batch, 0).unwrap();
    let masks_before = match &state.aux {
        Aux::PackNet { masks } => masks.clone(),
        _ => unreachable!(),
    };
    for t in 1..3 {
        state.train_task(t, &stream.train[t]).unwrap();
        let after = state.eval_model(0).unwrap().forward_batch(&batch, 0).unwrap();
        let bits = |a: &Array2<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
    }
    let Aux::PackNet { masks } = &state.aux else { unreachable!() };
    for (old, new) in masks_before.iter().zip(masks) {
        for (a, b) in old.iter().zip(new) {
            if *a != 0 {
                assert_eq!(a, b);
            }
        }
    }
    assert!(masks.iter().flatten().any(|&m| m == 3));
}

#[test]
fn packnet_rejected_outside_task_il() {
    let stream = small_stream(Preset::TwoTaskForward, Some(Scenario::ClassIl), None, 1);
    assert!(matches!(
        TrainerState::new(Method::PackNet, quick_hyper(), TrainerOptions::default(), &stream, 0),
        Err(Error::Incompatible(_))
    ));
}

fn separable_stream() -> TaskStream {
    let cfg = ScenarioConfig {
        n_train: 200,
        n_test: 64,
        core_noise: 0.1,
        prototype_scale: 1.0,
        bias_level: Some(0),
        ..ScenarioConfig::preset(Preset::TwoTaskForward)
    };
    make_scenario(&cfg, 21).unwrap().truncated(1)
}

#[test]
fn gdumb_learns_separable_task_from_memory() {
    let stream = separable_stream();
    let hyper = HyperConfig {
        memory_fraction: 1.0,
        epochs: 15,
        ..quick_hyper()
    };
    let state = run(Method::GDumb, hyper.clone(), &stream, 3);
    let memory = state.replay_memory().unwrap();
    assert_eq!(memory.len(), stream.train[0].len());
    let test = stream.test_originals(0);
    let refs: Vec<&BiasedSample> = test.iter().collect();
    let routing = stream.routing();
    let acc = accuracy(&HeadPredictor { model: &state.model, routing: &routing, task: 0 }, &refs).unwrap();
    assert!(acc > 0.95, "gdumb accuracy {acc}");
    // from scratch: independent of any earlier state, deterministic in the seed
    let arch = Layout::from_stream(&stream).architecture(&hyper.hidden, 0);
    let again = gdumb_train(memory, &arch, &hyper, 3).unwrap();
    assert_eq!(again, state.model);
    let empty = ExemplarMemory::new(4, 2, SeedStreams::new(0).rng(Purpose::Eviction));
    assert!(gdumb_train(&empty, &arch, &hyper, 3).is_err());
}

#[test]
fn bgs_retrains_heads_only() {
    let stream = small_stream(Preset::TwoTaskForward, None, None, 12);
    let hyper = HyperConfig {
        memory_fraction: 0.5,
        ..quick_hyper()
    };
    let options = TrainerOptions { bgs: true, groupdro: false };
    let mut state = TrainerState::new(Method::FineTuning, hyper, options, &stream, 8).unwrap();
    for t in 0..2 {
        state.train_task(t, &stream.train[t]).unwrap();
    }
    let memory = state.bgs_memory.as_ref().unwrap();
    memory.check_invariants().unwrap();
    assert_eq!(memory.len(), memory.capacity());
    let trunk = state.model.trunk_snapshot();
    let heads = state.model.heads().to_vec();
    let mut twin = state.clone();
    state.bgs_retrain().unwrap();
    twin.bgs_retrain().unwrap();
    assert_eq!(state.model.trunk_snapshot(), trunk);
    assert_ne!(state.model.heads(), &heads[..]);
    assert_eq!(state.model, twin.model);
    let mut plain = TrainerState::new(Method::FineTuning, quick_hyper(), TrainerOptions::default(), &stream, 8).unwrap();
    assert!(plain.bgs_retrain().is_err());
}

#[test]
fn bgs_head_fits_balanced_memory() {
    let stream = separable_stream();
    let hyper = HyperConfig {
        memory_fraction: 0.4,
        epochs: 10,
        ..quick_hyper()
    };
    let options = TrainerOptions { bgs: true, groupdro: false };
    let mut state = TrainerState::new(Method::FineTuning, hyper.clone(), options, &stream, 4).unwrap();
    state.train_task(0, &stream.train[0]).unwrap();
    // scramble the head, then let BGS recover it with plenty of epochs
    state.model.reinit_heads(&mut SeedStreams::new(99).rng(Purpose::Init));
    let memory = state.bgs_memory.clone().unwrap();
    let mut order = SeedStreams::new(1).rng(Purpose::BatchOrder);
    let long = HyperConfig {
        optimizer: AdamWConfig { learning_rate: 0.01, ..hyper.optimizer },
        ..hyper
    };
    let routing = stream.routing();
    bgs_retrain_heads(&mut state.model, &memory, &routing, &long, 60, &mut order).unwrap();
    let refs: Vec<&BiasedSample> = memory.samples().collect();
    let acc = accuracy(&HeadPredictor { model: &state.model, routing: &routing, task: 0 }, &refs).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn group_weights_stay_on_simplex_during_training() {
    let stream = small_stream(Preset::TwoTaskBackward, None, None, 3);
    let hyper = HyperConfig {
        groupdro_lr: 1.0,
        ..quick_hyper()
    };
    let options = TrainerOptions { bgs: false, groupdro: true };
    let state = {
        let mut s = TrainerState::new(Method::FineTuning, hyper, options, &stream, 3).unwrap();
        s.train_task(0, &stream.train[0]).unwrap();
        s.train_task(1, &stream.train[1]).unwrap();
        s
    };
    let q = state.group_weights.as_ref().unwrap();
    assert_eq!(q.len(), 4);
    assert_abs_diff_eq!(q.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    assert!(q.iter().all(|&w| w > 0.0));
    // the skewed task's minority cells are the hard ones
    let uniform = 0.25;
    assert!(q.iter().any(|&w| w > uniform));
}

#[test]
fn hyper_ranges() {
    let mut h = HyperConfig::default();
    h.lambda = 1e10;
    assert!(h.check_search_range(Method::Ewc, false).is_err());
    h.lambda = 1e3;
    h.check_search_range(Method::Ewc, false).unwrap();
    assert!(h.check_search_range(Method::Lwf, false).is_err());
    h.groupdro_lr = 1e3;
    assert!(h.check_search_range(Method::FineTuning, true).is_err());
    assert_eq!("ft".parse::<Method>().unwrap(), Method::FineTuning);
    assert!("icarl".parse::<Method>().is_err());
    h.pruning_ratio = 1.5;
    assert!(h.validate().is_err());
}

#[test]
fn memory_capacity_excludes_last_task() {
    let stream = small_stream(Preset::AccumulationSameBias, None, Some(3), 1);
    let per_task = stream.train[0].len();
    assert_eq!(memory_capacity(0.5, &stream), per_task);
    assert_eq!(memory_capacity(0.5, &stream.truncated(1)), per_task / 2);
}
