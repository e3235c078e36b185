use proptest::prelude::*;

use deep_rnn::data::iter_subsequences;
use deep_rnn::grad::{bptt, clip_gradients, GradSet};
use deep_rnn::math::gaussian_matrix;
use deep_rnn::model::{build, Network};
use deep_rnn::optimize::{sgd_train, Schedule, Tau0, TrainData, TrainPlan};
use deep_rnn::{Architecture, Frame, HiddenState, Matrix, ModelConfig, Nonlinearity, OutputHead, ParamSet, Rng};

fn toy(arch: Architecture, dim: usize, hidden: usize) -> ModelConfig {
    let c = ModelConfig::new(arch, dim, dim, hidden);
    match arch {
        Architecture::Rnn => c,
        Architecture::Dt | Architecture::Dts => c.with_transition_inter(hidden + 1),
        Architecture::Dot | Architecture::Dots => c.with_transition_inter(hidden + 1).with_output_inter(3),
        Architecture::Srnn => c.with_levels(3),
    }
}

fn random_params(cfg: &ModelConfig, seed: u64, std: f64) -> ParamSet {
    let (mut ps, _) = build(cfg).unwrap();
    let mut rng = Rng::new(seed);
    for p in ps.iter_mut() {
        let (r, c) = p.value.shape();
        p.value = gaussian_matrix(&mut rng, r, c, std);
    }
    ps
}

fn symbols(seed: u64, len: usize, vocab: usize) -> Vec<Frame> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| Frame::Symbol(rng.below(vocab))).collect()
}

fn arch() -> impl Strategy<Value = Architecture> {
    prop::sample::select(Architecture::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunked_forward_is_bit_exact(
        arch in arch(),
        seed in any::<u64>(),
        len in 2usize..80,
        cuts in prop::collection::vec(1usize..12, 1..20),
    ) {
        let cfg = toy(arch, 5, 6);
        let ps = random_params(&cfg, seed, 0.6);
        let frames = symbols(seed ^ 1, len, 5);
        let net = Network::new(&cfg, &ps).unwrap();
        let whole = net.forward(&frames[..len - 1], &frames[1..], &HiddenState::zeros(&cfg)).unwrap();
        let mut steps = Vec::new();
        let mut state = HiddenState::zeros(&cfg);
        let mut pos = 0;
        for &cut in cuts.iter().cycle() {
            if pos >= len - 1 {
                break;
            }
            let end = (pos + cut).min(len - 1);
            let part = net.forward(&frames[pos..end], &frames[pos + 1..=end], &state).unwrap();
            steps.extend(part.step_nll);
            state = part.final_state;
            pos = end;
        }
        prop_assert_eq!(steps, whole.step_nll);
        prop_assert_eq!(state, whole.final_state);
    }

    #[test]
    fn softmax_distributions_sum_to_one(arch in arch(), seed in any::<u64>(), std in 0.01f64..3.0) {
        let cfg = toy(arch, 7, 5);
        let ps = random_params(&cfg, seed, std);
        let frames = symbols(seed, 12, 7);
        let out = Network::new(&cfg, &ps).unwrap()
            .forward(&frames[..11], &frames[1..], &HiddenState::zeros(&cfg)).unwrap();
        for d in &out.distributions {
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn bernoulli_means_are_open_unit_interval(arch in arch(), seed in any::<u64>()) {
        let cfg = toy(arch, 6, 4).with_head(OutputHead::Bernoulli);
        let ps = random_params(&cfg, seed, 1.0);
        let frames: Vec<Frame> = (0..6).map(|i| Frame::MultiHot(vec![i % 6])).collect();
        let out = Network::new(&cfg, &ps).unwrap()
            .forward(&frames[..5], &frames[1..], &HiddenState::zeros(&cfg)).unwrap();
        for d in &out.distributions {
            prop_assert!(d.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn clipping_is_idempotent(seed in any::<u64>(), scale in 1e-3f64..1e3, thr in 1e-2f64..10.0) {
        let cfg = toy(Architecture::Dots, 4, 3);
        let (skeleton, _) = build(&cfg).unwrap();
        let mut g = GradSet::zeros_like(&skeleton);
        let mut rng = Rng::new(seed);
        for p in &skeleton {
            let m = g.get_mut(&p.name).unwrap();
            m.as_mut_slice().iter_mut().for_each(|v| *v = scale * rng.normal());
        }
        let once = clip_gradients(&g, thr);
        let twice = clip_gradients(&once, thr);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.global_norm() <= thr * (1.0 + 1e-9));
    }

    #[test]
    fn truncation_keeps_losses(arch in arch(), seed in any::<u64>(), split in 1usize..9) {
        let cfg = toy(arch, 4, 5);
        let ps = random_params(&cfg, seed, 0.5);
        let frames = symbols(seed, 11, 4);
        let h0 = HiddenState::zeros(&cfg);
        let whole = bptt(&ps, &cfg, &frames[..10], &frames[1..], &h0).unwrap();
        let a = bptt(&ps, &cfg, &frames[..split], &frames[1..=split], &h0).unwrap();
        let b = bptt(&ps, &cfg, &frames[split..10], &frames[split + 1..], &a.final_state).unwrap();
        let steps: Vec<f64> = a.step_nll.iter().chain(&b.step_nll).copied().collect();
        prop_assert_eq!(steps, whole.step_nll);
    }
}

#[test]
fn dt_with_identity_first_layer_reduces_to_rnn() {
    let rnn_cfg = ModelConfig::new(Architecture::Rnn, 5, 5, 6);
    let mut rnn = random_params(&rnn_cfg, 3, 0.7);
    rnn.get_mut("U").unwrap().value = Matrix::zeros(5, 6);

    let mut dt_cfg = ModelConfig::new(Architecture::Dt, 5, 5, 6).with_transition_inter(6);
    dt_cfg.transition_inter_nl = Nonlinearity::Identity;
    let (mut dt, _) = build(&dt_cfg).unwrap();
    dt.get_mut("W_1").unwrap().value = Matrix::identity(6);
    for name in ["W", "b_h", "V", "b_y"] {
        let target = if name == "W" { "W_2" } else { name };
        dt.get_mut(target).unwrap().value = rnn.get(name).unwrap().value.clone();
    }

    let frames = symbols(4, 40, 5);
    let h0 = HiddenState::zeros(&rnn_cfg);
    let a = Network::new(&rnn_cfg, &rnn).unwrap().forward(&frames[..39], &frames[1..], &h0).unwrap();
    let b = Network::new(&dt_cfg, &dt).unwrap().forward(&frames[..39], &frames[1..], &h0).unwrap();
    assert_eq!(a.step_nll, b.step_nll);
    assert_eq!(a.final_state, b.final_state);
    assert_eq!(a.distributions, b.distributions);
}

#[test]
fn single_level_stack_is_refused() {
    let cfg = ModelConfig::new(Architecture::Srnn, 3, 3, 4).with_levels(1);
    assert!(build(&cfg).is_err());
}

#[test]
fn one_step_without_clipping_or_noise_is_plain_sgd() {
    let cfg = toy(Architecture::Srnn, 4, 5);
    let ps = random_params(&cfg, 8, 0.5);
    let frames = vec![symbols(9, 12, 4)];
    let data = TrainData {
        train: iter_subsequences(&frames, 100).collect(),
        valid: &frames,
        valid_chunk_len: 100,
    };
    let plan = TrainPlan {
        schedule: Schedule::Inverse {
            base_lr: 0.3,
            tau0: Tau0::At(1000),
            beta: 10.0,
        },
        clip_threshold: f64::INFINITY,
        weight_noise_std: 0.0,
        max_epochs: 1,
        max_updates: Some(1),
        patience: 1,
        seed: 0,
        eval_every: None,
    };
    let g = bptt(&ps, &cfg, &frames[0][..11], &frames[0][1..], &HiddenState::zeros(&cfg)).unwrap().grads;
    let out = sgd_train(&cfg, ps.clone(), &data, &plan).unwrap();
    for (i, p) in out.params.iter().enumerate() {
        for (k, v) in p.value.as_slice().iter().enumerate() {
            assert_eq!(*v, ps.by_index(i).value.as_slice()[k] - 0.3 * g.by_index(i).as_slice()[k]);
        }
    }
}
