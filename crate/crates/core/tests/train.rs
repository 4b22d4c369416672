use posevit_core::numerics::{Grads, ParamSet, Prng};
use posevit_core::pipeline::{sample_gradients, Model, Profile};
use posevit_core::synth::{build_prior, make_sample, Category, GenParams, PoseRanges, SynthSample};
use posevit_core::train::{train, Adam, EpochStats, SampleGrad, TrainConfig};
use posevit_core::Tensor;

fn overfit_run(seed: u64) -> Vec<EpochStats> {
    let params = GenParams::for_profile(Profile::Desk);
    let samples: Vec<SynthSample> = (0..20)
        .map(|i| {
            let cat = if i % 2 == 0 { Category::Can } else { Category::Bowl };
            make_sample(cat, 500 + i, Profile::Desk, &params, &PoseRanges::default()).unwrap()
        })
        .collect();
    let priors = [Category::Can, Category::Bowl].map(|c| build_prior(c, 4, 1, &params).unwrap());
    let prior = |s: &SynthSample| priors.iter().find(|p| p.category == s.category.id()).unwrap();
    let mut model = Model::new(Profile::Desk, 1).unwrap();
    let cfg = TrainConfig { epochs: 5, batch_size: 4, lr: 1e-3, halve_fraction: 1.0, seed, ..Default::default() };
    let net = model.net.clone();
    train(
        &mut model.params,
        samples.len(),
        &cfg,
        |ps, batch| {
            batch
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    sample_gradients(&net, ps, s, prior(s), &cfg.weights)
                        .map(|(parts, total, grads)| SampleGrad { parts, total, grads })
                })
                .collect()
        },
        |_, _| {},
    )
    .unwrap()
}

#[test]
fn overfit_loss_decreases_and_repeats() {
    let a = overfit_run(3);
    for w in a.windows(2) {
        assert!(w[1].loss < w[0].loss, "{:?}", a.iter().map(|s| s.loss).collect::<Vec<_>>());
    }
    let b = overfit_run(3);
    assert_eq!(a, b);
}

#[test]
fn adam_matches_hand_update() {
    let mut ps = ParamSet::new();
    let id = ps.add("w", Tensor::vector(vec![0.5, -1.5, 2.0]));
    let cfg = TrainConfig { weight_decay: 0.01, ..Default::default() };
    let mut adam = Adam::new(&ps);
    let mut prng = Prng::new(1);
    let (mut w, mut m, mut v) = (vec![0.5, -1.5, 2.0], [0.0; 3], [0.0; 3]);
    for t in 1..=4 {
        let g: Vec<f64> = (0..3).map(|_| prng.normal()).collect();
        let mut grads = Grads::zeros_like(&ps);
        grads.tensors_mut()[0].data_mut().copy_from_slice(&g);
        adam.step(&mut ps, &grads, 0.01, &cfg);
        for k in 0..3 {
            let gk = g[k] + 0.01 * w[k];
            m[k] = 0.9 * m[k] + 0.1 * gk;
            v[k] = 0.999 * v[k] + 0.001 * gk * gk;
            let mh = m[k] / (1.0 - 0.9f64.powi(t));
            let vh = v[k] / (1.0 - 0.999f64.powi(t));
            w[k] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        for k in 0..3 {
            assert!((ps.get(id).data()[k] - w[k]).abs() < 1e-14);
        }
    }
    assert_eq!(adam.steps(), 4);
}

#[test]
fn rejects_bad_configs() {
    let mut ps = ParamSet::new();
    ps.add("w", Tensor::scalar(1.0));
    for cfg in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { lr: f64::NAN, ..Default::default() },
    ] {
        assert!(train(&mut ps, 3, &cfg, |_, _| Ok(vec![]), |_, _| {}).is_err());
    }
    let nan = |ps: &ParamSet, batch: &[usize]| {
        Ok(batch.iter().map(|_| SampleGrad { parts: Default::default(), total: f64::NAN, grads: Grads::zeros_like(ps) }).collect())
    };
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    assert!(matches!(train(&mut ps, 3, &cfg, nan, |_, _| {}), Err(posevit_core::Error::NonFinite(_))));
}
