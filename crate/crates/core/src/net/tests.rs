use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{finite_diff_check, ParamGroup, Sgd, SgdConfig};
use crate::snn::SpikeTensor;
use crate::tensor::Tensor;

fn random_input(cfg: &McfrConfig, rng: &mut ChaCha8Rng) -> ModelInput {
    let n = cfg.input_crop;
    let x7 = Tensor::from_vec(&[7, n, n], (0..7 * n * n).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let t = cfg.uee.params.t_bins;
    let spikes = SpikeTensor::from_vec([2, n, n, t], (0..2 * n * n * t).map(|_| rng.gen_bool(0.15) as u8).collect())
        .unwrap();
    ModelInput {
        x7,
        spikes: Some(spikes),
    }
}

fn all_variants() -> impl Iterator<Item = Variant> {
    std::iter::once(Variant::Full).chain(Variant::ABLATIONS)
}

#[test]
fn channel_transform_matches_pointwise_oracle() {
    let cfg = McfrConfig::reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = McfrModel::new(cfg.clone(), 3).unwrap();
    let x = random_input(&cfg, &mut rng).x7;
    let y = m.channel_transform(&x).unwrap();
    let tau = m.tau.as_ref().unwrap();
    let hw = 11 * 11;
    for o in 0..3 {
        for p in 0..hw {
            let mut acc = tau.bias.data()[o];
            for c in 0..7 {
                acc += tau.weight.data()[o * 7 + c] * x.data()[c * hw + p];
            }
            assert!((acc - y.data()[o * hw + p]).abs() < 1e-12);
        }
    }
    assert!(m.channel_transform(&Tensor::zeros(&[4, 11, 11])).is_err());
}

#[test]
fn channel_transform_identity_and_zero() {
    let cfg = McfrConfig::reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = McfrModel::new(cfg.clone(), 3).unwrap();
    let x = random_input(&cfg, &mut rng).x7;
    let tau = m.tau.as_mut().unwrap();
    tau.weight = Tensor::zeros(&[3, 7, 1, 1]);
    assert_eq!(m.channel_transform(&x).unwrap().max_abs(), 0.0);
    let tau = m.tau.as_mut().unwrap();
    for c in 0..3 {
        tau.weight.data_mut()[c * 7 + c] = 1.0;
    }
    let y = m.channel_transform(&x).unwrap();
    assert_eq!(y.data(), &x.data()[..3 * 121]);
}

#[test]
fn default_shared_branch_ends_at_512_by_3_by_3() {
    let m = McfrModel::new(McfrConfig::default(), 0).unwrap();
    let x3 = Tensor::full(&[3, 107, 107], 0.5);
    assert_eq!(m.cfe_forward(&x3).unwrap().shape(), [512, 3, 3]);
    assert_eq!(m.uer_forward(&x3).unwrap().shape(), [256, 3, 3]);
    assert_eq!(m.config().feature_len().unwrap(), 512 * 9);
}

#[test]
fn shared_and_texture_branches_are_zero_on_zero_input() {
    let m = McfrModel::new(McfrConfig::desk(), 4).unwrap();
    let z = Tensor::zeros(&[3, 31, 31]);
    assert_eq!(m.cfe_forward(&z).unwrap().max_abs(), 0.0);
    assert_eq!(m.uer_forward(&z).unwrap().max_abs(), 0.0);
}

#[test]
fn bias_free_branches_are_positively_homogeneous() {
    let cfg = McfrConfig::desk();
    let m = McfrModel::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_vec(&[3, 31, 31], (0..3 * 961).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let x2 = x.map(|v| 2.0 * v);
    for (a, b) in [
        (m.cfe_forward(&x).unwrap(), m.cfe_forward(&x2).unwrap()),
        (m.uer_forward(&x).unwrap(), m.uer_forward(&x2).unwrap()),
    ] {
        assert!(a.max_abs() > 0.0);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((2.0 * u - v).abs() < 1e-12 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn pointwise_layers_commute_with_pixel_permutations() {
    let m = McfrModel::new(McfrConfig::reduced(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for stage in &m.uer.as_ref().unwrap()[1..] {
        let mut conv = stage.conv.clone();
        conv.stride = 1;
        let c = conv.in_channels();
        let (h, w) = (4, 5);
        let x = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let mut perm: Vec<usize> = (0..h * w).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute = |t: &Tensor| {
            let (c, _, _) = t.chw().unwrap();
            let mut out = Tensor::zeros(t.shape());
            for ch in 0..c {
                for (dst, &src) in perm.iter().enumerate() {
                    out.plane_mut(ch)[dst] = t.plane(ch)[src];
                }
            }
            out
        };
        let a = conv.forward(&permute(&x)).unwrap();
        let b = permute(&conv.forward(&x).unwrap());
        assert_eq!(a, b);
    }
}

#[test]
fn every_variant_yields_two_logits() {
    let base = McfrConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = random_input(&base, &mut rng);
    for v in all_variants() {
        let m = McfrModel::new(base.clone().with_ablation(v.flags()), 1).unwrap();
        let p = m.prepare(&input).unwrap();
        assert_eq!(p.f_uee.is_some(), v.flags().use_uee);
        assert_eq!(m.forward(&p, 0).unwrap().len(), 2, "{v:?}");
        assert_eq!(
            m.features(&p).unwrap().len(),
            base.fusion_channels * 4,
            "{v:?}"
        );
    }
}

#[test]
fn domains_are_distinct_and_checked() {
    let cfg = McfrConfig::reduced().with_domains(3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = McfrModel::new(cfg.clone(), 2).unwrap();
    let p = m.prepare(&random_input(&cfg, &mut rng)).unwrap();
    let a = m.forward(&p, 0).unwrap();
    let b = m.forward(&p, 1).unwrap();
    assert_ne!(a, b);
    assert!(m.forward(&p, 3).is_err());
}

#[test]
fn spiking_branch_fires_on_event_input() {
    let cfg = McfrConfig::desk();
    let m = McfrModel::new(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let input = random_input(&cfg, &mut rng);
    let uee = m.uee.as_ref().unwrap();
    let hidden = uee.layers[0].forward(input.spikes.as_ref().unwrap()).unwrap();
    assert!(hidden.count() > 0);
    let f = m.uee_features(input.spikes.as_ref().unwrap()).unwrap();
    assert_eq!(f.shape(), [16, 2, 2]);
    assert!(f.max_abs() > 0.0);
}

#[test]
fn dropping_a_branch_equals_zeroing_its_features() {
    let cfg = McfrConfig::reduced();
    let full = McfrModel::new(cfg.clone(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut p = full.prepare(&random_input(&cfg, &mut rng)).unwrap();
    let reduced = full.ablate(Variant::NoUee.flags()).unwrap();
    let pr = reduced
        .prepare(&ModelInput {
            x7: p.x7.clone(),
            spikes: None,
        })
        .unwrap();
    p.f_uee.as_mut().unwrap().scale(0.0);
    let a = full.forward(&p, 1).unwrap();
    let b = reduced.forward(&pr, 1).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(reduced.ablate(AblationFlags::default()).is_err());
}

#[test]
fn zero_learning_rate_leaves_loss_unchanged() {
    let cfg = McfrConfig::reduced();
    let mut m = McfrModel::new(cfg.clone(), 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let p = m.prepare(&random_input(&cfg, &mut rng)).unwrap();
    let mut opt = Sgd::new(SgdConfig {
        conv_lr: 0.0,
        fc_lr: 0.0,
        fc6_lr: 0.0,
        ..SgdConfig::default()
    });
    let batch = [TrainSample {
        input: &p,
        label: 1,
        domain: 0,
    }];
    let before = m.clone();
    let l1 = m.train_step(&batch, &mut opt).unwrap();
    let l2 = m.train_step(&batch, &mut opt).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(m, before);
    assert!(m.train_step(&[], &mut opt).is_err());
}

#[test]
fn overfits_one_positive_and_one_negative() {
    let cfg = McfrConfig::desk();
    let mut m = McfrModel::new(cfg.clone(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let pos = m.prepare(&random_input(&cfg, &mut rng)).unwrap();
    let neg = m.prepare(&random_input(&cfg, &mut rng)).unwrap();
    let uee_before = m.param_digest(|_, g| g == ParamGroup::Frozen);
    let mut opt = Sgd::new(SgdConfig {
        conv_lr: 1e-3,
        fc_lr: 1e-3,
        fc6_lr: 1e-2,
        ..SgdConfig::default()
    });
    let batch = [
        TrainSample {
            input: &pos,
            label: 1,
            domain: 0,
        },
        TrainSample {
            input: &neg,
            label: 0,
            domain: 0,
        },
    ];
    let first = m.train_step(&batch, &mut opt).unwrap();
    let mut loss = first;
    for _ in 1..200 {
        loss = m.train_step(&batch, &mut opt).unwrap();
    }
    assert!(loss < 0.01, "loss {first} -> {loss}");
    assert_eq!(m.param_digest(|_, g| g == ParamGroup::Frozen), uee_before);
}

#[test]
fn training_one_domain_leaves_other_heads_bit_identical() {
    let cfg = McfrConfig::reduced().with_domains(3);
    let mut m = McfrModel::new(cfg.clone(), 19).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let inputs: Vec<Prepared> = (0..4).map(|_| m.prepare(&random_input(&cfg, &mut rng)).unwrap()).collect();
    let digest = |m: &McfrModel, prefix: &'static str| m.param_digest(move |n, _| n.starts_with(prefix));
    let before: Vec<String> = ["fc6.0", "fc6.1", "fc6.2", "uee", "fc4"].iter().map(|p| digest(&m, p)).collect();
    let mut opt = Sgd::new(SgdConfig::default());
    let batch: Vec<TrainSample> = inputs
        .iter()
        .enumerate()
        .map(|(i, p)| TrainSample {
            input: p,
            label: i % 2,
            domain: 1,
        })
        .collect();
    for _ in 0..3 {
        m.train_step(&batch, &mut opt).unwrap();
    }
    assert_eq!(digest(&m, "fc6.0"), before[0]);
    assert_ne!(digest(&m, "fc6.1"), before[1]);
    assert_eq!(digest(&m, "fc6.2"), before[2]);
    assert_eq!(digest(&m, "uee"), before[3]);
    assert_ne!(digest(&m, "fc4"), before[4]);
}

/// Loss as a function of one named parameter tensor.
fn loss_with(m: &McfrModel, p: &Prepared, label: usize, name: &str, values: &[f64]) -> f64 {
    let mut m = m.clone();
    m.for_each_param_mut(|n, _, t| {
        if n == name {
            t.data_mut().copy_from_slice(values);
        }
    });
    let logits = m.forward(p, 1).unwrap();
    crate::nn::softmax_ce(&logits, label).unwrap().0
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = McfrConfig::reduced();
    for seed in 0..3 {
        let m = McfrModel::new(cfg.clone(), 100 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let p = m.prepare(&random_input(&cfg, &mut rng)).unwrap();
        let label = seed as usize % 2;
        let back = m.backward(&p, label, 1).unwrap();
        let mut checked = 0;
        m.for_each_param(|name, group, t| {
            let Some(g) = back.grads.get(name) else {
                assert!(group == ParamGroup::Frozen || name.starts_with("fc6.0"), "{name} has no gradient");
                return;
            };
            let r = finite_diff_check(|x| loss_with(&m, &p, label, name, x), t.data(), g.data(), 1e-5);
            assert!(r.passes(1e-5), "seed {seed} {name}: {r:?}");
            checked += 1;
        });
        assert_eq!(checked, 2 * (1 + 3 + 3 + 1 + 3));
        let input = finite_diff_check(
            |x| {
                let q = Prepared {
                    x7: Tensor::from_vec(p.x7.shape(), x.to_vec()).unwrap(),
                    f_uee: p.f_uee.clone(),
                };
                crate::nn::softmax_ce(&m.forward(&q, 1).unwrap(), label).unwrap().0
            },
            p.x7.data(),
            back.input.data(),
            1e-5,
        );
        assert!(input.passes(1e-5), "input: {input:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = McfrConfig::desk().with_domains(3);
    let m = McfrModel::new(cfg.clone(), 21).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.num_domains(), 3);
    assert_eq!(back.config(), m.config());
    assert_eq!(back.param_names(), m.param_names());
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let input = random_input(&cfg, &mut rng);
    for d in 0..3 {
        let a = m.forward(&m.prepare(&input).unwrap(), d).unwrap();
        let b = back.forward(&back.prepare(&input).unwrap(), d).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
    for cut in [3, 5, 20, buf.len() - 1] {
        let err = read_checkpoint(&buf[..cut]).unwrap_err();
        assert!(matches!(err, crate::Error::Checkpoint(_)), "{err}");
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(bad.as_slice()).is_err());
    let mut bad = buf.clone();
    bad[4] = 9;
    assert!(read_checkpoint(bad.as_slice()).is_err());
}

#[test]
fn checkpoint_rejects_shape_mismatch() {
    let mut m = McfrModel::new(McfrConfig::reduced(), 23).unwrap();
    m.fc5.weight = Tensor::zeros(&[4, 6]);
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let err = read_checkpoint(buf.as_slice()).unwrap_err().to_string();
    assert!(err.contains("fc5.weight"), "{err}");
}

#[test]
fn checkpoint_keeps_ablation_flags() {
    let m = McfrModel::new(McfrConfig::reduced().with_ablation(Variant::NoUer.flags()), 24).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert!(back.uer.is_none());
    assert_eq!(back.fingerprint(), m.fingerprint());
}
