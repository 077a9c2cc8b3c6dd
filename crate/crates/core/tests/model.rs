use drnet::drmlp::{Task, TaskPrior};
use drnet::layers::{visit, ParamTree};
use drnet::model::{
    estimate_flops, load, load_fused, load_train, padded_forward, param_estimate, save,
    save_fused, Checkpoint, DRNet, DRNetConfig, Mode,
};
use drnet::tensor::finite_diff_check_entries;
use drnet::{Error, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng)
}

fn prior(task: Task) -> TaskPrior {
    TaskPrior::new(task, 6).unwrap()
}

#[test]
fn tiny_forward_preserves_shape() {
    let m = DRNet::build(&DRNetConfig::tiny(), 1).unwrap();
    for (h, w) in [(32, 32), (64, 64), (32, 64)] {
        let y = m.forward(&image(0, h, w), &prior(Task::Denoise)).unwrap();
        assert_eq!(y.shape(), &[3, h, w]);
        assert!(y.all_finite());
    }
}

#[test]
fn non_divisible_inputs_are_padded_and_cropped() {
    let m = DRNet::build(&DRNetConfig::tiny(), 1).unwrap();
    let y = m.forward(&image(3, 30, 27), &prior(Task::Derain)).unwrap();
    assert_eq!(y.shape(), &[3, 30, 27]);
    // a 3-pixel image cannot be mirrored out to 32
    match m.forward(&image(3, 3, 32), &prior(Task::Derain)) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("extent overflow"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn build_is_deterministic_and_rejects_bad_configs() {
    let cfg = DRNetConfig::tiny();
    let a = DRNet::build(&cfg, 9).unwrap();
    let b = DRNet::build(&cfg, 9).unwrap();
    let c = DRNet::build(&cfg, 10).unwrap();
    assert!(a.params.shallow.kernel.bit_eq(&b.params.shallow.kernel));
    assert!(!a.params.shallow.kernel.bit_eq(&c.params.shallow.kernel));

    let bad = DRNetConfig {
        heads: [3, 5, 4, 8],
        ..cfg
    };
    match DRNet::build(&bad, 0) {
        Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_parameters_reduce_to_identity() {
    let mut m = DRNet::build(&DRNetConfig::tiny(), 4).unwrap();
    m.params
        .visit_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));
    let x = image(5, 32, 32);
    let y = m.forward(&x, &prior(Task::Dehaze)).unwrap();
    assert!(y.bit_eq(&x));
}

#[test]
fn outputs_and_gradients_are_finite_over_seeds() {
    let cfg = DRNetConfig::tiny();
    for seed in 0..10 {
        let m = DRNet::build(&cfg, seed).unwrap();
        let tape = Tape::new();
        let net = m.bind(&tape, true);
        let x = tape.leaf(image(seed + 100, 32, 32));
        let y = padded_forward(&net, &cfg, &x, Some(&prior(Task::Enhance))).unwrap();
        let loss = y.mean();
        let grads = tape.backward(&loss).unwrap();
        assert!(y.value().all_finite());
        assert!(grads.get(&x).unwrap().all_finite());
        assert!(grads.get(&net.shallow.kernel).unwrap().all_finite());
        assert!(grads.get(&net.stage1[0].mlp.tsm.bank1.as_ref().unwrap().logits.weight).unwrap().all_finite());
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = DRNetConfig::tiny();
    let m = DRNet::build(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let probe = Tensor::uniform(&[3, 32, 32], -1.0, 1.0, &mut rng);
    let inputs = [
        image(8, 32, 32),
        m.params.shallow.kernel.clone(),
        m.params.decoder[2][0].mlp.bank1.branches[1].weight.clone(),
    ];
    let err = finite_diff_check_entries(
        |tape, v| {
            let mut net = m.bind(tape, false);
            net.shallow.kernel = v[1].clone();
            net.decoder[2][0].mlp.bank1.branches[1].weight = v[2].clone();
            let y = padded_forward(&net, &cfg, &v[0], Some(&prior(Task::Deblur)))?;
            Ok(y.mul(&tape.constant(probe.clone()))?.sum())
        },
        &inputs,
        1e-2,
        &[(0, 0), (0, 517), (0, 3000), (1, 0), (1, 100), (2, 5), (2, 200)],
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");
}

#[test]
fn fused_forward_matches_multi_branch_forward() {
    let cfg = DRNetConfig::tiny();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let m = DRNet::build(&cfg, seed).unwrap();
        let p = prior(Task::ALL[seed as usize % 6]);
        let x = image(seed + 1000, 32, 32);
        let fused = m.reconfigure(&p).unwrap().forward(&x).unwrap();
        let train = m.forward(&x, &p).unwrap();
        worst = worst.max(fused.rel_error(&train).unwrap());
    }
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn reconfigure_is_deterministic_and_shares_non_mlp_tensors() {
    let m = DRNet::build(&DRNetConfig::tiny(), 3).unwrap();
    let a = m.reconfigure(&prior(Task::Derain)).unwrap();
    let b = m.reconfigure(&prior(Task::Derain)).unwrap();
    let c = m.reconfigure(&prior(Task::Enhance)).unwrap();
    let ta = a.named_tensors();
    let tb = b.named_tensors();
    let tc = c.named_tensors();
    let mut mlp_differs = false;
    for ((na, xa), ((_, xb), (_, xc))) in ta.iter().zip(tb.iter().zip(&tc)) {
        assert!(xa.bit_eq(xb), "{na}");
        if na.contains(".mlp.") {
            mlp_differs |= !xa.bit_eq(xc);
        } else {
            assert!(xa.bit_eq(xc), "{na}");
            assert!(xa.shares_storage(xc), "{na}");
        }
    }
    assert!(mlp_differs);
    assert_eq!(a.task(), "derain");
    // no modulator or bank survives fusion
    assert!(ta.iter().all(|(n, _)| !n.contains("tsm") && !n.contains("bank")));
}

#[test]
fn fused_cost_is_prior_independent_and_below_train_cost() {
    let cfg = DRNetConfig::tiny();
    let m = DRNet::build(&cfg, 0).unwrap();
    let x = image(1, 32, 32);
    let mut fused_macs = Vec::new();
    for task in Task::ALL {
        let (_, stats) = m.reconfigure(&prior(task)).unwrap().forward_with_stats(&x).unwrap();
        fused_macs.push(stats.macs);
    }
    let (_, train) = m.forward_with_stats(&x, &prior(Task::Denoise)).unwrap();
    assert!(fused_macs.iter().all(|&v| v == fused_macs[0]));
    assert!(fused_macs[0] < train.macs);
}

#[test]
fn analytic_counts_match_instances_and_tape() {
    for cfg in [
        DRNetConfig::tiny(),
        DRNetConfig {
            bank_sizes: [1, 3],
            ..DRNetConfig::tiny()
        },
        DRNetConfig::tiny().without_banks(),
        DRNetConfig {
            refinement_blocks: 2,
            blocks: [2, 1, 3, 2],
            bank_sizes: [3, 2],
            ..DRNetConfig::tiny()
        },
    ] {
        let m = DRNet::build(&cfg, 0).unwrap();
        for mode in [Mode::Train, Mode::Fused] {
            assert_eq!(m.count_params(mode), param_estimate(&cfg, mode));
        }
        let p = prior(Task::Blind);
        assert_eq!(
            m.reconfigure(&p).unwrap().count_params(),
            param_estimate(&cfg, Mode::Fused)
        );
        for (h, w) in [(32, 32), (64, 32)] {
            let x = image(0, h, w);
            let (_, train) = m.forward_with_stats(&x, &p).unwrap();
            let (_, fused) = m.reconfigure(&p).unwrap().forward_with_stats(&x).unwrap();
            assert_eq!(train.macs, estimate_flops(&cfg, h, w, Mode::Train).macs);
            assert_eq!(fused.macs, estimate_flops(&cfg, h, w, Mode::Fused).macs);
        }
    }
}

#[test]
fn default_config_counts_track_published_complexity() {
    let cfg = DRNetConfig::default();
    let train = param_estimate(&cfg, Mode::Train) as f64 / 1e6;
    let fused = param_estimate(&cfg, Mode::Fused) as f64 / 1e6;
    assert!((train / 16.49 - 1.0).abs() <= 0.15, "{train}");
    assert!((fused / 7.39 - 1.0).abs() <= 0.15, "{fused}");
    assert!((2.0..=2.5).contains(&(train / fused)));
    let single = cfg.without_banks();
    assert_eq!(param_estimate(&single, Mode::Train), param_estimate(&single, Mode::Fused));

    let ratio = estimate_flops(&cfg, 128, 128, Mode::Fused).gmacs()
        / estimate_flops(&cfg, 128, 128, Mode::Train).gmacs();
    assert!((0.42..=0.55).contains(&ratio), "{ratio}");
}

#[test]
fn single_branch_fusion_is_exact() {
    let cfg = DRNetConfig::tiny().without_banks();
    let m = DRNet::build(&cfg, 0).unwrap();
    let x = image(2, 32, 32);
    let p = prior(Task::Denoise);
    let fused = m.reconfigure(&p).unwrap();
    let a = fused.forward(&x).unwrap();
    let b = m.forward(&x, &p).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn train_checkpoint_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = DRNet::build(&DRNetConfig::tiny(), 12).unwrap();
    save(&m, &path).unwrap();
    let back = load_train(&path).unwrap();
    assert_eq!(back.config(), m.config());
    let mut names = Vec::new();
    visit(&back.params, &mut |n, _: &Tensor| names.push(n.to_string()));
    assert!(names.iter().any(|n| n == "stage1.0.mlp.tsm.bank2.logits.bias"));

    let x = image(4, 32, 32);
    let p = prior(Task::Deblur);
    assert!(m.forward(&x, &p).unwrap().bit_eq(&back.forward(&x, &p).unwrap()));
}

#[test]
fn fused_checkpoint_round_trips_and_refuses_train_mode() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    let m = DRNet::build(&DRNetConfig::tiny(), 13).unwrap();
    let fused = m.reconfigure(&prior(Task::Dehaze)).unwrap();
    save_fused(&fused, &path).unwrap();
    let back = load_fused(&path).unwrap();
    assert_eq!(back.task(), "dehaze");
    let x = image(6, 32, 32);
    assert!(fused.forward(&x).unwrap().bit_eq(&back.forward(&x).unwrap()));

    match load_train(&path) {
        Err(Error::Format(msg)) => assert!(msg.contains("irreversible"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load(&path).unwrap(), Checkpoint::Fused(_)));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&DRNet::build(&DRNetConfig::tiny(), 0).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("truncated", bytes[..bytes.len() - 10].to_vec()),
        ("flipped", {
            let mut b = bytes.clone();
            let last = b.len() - 1;
            b[last] ^= 0x40;
            b
        }),
        ("version", {
            let mut b = b"drnet-checkpoint 9".to_vec();
            b.extend_from_slice(&bytes["drnet-checkpoint 1".len()..]);
            b
        }),
        ("header only", bytes[..40].to_vec()),
    ];
    for (label, damaged) in cases {
        std::fs::write(&path, &damaged).unwrap();
        match load(&path) {
            Err(Error::Format(msg)) => {
                if label == "version" {
                    assert!(msg.contains("version"), "{msg}");
                }
            }
            other => panic!("{label}: {other:?}"),
        }
    }
}
