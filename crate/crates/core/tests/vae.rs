use ctxmod_autodiff::{Tape, Tensor};
use ctxmod_core::blackbox::Arch;
use ctxmod_core::data::{load_contexts, synthesize, ContextData};
use ctxmod_core::sem::InterventionSet;
use ctxmod_core::vae::{LossWeights, Mode, Model, ModelConfig, TrainConfig};
use ctxmod_core::CoreError;
use ctxmod_quad::ContextId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(mode: Mode) -> ModelConfig {
    let mut c = ModelConfig::quad(16, mode);
    c.arch = Arch::Mlp { hidden: 64 };
    c.dim_e = 32;
    c
}

fn data(per: usize, seed: u64) -> Vec<ContextData> {
    let ctxs: Vec<(ContextId, usize)> = ContextId::training_set().into_iter().map(|c| (c, per)).collect();
    synthesize(&ctxs, 16, seed).unwrap()
}

fn batch(d: &[ContextData], k: usize) -> Tensor {
    d[0].head(k)
}

#[test]
fn kl_vanishes_at_standard_posterior() {
    let mut model = Model::new(tiny(Mode::ContextModule), 0).unwrap();
    for name in ["bb.mu.W", "bb.mu.b", "bb.logvar.W", "bb.logvar.b"] {
        let shape = model.store.get(model.store.id(name).unwrap()).shape().to_vec();
        model.store.set(name, Tensor::zeros(&shape).unwrap()).unwrap();
    }
    let d = data(4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let parts = model.elbo(&batch(&d, 4), &InterventionSet::obs(), &LossWeights::default(), &mut rng).unwrap();
    assert_eq!(parts.kl, 0.0);
}

#[test]
fn plain_elbo_is_recon_plus_kl() {
    let model = Model::new(tiny(Mode::ContextModule), 1).unwrap();
    let d = data(4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = model.elbo(&batch(&d, 4), &InterventionSet::obs(), &LossWeights::default(), &mut rng).unwrap();
    assert!((p.loss - (p.recon + p.kl)).abs() < 1e-9 * p.loss.abs());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = LossWeights { beta: 2.0, lambda_gl: 0.5, lambda_l2: 0.25 };
    let q = model.elbo(&batch(&d, 4), &InterventionSet::obs(), &w, &mut rng).unwrap();
    let sem = model.module.as_ref().unwrap().sem(&model.store);
    let want = q.recon + 2.0 * q.kl + 0.5 * sem.group_lasso() + 0.25 * sem.l2();
    assert!((q.loss - want).abs() < 1e-6, "{} vs {want}", q.loss);
}

#[test]
fn saturated_logits_reconstruct_binary_pixels() {
    let tape = Tape::new();
    let logits = tape.constant(Tensor::new(&[4], vec![60.0, -60.0, 60.0, -60.0]).unwrap());
    let t = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let v = logits.bce_with_logits(t).unwrap().sum().unwrap().value().item().unwrap();
    assert!(v < 1e-20);
}

#[test]
fn pixels_outside_unit_interval_rejected() {
    let model = Model::new(tiny(Mode::ContextModule), 2).unwrap();
    let mut x = Tensor::full(&[1, 768], 0.5).unwrap();
    x.data_mut()[3] = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(model.elbo(&x, &InterventionSet::obs(), &LossWeights::default(), &mut rng).is_err());
    assert!(model.reconstruct(&x, &InterventionSet::obs()).is_err());
}

#[test]
fn config_validation() {
    let bad = TrainConfig { weights: LossWeights { beta: 0.0, ..Default::default() }, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = TrainConfig { weights: LossWeights { lambda_gl: -1.0, ..Default::default() }, ..Default::default() };
    assert!(bad.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!("ablation2".parse::<Mode>().unwrap(), Mode::Ablation2);
    assert!("ablation4".parse::<Mode>().is_err());
}

#[test]
fn recon_loss_decreases_over_first_epochs() {
    let d = data(60, 3);
    for seed in 0..3 {
        let mut model = Model::new(tiny(Mode::ContextModule), seed).unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 16, seed, lr: 2e-3, ..Default::default() };
        let logs = model.train(&d, &cfg, |_| {}).unwrap();
        assert_eq!(logs.len(), 5);
        for w in logs.windows(2) {
            assert!(w[1].train_loss < w[0].train_loss, "seed {seed}: {logs:?}");
        }
        assert!(logs[4].recon_bpd < logs[0].recon_bpd);
    }
}

#[test]
fn training_is_reproducible_and_checkpoint_round_trips() {
    let d = data(20, 4);
    let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 9, ..Default::default() };
    let mut a = Model::new(tiny(Mode::ContextModule), 9).unwrap();
    let mut b = Model::new(tiny(Mode::ContextModule), 9).unwrap();
    let la = a.train(&d, &cfg, |_| {}).unwrap();
    let lb = b.train(&d, &cfg, |_| {}).unwrap();
    assert_eq!(la.iter().map(|l| l.elbo_bpd).collect::<Vec<_>>(), lb.iter().map(|l| l.elbo_bpd).collect::<Vec<_>>());

    let t = InterventionSet::new([0, 3], 6).unwrap();
    let before = a.generate(&t, 16, 5).unwrap();
    assert_eq!(before, b.generate(&t, 16, 5).unwrap());
    assert_eq!(before, a.generate(&t, 16, 5).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    a.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded.epoch, 2);
    assert_eq!(loaded.train_config, Some(cfg));
    let after = loaded.generate(&t, 16, 5).unwrap();
    assert!(before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let x = d[2].head(5);
    assert_eq!(a.reconstruct(&x, &t).unwrap(), loaded.reconstruct(&x, &t).unwrap());
}

#[test]
fn checkpoint_rejects_mismatched_tensors() {
    let model = Model::new(tiny(Mode::ContextModule), 0).unwrap();
    let mut f = model.to_tensor_file();
    f.tensors.pop();
    assert!(Model::from_tensor_file(&f).is_err());
    let mut f = model.to_tensor_file();
    f.tensors[0].1 = Tensor::zeros(&[1]).unwrap();
    assert!(Model::from_tensor_file(&f).is_err());
    let mut f = model.to_tensor_file();
    f.meta["format"] = "other".into();
    assert!(Model::from_tensor_file(&f).is_err());
}

#[test]
fn black_box_is_context_blind() {
    // Without the module, the context label cannot change a training step.
    let d = data(8, 5);
    let x = d[0].head(8);
    for mode in [Mode::Ablation2, Mode::Ablation3] {
        let step = |targets: &InterventionSet| {
            let mut m = Model::new(tiny(mode), 3).unwrap();
            let mut opt = ctxmod_core::params::Adam::new(&m.store, Default::default());
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            m.train_step(&mut opt, &x, targets, &LossWeights::default(), &mut rng).unwrap();
            m.store.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>()
        };
        assert_eq!(step(&InterventionSet::obs()), step(&InterventionSet::new([1, 4], 6).unwrap()));
    }
}

#[test]
fn modes_build_expected_components() {
    for mode in Mode::ALL {
        let m = Model::new(tiny(mode), 0).unwrap();
        assert_eq!(m.module.is_some(), mode.has_module());
        assert_eq!(m.blackbox.dim_z, if mode.has_module() { 90 } else { 32 });
    }
}

#[test]
fn ablation1_needs_observational_data() {
    let d: Vec<ContextData> = data(5, 6).into_iter().filter(|c| !c.targets.is_empty()).collect();
    let mut m = Model::new(tiny(Mode::Ablation1), 0).unwrap();
    assert!(m.train(&d, &TrainConfig { epochs: 1, ..Default::default() }, |_| {}).is_err());
}

#[test]
fn generation_errors() {
    let m = Model::new(tiny(Mode::ContextModule), 0).unwrap();
    assert!(m.generate(&InterventionSet::obs(), 0, 1).is_err());
    let bad = serde_json::from_str::<InterventionSet>("[7]").unwrap();
    assert!(m.generate(&bad, 4, 1).is_err());
}

#[test]
fn conv3_black_box_trains() {
    let d = data(6, 7);
    let mut cfg = tiny(Mode::ContextModule);
    cfg.arch = Arch::Conv3;
    let mut m = Model::new(cfg, 0).unwrap();
    let logs = m.train(&d, &TrainConfig { epochs: 1, batch_size: 8, ..Default::default() }, |_| {}).unwrap();
    assert!(logs[0].elbo_bpd.is_finite());
    assert_eq!(m.generate(&InterventionSet::obs(), 3, 0).unwrap().shape(), &[3, 768]);
}

#[test]
fn frozen_black_box_keeps_weights() {
    let d = data(6, 8);
    let mut m = Model::new(tiny(Mode::ContextModule), 0).unwrap();
    let before = m.store.get(m.store.id("bb.dec.0.W").unwrap()).clone();
    let rep_before = m.store.get(m.store.id("rep.W").unwrap()).clone();
    let cfg = TrainConfig { epochs: 1, batch_size: 8, freeze_blackbox: true, ..Default::default() };
    m.train(&d, &cfg, |_| {}).unwrap();
    assert_eq!(m.store.get(m.store.id("bb.dec.0.W").unwrap()), &before);
    assert_ne!(m.store.get(m.store.id("rep.W").unwrap()), &rep_before);
}

#[test]
fn contexts_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ctxs = ContextId::training_set();
    let cfg = ctxmod_quad::DatasetConfig::uniform(16, &ctxs, 3, 11);
    ctxmod_quad::generate_dataset(&cfg, dir.path()).unwrap();
    let ds = ctxmod_quad::Dataset::open(dir.path()).unwrap();
    let loaded = load_contexts(&ds, &[]).unwrap();
    let mem = synthesize(&cfg.contexts, 16, 11).unwrap();
    assert_eq!(loaded.len(), 7);
    for (a, b) in loaded.iter().zip(&mem) {
        assert_eq!(a.images, b.images);
        assert_eq!(a.targets, b.targets);
    }
}

#[test]
fn parameter_bound_covers_every_configuration() {
    for mode in Mode::ALL {
        for arch in [Arch::Mlp { hidden: 64 }, Arch::Conv3] {
            let mut config = ModelConfig::quad(16, mode);
            config.arch = arch;
            config.dim_e = 24;
            let model = Model::new(config, 0).unwrap();
            let actual = model.store.num_scalars() as u128;
            assert!(config.param_bound() >= actual, "{mode:?} {arch:?}");
            assert!(config.param_bound() < 2 * actual + 400_000, "{mode:?} {arch:?} bound too loose");
        }
    }
}

#[test]
fn oversized_configuration_rejected_before_allocation() {
    let mut config = ModelConfig::quad(16, Mode::ContextModule);
    config.arch = Arch::Mlp { hidden: 1 << 20 };
    assert!(matches!(Model::new(config, 0), Err(CoreError::Config(_))));
}
