//! Trainer-level behavior: loss composition, determinism, checkpoint
//! resume, and the whole-objective gradient check on a micro-model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reembed::model::{ModelConfig, ModelState, PoolingStrategy};
use reembed::numerics::AdPrecision;
use reembed::synth::{build_dataset, default_mix, gen_world, DatasetRecord, TaskKind, World};
use reembed::training::{JointLossFn, TrainConfig, Trainer};

fn micro_world_and_data(seed: u64, n: usize) -> (World, Vec<DatasetRecord>) {
    let world = gen_world(seed, 32, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
    let records = build_dataset(&world, &mut rng, n, &default_mix(), 0)
        .unwrap()
        .iter()
        .map(|s| DatasetRecord::from_sample(&world, s).unwrap())
        .collect();
    (world, records)
}

fn micro_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        total_steps: 6,
        warmup_steps: 2,
        base_lr: 1e-3,
        seed,
        log_every: 1000,
        ..TrainConfig::default()
    }
}

fn micro_trainer(seed: u64) -> Trainer {
    let (world, data) = micro_world_and_data(seed, 160);
    let model = ModelState::init(ModelConfig::micro(16, 2, 2), seed).unwrap();
    Trainer::new(model, micro_cfg(seed), data, world).unwrap()
}

#[test]
fn joint_loss_passes_gradient_check_on_micro_model() {
    let (world, data) = micro_world_and_data(3, 40);
    let model = ModelState::init(ModelConfig::micro(16, 2, 2), 3).unwrap();
    let cfg = micro_cfg(3);
    let trainer = Trainer::new(model, cfg.clone(), data, world).unwrap();
    let rows = trainer.prepare_step().unwrap();
    let f = JointLossFn::new(trainer.model.clone(), rows, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // 8 sampled parameter coordinates, both precisions
    let err32 = f.check(AdPrecision::F32, 1e-3, 8, &mut rng).unwrap();
    assert!(err32 < 1e-3, "f32 joint-loss grad error {err32:e}");
    let err64 = f.check(AdPrecision::F64, 1e-5, 8, &mut rng).unwrap();
    assert!(err64 < 1e-6, "f64 joint-loss grad error {err64:e}");
}

#[test]
fn one_step_on_a_fixed_batch_decreases_its_loss() {
    let mut t = micro_trainer(11);
    let rows = t.prepare_step().unwrap();
    let first = t.apply_rows(&rows).unwrap();
    // re-applying the identical batch after the update must score lower
    let second = t.apply_rows(&rows).unwrap();
    assert!(
        second.loss_total < first.loss_total,
        "{} then {}",
        first.loss_total,
        second.loss_total
    );
}

#[test]
fn zero_generative_weight_reports_pure_contrastive_total() {
    let (world, data) = micro_world_and_data(5, 160);
    let model = ModelState::init(ModelConfig::micro(16, 2, 2), 5).unwrap();
    let cfg = TrainConfig {
        lambda_gen: 0.0,
        lambda_ret: 0.7,
        ..micro_cfg(5)
    };
    let mut t = Trainer::new(model, cfg, data, world).unwrap();
    let s = t.step().unwrap();
    assert!((s.loss_total - 0.7 * s.loss_ret).abs() < 1e-9);
}

#[test]
fn direct_only_batch_supervises_exactly_the_terminator() {
    let (world, data) = micro_world_and_data(7, 200);
    let simple_only: Vec<DatasetRecord> = data
        .into_iter()
        .filter(|r| r.task_kind == TaskKind::SimpleT2i)
        .collect();
    let model = ModelState::init(ModelConfig::micro(16, 2, 2), 7).unwrap();
    let mut mix = default_mix();
    mix.insert(TaskKind::Edit1, 0.0);
    mix.insert(TaskKind::Edit2, 0.0);
    let cfg = TrainConfig {
        mix,
        ..micro_cfg(7)
    };
    let t = Trainer::new(model, cfg, simple_only, world).unwrap();
    let rows = t.prepare_step().unwrap();
    for row in &rows {
        let n: usize = row.mask.iter().filter(|&&m| m).count();
        assert_eq!(n, 1, "direct row supervises only the terminator");
        let pos = row.mask.iter().position(|&m| m).unwrap();
        assert_eq!(row.targets[pos], reembed::model::vocab::EMB as usize);
    }
}

#[test]
fn row_order_permutation_leaves_losses_unchanged() {
    let mut t = micro_trainer(13);
    let rows = t.prepare_step().unwrap();
    let mut reversed = rows.clone();
    reversed.reverse();
    // measure without stepping: use a clone of the trainer for each order
    let s1 = t.apply_rows(&rows).unwrap();
    let mut t2 = micro_trainer(13);
    let s2 = t2.apply_rows(&reversed).unwrap();
    assert!((s1.loss_total - s2.loss_total).abs() < 1e-6);
    assert!((s1.loss_gen - s2.loss_gen).abs() < 1e-6);
    assert!((s1.loss_ret - s2.loss_ret).abs() < 1e-6);
}

#[test]
fn fixed_seed_produces_identical_loss_trajectories() {
    let mut a = micro_trainer(17);
    let mut b = micro_trainer(17);
    for _ in 0..4 {
        let sa = a.step().unwrap();
        let sb = b.step().unwrap();
        assert_eq!(sa.loss_total, sb.loss_total);
        assert_eq!(sa.grad_norm, sb.grad_norm);
    }
}

#[test]
fn checkpoint_resume_replays_the_exact_loss_stream() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.ckpt");

    let mut uninterrupted = micro_trainer(19);
    let mut full_losses = Vec::new();
    for _ in 0..10 {
        full_losses.push(uninterrupted.step().unwrap().loss_total);
    }

    let mut first_half = micro_trainer(19);
    for _ in 0..5 {
        first_half.step().unwrap();
    }
    first_half.save(&ckpt).unwrap();
    let (world, data) = micro_world_and_data(19, 160);
    let mut resumed = Trainer::resume(&ckpt, micro_cfg(19), data, world).unwrap();
    for i in 5..10 {
        let s = resumed.step().unwrap();
        assert!(
            (s.loss_total - full_losses[i]).abs() <= 1e-7,
            "step {i}: resumed {} vs uninterrupted {}",
            s.loss_total,
            full_losses[i]
        );
    }
}

#[test]
fn non_finite_parameters_abort_with_diagnostics() {
    let mut t = micro_trainer(23);
    t.model
        .params
        .get_mut("lm.head")
        .unwrap()
        .data[0] = f32::INFINITY;
    let err = t.step();
    assert!(err.is_err(), "step with poisoned weights must fail");
}
