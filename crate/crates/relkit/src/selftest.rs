//! The runtime invariant suite behind the `selftest` command: the
//! properties a build must exhibit before any training run of it is
//! worth trusting. Each check is self-contained, seeded, and fast; the
//! whole suite finishes in seconds.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::physics::{gen_physics_dataset, PhysicsTask};
use crate::datasets::soc::gen_soc_dataset;
use crate::datasets::Split;
use crate::error::Result;
use crate::gradcheck::gradient_check;
use crate::params::{GradSet, ParamSet};
use crate::perception::{cnn_tower_on_tape, CnnConfig, CnnLayer};
use crate::relnet::{
    rn_forward, rn_forward_masked, rn_forward_on_tape, rn_params, ObjectSet, PairMask,
    QuestionEmbedding, RnConfig,
};
use crate::tape::{Mode, ValueId};
use crate::tensor::Tensor;
use crate::trainer::{loss_and_grads, DataSource, Task, TrainOptions};

/// One finished check: what ran, whether it held, and the measured
/// margin or failure detail.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn pass(name: &'static str, detail: String) -> Self {
        Check {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Check {
            name,
            passed: false,
            detail,
        }
    }

    fn from_bound(name: &'static str, worst: f64, bound: f64) -> Self {
        let detail = format!("worst {worst:.3e}, bound {bound:.0e}");
        if worst <= bound {
            Check::pass(name, detail)
        } else {
            Check::fail(name, detail)
        }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

/// Run the whole suite. An `Err` means the harness itself could not
/// run (a bug, not a failed property); failed properties come back as
/// `passed: false` entries.
pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![
        permutation_invariance()?,
        masked_full_equivalence()?,
        relation_gradient_check()?,
        tower_gradient_check()?,
        parallel_step_equivalence()?,
        dataset_determinism()?,
    ])
}

fn demo_config(question_dim: usize) -> RnConfig {
    RnConfig {
        object_dim: 6,
        question_dim,
        g_layers: vec![14, 10],
        f_layers: vec![8],
        f_dropout: vec![0.0],
        output_dim: 5,
    }
}

/// Logits must not move when the object rows are reordered: the pair
/// sum ranges over all ordered pairs, so any permutation yields the
/// same aggregate.
fn permutation_invariance() -> Result<Check> {
    const NAME: &str = "rn-permutation-invariance";
    const BOUND: f64 = 1e-9;
    let config = demo_config(3);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let params: ParamSet<f64> = rn_params(&config, &mut rng)?;
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let n = rng.gen_range(2..=8);
        let objects = ObjectSet::new(Tensor::rand_uniform(
            &[n, config.object_dim],
            -1.0,
            1.0,
            &mut rng,
        ))?;
        let q = QuestionEmbedding::new(Tensor::rand_uniform(
            &[config.question_dim],
            -1.0,
            1.0,
            &mut rng,
        ))?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = rn_forward(&objects, Some(&q), &config, &params)?;
        let swapped = rn_forward(&objects.permuted(&perm)?, Some(&q), &config, &params)?;
        for (a, b) in base.iter().zip(swapped.iter()) {
            worst = worst.max((a - b).abs());
        }
        if worst > BOUND {
            return Ok(Check::fail(
                NAME,
                format!("draw {draw}: deviation {worst:.3e} exceeds {BOUND:.0e}"),
            ));
        }
    }
    Ok(Check::from_bound(NAME, worst, BOUND))
}

/// The identity mask (every ordered pair) must reproduce the unmasked
/// forward pass bit for bit: both paths sum the same g outputs in the
/// same i-major order.
fn masked_full_equivalence() -> Result<Check> {
    const NAME: &str = "masked-full-equivalence";
    let config = demo_config(0);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let params: ParamSet<f64> = rn_params(&config, &mut rng)?;
    for draw in 0..20 {
        let n = rng.gen_range(2..=7);
        let objects = ObjectSet::new(Tensor::rand_uniform(
            &[n, config.object_dim],
            -1.0,
            1.0,
            &mut rng,
        ))?;
        let plain = rn_forward(&objects, None, &config, &params)?;
        let masked = rn_forward_masked(&objects, &PairMask::full(n), None, &config, &params)?;
        let exact = plain
            .iter()
            .zip(masked.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !exact {
            return Ok(Check::fail(NAME, format!("draw {draw}: bit mismatch")));
        }
    }
    Ok(Check::pass(NAME, "bit-exact over 20 draws".into()))
}

/// Finite-difference check of the relation core end to end, inputs and
/// every trainable parameter included.
fn relation_gradient_check() -> Result<Check> {
    const NAME: &str = "relation-gradient-check";
    const BOUND: f64 = 1e-4;
    let config = demo_config(2);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut params: ParamSet<f64> = rn_params(&config, &mut rng)?;
    // Zero biases hide sign errors; randomize them before probing.
    for name in params.trainable_names() {
        if name.ends_with(".b") {
            let shape = params.get(&name)?.shape().to_vec();
            *params.get_mut(&name)? = Tensor::rand_uniform(&shape, -0.5, 0.5, &mut rng);
        }
    }
    let mut names: Vec<String> = vec!["objects".into(), "q".into()];
    let mut tensors: Vec<Tensor<f64>> = vec![
        Tensor::rand_uniform(&[2, 4, config.object_dim], -1.0, 1.0, &mut rng),
        Tensor::rand_uniform(&[2, config.question_dim], -1.0, 1.0, &mut rng),
    ];
    for (name, value, trainable) in params.iter() {
        if trainable {
            names.push(name.to_string());
            tensors.push(value.clone());
        }
    }
    let inputs: Vec<(&str, Tensor<f64>)> = names
        .iter()
        .map(|n| n.as_str())
        .zip(tensors.iter().cloned())
        .collect();
    let report = gradient_check(&inputs, 250, 404, |tape, ids| {
        let map: HashMap<String, ValueId> = names[2..]
            .iter()
            .cloned()
            .zip(ids[2..].iter().copied())
            .collect();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let logits = rn_forward_on_tape(
            tape,
            ids[0],
            Some(ids[1]),
            None,
            &config,
            &map,
            Mode::Eval,
            &mut drop_rng,
        )?;
        tape.softmax_cross_entropy(logits, &[1, 3])
    })?;
    Ok(Check::from_bound(NAME, report.max_rel_err, BOUND))
}

/// Finite-difference check through a small conv tower (batch norm in
/// train mode included) feeding the relation core — the full image
/// pipeline in miniature.
fn tower_gradient_check() -> Result<Check> {
    const NAME: &str = "tower-gradient-check";
    const BOUND: f64 = 1e-4;
    let cnn = CnnConfig {
        in_channels: 2,
        layers: vec![
            CnnLayer {
                out_channels: 3,
                kernel: 3,
                stride: 2,
                pad: 1,
                batchnorm: true,
            },
            CnnLayer {
                out_channels: 4,
                kernel: 3,
                stride: 2,
                pad: 1,
                batchnorm: false,
            },
        ],
    };
    let rn = RnConfig {
        object_dim: 6,
        question_dim: 0,
        g_layers: vec![10],
        f_layers: vec![8],
        f_dropout: vec![0.0],
        output_dim: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut params: ParamSet<f64> = crate::perception::cnn_params(&cnn, &mut rng)?;
    for (name, value, trainable) in rn_params::<f64>(&rn, &mut rng)?.iter() {
        params.insert(name, value.clone(), trainable)?;
    }
    let mut names: Vec<String> = vec!["image".into()];
    let mut tensors: Vec<Tensor<f64>> =
        vec![Tensor::rand_uniform(&[2, 2, 9, 9], -1.0, 1.0, &mut rng)];
    for (name, value, trainable) in params.iter() {
        if trainable {
            names.push(name.to_string());
            tensors.push(value.clone());
        }
    }
    let inputs: Vec<(&str, Tensor<f64>)> = names
        .iter()
        .map(|n| n.as_str())
        .zip(tensors.iter().cloned())
        .collect();
    let stats = crate::perception::cnn_stats_from_params(&cnn, &params)?;
    let report = gradient_check(&inputs, 250, 606, |tape, ids| {
        let map: HashMap<String, ValueId> = names[1..]
            .iter()
            .cloned()
            .zip(ids[1..].iter().copied())
            .collect();
        let (maps, _) = cnn_tower_on_tape(tape, ids[0], &cnn, &map, &stats, Mode::Train)?;
        let objects = tape.cells_to_objects(maps)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let logits =
            rn_forward_on_tape(tape, objects, None, None, &rn, &map, Mode::Eval, &mut drop_rng)?;
        tape.softmax_cross_entropy(logits, &[0, 2])
    })?;
    Ok(Check::from_bound(NAME, report.max_rel_err, BOUND))
}

/// Two half-batch gradient sets, averaged, must reproduce the
/// full-batch gradient: the algebraic identity behind synchronous
/// data-parallel training.
fn parallel_step_equivalence() -> Result<Check> {
    const NAME: &str = "parallel-step-equivalence";
    const BOUND: f64 = 1e-10;
    let mut config = crate::trainer::build_model("physics-small")?
        .with_physics_task(Task::PhysicsPairs, 6)?;
    if let crate::trainer::Arch::Relation(rn) = &mut config.arch {
        rn.g_layers = vec![20; 2];
        rn.f_layers = vec![16];
        rn.f_dropout = vec![0.0];
    }
    config.batch = 8;
    let data = gen_physics_dataset(707, Split::Train, 8, 6, 16);
    let src = DataSource::Physics {
        data: &data,
        task: PhysicsTask::InferConnections,
    };
    let params: ParamSet<f64> = config.init_params(17)?;
    let items: Vec<usize> = (0..8).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = loss_and_grads(&config, &params, &src.batch(&items)?, &mut rng)?;
    let left = loss_and_grads(&config, &params, &src.batch(&items[..4])?, &mut rng)?;
    let right = loss_and_grads(&config, &params, &src.batch(&items[4..])?, &mut rng)?;
    let merged = GradSet::average(&[left.grads, right.grads])?;
    let mut worst = 0.0f64;
    for name in params.trainable_names() {
        let a = full.grads.get(&name).expect("full gradient present");
        let b = merged.get(&name).expect("merged gradient present");
        for (x, y) in a.iter().zip(b.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(Check::from_bound(NAME, worst, BOUND))
}

/// Generators are pure functions of (seed, split, index): regeneration
/// is bit-exact and prefixes agree regardless of requested count.
fn dataset_determinism() -> Result<Check> {
    const NAME: &str = "dataset-determinism";
    let soc_a = gen_soc_dataset(808, Split::Train, 30)?;
    let soc_b = gen_soc_dataset(808, Split::Train, 30)?;
    if soc_a != soc_b {
        return Ok(Check::fail(NAME, "scene corpus changed between runs".into()));
    }
    let soc_prefix = gen_soc_dataset(808, Split::Train, 10)?;
    if soc_a.records[..10] != soc_prefix.records[..] {
        return Ok(Check::fail(
            NAME,
            "scene corpus prefix depends on requested count".into(),
        ));
    }
    let phys_a = gen_physics_dataset(808, Split::Train, 30, 6, 16);
    let phys_b = gen_physics_dataset(808, Split::Train, 30, 6, 16);
    if phys_a != phys_b {
        return Ok(Check::fail(
            NAME,
            "trajectory corpus changed between runs".into(),
        ));
    }
    let phys_prefix = gen_physics_dataset(808, Split::Train, 12, 6, 16);
    if phys_a.records[..12] != phys_prefix.records[..] {
        return Ok(Check::fail(
            NAME,
            "trajectory corpus prefix depends on requested count".into(),
        ));
    }
    // Different splits draw from disjoint streams.
    let phys_test = gen_physics_dataset(808, Split::Test, 30, 6, 16);
    if phys_a.records[0] == phys_test.records[0] {
        return Ok(Check::fail(NAME, "train and test splits coincide".into()));
    }
    Ok(Check::pass(
        NAME,
        "bit-exact regeneration, count-independent prefixes".into(),
    ))
}

/// Determinism of the training loop itself: two runs from one seed
/// produce identical parameters. Not part of [`run_all`]'s fast path
/// guarantees — it trains briefly — but cheap enough to include.
pub fn training_determinism() -> Result<Check> {
    const NAME: &str = "training-determinism";
    let mut config = crate::trainer::build_model("physics-small")?
        .with_physics_task(Task::PhysicsPairs, 6)?;
    if let crate::trainer::Arch::Relation(rn) = &mut config.arch {
        rn.g_layers = vec![16; 2];
        rn.f_layers = vec![12];
        rn.f_dropout = vec![0.0];
    }
    config.batch = 4;
    let data = gen_physics_dataset(909, Split::Train, 12, 6, 16);
    let src = DataSource::Physics {
        data: &data,
        task: PhysicsTask::InferConnections,
    };
    let options = TrainOptions {
        seed: 5,
        max_steps: 3,
        ..TrainOptions::default()
    };
    let a = crate::trainer::train::<f64>(&config, &src, None, &options, None)?;
    let b = crate::trainer::train::<f64>(&config, &src, None, &options, None)?;
    if a.params != b.params {
        return Ok(Check::fail(NAME, "parameters diverged between runs".into()));
    }
    Ok(Check::pass(NAME, "identical parameters over 3 steps".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn suite_passes_quickly() {
        let clock = Instant::now();
        let checks = run_all().unwrap();
        assert_eq!(checks.len(), 6);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(all_passed(&checks));
        assert!(
            clock.elapsed().as_secs() < 300,
            "suite took {:?}",
            clock.elapsed()
        );
    }

    #[test]
    fn training_determinism_holds() {
        let check = training_determinism().unwrap();
        assert!(check.passed, "{}", check.detail);
    }
}
