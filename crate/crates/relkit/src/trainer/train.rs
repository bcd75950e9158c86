//! The synchronous data-parallel loop: every worker computes gradients
//! for its shard of the batch against the same parameter snapshot, the
//! server averages the shards, applies one Adam update, and the next
//! step begins from the updated parameters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};
use crate::perception::{cnn_stats_from_params, cnn_stats_into_params, TowerBatchStats};
use crate::scalar::Scalar;

use super::data::DataSource;
use super::eval::{evaluate, EvalReport};
use super::model::{loss_and_grads, StepOutput};
use super::presets::ModelConfig;

/// Knobs around the loop itself; model shape and optimizer settings
/// live in [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    pub workers: usize,
    pub max_steps: u64,
    /// Evaluate (and check early stopping) every this many steps.
    pub eval_every: u64,
    /// Stop after this many evaluations without sufficient improvement.
    pub patience: usize,
    /// Smallest accuracy gain that counts as improvement.
    pub min_delta: f64,
    /// Stream metric rows into this CSV as training runs.
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            workers: 1,
            max_steps: 1000,
            eval_every: 500,
            patience: 10,
            min_delta: 0.002,
            metrics_path: None,
        }
    }
}

/// One line of the training log. `wall_ms` is measured, so it is the
/// one column excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub wall_ms: u64,
    pub loss: f64,
    pub eval: Option<EvalReport>,
}

/// Everything a finished run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub params: ParamSet<S>,
    pub adam: AdamState<S>,
    pub rows: Vec<MetricsRow>,
    pub final_eval: Option<EvalReport>,
    pub stopped_early: bool,
}

/// Deterministic epoch-shuffled stream: global position
/// `step·batch + i` lands in epoch `g / n` at slot `g % n` of that
/// epoch's seeded permutation. Any step's batch is addressable without
/// replaying history, which is what makes resume exact.
struct IndexStream {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
}

impl IndexStream {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        IndexStream {
            n,
            batch,
            seed,
            epoch: u64::MAX,
            perm: Vec::new(),
        }
    }

    fn load_epoch(&mut self, epoch: u64) {
        if self.epoch == epoch {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((0xC << 60) | epoch);
        self.perm = (0..self.n).collect();
        self.perm.shuffle(&mut rng);
        self.epoch = epoch;
    }

    fn batch_items(&mut self, step: u64) -> Vec<usize> {
        let start = step * self.batch as u64;
        (0..self.batch as u64)
            .map(|i| {
                let g = start + i;
                self.load_epoch(g / self.n as u64);
                self.perm[(g % self.n as u64) as usize]
            })
            .collect()
    }
}

/// Disjoint per-(seed, worker, step) randomness for dropout; stateless
/// so any step can be replayed.
fn worker_rng(seed: u64, worker: usize, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((0xD << 60) | ((worker as u64) << 48) | step);
    rng
}

/// One step's worker results, in worker order.
fn run_workers<S: Scalar>(
    config: &ModelConfig,
    params: &ParamSet<S>,
    data: &DataSource,
    items: &[usize],
    workers: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<StepOutput<S>>> {
    let shard = items.len() / workers;
    if workers == 1 {
        let batch = data.batch(items)?;
        let mut rng = worker_rng(seed, 0, step);
        return Ok(vec![loss_and_grads(config, params, &batch, &mut rng)?]);
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let shard_items = &items[w * shard..(w + 1) * shard];
                scope.spawn(move || {
                    let batch = data.batch(shard_items)?;
                    let mut rng = worker_rng(seed, w, step);
                    loss_and_grads(config, params, &batch, &mut rng)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Fold the workers' batch statistics into the running buffers stored
/// in `params`. Per layer, worker shard statistics average with equal
/// weight (shards are equal-sized by construction).
fn fold_batchnorm_stats<S: Scalar>(
    config: &ModelConfig,
    params: &mut ParamSet<S>,
    worker_stats: &[Vec<TowerBatchStats<S>>],
) -> Result<()> {
    let Some(cnn) = &config.cnn else {
        return Ok(());
    };
    if worker_stats.iter().all(|s| s.is_empty()) {
        return Ok(());
    }
    let mut running = cnn_stats_from_params(cnn, params)?;
    let first = &worker_stats[0];
    let scale = S::from_usize(worker_stats.len()).recip();
    for (slot, head) in first.iter().enumerate() {
        let channels = head.mean.len();
        let mut mean = vec![S::zero(); channels];
        let mut var = vec![S::zero(); channels];
        for stats in worker_stats {
            let s = &stats[slot];
            if s.layer != head.layer || s.mean.len() != channels {
                return Err(Error::Config(
                    "workers reported mismatched batch-norm layers".into(),
                ));
            }
            for c in 0..channels {
                mean[c] += scale * s.mean[c];
                var[c] += scale * s.var[c];
            }
        }
        running[head.layer].update(&mean, &var);
    }
    cnn_stats_into_params(cnn, &running, params)
}

fn check_finite<S: Scalar>(step: u64, loss: f64, grads: &GradSet<S>) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric {
            step: step as usize,
            what: format!("loss became {loss}"),
        });
    }
    for (name, g) in &grads.by_name {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                step: step as usize,
                what: format!("gradient of {name} is not finite"),
            });
        }
    }
    Ok(())
}

struct MetricsWriter {
    out: BufWriter<File>,
    path: String,
    columns: Vec<&'static str>,
}

impl MetricsWriter {
    fn create(path: &PathBuf, config: &ModelConfig, append: bool) -> Result<Self> {
        let name = path.display().to_string();
        let columns = EvalReport::columns(config.task);
        let exists = append && path.exists();
        let file = if exists {
            File::options().append(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(|e| Error::io(&name, e))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
            path: name,
            columns,
        };
        if !exists {
            let mut header = String::from("step,wall_ms,loss");
            for c in &w.columns {
                header.push(',');
                header.push_str(c);
            }
            header.push('\n');
            w.write_all(&header)?;
        }
        Ok(w)
    }

    fn write_all(&mut self, text: &str) -> Result<()> {
        self.out
            .write_all(text.as_bytes())
            .and_then(|()| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        let mut line = format!("{},{},{:.6}", row.step, row.wall_ms, row.loss);
        match &row.eval {
            Some(report) => {
                for v in report.values() {
                    line.push_str(&format!(",{v:.6}"));
                }
            }
            None => {
                for _ in &self.columns {
                    line.push(',');
                }
            }
        }
        line.push('\n');
        self.write_all(&line)
    }
}

/// Run the loop from `start` (fresh parameters when `None`, a loaded
/// checkpoint to resume otherwise) until `max_steps` or early stop.
pub fn train<S: Scalar>(
    config: &ModelConfig,
    data: &DataSource,
    eval_data: Option<&DataSource>,
    options: &TrainOptions,
    start: Option<(ParamSet<S>, Option<AdamState<S>>)>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if options.workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    if config.batch % options.workers != 0 {
        return Err(Error::Config(format!(
            "batch {} does not split evenly over {} workers",
            config.batch, options.workers
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if data.task() != config.task {
        return Err(Error::Config(format!(
            "corpus holds {} items but the model trains {}",
            data.task().name(),
            config.task.name()
        )));
    }
    let shard = config.batch / options.workers;
    let has_bn = config
        .cnn
        .as_ref()
        .is_some_and(|c| c.layers.iter().any(|l| l.batchnorm));
    if has_bn && shard < 2 {
        return Err(Error::Config(format!(
            "batch norm needs at least 2 rows per worker shard, got {shard}"
        )));
    }
    if options.eval_every == 0 {
        return Err(Error::Config("eval interval must be positive".into()));
    }

    let (mut params, adam) = match start {
        Some((p, a)) => (p, a),
        None => (config.init_params(options.seed)?, None),
    };
    let mut adam = match adam {
        Some(state) => {
            if state.config != config.adam {
                return Err(Error::Config(
                    "checkpoint optimizer settings do not match the preset".into(),
                ));
            }
            state
        }
        None => AdamState::new(config.adam, &params),
    };

    let mut writer = match &options.metrics_path {
        Some(path) => Some(MetricsWriter::create(path, config, adam.t > 0)?),
        None => None,
    };

    let mut stream = IndexStream::new(data.len(), config.batch, options.seed);
    let mut rows = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    let mut step = adam.t;
    while step < options.max_steps {
        let clock = Instant::now();
        let items = stream.batch_items(step);
        let outs = run_workers(config, &params, data, &items, options.workers, options.seed, step)?;
        let loss = outs.iter().map(|o| o.loss).sum::<f64>() / outs.len() as f64;
        let mut grad_sets = Vec::with_capacity(outs.len());
        let mut stat_sets = Vec::with_capacity(outs.len());
        for out in outs {
            grad_sets.push(out.grads);
            stat_sets.push(out.batch_stats);
        }
        let grads = GradSet::average(&grad_sets)?;
        check_finite(step, loss, &grads)?;
        adam_step(&mut params, &grads, &mut adam)?;
        fold_batchnorm_stats(config, &mut params, &stat_sets)?;
        step = adam.t;

        // The cadence, plus always the final step so every finished
        // run's metrics end on a scoreable row.
        let eval = match eval_data {
            Some(corpus) if step % options.eval_every == 0 || step >= options.max_steps => {
                Some(evaluate(config, &params, corpus)?)
            }
            _ => None,
        };
        if let Some(report) = &eval {
            let acc = report.overall();
            if acc > best + options.min_delta {
                best = acc;
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        let row = MetricsRow {
            step,
            wall_ms: clock.elapsed().as_millis() as u64,
            loss,
            eval,
        };
        if let Some(w) = &mut writer {
            w.write_row(&row)?;
        }
        let stop_now = since_best >= options.patience && row.eval.is_some();
        rows.push(row);
        if stop_now {
            stopped_early = true;
            break;
        }
    }

    let final_eval = match eval_data {
        Some(corpus) => Some(match rows.last().and_then(|r| r.eval.clone()) {
            Some(report) => report,
            None => evaluate(config, &params, corpus)?,
        }),
        None => None,
    };

    Ok(TrainOutcome {
        params,
        adam,
        rows,
        final_eval,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::physics::{gen_physics_dataset, PhysicsTask};
    use crate::datasets::soc::gen_soc_dataset;
    use crate::datasets::Split;
    use crate::trainer::presets::{build_model, Arch, Task};

    fn tiny_physics_config() -> ModelConfig {
        let mut m = build_model("physics-small")
            .unwrap()
            .with_physics_task(Task::PhysicsPairs, 6)
            .unwrap();
        let Arch::Relation(rn) = &mut m.arch else {
            unreachable!()
        };
        rn.g_layers = vec![24; 2];
        rn.f_layers = vec![24];
        rn.f_dropout = vec![0.0];
        m.batch = 8;
        m
    }

    #[test]
    fn two_workers_match_one_worker_exactly() {
        let config = tiny_physics_config();
        let data = gen_physics_dataset(11, Split::Train, 32, 6, 16);
        let src = DataSource::Physics {
            data: &data,
            task: PhysicsTask::InferConnections,
        };
        let run = |workers: usize| {
            let options = TrainOptions {
                seed: 4,
                workers,
                max_steps: 5,
                ..TrainOptions::default()
            };
            train::<f64>(&config, &src, None, &options, None).unwrap()
        };
        let solo = run(1);
        let pair = run(2);
        for (name, value, _) in solo.params.iter() {
            let other = pair.params.get(name).unwrap();
            for (a, b) in value.iter().zip(other.iter()) {
                assert!((a - b).abs() <= 1e-10, "{name}: {a} vs {b}");
            }
        }
        for (a, b) in solo.rows.iter().zip(&pair.rows) {
            assert!((a.loss - b.loss).abs() <= 1e-10);
        }
    }

    #[test]
    fn single_worker_run_is_reproducible() {
        let config = tiny_physics_config();
        let data = gen_physics_dataset(11, Split::Train, 32, 6, 16);
        let src = DataSource::Physics {
            data: &data,
            task: PhysicsTask::InferConnections,
        };
        let options = TrainOptions {
            seed: 4,
            max_steps: 4,
            ..TrainOptions::default()
        };
        let a = train::<f64>(&config, &src, None, &options, None).unwrap();
        let b = train::<f64>(&config, &src, None, &options, None).unwrap();
        assert_eq!(a.params, b.params);
        let losses: Vec<f64> = a.rows.iter().map(|r| r.loss).collect();
        let losses_b: Vec<f64> = b.rows.iter().map(|r| r.loss).collect();
        assert_eq!(losses, losses_b);
    }

    #[test]
    fn resume_reaches_the_same_state_as_one_run() {
        let config = tiny_physics_config();
        let data = gen_physics_dataset(11, Split::Train, 32, 6, 16);
        let src = DataSource::Physics {
            data: &data,
            task: PhysicsTask::InferConnections,
        };
        let mut options = TrainOptions {
            seed: 4,
            max_steps: 12,
            ..TrainOptions::default()
        };
        let straight = train::<f64>(&config, &src, None, &options, None).unwrap();

        options.max_steps = 5;
        let first = train::<f64>(&config, &src, None, &options, None).unwrap();
        assert_eq!(first.adam.t, 5);
        options.max_steps = 12;
        let resumed = train::<f64>(
            &config,
            &src,
            None,
            &options,
            Some((first.params, Some(first.adam))),
        )
        .unwrap();
        assert_eq!(resumed.adam.t, 12);
        assert_eq!(straight.params, resumed.params);
        // The resumed run's rows start at step 6.
        assert_eq!(resumed.rows[0].step, 6);
        let tail: Vec<f64> = straight.rows[5..].iter().map(|r| r.loss).collect();
        let resumed_losses: Vec<f64> = resumed.rows.iter().map(|r| r.loss).collect();
        assert_eq!(tail, resumed_losses);
    }

    #[test]
    fn epoch_stream_covers_the_corpus_and_reshuffles() {
        let mut stream = IndexStream::new(10, 5, 7);
        let epoch1: Vec<usize> = (0..2).flat_map(|s| stream.batch_items(s)).collect();
        let mut sorted = epoch1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let epoch2: Vec<usize> = (2..4).flat_map(|s| stream.batch_items(s)).collect();
        let mut sorted2 = epoch2.clone();
        sorted2.sort_unstable();
        assert_eq!(sorted2, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch1, epoch2, "reshuffle should change the order");
        // Replay is possible without history.
        let mut fresh = IndexStream::new(10, 5, 7);
        assert_eq!(fresh.batch_items(3), stream.batch_items(3));
    }

    #[test]
    fn loss_drops_on_a_learnable_corpus() {
        let config = tiny_physics_config();
        let data = gen_physics_dataset(11, Split::Train, 64, 6, 16);
        let src = DataSource::Physics {
            data: &data,
            task: PhysicsTask::InferConnections,
        };
        let options = TrainOptions {
            seed: 4,
            max_steps: 60,
            ..TrainOptions::default()
        };
        let out = train::<f64>(&config, &src, None, &options, None).unwrap();
        let first: f64 = out.rows[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let last: f64 = out.rows[50..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(last < first, "mean loss went {first:.4} -> {last:.4}");
    }

    #[test]
    fn early_stopping_fires_on_a_flat_model() {
        let config = tiny_physics_config();
        let data = gen_physics_dataset(11, Split::Train, 16, 6, 16);
        let test = gen_physics_dataset(12, Split::Test, 8, 6, 16);
        let src = DataSource::Physics {
            data: &data,
            task: PhysicsTask::InferConnections,
        };
        let eval_src = DataSource::Physics {
            data: &test,
            task: PhysicsTask::InferConnections,
        };
        let options = TrainOptions {
            seed: 4,
            max_steps: 50,
            eval_every: 2,
            patience: 3,
            // Impossible bar: every evaluation counts as no improvement.
            min_delta: 2.0,
            ..TrainOptions::default()
        };
        let out = train::<f64>(&config, &src, Some(&eval_src), &options, None).unwrap();
        assert!(out.stopped_early);
        // The first evaluation (step 2) sets the baseline; three strikes
        // at a 2-step cadence then stop the run at step 8.
        assert_eq!(out.adam.t, 8);
        assert!(out.final_eval.is_some());
    }

    #[test]
    fn metrics_file_has_header_and_blank_eval_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let config = tiny_physics_config();
        let data = gen_physics_dataset(11, Split::Train, 16, 6, 16);
        let test = gen_physics_dataset(12, Split::Test, 8, 6, 16);
        let src = DataSource::Physics {
            data: &data,
            task: PhysicsTask::InferConnections,
        };
        let eval_src = DataSource::Physics {
            data: &test,
            task: PhysicsTask::InferConnections,
        };
        let options = TrainOptions {
            seed: 4,
            max_steps: 4,
            eval_every: 2,
            metrics_path: Some(path.clone()),
            ..TrainOptions::default()
        };
        train::<f64>(&config, &src, Some(&eval_src), &options, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,wall_ms,loss,accuracy,pair");
        assert_eq!(lines.len(), 5);
        // Steps 1 and 3 have no evaluation: trailing cells stay empty.
        assert!(lines[1].ends_with(",,"));
        // Steps 2 and 4 carry accuracy values.
        assert_eq!(lines[2].split(',').count(), 5);
        assert!(!lines[2].ends_with(",,"));
    }

    #[test]
    fn batch_must_split_evenly_over_workers() {
        let mut config = tiny_physics_config();
        config.batch = 7;
        let data = gen_physics_dataset(11, Split::Train, 16, 6, 16);
        let src = DataSource::Physics {
            data: &data,
            task: PhysicsTask::InferConnections,
        };
        let options = TrainOptions {
            workers: 2,
            max_steps: 1,
            ..TrainOptions::default()
        };
        assert!(train::<f64>(&config, &src, None, &options, None).is_err());
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let config = tiny_physics_config();
        let soc = gen_soc_dataset(3, Split::Train, 1).unwrap();
        let src = DataSource::Soc(&soc);
        let options = TrainOptions {
            max_steps: 1,
            ..TrainOptions::default()
        };
        assert!(train::<f64>(&config, &src, None, &options, None).is_err());
    }

    #[test]
    fn soc_training_updates_batchnorm_buffers() {
        let mut config = build_model("soc-small").unwrap();
        let Arch::Relation(rn) = &mut config.arch else {
            unreachable!()
        };
        rn.g_layers = vec![8; 2];
        rn.f_layers = vec![8];
        rn.f_dropout = vec![0.0];
        let cnn = config.cnn.as_mut().unwrap();
        for l in &mut cnn.layers {
            l.out_channels = 2;
        }
        if let Arch::Relation(rn) = &mut config.arch {
            rn.object_dim = 4;
        }
        config.batch = 4;
        let data = gen_soc_dataset(3, Split::Train, 2).unwrap();
        let src = DataSource::Soc(&data);
        let options = TrainOptions {
            seed: 1,
            max_steps: 2,
            ..TrainOptions::default()
        };
        let out = train::<f64>(&config, &src, None, &options, None).unwrap();
        let mean = out.params.get("cnn0.running_mean").unwrap();
        assert!(
            mean.iter().any(|&v| v != 0.0),
            "running mean should move off its initial zeros"
        );
    }
}
