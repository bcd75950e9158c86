//! Forward passes wired per task: a batch in, training loss and
//! gradients (or eval-mode logits) out, for both architectures.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::RunningStats;
use crate::params::{GradSet, ParamSet};
use crate::perception::{
    cnn_stats_from_params, cnn_tower_on_tape, constant_params, encode_tokens_on_tape,
    sentences_to_objects_on_tape, TowerBatchStats,
};
use crate::relnet::rn_forward_on_tape;
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, ValueId};
use crate::tensor::Tensor;

use super::data::Batch;
use super::presets::{Arch, MlpArch, ModelConfig, Task};

/// Fresh baseline parameters: `mlp{i}.{w,b}` per hidden layer plus
/// `head.{w,b}`.
pub fn mlp_params<S: Scalar>(arch: &MlpArch, rng: &mut impl Rng) -> Result<ParamSet<S>> {
    let mut ps = ParamSet::new();
    let mut width = arch.input_width;
    for (i, &out) in arch.hidden.iter().enumerate() {
        ps.insert_affine(&format!("mlp{i}"), width, out, rng)?;
        width = out;
    }
    ps.insert_affine("head", width, arch.output_dim, rng)?;
    Ok(ps)
}

/// What one worker hands back from a training step.
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    pub loss: f64,
    pub grads: GradSet<S>,
    /// Per-layer batch-norm statistics, empty without a tower.
    pub batch_stats: Vec<TowerBatchStats<S>>,
}

/// Forward + backward over one batch in train mode.
pub fn loss_and_grads<S: Scalar>(
    config: &ModelConfig,
    params: &ParamSet<S>,
    batch: &Batch<S>,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput<S>> {
    let stats = tower_stats(config, params)?;
    let mut tape = Tape::new();
    let ids = params.leaves(&mut tape);
    let (logits, batch_stats) =
        logits_on_tape(&mut tape, config, &ids, &stats, batch, Mode::Train, rng)?;
    let loss_id = loss_on_tape(&mut tape, config.task, logits, batch)?;
    let loss = tape.scalar_value(loss_id).to_f64();
    tape.backward(loss_id)?;
    let grads = params.collect_grads(&tape, &ids);
    Ok(StepOutput {
        loss,
        grads,
        batch_stats,
    })
}

/// Eval-mode logits `[b, classes]`; no dropout, batch norm reads the
/// running statistics, nothing is recorded for backward.
pub fn batch_logits<S: Scalar>(
    config: &ModelConfig,
    params: &ParamSet<S>,
    batch: &Batch<S>,
) -> Result<Tensor<S>> {
    let stats = tower_stats(config, params)?;
    let mut tape = Tape::new();
    let ids = constant_params(&mut tape, params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, _) = logits_on_tape(&mut tape, config, &ids, &stats, batch, Mode::Eval, &mut rng)?;
    Ok(tape.value(logits).clone())
}

/// Eval-mode loss over one batch, for monitoring without a backward
/// pass.
pub fn batch_loss<S: Scalar>(
    config: &ModelConfig,
    params: &ParamSet<S>,
    batch: &Batch<S>,
) -> Result<f64> {
    let stats = tower_stats(config, params)?;
    let mut tape = Tape::new();
    let ids = constant_params(&mut tape, params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, _) = logits_on_tape(&mut tape, config, &ids, &stats, batch, Mode::Eval, &mut rng)?;
    let loss_id = loss_on_tape(&mut tape, config.task, logits, batch)?;
    Ok(tape.scalar_value(loss_id).to_f64())
}

fn tower_stats<S: Scalar>(
    config: &ModelConfig,
    params: &ParamSet<S>,
) -> Result<Vec<RunningStats<S>>> {
    match &config.cnn {
        Some(cnn) => cnn_stats_from_params(cnn, params),
        None => Ok(Vec::new()),
    }
}

fn wrong_batch(task: Task) -> Error {
    Error::Config(format!("batch does not match task {}", task.name()))
}

/// Build the whole forward graph for one batch; returns the logits
/// node and any tower batch statistics.
fn logits_on_tape<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    ids: &HashMap<String, ValueId>,
    stats: &[RunningStats<S>],
    batch: &Batch<S>,
    mode: Mode,
    rng: &mut R,
) -> Result<(ValueId, Vec<TowerBatchStats<S>>)> {
    match (config.task, batch) {
        (
            Task::Soc,
            Batch::Soc {
                images, questions, ..
            },
        ) => {
            let cnn = config
                .cnn
                .as_ref()
                .ok_or_else(|| Error::Config("image task without a tower".into()))?;
            let x = tape.constant(images.clone());
            let (maps, batch_stats) = cnn_tower_on_tape(tape, x, cnn, ids, stats, mode)?;
            let objects = tape.cells_to_objects(maps)?;
            let q = tape.constant(questions.clone());
            let logits = arch_forward(tape, &config.arch, objects, Some(q), ids, mode, rng)?;
            Ok((logits, batch_stats))
        }
        (Task::PhysicsPairs, Batch::PhysicsPairs { objects, .. })
        | (Task::PhysicsCount, Batch::PhysicsCount { objects, .. }) => {
            let o = tape.constant(objects.clone());
            let logits = arch_forward(tape, &config.arch, o, None, ids, mode, rng)?;
            Ok((logits, Vec::new()))
        }
        (
            Task::ClevrPixels,
            Batch::ClevrPixels {
                images, questions, ..
            },
        ) => {
            let cnn = config
                .cnn
                .as_ref()
                .ok_or_else(|| Error::Config("image task without a tower".into()))?;
            let x = tape.constant(images.clone());
            let (maps, batch_stats) = cnn_tower_on_tape(tape, x, cnn, ids, stats, mode)?;
            let objects = tape.cells_to_objects(maps)?;
            let q = encode_question_rows(tape, config, questions, ids)?;
            let logits = arch_forward(tape, &config.arch, objects, Some(q), ids, mode, rng)?;
            Ok((logits, batch_stats))
        }
        (
            Task::ClevrState,
            Batch::ClevrState {
                objects, questions, ..
            },
        ) => {
            let o = tape.constant(objects.clone());
            let q = encode_question_rows(tape, config, questions, ids)?;
            let logits = arch_forward(tape, &config.arch, o, Some(q), ids, mode, rng)?;
            Ok((logits, Vec::new()))
        }
        (
            Task::Babi,
            Batch::Babi {
                stories, questions, ..
            },
        ) => {
            let logits = babi_forward(tape, config, stories, questions, ids, mode, rng)?;
            Ok((logits, Vec::new()))
        }
        _ => Err(wrong_batch(config.task)),
    }
}

/// Encode one token question per sample and stack into `[b, hidden]`.
fn encode_question_rows<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    questions: &[Vec<usize>],
    ids: &HashMap<String, ValueId>,
) -> Result<ValueId> {
    let text = config
        .question_text
        .as_ref()
        .ok_or_else(|| Error::Config("token questions need a question encoder".into()))?;
    let rows: Vec<ValueId> = questions
        .iter()
        .map(|toks| encode_tokens_on_tape(tape, toks, "question", text, ids))
        .collect::<Result<_>>()?;
    tape.concat_rows(&rows)
}

/// Support sets vary in length, so each sample runs the relation core
/// on its own object set; the per-sample logit rows stack into
/// `[b, classes]`.
fn babi_forward<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    stories: &[Vec<Vec<usize>>],
    questions: &[Vec<usize>],
    ids: &HashMap<String, ValueId>,
    mode: Mode,
    rng: &mut R,
) -> Result<ValueId> {
    let rn = match &config.arch {
        Arch::Relation(rn) => rn,
        Arch::Mlp(_) => {
            return Err(Error::Config(
                "flattened baseline is undefined for variable-length support sets".into(),
            ))
        }
    };
    let sentence = config
        .sentence_text
        .as_ref()
        .ok_or_else(|| Error::Config("story task needs a sentence encoder".into()))?;
    if stories.len() != questions.len() {
        return Err(wrong_batch(config.task));
    }
    let mut rows = Vec::with_capacity(stories.len());
    for (story, q_tokens) in stories.iter().zip(questions) {
        let objects = sentences_to_objects_on_tape(tape, story, "sentence", sentence, ids)?;
        let n = tape.value(objects).shape()[0];
        let m = tape.value(objects).shape()[1];
        let batched = tape.reshape(objects, vec![1, n, m])?;
        let q = encode_question_rows_single(tape, config, q_tokens, ids)?;
        rows.push(rn_forward_on_tape(
            tape,
            batched,
            Some(q),
            None,
            rn,
            ids,
            mode,
            rng,
        )?);
    }
    tape.concat_rows(&rows)
}

fn encode_question_rows_single<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    tokens: &[usize],
    ids: &HashMap<String, ValueId>,
) -> Result<ValueId> {
    let text = config
        .question_text
        .as_ref()
        .ok_or_else(|| Error::Config("token questions need a question encoder".into()))?;
    encode_tokens_on_tape(tape, tokens, "question", text, ids)
}

/// Run either head over a batched object set `[b, n, m]`.
fn arch_forward<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    arch: &Arch,
    objects: ValueId,
    question: Option<ValueId>,
    ids: &HashMap<String, ValueId>,
    mode: Mode,
    rng: &mut R,
) -> Result<ValueId> {
    match arch {
        Arch::Relation(rn) => {
            rn_forward_on_tape(tape, objects, question, None, rn, ids, mode, rng)
        }
        Arch::Mlp(mlp) => {
            let shape = tape.value(objects).shape().to_vec();
            if shape.len() != 3 {
                return Err(Error::Dimension {
                    op: "mlp_forward",
                    lhs: shape,
                    rhs: vec![0, 0, 0],
                });
            }
            if shape[1] != mlp.n_objects {
                return Err(Error::Config(format!(
                    "baseline was sized for {} objects, batch carries {}",
                    mlp.n_objects, shape[1]
                )));
            }
            let flat = tape.reshape(objects, vec![shape[0], shape[1] * shape[2]])?;
            let mut h = match question {
                Some(q) => tape.concat_cols(&[flat, q])?,
                None => flat,
            };
            let width = tape.value(h).shape()[1];
            if width != mlp.input_width {
                return Err(Error::Config(format!(
                    "baseline input is {} wide, batch packs {width}",
                    mlp.input_width
                )));
            }
            let id = |name: String| -> Result<ValueId> {
                ids.get(&name)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("missing parameter node {name:?}")))
            };
            for (i, _) in mlp.hidden.iter().enumerate() {
                let w = id(format!("mlp{i}.w"))?;
                let b = id(format!("mlp{i}.b"))?;
                h = tape.affine(h, w, b)?;
                h = tape.relu(h);
                let rate = mlp.dropout.get(i).copied().unwrap_or(0.0);
                if rate > 0.0 {
                    h = tape.dropout(h, rate, mode, rng)?;
                }
            }
            let w = id("head.w".into())?;
            let b = id("head.b".into())?;
            tape.affine(h, w, b)
        }
    }
}

/// The task's loss node over already-built logits.
fn loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    task: Task,
    logits: ValueId,
    batch: &Batch<S>,
) -> Result<ValueId> {
    match (task, batch) {
        (Task::Soc, Batch::Soc { targets, .. })
        | (Task::PhysicsCount, Batch::PhysicsCount { targets, .. })
        | (Task::ClevrPixels, Batch::ClevrPixels { targets, .. })
        | (Task::ClevrState, Batch::ClevrState { targets, .. })
        | (Task::Babi, Batch::Babi { targets, .. }) => {
            tape.softmax_cross_entropy(logits, targets)
        }
        (Task::PhysicsPairs, Batch::PhysicsPairs { targets, .. }) => {
            tape.bce_mean(logits, targets)
        }
        _ => Err(wrong_batch(task)),
    }
}
