//! Batch assembly: indexing into a corpus and packing record slices
//! into the tensors one training step consumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::physics::{PhysicsDataset, PhysicsTask};
use crate::datasets::soc::{SocDataset, QUESTIONS_PER_SCENE, SOC_CANVAS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::presets::{Arch, ModelConfig, Task, BABI_STORY_SENTENCES, STATE_OBJECTS};

/// One packed minibatch. Image and object tensors are batch-major;
/// token inputs stay ragged and are encoded on the tape.
#[derive(Debug, Clone)]
pub enum Batch<S> {
    Soc {
        /// `[b, 3, side, side]`
        images: Tensor<S>,
        /// `[b, 11]`
        questions: Tensor<S>,
        targets: Vec<usize>,
        /// `(relational, subtype)` per row, for per-category scoring.
        kinds: Vec<(bool, usize)>,
    },
    PhysicsPairs {
        /// `[b, n, features]`
        objects: Tensor<S>,
        /// `[b, n²]` of 0/1
        targets: Tensor<S>,
    },
    PhysicsCount {
        objects: Tensor<S>,
        /// Class per row: `system_count − 1`.
        targets: Vec<usize>,
    },
    ClevrPixels {
        images: Tensor<S>,
        questions: Vec<Vec<usize>>,
        targets: Vec<usize>,
    },
    ClevrState {
        objects: Tensor<S>,
        questions: Vec<Vec<usize>>,
        targets: Vec<usize>,
    },
    Babi {
        stories: Vec<Vec<Vec<usize>>>,
        questions: Vec<Vec<usize>>,
        targets: Vec<usize>,
    },
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Soc { targets, .. } => targets.len(),
            Batch::PhysicsPairs { targets, .. } => targets.shape()[0],
            Batch::PhysicsCount { targets, .. } => targets.len(),
            Batch::ClevrPixels { targets, .. } => targets.len(),
            Batch::ClevrState { targets, .. } => targets.len(),
            Batch::Babi { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shape summary for generated stand-in batches on tasks whose real
/// corpora live elsewhere; lets the text and pixel pipelines run
/// end-to-end without external downloads.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub task: Task,
    pub count: usize,
    pub seed: u64,
    pub input_side: usize,
    pub question_vocab: usize,
    pub sentence_vocab: usize,
    pub n_objects: usize,
    pub object_dim: usize,
    pub classes: usize,
}

impl SyntheticSpec {
    /// Derive the stand-in shapes a model expects from its config.
    pub fn for_model(config: &ModelConfig, count: usize, seed: u64) -> Result<Self> {
        let object_dim = match &config.arch {
            Arch::Relation(rn) => rn.object_dim,
            Arch::Mlp(mlp) => {
                if mlp.n_objects == 0 {
                    return Err(Error::Config("baseline has no object count".into()));
                }
                mlp.input_width / mlp.n_objects
            }
        };
        let n_objects = match config.task {
            Task::ClevrState => STATE_OBJECTS,
            Task::Babi => BABI_STORY_SENTENCES,
            _ => match &config.arch {
                Arch::Relation(_) => 0,
                Arch::Mlp(mlp) => mlp.n_objects,
            },
        };
        Ok(SyntheticSpec {
            task: config.task,
            count,
            seed,
            input_side: config.input_side,
            question_vocab: config.question_text.as_ref().map_or(0, |t| t.vocab),
            sentence_vocab: config.sentence_text.as_ref().map_or(0, |t| t.vocab),
            n_objects,
            object_dim,
            classes: config.arch.output_dim(),
        })
    }

    fn item_rng(&self, item: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((0xB << 60) | item as u64);
        rng
    }
}

/// Where batches come from: a generated corpus or a synthetic stream.
#[derive(Debug, Clone)]
pub enum DataSource<'a> {
    Soc(&'a SocDataset),
    Physics {
        data: &'a PhysicsDataset,
        task: PhysicsTask,
    },
    Synthetic(SyntheticSpec),
}

impl DataSource<'_> {
    /// Addressable item count. Sort-of-CLEVR items are (scene,
    /// question) pairs; physics items are scenes.
    pub fn len(&self) -> usize {
        match self {
            DataSource::Soc(d) => d.records.len() * QUESTIONS_PER_SCENE,
            DataSource::Physics { data, .. } => data.records.len(),
            DataSource::Synthetic(s) => s.count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            DataSource::Soc(_) => Task::Soc,
            DataSource::Physics { task, .. } => match task {
                PhysicsTask::InferConnections => Task::PhysicsPairs,
                PhysicsTask::CountSystems => Task::PhysicsCount,
            },
            DataSource::Synthetic(s) => s.task,
        }
    }

    /// Pack the given items, in order, into one batch.
    pub fn batch<S: Scalar>(&self, items: &[usize]) -> Result<Batch<S>> {
        if items.is_empty() {
            return Err(Error::Config("cannot build an empty batch".into()));
        }
        if let Some(&bad) = items.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Config(format!(
                "item {bad} out of range for a corpus of {}",
                self.len()
            )));
        }
        match self {
            DataSource::Soc(d) => soc_batch(d, items),
            DataSource::Physics { data, task } => physics_batch(data, *task, items),
            DataSource::Synthetic(s) => synthetic_batch(s, items),
        }
    }
}

fn soc_batch<S: Scalar>(d: &SocDataset, items: &[usize]) -> Result<Batch<S>> {
    let b = items.len();
    let plane = 3 * SOC_CANVAS * SOC_CANVAS;
    let mut images = Vec::with_capacity(b * plane);
    let mut questions = Vec::with_capacity(b * crate::datasets::soc::QUESTION_BITS);
    let mut targets = Vec::with_capacity(b);
    let mut kinds = Vec::with_capacity(b);
    for &item in items {
        let rec = &d.records[item / QUESTIONS_PER_SCENE];
        let (q, a) = &rec.questions[item % QUESTIONS_PER_SCENE];
        images.extend(rec.image.iter().map(|&v| S::from_f64(v as f64 / 255.0)));
        let bits = q.encode()?;
        questions.extend(bits.iter().map(|&v| S::from_f64(v as f64)));
        targets.push(a.index());
        kinds.push((q.relational, q.subtype));
    }
    Ok(Batch::Soc {
        images: Tensor::new(vec![b, 3, SOC_CANVAS, SOC_CANVAS], images)?,
        questions: Tensor::new(vec![b, crate::datasets::soc::QUESTION_BITS], questions)?,
        targets,
        kinds,
    })
}

fn physics_batch<S: Scalar>(
    d: &PhysicsDataset,
    task: PhysicsTask,
    items: &[usize],
) -> Result<Batch<S>> {
    let b = items.len();
    let features = crate::datasets::physics::ball_features(d.n_frames);
    let mut objects = Vec::with_capacity(b * d.n_balls * features);
    match task {
        PhysicsTask::InferConnections => {
            let mut targets = Vec::with_capacity(b * d.n_balls * d.n_balls);
            for &item in items {
                let scene = &d.records[item];
                objects.extend(scene.trajectory.iter().map(|&v| S::from_f64(v)));
                targets.extend(scene.adjacency.iter().map(|&v| S::from_f64(v as f64)));
            }
            Ok(Batch::PhysicsPairs {
                objects: Tensor::new(vec![b, d.n_balls, features], objects)?,
                targets: Tensor::new(vec![b, d.n_balls * d.n_balls], targets)?,
            })
        }
        PhysicsTask::CountSystems => {
            let mut targets = Vec::with_capacity(b);
            for &item in items {
                let scene = &d.records[item];
                objects.extend(scene.trajectory.iter().map(|&v| S::from_f64(v)));
                targets.push(scene.system_count - 1);
            }
            Ok(Batch::PhysicsCount {
                objects: Tensor::new(vec![b, d.n_balls, features], objects)?,
                targets,
            })
        }
    }
}

fn tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

fn synthetic_batch<S: Scalar>(spec: &SyntheticSpec, items: &[usize]) -> Result<Batch<S>> {
    let b = items.len();
    match spec.task {
        Task::ClevrPixels => {
            let plane = 3 * spec.input_side * spec.input_side;
            let mut images = Vec::with_capacity(b * plane);
            let mut questions = Vec::with_capacity(b);
            let mut targets = Vec::with_capacity(b);
            for &item in items {
                let mut rng = spec.item_rng(item);
                images.extend((0..plane).map(|_| S::from_f64(rng.gen::<f64>())));
                let len = rng.gen_range(4..=10);
                questions.push(tokens(&mut rng, spec.question_vocab, len));
                targets.push(rng.gen_range(0..spec.classes));
            }
            Ok(Batch::ClevrPixels {
                images: Tensor::new(vec![b, 3, spec.input_side, spec.input_side], images)?,
                questions,
                targets,
            })
        }
        Task::ClevrState => {
            let width = spec.n_objects * spec.object_dim;
            let mut objects = Vec::with_capacity(b * width);
            let mut questions = Vec::with_capacity(b);
            let mut targets = Vec::with_capacity(b);
            for &item in items {
                let mut rng = spec.item_rng(item);
                objects.extend((0..width).map(|_| S::from_f64(rng.gen::<f64>())));
                let len = rng.gen_range(4..=10);
                questions.push(tokens(&mut rng, spec.question_vocab, len));
                targets.push(rng.gen_range(0..spec.classes));
            }
            Ok(Batch::ClevrState {
                objects: Tensor::new(vec![b, spec.n_objects, spec.object_dim], objects)?,
                questions,
                targets,
            })
        }
        Task::Babi => {
            let mut stories = Vec::with_capacity(b);
            let mut questions = Vec::with_capacity(b);
            let mut targets = Vec::with_capacity(b);
            for &item in items {
                let mut rng = spec.item_rng(item);
                let sentences = rng.gen_range(2..=spec.n_objects);
                stories.push(
                    (0..sentences)
                        .map(|_| tokens(&mut rng, spec.sentence_vocab, 5))
                        .collect(),
                );
                questions.push(tokens(&mut rng, spec.question_vocab, 4));
                targets.push(rng.gen_range(0..spec.classes));
            }
            Ok(Batch::Babi {
                stories,
                questions,
                targets,
            })
        }
        other => Err(Error::Config(format!(
            "no synthetic stream for task {}",
            other.name()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::physics::gen_physics_dataset;
    use crate::datasets::soc::gen_soc_dataset;
    use crate::datasets::Split;
    use crate::trainer::presets::build_model;

    #[test]
    fn soc_batch_shapes_and_targets() {
        let d = gen_soc_dataset(5, Split::Train, 3).unwrap();
        let src = DataSource::Soc(&d);
        assert_eq!(src.len(), 60);
        let batch: Batch<f64> = src.batch(&[0, 20, 59]).unwrap();
        let Batch::Soc {
            images,
            questions,
            targets,
            kinds,
        } = &batch
        else {
            panic!("wrong variant")
        };
        assert_eq!(images.shape(), &[3, 3, 75, 75]);
        assert_eq!(questions.shape(), &[3, 11]);
        assert_eq!(targets.len(), 3);
        assert_eq!(kinds.len(), 3);
        assert!(targets.iter().all(|&t| t < 12));
        // Pixel values live in [0, 1].
        assert!(images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Item 20 is scene 1, question 0; its half-and-half layout means
        // the first ten questions are non-relational.
        assert!(!kinds[1].0);
    }

    #[test]
    fn physics_batches_for_both_tasks() {
        let d = gen_physics_dataset(5, Split::Train, 4, 6, 16);
        let pairs = DataSource::Physics {
            data: &d,
            task: PhysicsTask::InferConnections,
        };
        let batch: Batch<f64> = pairs.batch(&[0, 3]).unwrap();
        let Batch::PhysicsPairs { objects, targets } = &batch else {
            panic!("wrong variant")
        };
        assert_eq!(objects.shape(), &[2, 6, 33]);
        assert_eq!(targets.shape(), &[2, 36]);
        assert!(targets.iter().all(|&v| v == 0.0 || v == 1.0));

        let counts = DataSource::Physics {
            data: &d,
            task: PhysicsTask::CountSystems,
        };
        let batch: Batch<f64> = counts.batch(&[1]).unwrap();
        let Batch::PhysicsCount { targets, .. } = &batch else {
            panic!("wrong variant")
        };
        assert_eq!(targets, &[d.records[1].system_count - 1]);
    }

    #[test]
    fn out_of_range_item_is_rejected() {
        let d = gen_physics_dataset(5, Split::Train, 2, 6, 16);
        let src = DataSource::Physics {
            data: &d,
            task: PhysicsTask::InferConnections,
        };
        assert!(src.batch::<f64>(&[2]).is_err());
        assert!(src.batch::<f64>(&[]).is_err());
    }

    #[test]
    fn synthetic_batches_are_reproducible_and_item_addressed() {
        for preset in ["clevr-pixels", "clevr-state", "babi"] {
            let m = build_model(preset).unwrap();
            let spec = SyntheticSpec::for_model(&m, 50, 9).unwrap();
            let src = DataSource::Synthetic(spec);
            let a: Batch<f64> = src.batch(&[0, 7, 41]).unwrap();
            let b: Batch<f64> = src.batch(&[0, 7, 41]).unwrap();
            match (&a, &b) {
                (
                    Batch::ClevrPixels {
                        images: ia,
                        questions: qa,
                        targets: ta,
                    },
                    Batch::ClevrPixels {
                        images: ib,
                        questions: qb,
                        targets: tb,
                    },
                ) => {
                    assert_eq!(ia, ib);
                    assert_eq!(qa, qb);
                    assert_eq!(ta, tb);
                    assert_eq!(ia.shape(), &[3, 3, 128, 128]);
                }
                (
                    Batch::ClevrState { objects: oa, .. },
                    Batch::ClevrState { objects: ob, .. },
                ) => {
                    assert_eq!(oa, ob);
                    assert_eq!(oa.shape(), &[3, STATE_OBJECTS, 13]);
                }
                (
                    Batch::Babi {
                        stories: sa,
                        targets: ta,
                        ..
                    },
                    Batch::Babi {
                        stories: sb,
                        targets: tb,
                        ..
                    },
                ) => {
                    assert_eq!(sa, sb);
                    assert_eq!(ta, tb);
                    assert!(sa.iter().all(|s| (2..=8).contains(&s.len())));
                    assert!(ta.iter().all(|&t| t < 159));
                }
                _ => panic!("mismatched variants"),
            }
        }
    }
}
