//! Named model configurations and the parameter-count bookkeeping used
//! to build size-matched MLP baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::perception::{
    cnn_params, text_encoder_params, CnnConfig, CnnLayer, StateEncoders, TextEncoderConfig,
};
use crate::relnet::{count_relation_params, rn_params, RnConfig};
use crate::scalar::Scalar;

use super::model::mlp_params;

/// What a model consumes and predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Sort-of-CLEVR images + binary questions → 12-way answer.
    Soc,
    /// Ball trajectories → per-pair connection logits.
    PhysicsPairs,
    /// Ball trajectories → system-count class.
    PhysicsCount,
    /// CLEVR-style images + token questions → answer class.
    ClevrPixels,
    /// CLEVR-style state matrices + token questions → answer class.
    ClevrState,
    /// Story sentences + token question → answer class.
    Babi,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Soc => "soc",
            Task::PhysicsPairs => "physics-pairs",
            Task::PhysicsCount => "physics-count",
            Task::ClevrPixels => "clevr-pixels",
            Task::ClevrState => "clevr-state",
            Task::Babi => "babi",
        }
    }
}

/// A plain MLP head consuming the whole flattened object set at once —
/// the ablation the relation module is compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpArch {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
    pub output_dim: usize,
    /// Object count the input width was derived from.
    pub n_objects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    Relation(RnConfig),
    Mlp(MlpArch),
}

impl Arch {
    pub fn output_dim(&self) -> usize {
        match self {
            Arch::Relation(rn) => rn.output_dim,
            Arch::Mlp(mlp) => mlp.output_dim,
        }
    }

    /// Trainable parameter count of the head alone (excluding any
    /// perception front-end), by the (in+1)·out closed form.
    pub fn param_count(&self) -> usize {
        match self {
            Arch::Relation(rn) => {
                let (g, f) = count_relation_params(rn);
                g + f
            }
            Arch::Mlp(mlp) => affine_chain_count(mlp.input_width, &mlp.hidden, mlp.output_dim),
        }
    }
}

/// Dense chain cost: widths in order, plus the final linear head.
pub fn affine_chain_count(input: usize, hidden: &[usize], output: usize) -> usize {
    let mut total = 0;
    let mut w = input;
    for &h in hidden {
        total += (w + 1) * h;
        w = h;
    }
    total + (w + 1) * output
}

/// One named, shape-consistent model: optional perception front-ends
/// plus the relation (or baseline MLP) core and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    pub task: Task,
    pub cnn: Option<CnnConfig>,
    /// Input image side when a tower is present.
    pub input_side: usize,
    pub question_text: Option<TextEncoderConfig>,
    pub sentence_text: Option<TextEncoderConfig>,
    pub arch: Arch,
    pub adam: AdamConfig,
    pub batch: usize,
}

pub const PRESETS: [&str; 7] = [
    "clevr-pixels",
    "clevr-state",
    "soc",
    "soc-small",
    "babi",
    "physics",
    "physics-small",
];

/// Stand-in vocabulary sizes for the text tasks (the real corpora are
/// out of scope; smoke runs use synthetic token streams).
pub const CLEVR_VOCAB: usize = 90;
pub const CLEVR_ANSWERS: usize = 29;
pub const BABI_VOCAB: usize = 50;
pub const BABI_ANSWERS: usize = 159;
/// Object count for the synthetic state-description batches.
pub const STATE_OBJECTS: usize = 12;
/// Support-set size for the synthetic story batches.
pub const BABI_STORY_SENTENCES: usize = 8;

fn conv(ch: usize, stride: usize) -> CnnLayer {
    CnnLayer {
        out_channels: ch,
        kernel: 3,
        stride,
        pad: 1,
        batchnorm: true,
    }
}

pub fn build_model(preset: &str) -> Result<ModelConfig> {
    let model = match preset {
        "clevr-pixels" => {
            let cnn = CnnConfig::clevr_pixels();
            let question = TextEncoderConfig {
                vocab: CLEVR_VOCAB,
                embed_dim: 32,
                hidden: 128,
            };
            ModelConfig {
                preset: preset.into(),
                task: Task::ClevrPixels,
                arch: Arch::Relation(RnConfig {
                    object_dim: cnn.out_channels() + 2,
                    question_dim: question.hidden,
                    g_layers: vec![256; 4],
                    f_layers: vec![256, 256],
                    f_dropout: vec![0.0, 0.5],
                    output_dim: CLEVR_ANSWERS,
                }),
                cnn: Some(cnn),
                input_side: 128,
                question_text: Some(question),
                sentence_text: None,
                adam: AdamConfig::with_lr(2.5e-4),
                batch: 64,
            }
        }
        "clevr-state" => {
            let question = TextEncoderConfig {
                vocab: CLEVR_VOCAB,
                embed_dim: 32,
                hidden: 256,
            };
            ModelConfig {
                preset: preset.into(),
                task: Task::ClevrState,
                cnn: None,
                input_side: 0,
                arch: Arch::Relation(RnConfig {
                    object_dim: StateEncoders::default().object_dim(),
                    question_dim: question.hidden,
                    g_layers: vec![512; 4],
                    f_layers: vec![512, 1024],
                    f_dropout: vec![0.0, 0.02],
                    output_dim: CLEVR_ANSWERS,
                }),
                question_text: Some(question),
                sentence_text: None,
                adam: AdamConfig::with_lr(1e-4),
                batch: 64,
            }
        }
        "soc" => {
            let cnn = CnnConfig::sort_of_clevr();
            ModelConfig {
                preset: preset.into(),
                task: Task::Soc,
                arch: Arch::Relation(RnConfig {
                    object_dim: cnn.out_channels() + 2,
                    question_dim: crate::datasets::soc::QUESTION_BITS,
                    g_layers: vec![2000; 4],
                    f_layers: vec![2000, 1000, 500, 100],
                    f_dropout: vec![0.0; 4],
                    output_dim: crate::datasets::soc::ANSWER_VOCAB,
                }),
                cnn: Some(cnn),
                input_side: crate::datasets::soc::SOC_CANVAS,
                question_text: None,
                sentence_text: None,
                adam: AdamConfig::with_lr(1e-4),
                batch: 64,
            }
        }
        // Desk-scale variant: channels quartered, strides widened so the
        // feature map lands at 3×3 (81 pairs instead of 625), and the
        // relation stack shrunk until a full step fits a single CPU core.
        "soc-small" => {
            let cnn = CnnConfig {
                in_channels: 3,
                layers: vec![conv(8, 3), conv(16, 2), conv(32, 2), conv(64, 3)],
            };
            ModelConfig {
                preset: preset.into(),
                task: Task::Soc,
                arch: Arch::Relation(RnConfig {
                    object_dim: cnn.out_channels() + 2,
                    question_dim: crate::datasets::soc::QUESTION_BITS,
                    g_layers: vec![256; 4],
                    f_layers: vec![256, 128, 64, 25],
                    f_dropout: vec![0.0; 4],
                    output_dim: crate::datasets::soc::ANSWER_VOCAB,
                }),
                cnn: Some(cnn),
                input_side: crate::datasets::soc::SOC_CANVAS,
                question_text: None,
                sentence_text: None,
                adam: AdamConfig::with_lr(1e-4),
                batch: 64,
            }
        }
        "babi" => {
            let question = TextEncoderConfig {
                vocab: BABI_VOCAB,
                embed_dim: 32,
                hidden: 32,
            };
            let sentence = question.clone();
            ModelConfig {
                preset: preset.into(),
                task: Task::Babi,
                cnn: None,
                input_side: 0,
                arch: Arch::Relation(RnConfig {
                    object_dim: sentence.hidden + crate::perception::MAX_SENTENCES,
                    question_dim: question.hidden,
                    g_layers: vec![256; 4],
                    f_layers: vec![256, 512],
                    f_dropout: vec![0.0, 0.0],
                    output_dim: BABI_ANSWERS,
                }),
                question_text: Some(question),
                sentence_text: Some(sentence),
                adam: AdamConfig::with_lr(2e-4),
                batch: 64,
            }
        }
        "physics" => physics_model(preset, vec![1000, 1000, 1000, 500], vec![500, 100], 10),
        "physics-small" => physics_model(preset, vec![250, 250, 250, 125], vec![125, 25], 10),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    model.validate()?;
    Ok(model)
}

fn physics_model(preset: &str, g: Vec<usize>, f: Vec<usize>, n_balls: usize) -> ModelConfig {
    let f_len = f.len();
    ModelConfig {
        preset: preset.into(),
        task: Task::PhysicsPairs,
        cnn: None,
        input_side: 0,
        arch: Arch::Relation(RnConfig {
            object_dim: crate::datasets::physics::BALL_FEATURES,
            question_dim: 0,
            g_layers: g,
            f_layers: f,
            f_dropout: vec![0.0; f_len],
            output_dim: n_balls * n_balls,
        }),
        question_text: None,
        sentence_text: None,
        adam: AdamConfig::with_lr(1e-4),
        batch: 50,
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(cnn) = &self.cnn {
            cnn.validate()?;
            let side = cnn.output_side(self.input_side)?;
            let expect = cnn.out_channels() + 2;
            let object_dim = match &self.arch {
                Arch::Relation(rn) => rn.object_dim,
                Arch::Mlp(mlp) => {
                    if mlp.n_objects != side * side {
                        return Err(Error::Config(format!(
                            "baseline expects {} objects, tower yields {}",
                            mlp.n_objects,
                            side * side
                        )));
                    }
                    mlp.input_width.saturating_sub(question_dim_of(self)) / mlp.n_objects
                }
            };
            if object_dim != expect {
                return Err(Error::Config(format!(
                    "tower produces {expect}-wide objects, head expects {object_dim}"
                )));
            }
        }
        if let Some(t) = &self.question_text {
            t.validate()?;
        }
        if let Some(t) = &self.sentence_text {
            t.validate()?;
        }
        if let Arch::Relation(rn) = &self.arch {
            rn.validate()?;
            if let Some(q) = &self.question_text {
                if rn.question_dim != q.hidden {
                    return Err(Error::Config(format!(
                        "question encoder emits {} features, relation head expects {}",
                        q.hidden, rn.question_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rn(&self) -> Option<&RnConfig> {
        match &self.arch {
            Arch::Relation(rn) => Some(rn),
            Arch::Mlp(_) => None,
        }
    }

    /// Switch a physics model between the pair head and the count head.
    pub fn with_physics_task(mut self, task: Task, n_balls: usize) -> Result<Self> {
        let output = match task {
            Task::PhysicsPairs => n_balls * n_balls,
            Task::PhysicsCount => n_balls,
            other => {
                return Err(Error::Config(format!(
                    "{} is not a physics task",
                    other.name()
                )))
            }
        };
        self.task = task;
        match &mut self.arch {
            Arch::Relation(rn) => rn.output_dim = output,
            Arch::Mlp(mlp) => mlp.output_dim = output,
        }
        self.validate()?;
        Ok(self)
    }

    /// Initialize every parameter this model trains (and the batch-norm
    /// running buffers) from one seed.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> Result<ParamSet<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        if let Some(cnn) = &self.cnn {
            absorb(&mut params, cnn_params(cnn, &mut rng)?)?;
        }
        if let Some(q) = &self.question_text {
            text_encoder_params("question", q, &mut rng, &mut params)?;
        }
        if let Some(s) = &self.sentence_text {
            text_encoder_params("sentence", s, &mut rng, &mut params)?;
        }
        match &self.arch {
            Arch::Relation(rn) => absorb(&mut params, rn_params(rn, &mut rng)?)?,
            Arch::Mlp(mlp) => absorb(&mut params, mlp_params(mlp, &mut rng)?)?,
        }
        Ok(params)
    }

    /// Total trainable scalar count, by the closed form.
    pub fn param_count(&self) -> usize {
        let mut total = self.arch.param_count();
        if let Some(cnn) = &self.cnn {
            let mut c = cnn.in_channels;
            for l in &cnn.layers {
                total += l.out_channels * (c * l.kernel * l.kernel + 1);
                if l.batchnorm {
                    total += 2 * l.out_channels;
                }
                c = l.out_channels;
            }
        }
        for t in [&self.question_text, &self.sentence_text].into_iter().flatten() {
            total += t.vocab * t.embed_dim;
            total += (t.embed_dim + t.hidden + 1) * 4 * t.hidden;
        }
        total
    }
}

fn question_dim_of(config: &ModelConfig) -> usize {
    match &config.arch {
        Arch::Relation(rn) => rn.question_dim,
        Arch::Mlp(_) => match (&config.question_text, config.task) {
            (Some(t), _) => t.hidden,
            (None, Task::Soc) => crate::datasets::soc::QUESTION_BITS,
            (None, _) => 0,
        },
    }
}

fn absorb<S: Scalar>(dst: &mut ParamSet<S>, src: ParamSet<S>) -> Result<()> {
    for (name, value, trainable) in src.iter() {
        dst.insert(name, value.clone(), trainable)?;
    }
    Ok(())
}

/// Replace the relation core with a same-depth MLP over the full
/// concatenated object set. For the physics tasks the widths are then
/// rescaled so the baseline lands within ±10% of the relation model's
/// parameter count; elsewhere the widths are kept identical (the
/// baseline is deliberately larger, since its first layer sees every
/// object at once).
pub fn build_baseline_mlp(config: &ModelConfig, n_objects: usize) -> Result<ModelConfig> {
    let rn = config
        .rn()
        .ok_or_else(|| Error::Config("baseline must be derived from a relation model".into()))?;
    let mut hidden: Vec<usize> = rn.g_layers.clone();
    hidden.extend(&rn.f_layers);
    let input_width = n_objects * rn.object_dim + rn.question_dim;
    if matches!(config.task, Task::PhysicsPairs | Task::PhysicsCount) {
        let target = config.param_count();
        hidden = match_widths(target, input_width, &hidden, rn.output_dim)?;
    }
    let mut out = config.clone();
    out.preset = format!("{}-mlp", config.preset);
    out.arch = Arch::Mlp(MlpArch {
        input_width,
        hidden,
        dropout: vec![0.0; rn.g_layers.len() + rn.f_layers.len()],
        output_dim: rn.output_dim,
        n_objects,
    });
    out.validate()?;
    Ok(out)
}

/// Scale a width profile by a common factor so the resulting dense
/// chain parameter count lands within ±10% of `target`.
fn match_widths(
    target: usize,
    input: usize,
    widths: &[usize],
    output: usize,
) -> Result<Vec<usize>> {
    let scaled = |a: f64| -> Vec<usize> {
        widths
            .iter()
            .map(|&w| ((w as f64 * a).round() as usize).max(1))
            .collect()
    };
    let mut best: Option<(usize, Vec<usize>)> = None;
    for i in 1..=4000 {
        let ws = scaled(i as f64 / 1000.0);
        let count = affine_chain_count(input, &ws, output);
        let err = count.abs_diff(target);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, ws));
        }
    }
    let (err, ws) = best.expect("non-empty scale sweep");
    if err * 10 > target {
        return Err(Error::Config(format!(
            "cannot match {target} parameters within 10% (best miss {err})"
        )));
    }
    Ok(ws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_builds_and_validates() {
        for name in PRESETS {
            let m = build_model(name).unwrap();
            assert_eq!(m.preset, name);
        }
    }

    #[test]
    fn unknown_preset_lists_the_catalog() {
        let err = build_model("socc").unwrap_err().to_string();
        for name in PRESETS {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn clevr_pixels_head_width_is_29() {
        let m = build_model("clevr-pixels").unwrap();
        assert_eq!(m.arch.output_dim(), 29);
        assert_eq!(m.adam.lr, 2.5e-4);
        assert_eq!(m.batch, 64);
    }

    #[test]
    fn babi_head_width_is_159() {
        let m = build_model("babi").unwrap();
        assert_eq!(m.arch.output_dim(), 159);
        assert_eq!(m.adam.lr, 2e-4);
    }

    #[test]
    fn physics_batch_is_50() {
        let m = build_model("physics").unwrap();
        assert_eq!(m.batch, 50);
        assert_eq!(m.arch.output_dim(), 100);
        let count = m.with_physics_task(Task::PhysicsCount, 10).unwrap();
        assert_eq!(count.arch.output_dim(), 10);
    }

    #[test]
    fn closed_form_count_matches_initialized_params() {
        for name in ["soc-small", "physics-small", "babi"] {
            let m = build_model(name).unwrap();
            let params: ParamSet<f64> = m.init_params(1).unwrap();
            assert_eq!(m.param_count(), params.trainable_count(), "{name}");
        }
    }

    #[test]
    fn physics_baseline_matches_param_count_within_ten_percent() {
        let m = build_model("physics-small")
            .unwrap()
            .with_physics_task(Task::PhysicsPairs, 6)
            .unwrap();
        let baseline = build_baseline_mlp(&m, 6).unwrap();
        let (rn, mlp) = (m.param_count() as f64, baseline.param_count() as f64);
        assert!(
            (rn - mlp).abs() / rn <= 0.10,
            "relation {rn} vs baseline {mlp}"
        );
    }

    #[test]
    fn baseline_first_layer_grows_with_object_count() {
        // State inputs put no constraint on n, unlike a tower whose
        // output grid fixes the object count.
        let m = build_model("clevr-state").unwrap();
        let rn = m.rn().unwrap();
        let g_first = (rn.pair_width() + 1) * rn.g_layers[0];
        let mut last = 0;
        for n in [2, 6, 10, 25] {
            let b = build_baseline_mlp(&m, n).unwrap();
            let Arch::Mlp(mlp) = &b.arch else { unreachable!() };
            let first = (mlp.input_width + 1) * mlp.hidden[0];
            assert!(first > last, "n={n}: {first} vs previous {last}");
            last = first;
        }
        // The relation core's first layer never moves.
        for _ in 0..3 {
            assert_eq!((rn.pair_width() + 1) * rn.g_layers[0], g_first);
        }
    }

    #[test]
    fn soc_baseline_matches_the_tower_grid() {
        let m = build_model("soc-small").unwrap();
        let b = build_baseline_mlp(&m, 9).unwrap();
        let Arch::Mlp(mlp) = &b.arch else { unreachable!() };
        assert_eq!(mlp.input_width, 9 * 66 + 11);
        assert_eq!(mlp.hidden, vec![256, 256, 256, 256, 256, 128, 64, 25]);
        // A mismatched object count is caught at build time.
        assert!(build_baseline_mlp(&m, 4).is_err());
    }

    #[test]
    fn soc_small_tower_lands_on_three_by_three() {
        let m = build_model("soc-small").unwrap();
        let cnn = m.cnn.as_ref().unwrap();
        assert_eq!(cnn.output_side(75).unwrap(), 3);
        assert_eq!(m.rn().unwrap().object_dim, 66);
    }
}
