//! Front-ends that turn raw inputs into [`ObjectSet`]s and
//! [`QuestionEmbedding`]s: a strided CNN tower over pixel grids whose
//! final-layer cells become coordinate-tagged objects, an LSTM text
//! encoder for questions, a shared per-sentence LSTM for support sets,
//! and a pass-through encoder for factored state descriptions.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{LstmWeights, RunningStats};
use crate::params::ParamSet;
use crate::relnet::{ObjectSet, QuestionEmbedding};
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, ValueId};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// CNN tower

/// One convolutional stage: symmetric zero-padding, strided valid
/// convolution, optional batch normalization, ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub batchnorm: bool,
}

/// A stack of [`CnnLayer`]s over a fixed input channel count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub layers: Vec<CnnLayer>,
}

impl CnnConfig {
    /// Four 24-channel 3×3 stride-2 pad-1 layers with batch norm:
    /// 128×128 images come out as 24 maps of side 8.
    pub fn clevr_pixels() -> Self {
        CnnConfig {
            in_channels: 3,
            layers: (0..4)
                .map(|_| CnnLayer {
                    out_channels: 24,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                    batchnorm: true,
                })
                .collect(),
        }
    }

    /// Widening 32/64/128/256 tower, same 3×3 stride-2 pad-1 geometry:
    /// 75×75 images come out as 256 maps of side 5 (75→38→19→10→5).
    pub fn sort_of_clevr() -> Self {
        CnnConfig {
            in_channels: 3,
            layers: [32, 64, 128, 256]
                .into_iter()
                .map(|out_channels| CnnLayer {
                    out_channels,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                    batchnorm: true,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.layers.is_empty() {
            return Err(Error::Config(
                "cnn tower needs at least one input channel and one layer".into(),
            ));
        }
        for l in &self.layers {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::Config(
                    "cnn layer channels, kernel, and stride must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Channel count of the final layer.
    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    /// Closed-form spatial side after the whole stack:
    /// each layer maps s to `(s + 2·pad − kernel)/stride + 1`.
    pub fn output_side(&self, mut side: usize) -> Result<usize> {
        self.validate()?;
        for (i, l) in self.layers.iter().enumerate() {
            let padded = side + 2 * l.pad;
            if padded < l.kernel {
                return Err(Error::Config(format!(
                    "cnn layer {i} reduces side {side} below 1 (kernel {} exceeds padded side {padded})",
                    l.kernel
                )));
            }
            side = (padded - l.kernel) / l.stride + 1;
        }
        Ok(side)
    }
}

/// Final activations of the tower: `k` channel maps of side `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S> {
    values: Tensor<S>,
}

impl<S: Scalar> FeatureMap<S> {
    /// Wrap a `[k, d, d]` activation block.
    pub fn new(values: Tensor<S>) -> Result<Self> {
        let s = values.shape();
        if values.rank() != 3 || s[1] != s[2] || s[1] == 0 || s[0] == 0 {
            return Err(Error::Dimension {
                op: "feature_map",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        Ok(FeatureMap { values })
    }

    pub fn k(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }
}

/// Fresh parameters for a tower: `cnn<i>.k`/`.b` plus
/// `cnn<i>.gamma`/`.beta` and running-stat buffers for batch-norm
/// layers.
pub fn cnn_params<S: Scalar>(config: &CnnConfig, rng: &mut impl Rng) -> Result<ParamSet<S>> {
    config.validate()?;
    let mut ps = ParamSet::new();
    let mut c = config.in_channels;
    for (i, l) in config.layers.iter().enumerate() {
        ps.insert_conv(&format!("cnn{i}"), l.out_channels, c, l.kernel, rng)?;
        if l.batchnorm {
            ps.insert_batchnorm(&format!("cnn{i}"), l.out_channels)?;
        }
        c = l.out_channels;
    }
    Ok(ps)
}

/// Pull the tower's running batch-norm statistics out of a parameter
/// set (one entry per layer; identity stats for non-BN layers).
pub fn cnn_stats_from_params<S: Scalar>(
    config: &CnnConfig,
    params: &ParamSet<S>,
) -> Result<Vec<RunningStats<S>>> {
    let mut stats = Vec::with_capacity(config.layers.len());
    for (i, l) in config.layers.iter().enumerate() {
        let mut rs = RunningStats::new(l.out_channels);
        if l.batchnorm {
            rs.mean
                .copy_from_slice(params.get(&format!("cnn{i}.running_mean"))?.data());
            rs.var
                .copy_from_slice(params.get(&format!("cnn{i}.running_var"))?.data());
        }
        stats.push(rs);
    }
    Ok(stats)
}

/// Write running statistics back into the parameter-set buffers so
/// checkpoints capture them.
pub fn cnn_stats_into_params<S: Scalar>(
    config: &CnnConfig,
    stats: &[RunningStats<S>],
    params: &mut ParamSet<S>,
) -> Result<()> {
    for (i, l) in config.layers.iter().enumerate() {
        if !l.batchnorm {
            continue;
        }
        let rs = stats
            .get(i)
            .ok_or_else(|| Error::Config(format!("missing running stats for cnn layer {i}")))?;
        *params.get_mut(&format!("cnn{i}.running_mean"))? =
            Tensor::new(vec![l.out_channels], rs.mean.clone())?;
        *params.get_mut(&format!("cnn{i}.running_var"))? =
            Tensor::new(vec![l.out_channels], rs.var.clone())?;
    }
    Ok(())
}

/// Per-layer batch statistics observed during one training forward
/// pass, for the caller to fold into running statistics (directly, or
/// after averaging across data-parallel workers).
#[derive(Debug, Clone, PartialEq)]
pub struct TowerBatchStats<S> {
    pub layer: usize,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Build the tower on a tape over a batch `[b, c, h, w]`. Returns the
/// final activations `[b, k, d, d]` plus, in train mode, the batch
/// statistics of every batch-norm layer (running stats are read in
/// eval mode and never written here).
pub fn cnn_tower_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: ValueId,
    config: &CnnConfig,
    ids: &HashMap<String, ValueId>,
    stats: &[RunningStats<S>],
    mode: Mode,
) -> Result<(ValueId, Vec<TowerBatchStats<S>>)> {
    config.validate()?;
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != config.in_channels {
        return Err(Error::Config(format!(
            "tower input has shape {shape:?}, model expects [batch, {}, h, w]",
            config.in_channels
        )));
    }
    let side = tape.value(x).shape()[2];
    if tape.value(x).shape()[3] != side {
        return Err(Error::Config(format!(
            "tower input must be square, got {shape:?}"
        )));
    }
    config.output_side(side)?; // rejects stacks that collapse below 1
    let param = |name: String| -> Result<ValueId> {
        ids.get(&name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter node {name:?}")))
    };
    let mut cur = x;
    let mut batch_stats = Vec::new();
    for (i, l) in config.layers.iter().enumerate() {
        if l.pad > 0 {
            cur = tape.pad2d(cur, l.pad)?;
        }
        let k = param(format!("cnn{i}.k"))?;
        let b = param(format!("cnn{i}.b"))?;
        cur = tape.conv2d(cur, k, b, l.stride)?;
        if l.batchnorm {
            let gamma = param(format!("cnn{i}.gamma"))?;
            let beta = param(format!("cnn{i}.beta"))?;
            cur = match mode {
                Mode::Train => {
                    let (id, mean, var) = tape.batchnorm_train(cur, gamma, beta)?;
                    batch_stats.push(TowerBatchStats {
                        layer: i,
                        mean,
                        var,
                    });
                    id
                }
                Mode::Eval => {
                    let rs = stats.get(i).ok_or_else(|| {
                        Error::Config(format!("missing running stats for cnn layer {i}"))
                    })?;
                    tape.batchnorm_eval(cur, gamma, beta, &rs.mean, &rs.var)?
                }
            };
        }
        cur = tape.relu(cur);
    }
    Ok((cur, batch_stats))
}

/// Run one image `[c, h, w]` through the tower in eval mode.
pub fn cnn_tower<S: Scalar>(
    image: &Tensor<S>,
    config: &CnnConfig,
    params: &ParamSet<S>,
) -> Result<FeatureMap<S>> {
    if image.rank() != 3 {
        return Err(Error::Dimension {
            op: "cnn_tower",
            lhs: image.shape().to_vec(),
            rhs: vec![config.in_channels, 0, 0],
        });
    }
    let stats = cnn_stats_from_params(config, params)?;
    let mut tape = Tape::new();
    let shape = image.shape().to_vec();
    let x = tape.constant(
        image
            .clone()
            .reshaped(vec![1, shape[0], shape[1], shape[2]])
            .expect("adding a unit batch axis preserves element count"),
    );
    let ids = constant_params(&mut tape, params);
    let (out, _) = cnn_tower_on_tape(&mut tape, x, config, &ids, &stats, Mode::Eval)?;
    let os = tape.value(out).shape().to_vec();
    FeatureMap::new(Tensor::from_raw(
        vec![os[1], os[2], os[3]],
        tape.value(out).data().to_vec(),
    ))
}

/// One object per feature-map cell in row-major order: the k-vector at
/// (r, c) tagged with normalized coordinates `(2r/(d−1) − 1,
/// 2c/(d−1) − 1)` (both 0 when d = 1).
pub fn featuremap_to_objects<S: Scalar>(fm: &FeatureMap<S>) -> ObjectSet<S> {
    let (k, d) = (fm.k(), fm.d());
    let src = fm.values().data();
    let plane = d * d;
    let mut data = Vec::with_capacity(plane * (k + 2));
    for r in 0..d {
        for c in 0..d {
            for ch in 0..k {
                data.push(src[ch * plane + r * d + c]);
            }
            data.push(cell_coord::<S>(r, d));
            data.push(cell_coord::<S>(c, d));
        }
    }
    ObjectSet::new(Tensor::from_raw(vec![plane, k + 2], data))
        .expect("cell grid is non-empty by FeatureMap invariant")
}

fn cell_coord<S: Scalar>(i: usize, d: usize) -> S {
    if d <= 1 {
        S::zero()
    } else {
        let v = 2.0 * i as f64 / (d as f64 - 1.0) - 1.0;
        S::from_f64(v)
    }
}

// ---------------------------------------------------------------------------
// Question and sentence encoders

/// A question or sentence as vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    vocab: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        for &id in &ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, size: vocab });
            }
        }
        Ok(TokenSequence { ids, vocab })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Embedding-plus-LSTM text encoder dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "text encoder vocab, embed_dim, and hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fresh parameters under `prefix`: `<prefix>.embed` plus
/// `<prefix>.lstm.{wx,wh,b}`.
pub fn text_encoder_params<S: Scalar>(
    prefix: &str,
    config: &TextEncoderConfig,
    rng: &mut impl Rng,
    params: &mut ParamSet<S>,
) -> Result<()> {
    config.validate()?;
    params.insert(
        &format!("{prefix}.embed"),
        Tensor::rand_uniform(&[config.vocab, config.embed_dim], -0.1, 0.1, rng),
        true,
    )?;
    params.insert_lstm(&format!("{prefix}.lstm"), config.embed_dim, config.hidden, rng)
}

fn lstm_ids(
    prefix: &str,
    ids: &HashMap<String, ValueId>,
) -> Result<(ValueId, LstmWeights)> {
    let get = |name: String| -> Result<ValueId> {
        ids.get(&name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter node {name:?}")))
    };
    Ok((
        get(format!("{prefix}.embed"))?,
        LstmWeights {
            wx: get(format!("{prefix}.lstm.wx"))?,
            wh: get(format!("{prefix}.lstm.wh"))?,
            b: get(format!("{prefix}.lstm.b"))?,
        },
    ))
}

/// Run one token sequence through embedding lookups and LSTM steps
/// from a zero state; the node returned is the final hidden state
/// `[1, hidden]`.
pub fn encode_tokens_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: &[usize],
    prefix: &str,
    config: &TextEncoderConfig,
    ids: &HashMap<String, ValueId>,
) -> Result<ValueId> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(Error::Config("cannot encode an empty token sequence".into()));
    }
    let (table, lstm) = lstm_ids(prefix, ids)?;
    let mut h = tape.constant(Tensor::zeros(&[1, config.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, config.hidden]));
    for &tok in tokens {
        let x = tape.embedding_lookup(table, &[tok])?;
        let (h2, c2) = tape.lstm_step(x, h, c, &lstm)?;
        h = h2;
        c = c2;
    }
    Ok(h)
}

/// Final LSTM hidden state of a question: dropout-free, zero initial
/// state, one embedding row per token.
pub fn encode_question<S: Scalar>(
    tokens: &TokenSequence,
    config: &TextEncoderConfig,
    params: &ParamSet<S>,
) -> Result<QuestionEmbedding<S>> {
    if tokens.vocab() != config.vocab {
        return Err(Error::Config(format!(
            "token vocabulary {} does not match encoder vocabulary {}",
            tokens.vocab(),
            config.vocab
        )));
    }
    let mut tape = Tape::new();
    let ids = constant_params(&mut tape, params);
    let h = encode_tokens_on_tape(&mut tape, tokens.ids(), "question", config, &ids)?;
    QuestionEmbedding::new(Tensor::from_raw(
        vec![config.hidden],
        tape.value(h).data().to_vec(),
    ))
}

/// Hard cap on support-set size; sentence position labels are one-hot
/// of this length.
pub const MAX_SENTENCES: usize = 20;

/// Encode up to [`MAX_SENTENCES`] sentences with one shared LSTM; each
/// object is the sentence's final hidden state with its one-hot
/// position label appended, `[n, hidden + 20]`. Callers with longer
/// histories must pre-truncate to the most recent sentences.
pub fn sentences_to_objects_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    sentences: &[Vec<usize>],
    prefix: &str,
    config: &TextEncoderConfig,
    ids: &HashMap<String, ValueId>,
) -> Result<ValueId> {
    if sentences.is_empty() {
        return Err(Error::Config("support set has no sentences".into()));
    }
    if sentences.len() > MAX_SENTENCES {
        return Err(Error::Capacity {
            what: "support-set sentences",
            max: MAX_SENTENCES,
            got: sentences.len(),
        });
    }
    let mut rows = Vec::with_capacity(sentences.len());
    for (pos, sentence) in sentences.iter().enumerate() {
        let h = encode_tokens_on_tape(tape, sentence, prefix, config, ids)?;
        let mut label = vec![S::zero(); MAX_SENTENCES];
        label[pos] = S::one();
        let tag = tape.constant(Tensor::from_raw(vec![1, MAX_SENTENCES], label));
        rows.push(tape.concat_cols(&[h, tag])?);
    }
    tape.concat_rows(&rows)
}

/// Host-side wrapper over [`sentences_to_objects_on_tape`].
pub fn sentences_to_objects<S: Scalar>(
    sentences: &[TokenSequence],
    config: &TextEncoderConfig,
    params: &ParamSet<S>,
) -> Result<ObjectSet<S>> {
    let mut tape = Tape::new();
    let ids = constant_params(&mut tape, params);
    let seqs: Vec<Vec<usize>> = sentences.iter().map(|s| s.ids().to_vec()).collect();
    let out = sentences_to_objects_on_tape(&mut tape, &seqs, "sentence", config, &ids)?;
    let shape = tape.value(out).shape().to_vec();
    ObjectSet::new(Tensor::from_raw(shape, tape.value(out).data().to_vec()))
}

// ---------------------------------------------------------------------------
// State descriptions

/// One factored object row: continuous position and color, categorical
/// shape/material/size by name.
#[derive(Debug, Clone, PartialEq)]
pub struct StateObject {
    pub position: [f64; 3],
    pub color: [f64; 3],
    pub shape: String,
    pub material: String,
    pub size: String,
}

/// A scene as factored object rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateDescription {
    pub objects: Vec<StateObject>,
}

/// Category vocabularies for the one-hot blocks of
/// [`state_to_objects`]. Order defines the one-hot index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateEncoders {
    pub shapes: Vec<String>,
    pub materials: Vec<String>,
    pub sizes: Vec<String>,
}

impl Default for StateEncoders {
    fn default() -> Self {
        StateEncoders {
            shapes: ["cube", "cylinder", "sphere"].map(String::from).to_vec(),
            materials: ["rubber", "metal"].map(String::from).to_vec(),
            sizes: ["small", "large"].map(String::from).to_vec(),
        }
    }
}

impl StateEncoders {
    /// Feature width per object: 6 continuous values plus the three
    /// one-hot blocks.
    pub fn object_dim(&self) -> usize {
        6 + self.shapes.len() + self.materials.len() + self.sizes.len()
    }

    fn one_hot<S: Scalar>(
        vocab: &[String],
        value: &str,
        field: &str,
        out: &mut Vec<S>,
    ) -> Result<()> {
        let idx = vocab.iter().position(|v| v == value).ok_or_else(|| {
            Error::Config(format!(
                "unknown {field} {value:?} (expected one of {})",
                vocab.join("|")
            ))
        })?;
        for i in 0..vocab.len() {
            out.push(if i == idx { S::one() } else { S::zero() });
        }
        Ok(())
    }
}

/// One object per row: position and color pass through, categorical
/// fields expand to one-hot blocks in shape, material, size order.
pub fn state_to_objects<S: Scalar>(
    sd: &StateDescription,
    encoders: &StateEncoders,
) -> Result<ObjectSet<S>> {
    if sd.objects.is_empty() {
        return Err(Error::Config("state description has no objects".into()));
    }
    let m = encoders.object_dim();
    let mut data = Vec::with_capacity(sd.objects.len() * m);
    for obj in &sd.objects {
        for v in obj.position.iter().chain(&obj.color) {
            data.push(S::from_f64(*v));
        }
        StateEncoders::one_hot(&encoders.shapes, &obj.shape, "shape", &mut data)?;
        StateEncoders::one_hot(&encoders.materials, &obj.material, "material", &mut data)?;
        StateEncoders::one_hot(&encoders.sizes, &obj.size, "size", &mut data)?;
    }
    ObjectSet::new(Tensor::new(vec![sd.objects.len(), m], data)?)
}

/// Render a scene in the line-oriented text format: one object per
/// line, `x,y,z,r,g,b,shape,material,size`. Floats print in shortest
/// round-trip form, so parse followed by render is the identity.
pub fn scene_to_string(sd: &StateDescription) -> String {
    let mut out = String::new();
    for obj in &sd.objects {
        let [x, y, z] = obj.position;
        let [r, g, b] = obj.color;
        writeln!(
            out,
            "{x},{y},{z},{r},{g},{b},{},{},{}",
            obj.shape, obj.material, obj.size
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Parse the text scene format; `#`-prefixed lines and blank lines are
/// skipped. Errors carry the 1-based line number as the offset.
pub fn scene_from_str(text: &str) -> Result<StateDescription> {
    let mut objects = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(Error::Format {
                offset: lineno as u64 + 1,
                what: format!("expected 9 comma-separated fields, got {}", fields.len()),
            });
        }
        let mut nums = [0.0f64; 6];
        for (i, slot) in nums.iter_mut().enumerate() {
            *slot = fields[i].parse().map_err(|_| Error::Format {
                offset: lineno as u64 + 1,
                what: format!("field {} is not a number: {:?}", i + 1, fields[i]),
            })?;
        }
        objects.push(StateObject {
            position: [nums[0], nums[1], nums[2]],
            color: [nums[3], nums[4], nums[5]],
            shape: fields[6].to_string(),
            material: fields[7].to_string(),
            size: fields[8].to_string(),
        });
    }
    Ok(StateDescription { objects })
}

pub fn write_scene_file(path: impl AsRef<Path>, sd: &StateDescription) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scene_to_string(sd))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_scene_file(path: impl AsRef<Path>) -> Result<StateDescription> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    scene_from_str(&text)
}

/// Register every trainable parameter as a non-gradient constant for
/// inference-style forward passes.
pub fn constant_params<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
) -> HashMap<String, ValueId> {
    let mut ids = HashMap::new();
    for (name, value, trainable) in params.iter() {
        if trainable {
            ids.insert(name.to_string(), tape.constant(value.clone()));
        }
    }
    ids
}
