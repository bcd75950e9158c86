//! Sort-of-CLEVR: 75×75 scenes of six uniquely colored squares and
//! circles, 11-bit questions, and a 12-token answer vocabulary. The
//! generator rejection-samples placements until every question has a
//! unique, margin-separated answer, so the oracle never ties.

use rand::Rng;

use crate::datasets::{scene_rng, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Canvas side in pixels.
pub const SOC_CANVAS: usize = 75;
/// Half the canvas; the left/right and top/bottom threshold.
pub const SOC_MID: f64 = 37.5;
/// Filled-square side.
pub const SQUARE_SIDE: usize = 10;
/// Filled-circle radius.
pub const CIRCLE_RADIUS: usize = 5;
/// Minimum pairwise Euclidean center distance.
pub const MIN_CENTER_DIST: f64 = 12.0;
/// Minimum pairwise per-axis (Chebyshev) separation, so squares never
/// overlap even when the Euclidean margin is met diagonally.
pub const MIN_AXIS_SEP: f64 = 10.0;
/// Margin by which every closest/furthest decision must be separated
/// from its runner-up.
pub const MIN_DIST_GAP: f64 = 1.0;
/// Rejection-sampling budget per scene.
pub const MAX_ATTEMPTS: usize = 1000;
/// Question count per scene: half relational, half not.
pub const QUESTIONS_PER_SCENE: usize = 20;
/// Width of the binary question encoding.
pub const QUESTION_BITS: usize = 11;
/// Answer vocabulary size.
pub const ANSWER_VOCAB: usize = 12;

/// Color names in index order.
pub const COLOR_NAMES: [&str; 6] = ["red", "blue", "green", "orange", "yellow", "gray"];

/// RGB fill per color index; the gray object is light so it reads
/// against the mid-gray background.
pub const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 0.0],
    [0.9, 0.9, 0.9],
];

/// Background gray level on all three channels.
pub const BACKGROUND: f64 = 0.5;

/// Inclusive center coordinate range keeping both shapes fully on
/// canvas.
const CENTER_MIN: u16 = 5;
const CENTER_MAX: u16 = 69;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SocShape {
    Square,
    Circle,
}

impl SocShape {
    pub fn code(self) -> u8 {
        match self {
            SocShape::Square => 0,
            SocShape::Circle => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SocShape::Square),
            1 => Ok(SocShape::Circle),
            _ => Err(Error::Config(format!("unknown shape code {code}"))),
        }
    }
}

/// One placed object; centers are integer pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SocObject {
    pub color: usize,
    pub shape: SocShape,
    pub x: u16,
    pub y: u16,
}

/// Six objects, one per color, satisfying the placement margins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocScene {
    pub objects: [SocObject; 6],
}

impl SocScene {
    /// Object with the given color index (exactly one exists).
    pub fn by_color(&self, color: usize) -> Result<&SocObject> {
        self.objects
            .iter()
            .find(|o| o.color == color)
            .ok_or(Error::Encoding {
                what: "color",
                got: color,
                expected: "0..=5",
            })
    }
}

fn dist(a: &SocObject, b: &SocObject) -> f64 {
    let dx = a.x as f64 - b.x as f64;
    let dy = a.y as f64 - b.y as f64;
    (dx * dx + dy * dy).sqrt()
}

fn placement_ok(objects: &[SocObject; 6]) -> bool {
    for i in 0..6 {
        for j in i + 1..6 {
            let (a, b) = (&objects[i], &objects[j]);
            let dx = (a.x as f64 - b.x as f64).abs();
            let dy = (a.y as f64 - b.y as f64).abs();
            if dx.max(dy) < MIN_AXIS_SEP {
                return false;
            }
            if dist(a, b) < MIN_CENTER_DIST {
                return false;
            }
        }
    }
    // Whatever object is asked about, the closest and furthest of the
    // other five must win by a clear margin.
    for i in 0..6 {
        let mut ds: Vec<f64> = (0..6)
            .filter(|&j| j != i)
            .map(|j| dist(&objects[i], &objects[j]))
            .collect();
        ds.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        if ds[1] - ds[0] < MIN_DIST_GAP || ds[4] - ds[3] < MIN_DIST_GAP {
            return false;
        }
    }
    true
}

/// Rejection-sample one scene: color i is object i, shapes are fair
/// coin flips, centers uniform over the on-canvas range. Fails only if
/// the margin constraints reject [`MAX_ATTEMPTS`] consecutive draws.
pub fn gen_soc_scene(rng: &mut impl Rng) -> Result<SocScene> {
    for _ in 0..MAX_ATTEMPTS {
        let mut objects = [SocObject {
            color: 0,
            shape: SocShape::Square,
            x: 0,
            y: 0,
        }; 6];
        for (color, obj) in objects.iter_mut().enumerate() {
            obj.color = color;
            obj.x = rng.gen_range(CENTER_MIN..=CENTER_MAX);
            obj.y = rng.gen_range(CENTER_MIN..=CENTER_MAX);
            obj.shape = if rng.gen_bool(0.5) {
                SocShape::Square
            } else {
                SocShape::Circle
            };
        }
        if placement_ok(&objects) {
            return Ok(SocScene { objects });
        }
    }
    Err(Error::Generation(MAX_ATTEMPTS))
}

/// Paint the scene as channel-major 8-bit RGB (`3·75·75` bytes).
pub fn render_soc_bytes(scene: &SocScene) -> Vec<u8> {
    let plane = SOC_CANVAS * SOC_CANVAS;
    let bg = (BACKGROUND * 255.0).round() as u8;
    let mut img = vec![bg; 3 * plane];
    for obj in &scene.objects {
        let rgb = PALETTE[obj.color].map(|v| (v * 255.0).round() as u8);
        let (cx, cy) = (obj.x as i64, obj.y as i64);
        match obj.shape {
            SocShape::Square => {
                let half = (SQUARE_SIDE / 2) as i64;
                for r in cy - half..cy + half {
                    for c in cx - half..cx + half {
                        paint(&mut img, r, c, rgb);
                    }
                }
            }
            SocShape::Circle => {
                let rad = CIRCLE_RADIUS as i64;
                for r in cy - rad..=cy + rad {
                    for c in cx - rad..=cx + rad {
                        let (dr, dc) = (r - cy, c - cx);
                        if dr * dr + dc * dc <= rad * rad {
                            paint(&mut img, r, c, rgb);
                        }
                    }
                }
            }
        }
    }
    img
}

fn paint(img: &mut [u8], r: i64, c: i64, rgb: [u8; 3]) {
    let side = SOC_CANVAS as i64;
    if (0..side).contains(&r) && (0..side).contains(&c) {
        let plane = SOC_CANVAS * SOC_CANVAS;
        let at = r as usize * SOC_CANVAS + c as usize;
        for ch in 0..3 {
            img[ch * plane + at] = rgb[ch];
        }
    }
}

/// Decode stored 8-bit RGB into a `[3, 75, 75]` tensor in [0, 1].
pub fn image_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let want = 3 * SOC_CANVAS * SOC_CANVAS;
    if bytes.len() != want {
        return Err(Error::Dimension {
            op: "image_from_bytes",
            lhs: vec![bytes.len()],
            rhs: vec![want],
        });
    }
    let data = bytes
        .iter()
        .map(|&b| S::from_f64(b as f64 / 255.0))
        .collect();
    Ok(Tensor::from_raw(vec![3, SOC_CANVAS, SOC_CANVAS], data))
}

/// Render directly to a scalar tensor (identical to storing bytes and
/// decoding them).
pub fn render_soc_image<S: Scalar>(scene: &SocScene) -> Tensor<S> {
    image_from_bytes(&render_soc_bytes(scene)).expect("renderer emits the exact byte count")
}

/// The twelve answer tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SocAnswer {
    Square,
    Circle,
    Left,
    Right,
    Top,
    Bottom,
    Count(u8),
}

impl SocAnswer {
    /// Stable class index: shapes, sides, then counts 0–5.
    pub fn index(self) -> usize {
        match self {
            SocAnswer::Square => 0,
            SocAnswer::Circle => 1,
            SocAnswer::Left => 2,
            SocAnswer::Right => 3,
            SocAnswer::Top => 4,
            SocAnswer::Bottom => 5,
            SocAnswer::Count(n) => 6 + n as usize,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Ok(match index {
            0 => SocAnswer::Square,
            1 => SocAnswer::Circle,
            2 => SocAnswer::Left,
            3 => SocAnswer::Right,
            4 => SocAnswer::Top,
            5 => SocAnswer::Bottom,
            6..=11 => SocAnswer::Count((index - 6) as u8),
            _ => {
                return Err(Error::Class {
                    target: index,
                    classes: ANSWER_VOCAB,
                })
            }
        })
    }

    pub fn label(self) -> String {
        match self {
            SocAnswer::Square => "square".into(),
            SocAnswer::Circle => "circle".into(),
            SocAnswer::Left => "left".into(),
            SocAnswer::Right => "right".into(),
            SocAnswer::Top => "top".into(),
            SocAnswer::Bottom => "bottom".into(),
            SocAnswer::Count(n) => n.to_string(),
        }
    }
}

/// A question before encoding: which color it references, whether it
/// is relational, and the subtype within that branch.
///
/// Non-relational subtypes: 0 query-shape, 1 horizontal-position,
/// 2 vertical-position. Relational: 0 closest-to, 1 furthest-from,
/// 2 same-shape-count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SocQuestion {
    pub color: usize,
    pub relational: bool,
    pub subtype: usize,
}

/// Pack (color, relational, subtype) into the 11-bit layout:
/// bits 0–5 color one-hot, bit 6 relational flag, bits 7–9 subtype
/// one-hot, bit 10 reserved zero.
pub fn encode_soc_question(color: usize, relational: bool, subtype: usize) -> Result<[u8; 11]> {
    if color >= 6 {
        return Err(Error::Encoding {
            what: "color",
            got: color,
            expected: "0..=5",
        });
    }
    if subtype >= 3 {
        return Err(Error::Encoding {
            what: "subtype",
            got: subtype,
            expected: "0..=2",
        });
    }
    let mut bits = [0u8; 11];
    bits[color] = 1;
    bits[6] = relational as u8;
    bits[7 + subtype] = 1;
    Ok(bits)
}

/// Invert [`encode_soc_question`]; rejects anything that is not a
/// well-formed encoding (one-hot violations, stray bits, set reserved
/// bit).
pub fn decode_soc_question(bits: &[u8; 11]) -> Result<SocQuestion> {
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::Encoding {
            what: "question bit",
            got: *bits.iter().find(|&&b| b > 1).expect("checked above") as usize,
            expected: "0 or 1",
        });
    }
    let one_hot = |range: std::ops::Range<usize>, what: &'static str| -> Result<usize> {
        let mut found = None;
        for i in range.clone() {
            if bits[i] == 1 {
                if found.is_some() {
                    return Err(Error::Encoding {
                        what,
                        got: 2,
                        expected: "exactly one set bit",
                    });
                }
                found = Some(i - range.start);
            }
        }
        found.ok_or(Error::Encoding {
            what,
            got: 0,
            expected: "exactly one set bit",
        })
    };
    let color = one_hot(0..6, "color block")?;
    let subtype = one_hot(7..10, "subtype block")?;
    if bits[10] != 0 {
        return Err(Error::Encoding {
            what: "reserved bit",
            got: 1,
            expected: "0",
        });
    }
    Ok(SocQuestion {
        color,
        relational: bits[6] == 1,
        subtype,
    })
}

impl SocQuestion {
    pub fn encode(&self) -> Result<[u8; 11]> {
        encode_soc_question(self.color, self.relational, self.subtype)
    }

    /// The question as a scalar feature vector for the model.
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let bits = self.encode()?;
        Ok(Tensor::from_raw(
            vec![QUESTION_BITS],
            bits.iter().map(|&b| S::from_usize(b as usize)).collect(),
        ))
    }
}

/// Margin below which two candidate distances count as a tie. The
/// generator separates all distances by [`MIN_DIST_GAP`], so ties only
/// arise on scenes from elsewhere.
const TIE_MARGIN: f64 = 1e-6;

/// Exact answer for one question against one scene.
pub fn answer_soc_question(scene: &SocScene, q: &SocQuestion) -> Result<SocAnswer> {
    if q.subtype >= 3 {
        return Err(Error::Encoding {
            what: "subtype",
            got: q.subtype,
            expected: "0..=2",
        });
    }
    let reference = scene.by_color(q.color)?;
    if !q.relational {
        return Ok(match q.subtype {
            0 => shape_answer(reference.shape),
            1 => {
                if (reference.x as f64) < SOC_MID {
                    SocAnswer::Left
                } else {
                    SocAnswer::Right
                }
            }
            _ => {
                if (reference.y as f64) < SOC_MID {
                    SocAnswer::Top
                } else {
                    SocAnswer::Bottom
                }
            }
        });
    }
    match q.subtype {
        0 | 1 => {
            let mut cands: Vec<(f64, &SocObject)> = scene
                .objects
                .iter()
                .filter(|o| o.color != reference.color)
                .map(|o| (dist(reference, o), o))
                .collect();
            cands.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("distances are finite"));
            let (winner, neighbor) = if q.subtype == 1 {
                (cands[cands.len() - 1], cands[cands.len() - 2])
            } else {
                (cands[0], cands[1])
            };
            if (neighbor.0 - winner.0).abs() < TIE_MARGIN {
                return Err(Error::OracleTie(format!(
                    "distances {} and {} from {} are indistinguishable",
                    winner.0, neighbor.0, COLOR_NAMES[q.color]
                )));
            }
            Ok(shape_answer(winner.1.shape))
        }
        _ => {
            let n = scene
                .objects
                .iter()
                .filter(|o| o.color != reference.color && o.shape == reference.shape)
                .count();
            Ok(SocAnswer::Count(n as u8))
        }
    }
}

fn shape_answer(shape: SocShape) -> SocAnswer {
    match shape {
        SocShape::Square => SocAnswer::Square,
        SocShape::Circle => SocAnswer::Circle,
    }
}

/// Draw the 20 questions for a scene: 10 non-relational then 10
/// relational. Subtypes cycle 0,1,2,0,… within each half (so the
/// histogram is 4/3/3); reference colors are uniform draws that never
/// repeat the immediately preceding question's color within the half.
pub fn gen_soc_questions(
    scene: &SocScene,
    rng: &mut impl Rng,
) -> Result<Vec<(SocQuestion, SocAnswer)>> {
    let mut out = Vec::with_capacity(QUESTIONS_PER_SCENE);
    for relational in [false, true] {
        let mut prev_color = None;
        for t in 0..QUESTIONS_PER_SCENE / 2 {
            let color = loop {
                let c = rng.gen_range(0..6usize);
                if Some(c) != prev_color {
                    break c;
                }
            };
            prev_color = Some(color);
            let q = SocQuestion {
                color,
                relational,
                subtype: t % 3,
            };
            let a = answer_soc_question(scene, &q)?;
            out.push((q, a));
        }
    }
    Ok(out)
}

/// One scene with its rendered image and question/answer list.
#[derive(Debug, Clone, PartialEq)]
pub struct SocRecord {
    pub scene: SocScene,
    pub image: Vec<u8>,
    pub questions: Vec<(SocQuestion, SocAnswer)>,
}

/// A generated corpus; regenerating with the same (seed, split, count)
/// reproduces it bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SocDataset {
    pub seed: u64,
    pub split: Split,
    pub records: Vec<SocRecord>,
}

/// Generate `count` scenes, each from its own (seed, split, index)
/// substream.
pub fn gen_soc_dataset(seed: u64, split: Split, count: usize) -> Result<SocDataset> {
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = scene_rng(seed, split, i as u64);
        let scene = gen_soc_scene(&mut rng)?;
        let image = render_soc_bytes(&scene);
        let questions = gen_soc_questions(&scene, &mut rng)?;
        records.push(SocRecord {
            scene,
            image,
            questions,
        });
    }
    Ok(SocDataset {
        seed,
        split,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obj(color: usize, shape: SocShape, x: u16, y: u16) -> SocObject {
        SocObject { color, shape, x, y }
    }

    #[test]
    fn scenes_have_six_distinct_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scene = gen_soc_scene(&mut rng).unwrap();
        let mut colors: Vec<usize> = scene.objects.iter().map(|o| o.color).collect();
        colors.sort_unstable();
        assert_eq!(colors, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn same_rng_state_reproduces_scene() {
        let a = gen_soc_scene(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = gen_soc_scene(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_min_distance_holds_over_many_scenes() {
        let mut min_d = f64::INFINITY;
        for i in 0..10_000u64 {
            let mut rng = scene_rng(11, Split::Train, i);
            let scene = gen_soc_scene(&mut rng).unwrap();
            for a in 0..6 {
                for b in a + 1..6 {
                    min_d = min_d.min(dist(&scene.objects[a], &scene.objects[b]));
                }
            }
        }
        assert!(min_d >= MIN_CENTER_DIST, "min distance {min_d}");
    }

    #[test]
    fn question_layout_examples() {
        assert_eq!(
            encode_soc_question(0, true, 0).unwrap(),
            [1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0]
        );
        assert_eq!(
            encode_soc_question(5, false, 0).unwrap(),
            [0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0]
        );
    }

    #[test]
    fn encode_decode_round_trips_all_36_combinations() {
        for color in 0..6 {
            for relational in [false, true] {
                for subtype in 0..3 {
                    let bits = encode_soc_question(color, relational, subtype).unwrap();
                    let q = decode_soc_question(&bits).unwrap();
                    assert_eq!(
                        (q.color, q.relational, q.subtype),
                        (color, relational, subtype)
                    );
                }
            }
        }
    }

    #[test]
    fn out_of_range_encodings_rejected() {
        assert!(encode_soc_question(6, false, 0).is_err());
        assert!(encode_soc_question(0, false, 3).is_err());
        let mut bits = encode_soc_question(0, false, 0).unwrap();
        bits[10] = 1;
        assert!(decode_soc_question(&bits).is_err());
        bits[10] = 0;
        bits[1] = 1; // second color bit
        assert!(decode_soc_question(&bits).is_err());
    }

    #[test]
    fn every_question_has_two_or_three_set_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = gen_soc_scene(&mut rng).unwrap();
        for (q, _) in gen_soc_questions(&scene, &mut rng).unwrap() {
            let bits = q.encode().unwrap();
            let set: u8 = bits.iter().sum();
            let expected = if q.relational { 3 } else { 2 };
            assert_eq!(set, expected, "{q:?}");
        }
    }

    #[test]
    fn twenty_questions_split_evenly_with_cycled_subtypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = gen_soc_scene(&mut rng).unwrap();
        let qs = gen_soc_questions(&scene, &mut rng).unwrap();
        assert_eq!(qs.len(), 20);
        let rel = qs.iter().filter(|(q, _)| q.relational).count();
        assert_eq!(rel, 10);
        for relational in [false, true] {
            let mut hist = [0usize; 3];
            for (q, _) in qs.iter().filter(|(q, _)| q.relational == relational) {
                hist[q.subtype] += 1;
            }
            assert_eq!(hist, [4, 3, 3]);
        }
        // No immediate color repeats within each half.
        for half in qs.chunks(10) {
            for w in half.windows(2) {
                assert_ne!(w[0].0.color, w[1].0.color);
            }
        }
    }

    #[test]
    fn oracle_closest_by_hand() {
        // green at (10,10); red square at (20,10) is 10 away; blue circle
        // at (40,40) is ~42.4 away.
        let scene = SocScene {
            objects: [
                obj(2, SocShape::Circle, 10, 10),
                obj(0, SocShape::Square, 20, 10),
                obj(1, SocShape::Circle, 40, 40),
                obj(3, SocShape::Square, 60, 10),
                obj(4, SocShape::Circle, 10, 60),
                obj(5, SocShape::Square, 65, 65),
            ],
        };
        let q = SocQuestion {
            color: 2,
            relational: true,
            subtype: 0,
        };
        assert_eq!(answer_soc_question(&scene, &q).unwrap(), SocAnswer::Square);
    }

    #[test]
    fn oracle_position_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scene = gen_soc_scene(&mut rng).unwrap();
        scene.objects[0].x = 10;
        scene.objects[0].y = 60;
        let horizontal = SocQuestion {
            color: 0,
            relational: false,
            subtype: 1,
        };
        let vertical = SocQuestion {
            color: 0,
            relational: false,
            subtype: 2,
        };
        assert_eq!(
            answer_soc_question(&scene, &horizontal).unwrap(),
            SocAnswer::Left
        );
        assert_eq!(
            answer_soc_question(&scene, &vertical).unwrap(),
            SocAnswer::Bottom
        );
    }

    #[test]
    fn oracle_count_excludes_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut scene = gen_soc_scene(&mut rng).unwrap();
        for o in &mut scene.objects {
            o.shape = SocShape::Square;
        }
        let q = SocQuestion {
            color: 2,
            relational: true,
            subtype: 2,
        };
        assert_eq!(
            answer_soc_question(&scene, &q).unwrap(),
            SocAnswer::Count(5)
        );
    }

    #[test]
    fn oracle_ties_are_detected() {
        // Equidistant neighbors at ±10 on the x axis.
        let scene = SocScene {
            objects: [
                obj(0, SocShape::Circle, 35, 35),
                obj(1, SocShape::Square, 25, 35),
                obj(2, SocShape::Circle, 45, 35),
                obj(3, SocShape::Square, 35, 65),
                obj(4, SocShape::Circle, 65, 35),
                obj(5, SocShape::Square, 65, 65),
            ],
        };
        let q = SocQuestion {
            color: 0,
            relational: true,
            subtype: 0,
        };
        assert!(matches!(
            answer_soc_question(&scene, &q),
            Err(Error::OracleTie(_))
        ));
    }

    #[test]
    fn stored_answers_match_fresh_oracle() {
        let ds = gen_soc_dataset(21, Split::Train, 50).unwrap();
        for record in &ds.records {
            for (q, a) in &record.questions {
                assert_eq!(answer_soc_question(&record.scene, q).unwrap(), *a);
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = gen_soc_dataset(33, Split::Test, 25).unwrap();
        let b = gen_soc_dataset(33, Split::Test, 25).unwrap();
        assert_eq!(a, b);
        // Different splits and seeds diverge.
        assert_ne!(a, gen_soc_dataset(33, Split::Train, 25).unwrap());
        assert_ne!(a, gen_soc_dataset(34, Split::Test, 25).unwrap());
    }

    #[test]
    fn answer_balance_within_rollups() {
        // Over 10⁴ questions, no answer token dominates its rollup
        // (relational / non-relational) beyond 40%.
        let ds = gen_soc_dataset(55, Split::Train, 500).unwrap();
        let mut counts = [[0usize; ANSWER_VOCAB]; 2];
        let mut totals = [0usize; 2];
        for record in &ds.records {
            for (q, a) in &record.questions {
                let group = q.relational as usize;
                counts[group][a.index()] += 1;
                totals[group] += 1;
            }
        }
        assert_eq!(totals[0] + totals[1], 10_000);
        for group in 0..2 {
            for (token, &n) in counts[group].iter().enumerate() {
                let share = n as f64 / totals[group] as f64;
                assert!(
                    share <= 0.40,
                    "token {token} holds {share:.3} of group {group}"
                );
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_in_palette() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = gen_soc_scene(&mut rng).unwrap();
        let a = render_soc_bytes(&scene);
        let b = render_soc_bytes(&scene);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 75 * 75);
        let img: Tensor<f64> = image_from_bytes(&a).unwrap();
        assert_eq!(img.shape(), &[3, 75, 75]);
        // A square paints exactly 100 pixels of its color; count one.
        let sq = scene
            .objects
            .iter()
            .find(|o| o.shape == SocShape::Square);
        if let Some(sq) = sq {
            let rgb = PALETTE[sq.color].map(|v| (v * 255.0).round() as u8);
            let plane = 75 * 75;
            let painted = (0..plane)
                .filter(|&i| (0..3).all(|ch| a[ch * plane + i] == rgb[ch]))
                .count();
            assert_eq!(painted, SQUARE_SIDE * SQUARE_SIDE);
        }
    }
}
