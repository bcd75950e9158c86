//! The dataset container format: magic `RKDS01`, a fixed header (task
//! kind, split, seed, record count), then length-prefixed per-scene
//! records. All integers little-endian; images 8-bit RGB; trajectories
//! 64-bit floats. Malformed input reports the byte offset it died at.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::datasets::physics::{
    ball_features, count_systems, EdgeKind, PhysicsDataset, PhysicsEdge, PhysicsScene, PhysicsTask,
};
use crate::datasets::soc::{
    SocDataset, SocObject, SocQuestion, SocRecord, SocScene, SocShape, SocAnswer,
    ANSWER_VOCAB, QUESTIONS_PER_SCENE, QUESTION_BITS, SOC_CANVAS,
};
use crate::datasets::{Dataset, Split};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"RKDS01";
const KIND_SOC: u8 = 0;
const KIND_PHYSICS: u8 = 1;
const IMAGE_BYTES: usize = 3 * SOC_CANVAS * SOC_CANVAS;

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io_err)?;
    let kind = match ds {
        Dataset::Soc(_) => KIND_SOC,
        Dataset::Physics { .. } => KIND_PHYSICS,
    };
    w.write_all(&[kind, ds.split().code()]).map_err(io_err)?;
    w.write_all(&ds.seed().to_le_bytes()).map_err(io_err)?;
    w.write_all(&(ds.len() as u64).to_le_bytes()).map_err(io_err)?;

    match ds {
        Dataset::Soc(soc) => {
            for record in &soc.records {
                let payload = encode_soc_record(record)?;
                w.write_all(&(payload.len() as u64).to_le_bytes()).map_err(io_err)?;
                w.write_all(&payload).map_err(io_err)?;
            }
        }
        Dataset::Physics { data: phys, task } => {
            w.write_all(&[task.code(), phys.n_balls as u8]).map_err(io_err)?;
            w.write_all(&(phys.n_frames as u16).to_le_bytes()).map_err(io_err)?;
            for scene in &phys.records {
                if scene.n_balls != phys.n_balls || scene.n_frames != phys.n_frames {
                    return Err(Error::Dimension {
                        op: "write_dataset",
                        lhs: vec![scene.n_balls, scene.n_frames],
                        rhs: vec![phys.n_balls, phys.n_frames],
                    });
                }
                let payload = encode_physics_record(scene);
                w.write_all(&(payload.len() as u64).to_le_bytes()).map_err(io_err)?;
                w.write_all(&payload).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        offset: 0,
    };

    let magic = r.take::<6>()?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            what: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let [kind, split_code] = r.take::<2>()?;
    let split = Split::from_code(split_code).map_err(|_| Error::Format {
        offset: 7,
        what: format!("unknown split code {split_code}"),
    })?;
    let seed = r.read_u64()?;
    let count = r.read_u64()?;
    if count > (1 << 32) {
        return Err(Error::Format {
            offset: 16,
            what: format!("implausible record count {count}"),
        });
    }

    match kind {
        KIND_SOC => {
            let mut records = Vec::with_capacity(count as usize);
            for _ in 0..count {
                records.push(r.length_prefixed(decode_soc_record)?);
            }
            r.expect_eof()?;
            Ok(Dataset::Soc(SocDataset {
                seed,
                split,
                records,
            }))
        }
        KIND_PHYSICS => {
            let at = r.offset;
            let [task_code, n_balls] = r.take::<2>()?;
            let task = PhysicsTask::from_code(task_code).map_err(|_| Error::Format {
                offset: at,
                what: format!("unknown physics task code {task_code}"),
            })?;
            if !(2..=255).contains(&n_balls) {
                return Err(Error::Format {
                    offset: at + 1,
                    what: format!("ball count {n_balls} out of range"),
                });
            }
            let n_frames = u16::from_le_bytes(r.take::<2>()?);
            if n_frames == 0 {
                return Err(Error::Format {
                    offset: at + 2,
                    what: "zero frame count".into(),
                });
            }
            let (n_balls, n_frames) = (n_balls as usize, n_frames as usize);
            let mut records = Vec::with_capacity(count as usize);
            for _ in 0..count {
                records.push(
                    r.length_prefixed(|buf, base| decode_physics_record(buf, base, n_balls, n_frames))?,
                );
            }
            r.expect_eof()?;
            Ok(Dataset::Physics {
                data: PhysicsDataset {
                    seed,
                    split,
                    n_balls,
                    n_frames,
                    records,
                },
                task,
            })
        }
        _ => Err(Error::Format {
            offset: 6,
            what: format!("unknown task kind {kind}"),
        }),
    }
}

// --------------------------------------------------------------------------
// Record codecs

fn encode_soc_record(record: &SocRecord) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(36 + IMAGE_BYTES + 2 + QUESTIONS_PER_SCENE * 3);
    for obj in &record.scene.objects {
        out.push(obj.color as u8);
        out.push(obj.shape.code());
        out.extend_from_slice(&obj.x.to_le_bytes());
        out.extend_from_slice(&obj.y.to_le_bytes());
    }
    if record.image.len() != IMAGE_BYTES {
        return Err(Error::Dimension {
            op: "encode_soc_record",
            lhs: vec![record.image.len()],
            rhs: vec![IMAGE_BYTES],
        });
    }
    out.extend_from_slice(&record.image);
    out.extend_from_slice(&(record.questions.len() as u16).to_le_bytes());
    for (q, a) in &record.questions {
        let bits = q.encode()?;
        let mut packed: u16 = 0;
        for (i, &b) in bits.iter().enumerate() {
            packed |= (b as u16) << i;
        }
        out.extend_from_slice(&packed.to_le_bytes());
        out.push(a.index() as u8);
    }
    Ok(out)
}

fn decode_soc_record(buf: &[u8], base: u64) -> Result<SocRecord> {
    let mut c = Cursor { buf, at: 0, base };
    let mut objects = [SocObject {
        color: 0,
        shape: SocShape::Square,
        x: 0,
        y: 0,
    }; 6];
    for obj in &mut objects {
        let color = c.u8()?;
        if color > 5 {
            return Err(c.fail(format!("color index {color} out of range")));
        }
        let shape = SocShape::from_code(c.u8()?)
            .map_err(|e| c.fail(e.to_string()))?;
        let x = c.u16()?;
        let y = c.u16()?;
        *obj = SocObject {
            color: color as usize,
            shape,
            x,
            y,
        };
    }
    let image = c.bytes(IMAGE_BYTES)?.to_vec();
    let n_questions = c.u16()? as usize;
    if n_questions > 1024 {
        return Err(c.fail(format!("implausible question count {n_questions}")));
    }
    let mut questions = Vec::with_capacity(n_questions);
    for _ in 0..n_questions {
        let packed = c.u16()?;
        if packed >> QUESTION_BITS != 0 {
            return Err(c.fail(format!("stray bits in question word {packed:#x}")));
        }
        let mut bits = [0u8; QUESTION_BITS];
        for (i, b) in bits.iter_mut().enumerate() {
            *b = ((packed >> i) & 1) as u8;
        }
        let q: SocQuestion =
            crate::datasets::soc::decode_soc_question(&bits).map_err(|e| c.fail(e.to_string()))?;
        let a_idx = c.u8()? as usize;
        if a_idx >= ANSWER_VOCAB {
            return Err(c.fail(format!("answer index {a_idx} out of range")));
        }
        let a = SocAnswer::from_index(a_idx).map_err(|e| c.fail(e.to_string()))?;
        questions.push((q, a));
    }
    c.done()?;
    Ok(SocRecord {
        scene: SocScene { objects },
        image,
        questions,
    })
}

fn encode_physics_record(scene: &PhysicsScene) -> Vec<u8> {
    let n = scene.n_balls;
    let mut out = Vec::with_capacity(scene.trajectory.len() * 8 + n * n + 1);
    for v in &scene.trajectory {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&scene.adjacency);
    // Upper-triangle edge kinds and rest lengths.
    out.push(scene.edges.len() as u8);
    for e in &scene.edges {
        out.push(e.a as u8);
        out.push(e.b as u8);
        out.push(e.kind.code());
        out.extend_from_slice(&e.rest.to_le_bytes());
    }
    out.push(scene.system_count as u8);
    out
}

fn decode_physics_record(
    buf: &[u8],
    base: u64,
    n_balls: usize,
    n_frames: usize,
) -> Result<PhysicsScene> {
    let mut c = Cursor { buf, at: 0, base };
    let mut trajectory = vec![0.0f64; n_balls * ball_features(n_frames)];
    for v in &mut trajectory {
        *v = c.f64()?;
        if !v.is_finite() {
            return Err(c.fail("non-finite trajectory value".into()));
        }
    }
    let adjacency = c.bytes(n_balls * n_balls)?.to_vec();
    for a in 0..n_balls {
        if adjacency[a * n_balls + a] != 0 {
            return Err(c.fail("adjacency diagonal must be zero".into()));
        }
        for b in 0..n_balls {
            let v = adjacency[a * n_balls + b];
            if v > 1 || v != adjacency[b * n_balls + a] {
                return Err(c.fail("adjacency must be symmetric 0/1".into()));
            }
        }
    }
    let n_edges = c.u8()? as usize;
    if n_edges > n_balls * (n_balls - 1) / 2 {
        return Err(c.fail(format!("implausible edge count {n_edges}")));
    }
    let mut edges = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let a = c.u8()? as usize;
        let b = c.u8()? as usize;
        if a >= n_balls || b >= n_balls || a >= b {
            return Err(c.fail(format!("bad edge ({a}, {b})")));
        }
        let kind = EdgeKind::from_code(c.u8()?).map_err(|e| c.fail(e.to_string()))?;
        let rest = c.f64()?;
        if !rest.is_finite() || rest <= 0.0 {
            return Err(c.fail(format!("bad rest length {rest}")));
        }
        if adjacency[a * n_balls + b] != 1 {
            return Err(c.fail(format!("edge ({a}, {b}) missing from adjacency")));
        }
        edges.push(PhysicsEdge { a, b, kind, rest });
    }
    let degree: usize = adjacency.iter().map(|&v| v as usize).sum();
    if degree != 2 * edges.len() {
        return Err(c.fail("adjacency and edge list disagree".into()));
    }
    let system_count = c.u8()? as usize;
    if system_count != count_systems(&adjacency, n_balls) {
        return Err(c.fail(format!(
            "stored system count {system_count} does not match the graph"
        )));
    }
    c.done()?;
    Ok(PhysicsScene {
        n_balls,
        n_frames,
        trajectory,
        adjacency,
        edges,
        system_count,
    })
}

// --------------------------------------------------------------------------
// Byte plumbing

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: self.offset,
            what: format!("unexpected end of file ({} bytes wanted)", buf.len()),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take::<8>()?))
    }

    fn length_prefixed<T>(&mut self, decode: impl Fn(&[u8], u64) -> Result<T>) -> Result<T> {
        let at = self.offset;
        let len = self.read_u64()?;
        if len > (1 << 30) {
            return Err(Error::Format {
                offset: at,
                what: format!("implausible record length {len}"),
            });
        }
        let mut payload = vec![0u8; len as usize];
        let base = self.offset;
        self.fill(&mut payload)?;
        decode(&payload, base)
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Format {
                offset: self.offset,
                what: "trailing bytes after the last record".into(),
            }),
            Err(e) => Err(Error::Format {
                offset: self.offset,
                what: format!("read failed: {e}"),
            }),
        }
    }
}

/// In-memory record cursor reporting absolute file offsets.
struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(self.fail(format!("record truncated ({n} bytes wanted)")));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("slice length checked")))
    }

    fn fail(&self, what: String) -> Error {
        Error::Format {
            offset: self.base + self.at as u64,
            what,
        }
    }

    fn done(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(self.fail(format!(
                "{} unread bytes at the end of the record",
                self.buf.len() - self.at
            )));
        }
        Ok(())
    }
}
