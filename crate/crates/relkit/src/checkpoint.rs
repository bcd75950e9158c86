//! Checkpoint persistence.
//!
//! Sectioned binary format: the magic bytes `RELKIT01`, a parameter
//! section, then an optimizer section in the same record shape. Each
//! section is a 64-bit little-endian record count followed by records:
//! name length (u64) + UTF-8 bytes, rank (u64), extents (u64 each),
//! then the values as 64-bit little-endian floats. Round trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RELKIT01";

/// Write parameters (and optimizer state, when resuming matters) to
/// `path`, replacing any existing file.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    params: &ParamSet<S>,
    adam: Option<&AdamState<S>>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (name, value, _) in params.iter() {
        write_record(&mut w, name, value.shape(), value.data()).map_err(io_err)?;
    }

    match adam {
        None => w.write_all(&0u64.to_le_bytes()).map_err(io_err)?,
        Some(state) => {
            let trainable = params.trainable_names();
            let count = 5 + 2 * trainable.len() as u64;
            w.write_all(&count.to_le_bytes()).map_err(io_err)?;
            let scalars = [
                ("adam.t", state.t as f64),
                ("adam.lr", state.config.lr),
                ("adam.beta1", state.config.beta1),
                ("adam.beta2", state.config.beta2),
                ("adam.epsilon", state.config.epsilon),
            ];
            for (name, v) in scalars {
                write_record_f64(&mut w, name, &[1], &[v]).map_err(io_err)?;
            }
            for name in &trainable {
                let (m, v) = state.moments.get(name).ok_or_else(|| {
                    Error::Config(format!("optimizer has no moments for {name:?}"))
                })?;
                write_record(&mut w, &format!("adam.m.{name}"), m.shape(), m.data())
                    .map_err(io_err)?;
                write_record(&mut w, &format!("adam.v.{name}"), v.shape(), v.data())
                    .map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Load a checkpoint into an existing, congruently-shaped parameter
/// set. Returns the optimizer state when the file carries one. Name or
/// shape disagreements are configuration errors; structural corruption
/// is a format error naming the byte offset.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
    params: &mut ParamSet<S>,
) -> Result<Option<AdamState<S>>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        offset: 0,
    };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            what: "bad magic bytes (expected RELKIT01)".into(),
        });
    }

    let n_params = r.read_u64()?;
    let mut seen = Vec::new();
    for _ in 0..n_params {
        let (name, shape, data) = r.read_record::<S>()?;
        if !params.contains(&name) {
            return Err(Error::Config(format!(
                "checkpoint parameter {name:?} does not exist in this model"
            )));
        }
        let dst = params.get_mut(&name)?;
        if dst.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint parameter {name:?} has shape {:?}, model expects {:?}",
                shape,
                dst.shape()
            )));
        }
        *dst = Tensor::from_raw(shape, data);
        seen.push(name);
    }
    if seen.len() != params.len() {
        return Err(Error::Config(format!(
            "checkpoint covers {} of {} model parameters",
            seen.len(),
            params.len()
        )));
    }

    let n_adam = r.read_u64()?;
    if n_adam == 0 {
        return Ok(None);
    }
    let mut t = None;
    let mut lr = None;
    let mut beta1 = None;
    let mut beta2 = None;
    let mut epsilon = None;
    let mut state_moments: std::collections::HashMap<String, (Option<Tensor<S>>, Option<Tensor<S>>)> =
        std::collections::HashMap::new();
    for _ in 0..n_adam {
        let (name, shape, data) = r.read_record::<S>()?;
        let scalar = || Scalar::to_f64(data[0]);
        match name.as_str() {
            "adam.t" => t = Some(scalar() as u64),
            "adam.lr" => lr = Some(scalar()),
            "adam.beta1" => beta1 = Some(scalar()),
            "adam.beta2" => beta2 = Some(scalar()),
            "adam.epsilon" => epsilon = Some(scalar()),
            _ => {
                let (kind, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
                    ("m", p)
                } else if let Some(p) = name.strip_prefix("adam.v.") {
                    ("v", p)
                } else {
                    return Err(Error::Config(format!(
                        "unrecognized optimizer record {name:?}"
                    )));
                };
                if !params.is_trainable(pname) {
                    return Err(Error::Config(format!(
                        "optimizer moments reference unknown parameter {pname:?}"
                    )));
                }
                if params.get(pname)?.shape() != shape.as_slice() {
                    return Err(Error::Config(format!(
                        "optimizer moment {name:?} has shape {shape:?}"
                    )));
                }
                let entry = state_moments.entry(pname.to_string()).or_default();
                let slot = if kind == "m" { &mut entry.0 } else { &mut entry.1 };
                *slot = Some(Tensor::from_raw(shape, data));
            }
        }
    }
    let (Some(t), Some(lr), Some(beta1), Some(beta2), Some(epsilon)) =
        (t, lr, beta1, beta2, epsilon)
    else {
        return Err(Error::Config(
            "optimizer section is missing hyperparameter records".into(),
        ));
    };
    let mut moments = std::collections::HashMap::new();
    for name in params.trainable_names() {
        let Some((Some(m), Some(v))) = state_moments.remove(&name) else {
            return Err(Error::Config(format!(
                "optimizer section is missing moments for {name:?}"
            )));
        };
        moments.insert(name, (m, v));
    }
    Ok(Some(AdamState {
        config: AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        },
        t,
        moments,
    }))
}

fn write_record<S: Scalar, W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    data: &[S],
) -> std::io::Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u64).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&Scalar::to_f64(v).to_le_bytes())?;
    }
    Ok(())
}

fn write_record_f64<W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    data: &[f64],
) -> std::io::Result<()> {
    write_record::<f64, W>(w, name, shape, data)
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: at,
            what: format!("unexpected end of checkpoint ({e})"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_record<S: Scalar>(&mut self) -> Result<(String, Vec<usize>, Vec<S>)> {
        let at = self.offset;
        let name_len = self.read_u64()?;
        if name_len > 4096 {
            return Err(Error::Format {
                offset: at,
                what: format!("implausible record name length {name_len}"),
            });
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        self.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: at,
            what: "record name is not UTF-8".into(),
        })?;
        let rank = self.read_u64()?;
        if rank > 8 {
            return Err(Error::Format {
                offset: at,
                what: format!("implausible record rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(self.read_u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > (1 << 31) {
            return Err(Error::Format {
                offset: at,
                what: format!("implausible record extents {shape:?}"),
            });
        }
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            self.read_exact(&mut b)?;
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: self.offset - 8,
                    what: format!("non-finite value in record {name:?}"),
                });
            }
            data.push(S::from_f64(v));
        }
        Ok((name, shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::adam_step;
    use crate::params::GradSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params(seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        ps.insert_affine("f0", 3, 4, &mut rng).unwrap();
        ps.insert_batchnorm("bn", 4).unwrap();
        ps
    }

    fn bits_of(ps: &ParamSet<f64>) -> Vec<u64> {
        ps.iter()
            .flat_map(|(_, t, _)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let mut params = sample_params(7);
        let mut state = AdamState::new(AdamConfig::with_lr(2.5e-4), &params);
        let grads = {
            let mut m = std::collections::HashMap::new();
            for name in params.trainable_names() {
                let shape = params.get(&name).unwrap().shape().to_vec();
                m.insert(name, Tensor::full(&shape, 0.3));
            }
            GradSet { by_name: m }
        };
        adam_step(&mut params, &grads, &mut state).unwrap();
        save_checkpoint(&path, &params, Some(&state)).unwrap();

        let mut restored = sample_params(99); // different values, same shapes
        let adam = load_checkpoint(&path, &mut restored).unwrap().unwrap();

        assert_eq!(bits_of(&params), bits_of(&restored));
        assert_eq!(adam.t, 1);
        assert_eq!(adam.config, state.config);
        for name in params.trainable_names() {
            let (m0, v0) = &state.moments[&name];
            let (m1, v1) = &adam.moments[&name];
            assert_eq!(m0.data(), m1.data());
            assert_eq!(v0.data(), v1.data());
        }

        // Saving the restored copy reproduces the file byte-for-byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &restored, Some(&adam)).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn round_trip_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.ckpt");
        let params = sample_params(1);
        save_checkpoint(&path, &params, None).unwrap();
        let mut restored = sample_params(2);
        let adam = load_checkpoint(&path, &mut restored).unwrap();
        assert!(adam.is_none());
        assert_eq!(bits_of(&params), bits_of(&restored));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_params(1), None).unwrap();

        let mut other = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        other.insert_affine("f0", 3, 5, &mut rng).unwrap(); // wrong fan_out
        other.insert_batchnorm("bn", 4).unwrap();
        let err = load_checkpoint(&path, &mut other).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC rest").unwrap();
        let err = load_checkpoint(&path, &mut sample_params(1)).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_file_is_format_error_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_params(1), None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path, &mut sample_params(1)).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other}"),
        }
    }
}
