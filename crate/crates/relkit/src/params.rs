//! Named parameter storage with deterministic ordering, plus the
//! initialization rules: Xavier-uniform weights, zero biases, LSTM
//! forget-gate bias +1, batchnorm gamma 1 / beta 0.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Ordered map of named tensors. `trainable` entries receive gradients
/// and Adam updates; the rest (batchnorm running statistics) are
/// buffers that ride along through checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    entries: Vec<Entry<S>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<S> {
    name: String,
    value: Tensor<S>,
    trainable: bool,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(Error::Config(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&i| self.entries[i].trainable)
            .unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    /// Names of trainable entries, in insertion order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    /// Total element count over trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Register every trainable entry as a gradient-bearing tape leaf.
    /// Buffers are not placed on the tape; readers take them by value.
    pub fn leaves(&self, tape: &mut Tape<S>) -> HashMap<String, ValueId> {
        let mut out = HashMap::new();
        for e in &self.entries {
            if e.trainable {
                out.insert(e.name.clone(), tape.leaf(e.value.clone(), true));
            }
        }
        out
    }

    /// Collect accumulated leaf gradients after a backward pass. Entries
    /// whose gradient never materialized come back as zeros.
    pub fn collect_grads(&self, tape: &Tape<S>, ids: &HashMap<String, ValueId>) -> GradSet<S> {
        let mut grads = HashMap::new();
        for e in &self.entries {
            if !e.trainable {
                continue;
            }
            let g = ids
                .get(&e.name)
                .and_then(|&id| tape.grad(id))
                .unwrap_or_else(|| Tensor::zeros(e.value.shape()));
            grads.insert(e.name.clone(), g);
        }
        GradSet { by_name: grads }
    }

    /// Shape-and-name congruence check against another set (used when
    /// merging worker gradients and loading checkpoints).
    pub fn congruent(&self, other: &ParamSet<S>) -> bool {
        self.entries.len() == other.entries.len()
            && self.iter().zip(other.iter()).all(|((an, av, at), (bn, bv, bt))| {
                an == bn && av.shape() == bv.shape() && at == bt
            })
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone)]
pub struct GradSet<S> {
    pub by_name: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> GradSet<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.by_name.get(name)
    }

    /// Average several gradient sets elementwise, in the given order.
    /// All sets must cover the same names with congruent shapes.
    pub fn average(sets: &[GradSet<S>]) -> Result<GradSet<S>> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Config("averaging zero gradient sets".into()))?;
        let scale = S::from_usize(sets.len()).recip();
        let mut out = HashMap::new();
        for (name, g0) in &first.by_name {
            let mut acc = vec![S::zero(); g0.numel()];
            for set in sets {
                let g = set.by_name.get(name).ok_or_else(|| {
                    Error::Config(format!("gradient set missing parameter {name:?}"))
                })?;
                if g.shape() != g0.shape() {
                    return Err(Error::Dimension {
                        op: "grad_average",
                        lhs: g0.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                for (a, &v) in acc.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            for a in &mut acc {
                *a *= scale;
            }
            out.insert(name.clone(), Tensor::from_raw(g0.shape().to_vec(), acc));
        }
        Ok(GradSet { by_name: out })
    }
}

/// Xavier-uniform tensor: bound √(6/(fan_in+fan_out)). Dense weights
/// `[in, out]` use the two extents; conv kernels `[oc, c, kh, kw]` use
/// receptive-field fans.
pub fn xavier<S: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor<S>> {
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[0], shape[1]),
        4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
        _ => {
            return Err(Error::Dimension {
                op: "xavier",
                lhs: shape.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Tensor::rand_uniform(shape, -bound, bound, rng))
}

/// LSTM bias of width 4·hidden with the forget block (second quarter)
/// at +1 and the rest zero.
pub fn lstm_bias<S: Scalar>(hidden: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); 4 * hidden];
    for v in &mut data[hidden..2 * hidden] {
        *v = S::one();
    }
    Tensor::from_raw(vec![4 * hidden], data)
}

impl<S: Scalar> ParamSet<S> {
    /// Affine layer entries `<prefix>.w` (Xavier) and `<prefix>.b` (zero).
    pub fn insert_affine(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.insert(&format!("{prefix}.w"), xavier(&[fan_in, fan_out], rng)?, true)?;
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]), true)
    }

    /// Conv layer entries `<prefix>.k` and `<prefix>.b`.
    pub fn insert_conv(
        &mut self,
        prefix: &str,
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let shape = [out_channels, in_channels, kernel, kernel];
        self.insert(&format!("{prefix}.k"), xavier(&shape, rng)?, true)?;
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&[out_channels]), true)
    }

    /// Batchnorm entries: trainable `gamma`/`beta`, buffer running stats.
    pub fn insert_batchnorm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(&format!("{prefix}.gamma"), Tensor::full(&[channels], S::one()), true)?;
        self.insert(&format!("{prefix}.beta"), Tensor::zeros(&[channels]), true)?;
        self.insert(
            &format!("{prefix}.running_mean"),
            Tensor::zeros(&[channels]),
            false,
        )?;
        self.insert(
            &format!("{prefix}.running_var"),
            Tensor::full(&[channels], S::one()),
            false,
        )
    }

    /// LSTM entries `<prefix>.wx`, `<prefix>.wh` (Xavier) and
    /// `<prefix>.b` (forget gate +1).
    pub fn insert_lstm(
        &mut self,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.insert(&format!("{prefix}.wx"), xavier(&[input, 4 * hidden], rng)?, true)?;
        self.insert(&format!("{prefix}.wh"), xavier(&[hidden, 4 * hidden], rng)?, true)?;
        self.insert(&format!("{prefix}.b"), lstm_bias(hidden), true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = xavier(&[100, 50], &mut rng).unwrap();
        let bound = (6.0 / 150.0f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let mean = w.data().iter().sum::<f64>() / w.numel() as f64;
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn conv_xavier_uses_receptive_field_fans() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Tensor<f64> = xavier(&[8, 3, 3, 3], &mut rng).unwrap();
        let bound = (6.0 / ((3 * 9 + 8 * 9) as f64)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn lstm_bias_has_forget_block_one() {
        let b: Tensor<f64> = lstm_bias(3);
        assert_eq!(
            b.data(),
            &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(ps.insert("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn ordering_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f64>::new();
        ps.insert_affine("g0", 4, 8, &mut rng).unwrap();
        ps.insert_batchnorm("bn0", 8).unwrap();
        let names: Vec<&str> = ps.iter().map(|(n, _, _)| n).collect();
        assert_eq!(
            names,
            ["g0.w", "g0.b", "bn0.gamma", "bn0.beta", "bn0.running_mean", "bn0.running_var"]
        );
        // (4+1)·8 affine + gamma 8 + beta 8; running stats are buffers.
        assert_eq!(ps.trainable_count(), 40 + 16);
    }

    #[test]
    fn grad_average_is_elementwise_mean() {
        let mk = |v: f64| {
            let mut m = HashMap::new();
            m.insert("p".to_string(), Tensor::full(&[2], v));
            GradSet { by_name: m }
        };
        let avg = GradSet::average(&[mk(1.0), mk(3.0)]).unwrap();
        assert_eq!(avg.get("p").unwrap().data(), &[2.0, 2.0]);
    }
}
