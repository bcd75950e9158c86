//! Finite-difference verification of backward rules.
//!
//! The check treats the graph builder as a black box `inputs → scalar
//! loss`, evaluates it twice to rule out hidden nondeterminism, then
//! compares analytic gradients against central differences on a sample
//! of coordinates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Worst probed coordinate and its error.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: String,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// finite differences on up to `probe_count` coordinates (all of them if
/// the inputs have fewer). Relative error is
/// `|a − n| / max(|a|, |n|, 1e-6)`; the denominator floor sits well
/// above the irreducible central-difference roundoff (machine epsilon
/// times the loss scale over the step, ≈1e-11) so coordinates whose
/// true gradient is essentially zero don't report FD noise as error,
/// while any real backward bug still shows up orders of magnitude
/// beyond the floor.
///
/// `build` must be deterministic; it is evaluated twice and any
/// disagreement is a determinism error.
pub fn gradient_check<F>(
    inputs: &[(&str, Tensor<f64>)],
    probe_count: usize,
    seed: u64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let tensors: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();

    let first = eval_loss(&tensors, &build)?;
    let second = eval_loss(&tensors, &build)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!(
            "loss changed between evaluations: {first} vs {second}"
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Dimension {
            op: "gradient_check",
            lhs: tape.value(loss).shape().to_vec(),
            rhs: vec![1],
        });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&tensors)
        .map(|(&id, t)| match tape.grad(id) {
            Some(g) => g.into_data(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    // Choose probe coordinates.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, t) in tensors.iter().enumerate() {
        for e in 0..t.numel() {
            coords.push((i, e));
        }
    }
    if probe_count < coords.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(probe_count);
    }

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_input: String::new(),
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut perturbed = tensors.clone();
    for (i, e) in coords {
        let orig = perturbed[i].data()[e];
        perturbed[i].data_mut()[e] = orig + FD_STEP;
        let up = eval_loss(&perturbed, &build)?;
        perturbed[i].data_mut()[e] = orig - FD_STEP;
        let down = eval_loss(&perturbed, &build)?;
        perturbed[i].data_mut()[e] = orig;

        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i][e];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_input = inputs[i].0.to_string();
            report.worst_coord = e;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn eval_loss<F>(tensors: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Dimension {
            op: "gradient_check",
            lhs: tape.value(loss).shape().to_vec(),
            rhs: vec![1],
        });
    }
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient_check loss".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Forward multiplies by `c`, but the recorded op claims `c_recorded`,
    /// so backward is deliberately wrong. Harness sensitivity bait.
    fn scale_with_wrong_backward(
        tape: &mut Tape<f64>,
        x: ValueId,
        c: f64,
        c_recorded: f64,
    ) -> ValueId {
        use crate::tape::Op;
        let out = tape.values[x.0].map(|v| v * c);
        let req = tape.requires[x.0];
        tape.push(out, req, Op::Scale { x: x.0, c: c_recorded })
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::rand_uniform(&[4, 3], -2.0, 2.0, &mut rng);
        let inputs = [("p", p)];
        let report = gradient_check(&inputs, usize::MAX, 0, |tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-9, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn probe_subsampling_checks_fewer_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::rand_uniform(&[10, 10], -1.0, 1.0, &mut rng);
        let inputs = [("p", p)];
        let report = gradient_check(&inputs, 5, 123, |tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-9);
    }

    #[test]
    fn wrong_backward_rule_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::rand_uniform(&[3, 3], 0.5, 1.5, &mut rng);
        let inputs = [("p", p)];
        let report = gradient_check(&inputs, usize::MAX, 0, |tape, ids| {
            let y = scale_with_wrong_backward(tape, ids[0], 2.0, 3.0);
            Ok(tape.sum_all(y))
        })
        .unwrap();
        assert!(report.max_rel_err > 1e-2, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn nondeterministic_loss_is_an_error() {
        let inputs = [("p", Tensor::full(&[2, 2], 1.0))];
        let err = gradient_check(&inputs, usize::MAX, 0, |tape, ids| {
            let jitter = rand::thread_rng().gen::<f64>();
            let y = tape.scale(ids[0], 1.0 + jitter);
            Ok(tape.sum_all(y))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Determinism(_)));
    }
}
