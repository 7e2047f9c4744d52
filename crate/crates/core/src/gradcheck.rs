//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, half_sq_l2, half_sq_l2_value, memory_softmax_loss, triplet_center_loss,
    BatchFeatures, SoftmaxTarget,
};
use crate::memory::{ClassCenters, MemoryBank};
use crate::tensor::{Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar node. It is re-run twice per coordinate, so it has to be
/// deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let analytic = analytic_gradient(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        if !plus.is_finite() || !minus.is_finite() || !numeric.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value while perturbing coordinate {i}"
            )));
        }
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Gradient of `f` at `x` from a single reverse sweep.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, leaf)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::shape("finite_diff_check", &[value.shape()]));
    }
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite function value at the base point".into()));
    }
    let grads = tape.backward(out, &Tensor::scalar(1.0))?;
    let g = match grads.get(leaf) {
        Some(g) => g.data().to_vec(),
        // the output does not depend on x
        None => vec![0.0; x.numel()],
    };
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite analytic gradient at coordinate {i}")));
    }
    Ok(g)
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    Ok(tape.value(out).item())
}

/// Shape of the random problems used by [`loss_gradient_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCheckSpec {
    pub configs: usize,
    pub batch: usize,
    pub parts: usize,
    pub channels: usize,
    pub step: f64,
    /// Points whose hinge argument or nearest-negative gap is closer than
    /// this to a kink are redrawn.
    pub kink: f64,
}

impl Default for LossCheckSpec {
    fn default() -> Self {
        LossCheckSpec {
            configs: 50,
            batch: 4,
            parts: 2,
            channels: 8,
            step: 1e-5,
            kink: 1e-3,
        }
    }
}

/// Worst relative gradient error of one loss over all configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: &'static str,
    pub max_error: f64,
    pub configs: usize,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_error < GRADCHECK_TOLERANCE
    }
}

struct LossProblem {
    labels: Vec<usize>,
    bank: MemoryBank,
    centers: ClassCenters,
    alpha: f64,
    beta: f64,
    lambda: f64,
    x: Tensor,
}

fn batch_on_tape(tape: &mut Tape, x: Var, p: &LossProblem, parts: usize, c: usize) -> Result<BatchFeatures> {
    let n = p.labels.len();
    let mut features = Vec::with_capacity(n);
    for s in 0..n {
        let mut row = Vec::with_capacity(parts);
        for b in 0..parts {
            let start = (s * parts + b) * c;
            row.push(tape.slice(x, start..start + c)?);
        }
        features.push(row);
    }
    Ok(BatchFeatures {
        features,
        labels: p.labels.clone(),
        image_indices: (0..n).collect(),
    })
}

fn near_kink(p: &LossProblem, parts: usize, c: usize, kink: f64) -> bool {
    for (s, &label) in p.labels.iter().enumerate() {
        let own = p.centers.row_of(label).expect("every label has a center");
        for b in 0..parts {
            let f = &p.x.data()[(s * parts + b) * c..(s * parts + b + 1) * c];
            let dpos = half_sq_l2_value(f, p.centers.center(own, b));
            let mut negs: Vec<f64> = (0..p.centers.len())
                .filter(|&r| r != own)
                .map(|r| half_sq_l2_value(f, p.centers.center(r, b)))
                .collect();
            negs.sort_by(f64::total_cmp);
            if (dpos + p.alpha - negs[0]).abs() < kink {
                return true;
            }
            if negs.len() > 1 && negs[1] - negs[0] < kink {
                return true;
            }
        }
    }
    false
}

fn draw_problem(rng: &mut ChaCha8Rng, spec: &LossCheckSpec) -> Result<LossProblem> {
    let (parts, c) = (spec.parts, spec.channels);
    let identities = rng.random_range(2..=4usize);
    // two bank images per identity, plus the batch drawn from those identities
    let ids: Vec<usize> = (0..identities).flat_map(|i| [i, i]).collect();
    let mut bank = MemoryBank::new(ids, parts, c, 0.5)?;
    for img in 0..bank.len() {
        for b in 0..parts {
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            bank.write(img, b, &v)?;
        }
    }
    let mut labels: Vec<usize> = (0..spec.batch).map(|_| rng.random_range(0..identities)).collect();
    if labels.iter().all(|&l| l == labels[0]) {
        labels[0] = (labels[0] + 1) % identities;
    }
    loop {
        let x = Tensor::new(
            vec![spec.batch * parts * c],
            (0..spec.batch * parts * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let p = LossProblem {
            labels: labels.clone(),
            centers: bank.class_centers(),
            bank: bank.clone(),
            alpha: rng.random_range(0.1..1.5),
            beta: rng.random_range(0.05..1.0),
            lambda: rng.random_range(0.0..2.0),
            x,
        };
        if !near_kink(&p, parts, c, spec.kink) {
            return Ok(p);
        }
    }
}

/// Gradient checks of the pairwise distance, the triplet-center loss, both
/// memory softmax targets and the combined loss over seeded random problems.
pub fn loss_gradient_report(seed: u64, spec: &LossCheckSpec) -> Result<Vec<GradcheckRow>> {
    if spec.configs == 0 || spec.batch == 0 || spec.parts == 0 || spec.channels == 0 {
        return Err(Error::Config("gradient check sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["distance", "triplet_center", "softmax_class", "softmax_instance", "combined"];
    let mut worst = [0.0f64; 5];
    let (parts, c) = (spec.parts, spec.channels);
    for _ in 0..spec.configs {
        let p = draw_problem(&mut rng, spec)?;
        for (k, slot) in worst.iter_mut().enumerate() {
            let err = finite_diff_check(
                |tape, x| {
                    let batch = batch_on_tape(tape, x, &p, parts, c)?;
                    match k {
                        0 => {
                            let mut terms = Vec::new();
                            for (feats, &label) in batch.features.iter().zip(&batch.labels) {
                                let row = p.centers.row_of(label).expect("center");
                                for (b, &f) in feats.iter().enumerate() {
                                    let cv = tape.constant(Tensor::vector(p.centers.center(row, b).to_vec()));
                                    terms.push(half_sq_l2(tape, f, cv)?);
                                }
                            }
                            tape.sum_scalars(&terms)
                        }
                        1 => Ok(triplet_center_loss(tape, &batch, &p.centers, p.alpha)?.value),
                        2 | 3 => {
                            let target = if k == 2 { SoftmaxTarget::Class } else { SoftmaxTarget::Instance };
                            Ok(memory_softmax_loss(tape, &batch, &p.bank, Some(&p.centers), p.beta, target)?.value)
                        }
                        _ => {
                            let tcl = triplet_center_loss(tape, &batch, &p.centers, p.alpha)?.value;
                            let sm = memory_softmax_loss(
                                tape,
                                &batch,
                                &p.bank,
                                Some(&p.centers),
                                p.beta,
                                SoftmaxTarget::Class,
                            )?
                            .value;
                            combined_loss(tape, tcl, sm, p.lambda)
                        }
                    }
                },
                &p.x,
                spec.step,
            )?;
            *slot = slot.max(err);
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&name, max_error)| GradcheckRow {
            name,
            max_error,
            configs: spec.configs,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::tensor::Region;
    use proptest::prelude::*;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -0.2]);
        let err = finite_diff_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn half_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, vec![8]);
        let err = finite_diff_check(
            |t, x| {
                let d = t.dot(x, x)?;
                Ok(t.scale(d, 0.5))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|t, x| t.dot(x, x), &x, 0.0).is_err());
    }

    #[test]
    fn reports_non_finite() {
        let x = Tensor::vector(vec![1e308, 1e308]);
        let err = finite_diff_check(
            |t, x| {
                let y = t.scale(x, 10.0);
                t.dot(y, y)
            },
            &x,
            1e-6,
        );
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    // Each op, composed into a scalar through a fixed random projection so
    // that every output coordinate carries weight.
    fn check_op(seed: u64, op: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let other = random_tensor(&mut rng, vec![4, 3]);
        let w = random_tensor(&mut rng, vec![64]);
        let x = random_tensor(&mut rng, vec![4, 3, 2]);
        let f = move |t: &mut Tape, x: Var| -> Result<Var> {
            let y = match op {
                0 => {
                    let flat = t.reshape(x, vec![4, 6])?;
                    let o = t.constant(other.clone().reshape(vec![6, 2])?);
                    t.matmul(flat, o)?
                }
                1 => {
                    let o = t.constant(Tensor::new(vec![4, 3, 2], w.data()[..24].to_vec())?);
                    t.add(x, o)?
                }
                2 => t.scale(x, -1.7),
                3 => t.relu(x),
                4 => t.mean_over_region(x, &Region { rows: 1..4, cols: 0..2 })?,
                5 => {
                    let flat = t.reshape(x, vec![24])?;
                    t.l2_normalize(flat)
                }
                6 => {
                    let o = t.constant(Tensor::new(vec![4, 3, 2], w.data()[..24].to_vec())?);
                    t.dot(x, o)?
                }
                7 => {
                    let a = t.slice(x, 0..1)?;
                    let b = t.slice(x, 2..4)?;
                    t.concat(&[b, a, b])?
                }
                8 => {
                    let flat = t.reshape(x, vec![24])?;
                    let s = t.scale(flat, 3.0);
                    t.cross_entropy(s, 5)?
                }
                _ => unreachable!(),
            };
            let n = t.value(y).numel();
            let proj = t.constant(Tensor::vector(w.data()[..n].to_vec()));
            let flat = t.reshape(y, vec![n])?;
            t.dot(flat, proj)
        };
        finite_diff_check(f, &x, 1e-6).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn every_op_matches_central_differences(seed in 0u64..10_000, op in 0usize..9) {
            let err = check_op(seed, op);
            // relu kinks are measure-zero for uniform inputs
            prop_assert!(err < 1e-5, "op {} err {}", op, err);
        }

        #[test]
        fn backward_is_linear_in_seed(seed in 0u64..10_000, alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, vec![5]);
            let s = random_tensor(&mut rng, vec![5]);
            let mut t = Tape::new();
            let xv = t.leaf(x.with_grad());
            let n = t.l2_normalize(xv);
            let y = t.relu(n);
            let g1 = t.backward(y, &s).unwrap();
            let g2 = t.backward(y, &s.scaled(alpha)).unwrap();
            for (a, b) in g1.get(xv).unwrap().data().iter().zip(g2.get(xv).unwrap().data()) {
                prop_assert!((a * alpha - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, vec![4, 3, 2]);
        let run = || {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let m = t.mean_over_region(v, &Region { rows: 0..4, cols: 0..3 }).unwrap();
            let n = t.l2_normalize(m);
            t.value(n).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn loss_report_passes_on_a_few_problems() {
        let spec = LossCheckSpec {
            configs: 5,
            ..Default::default()
        };
        let rows = loss_gradient_report(11, &spec).unwrap();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
        assert_eq!(rows, loss_gradient_report(11, &spec).unwrap());
    }
}
