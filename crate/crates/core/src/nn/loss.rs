use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Added to each logit-vector norm before dividing.
pub const LOGIT_NORM_GUARD: f64 = 1e-12;

/// Mean label-smoothed cross-entropy over a `[batch, classes]` logit matrix.
///
/// The target class gets weight `1 - smoothing` and every class an extra
/// `smoothing / classes`. With `logit_normalize` each row of logits is first
/// divided by its l2 norm.
pub fn cross_entropy_ls<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    targets: &[usize],
    smoothing: S,
    logit_normalize: bool,
) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let [batch, classes] = shape[..] else {
        return invalid(format!("cross_entropy: logits must be [batch, classes], got {shape:?}"));
    };
    if targets.len() != batch {
        return invalid(format!(
            "cross_entropy: {} targets for a batch of {batch}",
            targets.len()
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return invalid(format!("cross_entropy: target {t} out of range for {classes} classes"));
    }
    if !(smoothing >= S::zero() && smoothing < S::one()) {
        return invalid("cross_entropy: smoothing must lie in [0, 1)");
    }
    let z = if logit_normalize {
        tape.l2_normalize_rows(logits, S::of(LOGIT_NORM_GUARD))?
    } else {
        logits
    };
    let logp = tape.log_softmax(z)?;
    let uniform = smoothing / S::of(classes as f64);
    let mut w = vec![uniform; batch * classes];
    for (i, &t) in targets.iter().enumerate() {
        w[i * classes + t] = w[i * classes + t] + (S::one() - smoothing);
    }
    let w = tape.constant(Tensor::new(vec![batch, classes], w)?);
    let picked = tape.mul(logp, w)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -S::one() / S::of(batch as f64))
}

/// Number of rows whose argmax (first on ties) equals the target.
pub fn accuracy_count<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(targets)
        .filter(|(row, &t)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == t
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: &[f64], classes: usize, targets: &[usize], s: f64, norm: bool) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(
            Tensor::new(vec![logits.len() / classes, classes], logits.to_vec()).unwrap(),
        );
        let loss = cross_entropy_ls(&mut tape, l, targets, s, norm).unwrap();
        tape.value(loss).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let ln2 = std::f64::consts::LN_2;
        assert!((ce(&[0., 0.], 2, &[0], 0.0, false) - ln2).abs() < 1e-15);
        assert!((ce(&[0., 0.], 2, &[0], 0.1, false) - ln2).abs() < 1e-15);
    }

    #[test]
    fn logit_normalized_example() {
        // [3,4] -> [0.6,0.8]; -log softmax_0 = log(1 + e^{0.2})
        let expected = (1.0 + 0.2f64.exp()).ln();
        let got = ce(&[3., 4.], 2, &[0], 0.0, true);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.7981).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_target() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::new(vec![1, 2], vec![0., 0.]).unwrap());
        assert!(cross_entropy_ls(&mut tape, l, &[2], 0.0, false).is_err());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let t = Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 2., 2.]).unwrap();
        assert_eq!(accuracy_count(&t, &[0, 1, 1]), 2);
    }
}
