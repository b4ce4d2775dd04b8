use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<S> {
    /// max over coordinates of |autodiff - fd| / max(1, |fd|)
    pub max_rel_error: S,
    pub worst_index: usize,
    pub autodiff: Vec<S>,
    pub finite_diff: Vec<S>,
}

/// Compare autodiff against central finite differences of `f` at `point`.
///
/// `f` builds a scalar program on a fresh tape from the input variable.
pub fn grad_check<S, F>(f: F, point: &Tensor<S>, fd_step: S) -> Result<GradCheckReport<S>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let eval = |data: Vec<S>| -> Result<S> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(point.shape().to_vec(), data)?);
        let y = f(&mut tape, x)?;
        tape.value(y).item()
    };

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::NotScalar(tape.value(y).shape().to_vec()));
    }
    let autodiff = tape.backward(y)?.of(x)?.to_vec();

    let two = S::one() + S::one();
    let mut finite_diff = Vec::with_capacity(point.len());
    let mut max_rel_error = S::zero();
    let mut worst_index = 0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        plus[i] = plus[i] + fd_step;
        let mut minus = point.data().to_vec();
        minus[i] = minus[i] - fd_step;
        let fd = (eval(plus)? - eval(minus)?) / (two * fd_step);
        let err = (autodiff[i] - fd).abs() / fd.abs().max(S::one());
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
        finite_diff.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        autodiff,
        finite_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_square_is_exact() {
        let p = Tensor::from_vec(vec![3.0f64]).unwrap();
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!((r.autodiff[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_function_rejected() {
        let p = Tensor::from_vec(vec![1.0f64, 2.0]).unwrap();
        let err = grad_check(|t, x| t.relu(x), &p, 1e-5).unwrap_err();
        assert_eq!(err, Error::NotScalar(vec![2]));
    }
}
