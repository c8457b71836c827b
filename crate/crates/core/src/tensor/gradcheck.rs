//! Central finite-difference validation of tape gradients.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compare tape gradients of a scalar-valued function against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)`, one coordinate at a time.
///
/// Returns the maximum relative error over all input coordinates, where the
/// relative error uses an absolute floor of 1e-8 in the denominator. `f`
/// must be deterministic and produce a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid("grad_check", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &leaves)?;
    if loss.numel() != 1 {
        return Err(Error::invalid("grad_check", format!("f returned shape {:?}", loss.shape())));
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|leaf| grads.get(leaf).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; leaf.numel()]))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let out = f(&mut tape, probe)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            let mut minus: Vec<Tensor> = inputs.to_vec();
            let mut pd = input.data().to_vec();
            pd[j] += eps;
            plus[i] = Tensor::from_vec(input.shape().to_vec(), pd);
            let mut md = input.data().to_vec();
            md[j] -= eps;
            minus[i] = Tensor::from_vec(input.shape().to_vec(), md);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BackwardFn, GradStore};

    #[test]
    fn quadratic_is_exact() {
        // f(x) = sum(x^2) at (1,2,3); central differences are exact for
        // quadratics up to float rounding.
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]);
        let err = grad_check(
            |tape, xs| {
                let sq = tape.mul(&xs[0], &xs[0])?;
                tape.sum_all(&sq)
            },
            &[x.clone()],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");

        // And the analytic gradient itself is (2, 4, 6).
        let mut tape = Tape::new();
        let xl = tape.leaf(&x);
        let sq = tape.mul(&xl, &xl).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&xl).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(|tape, xs| tape.sum_all(&xs[0]), &[x], 1e-2);
        assert!(r.is_err());
    }

    #[test]
    fn detects_corrupted_backward_rule() {
        // An op whose backward rule is deliberately off by 10% must be
        // flagged; this is the suite's own sensitivity check.
        let x = Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.25]);
        let err = grad_check(
            |tape, xs| {
                let a = &xs[0];
                let data: Vec<f64> = a.data().iter().map(|v| v * v).collect();
                let rec: Option<BackwardFn> = tape.wants_grad(&[a]).then(|| {
                    let node = a.node().unwrap();
                    let src = a.data_arc();
                    Box::new(move |g: &[f64], store: &mut GradStore| {
                        // wrong: correct rule is 2x, this applies 2.2x
                        let contrib: Vec<f64> =
                            g.iter().zip(src.iter()).map(|(g, x)| g * 2.2 * x).collect();
                        store.give(node, contrib);
                    }) as BackwardFn
                });
                let sq = tape.emit("bad_square", a.shape().to_vec(), data, rec);
                tape.sum_all(&sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "corrupted rule not detected, err = {err}");
    }
}
