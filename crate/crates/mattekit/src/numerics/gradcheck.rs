//! Central finite-difference validation of tape gradients.

use crate::error::{Error, Result};

use super::graph::Tape;
use super::param::ParamSet;
use super::rng::SeededRng;
use super::NodeId;

pub const GRAD_CHECK_EPS: f64 = 1e-3;

/// Compare analytic parameter gradients against central finite differences
/// on `entries` randomly sampled parameter elements.
///
/// `forward` builds the scalar loss for the given parameter values; it is
/// invoked once for the analytic pass and twice per sampled entry. Returns
/// the max relative error |analytic - fd| / (|analytic| + |fd| + 1e-8).
pub fn grad_check<F>(
    params: &ParamSet,
    entries: usize,
    rng: &mut SeededRng,
    forward: F,
) -> Result<f64>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::invalid("grad_check: non-finite loss".to_string()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = tape
        .bound_params()
        .map(|(name, id)| {
            let g = grads
                .get(id)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; params.value(name).numel()]);
            (name.to_string(), g)
        })
        .collect();

    let total: usize = analytic.iter().map(|(_, g)| g.len()).sum();
    if total == 0 {
        return Err(Error::domain("grad_check: no bound parameters".to_string()));
    }

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(ps, &mut tape)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::invalid("grad_check: non-finite loss".to_string()));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for _ in 0..entries {
        let mut flat = rng.below(total);
        let (name, elem, a) = {
            let mut found = None;
            for (name, g) in &analytic {
                if flat < g.len() {
                    found = Some((name.clone(), flat, g[flat]));
                    break;
                }
                flat -= g.len();
            }
            found.expect("flat index in range")
        };

        let mut perturbed = params.clone();
        perturbed.get_mut(&name).unwrap().value.data_mut()[elem] += GRAD_CHECK_EPS;
        let plus = eval(&perturbed)?;
        perturbed.get_mut(&name).unwrap().value.data_mut()[elem] -= 2.0 * GRAD_CHECK_EPS;
        let minus = eval(&perturbed)?;
        let fd = (plus - minus) / (2.0 * GRAD_CHECK_EPS);

        let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn linear_model_squared_loss_is_exact() {
        // y = w . x, loss = y^2: quadratic in w, so central differences are exact
        let x = Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(&[3, 1], vec![0.3, 0.7, -0.2]).unwrap())
            .unwrap();
        let mut rng = SeededRng::new(1);
        let err = grad_check(&ps, 30, &mut rng, |ps, tape| {
            let xn = tape.leaf(x.clone());
            let wn = tape.param(ps, "w");
            let y = tape.matmul(xn, wn);
            let sq = tape.mul(y, y);
            Ok(tape.mean_all(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(&[2], vec![1.0, -3.0]).unwrap())
            .unwrap();
        let mut rng = SeededRng::new(2);
        let err = grad_check(&ps, 10, &mut rng, |ps, tape| {
            let wn = tape.param(ps, "w");
            let zero = tape.scale(wn, 0.0);
            let c = tape.offset(zero, 4.0);
            Ok(tape.mean_all(c))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nonfinite_loss_is_reported() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(1e308)).unwrap();
        let mut rng = SeededRng::new(3);
        let res = grad_check(&ps, 4, &mut rng, |ps, tape| {
            let wn = tape.param(ps, "w");
            Ok(tape.mul(wn, wn))
        });
        assert!(matches!(res, Err(Error::InvalidValue(_))));
    }
}
