use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{Bound, ParameterSet};

fn evaluate<F>(params: &ParameterSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let loss = f(&mut g, &b)?;
    Ok(g.scalar(loss))
}

/// Compares reverse-mode gradients of `f` with central finite differences.
/// The numeric side is Richardson-extrapolated from steps `eps` and `eps/2`,
/// which cancels the `eps^2` truncation term, so a step large enough to keep
/// rounding out of near-zero coordinates still gives an accurate reference.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// over the checked coordinates. `max_coords` caps how many evenly spaced
/// coordinates are probed per tensor (`None` checks all of them). `f` must be
/// deterministic: stochastic parts have to draw from a freshly seeded stream
/// on every call.
pub fn grad_check<F>(params: &ParameterSet, eps: f64, max_coords: Option<usize>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    let base = g.scalar(loss);
    let grads = g.backward(loss)?;

    let again = evaluate(params, &f)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let var = bound.get(name);
        let zeros = vec![0.0; t.len()];
        let analytic = grads.get(var).unwrap_or(&zeros);
        let n = t.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = t.values()[j];
            let mut central = |h: f64| -> Result<f64> {
                probe.get_mut(name).unwrap().values_mut()[j] = orig + h;
                let plus = evaluate(&probe, &f)?;
                probe.get_mut(name).unwrap().values_mut()[j] = orig - h;
                let minus = evaluate(&probe, &f)?;
                probe.get_mut(name).unwrap().values_mut()[j] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let (coarse, fine) = (central(eps)?, central(eps / 2.0)?);
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::row(vec![0.5, -1.5, 2.0])).unwrap();
        let err = grad_check(&ps, 1e-5, None, |g, p| {
            let sq = g.square(p.get("w"));
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn extrapolation_tolerates_a_coarse_step() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::row(vec![0.3, -0.7, 1.1])).unwrap();
        // plain central differences at this step are off by about 1e-5
        let err = grad_check(&ps, 1e-2, None, |g, p| {
            let e = g.exp(p.get("w"));
            Ok(g.sum(e))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn unfrozen_noise_is_detected() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::row(vec![0.5, -1.5])).unwrap();
        let counter = std::cell::Cell::new(0u64);
        let res = grad_check(&ps, 1e-5, None, |g, p| {
            counter.set(counter.get() + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(counter.get());
            let noise: Vec<f64> = (0..2).map(|_| rng.random()).collect();
            let n = g.row(&noise);
            let m = g.mul(p.get("w"), n)?;
            Ok(g.sum(m))
        });
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }
}
