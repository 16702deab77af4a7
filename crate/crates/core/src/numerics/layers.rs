//! Layer building blocks shared by every network in the crate.

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{Bound, ParameterSet};

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    w: String,
    b: String,
}

impl Linear {
    pub fn new(prefix: &str, input: usize, output: usize) -> Self {
        Linear {
            input,
            output,
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) -> Result<()> {
        ps.insert_scaled_uniform(&self.w, self.input, self.output, rng)?;
        ps.insert_zeros(&self.b, 1, self.output)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.affine(x, p.get(&self.w), p.get(&self.b))
    }
}

/// Gated recurrent unit. Gates are packed as `[reset | update | candidate]`
/// along the columns of the input and hidden projections.
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    w_x: String,
    w_h: String,
    b_x: String,
    b_h: String,
}

impl Gru {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        Gru {
            input,
            hidden,
            w_x: format!("{prefix}.w_x"),
            w_h: format!("{prefix}.w_h"),
            b_x: format!("{prefix}.b_x"),
            b_h: format!("{prefix}.b_h"),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) -> Result<()> {
        let h3 = 3 * self.hidden;
        ps.insert_scaled_uniform(&self.w_x, self.input, h3, rng)?;
        ps.insert_scaled_uniform(&self.w_h, self.hidden, h3, rng)?;
        ps.insert_zeros(&self.b_x, 1, h3)?;
        ps.insert_zeros(&self.b_h, 1, h3)
    }

    /// One recurrent update over a batch: `h_prev` is `B x H`, `x` is `B x F`.
    pub fn step(&self, g: &mut Graph, p: &Bound, h_prev: Var, x: Var) -> Result<Var> {
        let xp = g.affine(x, p.get(&self.w_x), p.get(&self.b_x))?;
        self.step_projected(g, p, h_prev, xp)
    }

    fn step_projected(&self, g: &mut Graph, p: &Bound, h: Var, xp: Var) -> Result<Var> {
        let hp = g.affine(h, p.get(&self.w_h), p.get(&self.b_h))?;
        g.gru_cell(h, xp, hp)
    }

    /// Runs the cell over the rows of `xs` (`T x F`) starting from `h0`
    /// (`1 x H`); returns every hidden state stacked as `T x H`.
    pub fn unroll(&self, g: &mut Graph, p: &Bound, xs: Var, h0: Var) -> Result<Var> {
        self.unroll_batch(g, p, xs, 1, h0)
    }

    /// Runs `batch` sequences in lockstep. Row `t * batch + b` of `xs` is the
    /// input of sequence `b` at step `t`; `h0` is `batch x H`. The result has
    /// the same row layout. Padded positions are computed like any other, so
    /// callers pick the rows they need.
    pub fn unroll_batch(&self, g: &mut Graph, p: &Bound, xs: Var, batch: usize, h0: Var) -> Result<Var> {
        let rows = g.dims(xs).0;
        if batch == 0 || rows % batch != 0 {
            return Err(Error::shape("gru_unroll", &[rows], &[batch]));
        }
        let steps = rows / batch;
        let xp = g.affine(xs, p.get(&self.w_x), p.get(&self.b_x))?;
        let mut h = h0;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = if steps == 1 {
                xp
            } else {
                g.slice_rows(xp, t * batch, (t + 1) * batch)?
            };
            h = self.step_projected(g, p, h, xt)?;
            states.push(h);
        }
        if states.len() == 1 {
            Ok(states[0])
        } else {
            g.stack_rows(&states)
        }
    }
}

/// Variable-length feature sequences padded with zeros into the row layout
/// used by [`Gru::unroll_batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub steps: usize,
    pub dim: usize,
    pub lengths: Vec<usize>,
    data: Vec<f64>,
}

impl PaddedBatch {
    pub fn new(seqs: &[&[Vec<f64>]]) -> Result<Self> {
        let batch = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if batch == 0 || steps == 0 {
            return Err(Error::Empty("padded batch"));
        }
        let dim = seqs.iter().find_map(|s| s.first()).map(Vec::len).unwrap_or(0);
        let mut data = vec![0.0; steps * batch * dim];
        for (b, seq) in seqs.iter().enumerate() {
            for (t, x) in seq.iter().enumerate() {
                if x.len() != dim {
                    return Err(Error::shape("padded_batch", &[dim], &[x.len()]));
                }
                let at = (t * batch + b) * dim;
                data[at..at + dim].copy_from_slice(x);
            }
        }
        Ok(PaddedBatch {
            batch,
            steps,
            dim,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            data,
        })
    }

    /// Row holding step `t` of sequence `b`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        t * self.batch + b
    }

    pub fn leaf(&self, g: &mut Graph) -> Result<Var> {
        g.leaf_values(self.steps * self.batch, self.dim, self.data.clone())
    }
}

/// Token-id sequences padded with `pad` in the same row layout.
pub fn padded_ids(seqs: &[&[usize]], steps: usize, pad: usize) -> Vec<usize> {
    let batch = seqs.len();
    let mut ids = vec![pad; steps * batch];
    for (b, s) in seqs.iter().enumerate() {
        for (t, &id) in s.iter().enumerate().take(steps) {
            ids[t * batch + b] = id;
        }
    }
    ids
}

/// Reparameterized draw `mu + exp(logvar / 2) * noise`; `noise` is treated as
/// a constant.
pub fn gaussian_sample(g: &mut Graph, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let scaled = g.mul(std, noise)?;
    g.add(mu, scaled)
}

/// Summed log-density of `z` under the diagonal Gaussian `N(mu, e^logvar)`.
pub fn gaussian_log_density(g: &mut Graph, z: Var, mu: Var, logvar: Var) -> Result<Var> {
    let n = g.value(z).len() as f64;
    let d = g.sub(z, mu)?;
    let d2 = g.square(d);
    let neg = g.neg(logvar);
    let inv_var = g.exp(neg);
    let maha = g.mul(d2, inv_var)?;
    let inner = g.add(maha, logvar)?;
    let s = g.sum(inner);
    let s = g.add_scalar(s, n * (2.0 * std::f64::consts::PI).ln());
    Ok(g.scale(s, -0.5))
}

/// KL divergence from `N(mu, e^logvar)` to the standard normal prior.
pub fn kl_to_standard_normal(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let (r, c) = g.dims(mu);
    let zeros = g.zeros(r, c);
    g.gaussian_kl(mu, logvar, zeros, zeros)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.row(&[1.0, 0.0]);
        let w = g.leaf(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.row(&[0.0, 0.0]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 0.0]);

        let x = g.row(&[1.0, 2.0]);
        let w = g.leaf(&Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let b = g.row(&[1.0, 0.0]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &[4.0, 3.0]);
    }

    #[test]
    fn affine_random_case_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bs: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.leaf_values(3, 4, xs.clone()).unwrap();
        let w = g.leaf_values(4, 5, ws.clone()).unwrap();
        let b = g.row(&bs);
        let y = g.affine(x, w, b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = bs[j];
                for k in 0..4 {
                    s += xs[i * 4 + k] * ws[k * 5 + j];
                }
                assert!((g.value(y)[i * 5 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_shape_error() {
        let mut g = Graph::new();
        let x = g.row(&[1.0, 2.0, 3.0]);
        let w = g.zeros(2, 2);
        let b = g.row(&[0.0, 0.0]);
        assert!(g.affine(x, w, b).is_err());
    }

    fn zero_gru() -> (Gru, ParameterSet) {
        let gru = Gru::new("rnn", 3, 4);
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        gru.init(&mut ps, &mut rng).unwrap();
        for (_, t) in ps.iter_mut() {
            t.values_mut().fill(0.0);
        }
        (gru, ps)
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let (gru, ps) = zero_gru();
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let h = g.zeros(1, 4);
        let x = g.row(&[0.3, -1.0, 2.0]);
        let h1 = gru.step(&mut g, &p, h, x).unwrap();
        assert_eq!(g.value(h1), &[0.0; 4]);
    }

    #[test]
    fn hidden_size_mismatch_is_an_error() {
        let (gru, ps) = zero_gru();
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let h = g.zeros(1, 5);
        let x = g.row(&[0.3, -1.0, 2.0]);
        assert!(gru.step(&mut g, &p, h, x).is_err());
    }

    #[test]
    fn unroll_equals_repeated_steps() {
        let gru = Gru::new("rnn", 3, 4);
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        gru.init(&mut ps, &mut rng).unwrap();
        let rows = [[0.1, 0.2, -0.3], [1.0, -0.5, 0.25]];
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let h0 = g.zeros(1, 4);
        let x0 = g.row(&rows[0]);
        let x1 = g.row(&rows[1]);
        let h1 = gru.step(&mut g, &p, h0, x0).unwrap();
        let h2 = gru.step(&mut g, &p, h1, x1).unwrap();
        let xs = g.leaf_values(2, 3, rows.concat()).unwrap();
        let all = gru.unroll(&mut g, &p, xs, h0).unwrap();
        assert_eq!(&g.value(all)[4..], g.value(h2));
        assert_eq!(&g.value(all)[..4], g.value(h1));
    }

    #[test]
    fn three_step_unroll_gradient_matches_finite_differences() {
        let gru = Gru::new("rnn", 3, 4);
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        gru.init(&mut ps, &mut rng).unwrap();
        for (_, t) in ps.iter_mut() {
            t.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let xs: Vec<f64> = (0..9).map(|i| ((i * 7) as f64 * 0.31).sin()).collect();
        let err = grad_check(&ps, 1e-5, None, |g, p| {
            let x = g.leaf_values(3, 3, xs.clone())?;
            let h0 = g.zeros(1, 4);
            let hs = gru.unroll(g, p, x, h0)?;
            let sq = g.square(hs);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn sample_examples() {
        let mut g = Graph::new();
        let mu = g.row(&[0.5]);
        let lv = g.row(&[-40.0]);
        let eps = g.row(&[3.0]);
        let z = gaussian_sample(&mut g, mu, lv, eps).unwrap();
        assert!((g.value(z)[0] - 0.5).abs() < 1e-8);

        let mu = g.row(&[0.0]);
        let lv = g.row(&[0.0]);
        let eps = g.row(&[1.0]);
        let z = gaussian_sample(&mut g, mu, lv, eps).unwrap();
        assert_eq!(g.value(z), &[1.0]);
    }

    #[test]
    fn sample_shape_mismatch() {
        let mut g = Graph::new();
        let mu = g.row(&[0.5, 1.0]);
        let lv = g.row(&[0.0]);
        let eps = g.row(&[1.0, 1.0]);
        assert!(gaussian_sample(&mut g, mu, lv, eps).is_err());
    }

    #[test]
    fn kl_closed_form_unit_case() {
        let mut g = Graph::new();
        let mq = g.row(&[1.0]);
        let z = g.row(&[0.0]);
        let kl = g.gaussian_kl(mq, z, z, z).unwrap();
        assert!((g.scalar(kl) - 0.5).abs() < 1e-15);
    }
}
