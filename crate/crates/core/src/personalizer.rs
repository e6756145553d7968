//! Dataset personalizer: a one-hidden-layer scorer mapping a target-model
//! hidden state to a sample weight through a two-way Gumbel-softmax.

use std::fmt::Write as _;

use autodiff::{Graph, Mat, ParamSet, RowMask, Scalar, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::target::{SampleWeigher, TargetModel};

/// Standard Gumbel draw `−ln(−ln U)`, `U ~ Uniform(0, 1)`.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Personalizer {
    pub dim: usize,
    pub tau: f64,
    hidden: Linear,
    out: Linear,
    pub params: ParamSet,
}

impl Personalizer {
    pub fn new(dim: usize, tau: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("personalizer input dimension must be positive".into()));
        }
        check_tau(tau)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let hidden = Linear::new(&mut params, &mut rng, "hidden", dim, dim);
        // Zero output layer: every sample starts at w = 0.5 and any
        // preference has to be learned.
        let out = Linear { w: params.add("out.w", Mat::zeros(dim, 2)), b: params.add("out.b", Mat::zeros(1, 2)) };
        Ok(Self { dim, tau, hidden, out, params })
    }

    /// Sets the output bias; with all other parameters zero this pins the
    /// logits to `z`.
    pub fn set_output_bias(&mut self, z: [f64; 2]) {
        self.params.get_mut(self.out.b).data.copy_from_slice(&z);
    }

    pub fn zero_params(&mut self) {
        let n = self.params.num_scalars();
        self.params.set_flat(&vec![0.0; n]);
    }

    /// Logits `z = g_φ(h)` for every row of `h` (`n×2`).
    pub fn logits_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], h: Var) -> Var {
        let a = self.hidden.forward(g, p, h);
        let a = g.tanh(a);
        self.out.forward(g, p, a)
    }

    /// Weights `softmax((z + G)/τ)_1` as an `n×1` column; `gumbel` holds the
    /// `n×2` noise (none means `G = 0`).
    pub fn weights_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], h: Var, gumbel: Option<&Mat<f64>>) -> Var {
        let mut z = self.logits_graph(g, p, h);
        if let Some(noise) = gumbel {
            let n = g.constant_f64(noise);
            z = g.add(z, n);
        }
        let z = g.scale(z, 1.0 / self.tau);
        let s = g.softmax_rows(z, RowMask::None);
        g.slice_cols(s, 0, 1)
    }

    fn noise(&self, rows: usize, rng: &mut impl Rng) -> Mat<f64> {
        Mat::from_vec(rows, 2, (0..rows * 2).map(|_| gumbel(rng)).collect())
    }

    /// One weight per row of `h`.
    pub fn score_rows(&self, h: &Mat<f64>, stochastic: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
        if h.cols != self.dim {
            return Err(Error::InvalidArgument(format!("hidden width {} ≠ personalizer dim {}", h.cols, self.dim)));
        }
        if h.rows == 0 {
            return Ok(Vec::new());
        }
        let noise = stochastic.then(|| self.noise(h.rows, rng));
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g);
        let hv = g.constant_f64(h);
        let w = self.weights_graph(&mut g, &p, hv, noise.as_ref());
        Ok(g.value(w).data.clone())
    }

    pub fn score(&self, h: &[f64], stochastic: bool, rng: &mut impl Rng) -> Result<f64> {
        Ok(self.score_rows(&Mat::from_vec(1, h.len(), h.to_vec()), stochastic, rng)?[0])
    }

    /// `w_{i,t}` for positions `t = 2..=T` of every pattern, scored from
    /// `h_2..h_T`.
    pub fn score_batch(
        &self,
        model: &TargetModel,
        patterns: &[Vec<ItemId>],
        stochastic: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<f64>>> {
        patterns
            .iter()
            .map(|pat| {
                let h = model.hidden_states(pat)?;
                self.score_rows(&tail_rows(&h), stochastic, rng)
            })
            .collect()
    }

    /// `pattern_index position weight` lines (0-based pattern index,
    /// 1-based position), deterministic scores.
    pub fn weight_dump(&self, model: &TargetModel, patterns: &[Vec<ItemId>]) -> Result<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let weights = self.score_batch(model, patterns, false, &mut rng)?;
        let mut out = String::new();
        for (i, ws) in weights.iter().enumerate() {
            for (j, w) in ws.iter().enumerate() {
                writeln!(out, "{i} {} {w:.6}", j + 2).unwrap();
            }
        }
        Ok(out)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature τ = {tau} must be positive")))
    }
}

/// Rows `1..T` of a `T×d` hidden-state matrix.
pub(crate) fn tail_rows(h: &Mat<f64>) -> Mat<f64> {
    Mat::from_vec(h.rows.saturating_sub(1), h.cols, h.data[h.cols.min(h.data.len())..].to_vec())
}

/// Mean of all weights in a batch.
pub fn mean_weight(weights: &[Vec<f64>]) -> f64 {
    let n: usize = weights.iter().map(Vec::len).sum();
    weights.iter().flatten().sum::<f64>() / n.max(1) as f64
}

/// Gumbel-noised personalizer weights for the inner training loop. The
/// noise comes from `rng`, not from the trainer's stream.
pub struct PersonalizerWeigher<'a, R: Rng> {
    pub personalizer: &'a Personalizer,
    pub rng: &'a mut R,
    pub stochastic: bool,
}

impl<R: Rng> SampleWeigher for PersonalizerWeigher<'_, R> {
    fn weigh(&mut self, hidden: &Mat<f64>) -> Vec<f64> {
        self.personalizer
            .score_rows(&tail_rows(hidden), self.stochastic, self.rng)
            .expect("hidden width matches the target model")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_half_weight() {
        let mut p = Personalizer::new(4, 1.0, 1).unwrap();
        p.zero_params();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(p.score(&[0.3, -1.0, 2.0, 0.0], false, &mut rng).unwrap(), 0.5);
    }

    #[test]
    fn low_temperature_hard_selects() {
        let mut p = Personalizer::new(3, 1e-3, 1).unwrap();
        p.zero_params();
        p.set_output_bias([0.2, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(p.score(&[1.0, 2.0, 3.0], false, &mut rng).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn rejects_bad_tau() {
        assert!(Personalizer::new(3, 0.0, 1).is_err());
        assert!(Personalizer::new(3, -1.0, 1).is_err());
    }

    #[test]
    fn deterministic_path_is_tempered_sigmoid() {
        let mut p = Personalizer::new(5, 0.7, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flat: Vec<f64> = (0..p.params.num_scalars()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.params.set_flat(&flat);
        let h = Mat::from_vec(1, 5, vec![0.4, -0.2, 1.1, 0.0, -0.9]);
        let mut g = Graph::<f64>::new();
        let vars = p.params.bind(&mut g);
        let hv = g.constant_f64(&h);
        let z = p.logits_graph(&mut g, &vars, hv);
        let z = g.value(z).clone();
        assert!((z.data[0] - z.data[1]).abs() > 1e-3);
        let expect = 1.0 / (1.0 + (-(z.data[0] - z.data[1]) / 0.7).exp());
        let w = p.score_rows(&h, false, &mut rng).unwrap()[0];
        assert!((w - expect).abs() < 1e-12);
    }

    #[test]
    fn gumbel_mean_weight_is_half() {
        let mut p = Personalizer::new(2, 1.0, 1).unwrap();
        p.zero_params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = Mat::zeros(100_000, 2);
        let w = p.score_rows(&h, true, &mut rng).unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
