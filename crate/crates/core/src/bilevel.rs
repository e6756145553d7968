//! Bi-level reweighting: `T_lower` inner steps on the personalizer-weighted
//! loss, then one upper step on φ along the implicit hypergradient
//!
//! `∇_φ L_dev = −∇_φ (p · ∇_θ L_train)`, `p = Σ_{n=0}^{K} (I − ∇²_θ L_train)ⁿ ∇_θ L_dev`.
//!
//! Hessian-vector products and the mixed partial are exact in
//! `SecondOrder` mode (forward-over-reverse dual numbers): binding θ with
//! tangent `v` makes the tangent of `∇_θ L` equal `∇²_θ L · v`, and the
//! tangent of `∇_φ L` equal `∇_φ (v · ∇_θ L)`.

use autodiff::{fd, Dual, Graph, Mat, ParamSet, Scalar, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{HeldOut, ItemId};
use crate::error::{Error, Result};
use crate::optim::{sgd_step, Adam};
use crate::personalizer::{gumbel, mean_weight, Personalizer, PersonalizerWeigher};
use crate::seeds::mix64;
use crate::target::{sample_negatives, Train, TargetModel, TargetModelConfig, TargetTrainer, TrainHistory};

/// A differentiable function of θ alone.
pub trait Objective {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, theta: &[Var]) -> Var;
}

/// Inner (train) and outer (dev) losses of a bi-level problem.
pub trait BilevelProblem {
    fn train_loss<T: Scalar>(&self, g: &mut Graph<T>, theta: &[Var], phi: &[Var]) -> Var;
    /// Must not depend on φ.
    fn dev_loss<T: Scalar>(&self, g: &mut Graph<T>, theta: &[Var]) -> Var;
}

/// `L_train(·, φ)` as an [`Objective`] of θ.
pub struct TrainAt<'a, P> {
    pub problem: &'a P,
    pub phi: &'a ParamSet,
}

impl<P: BilevelProblem> Objective for TrainAt<'_, P> {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, theta: &[Var]) -> Var {
        let phi = self.phi.bind(g);
        self.problem.train_loss(g, theta, &phi)
    }
}

/// `L_dev` as an [`Objective`].
pub struct DevOf<'a, P>(pub &'a P);

impl<P: BilevelProblem> Objective for DevOf<'_, P> {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, theta: &[Var]) -> Var {
        self.0.dev_loss(g, theta)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    #[default]
    SecondOrder,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hvp {
    pub mode: HvpMode,
    /// Finite-difference step is `fd_scale·(1 + ‖θ‖∞)/‖v‖∞`.
    pub fd_scale: f64,
}

impl Default for Hvp {
    fn default() -> Self {
        Self { mode: HvpMode::SecondOrder, fd_scale: 1e-4 }
    }
}

impl Hvp {
    pub fn second_order() -> Self {
        Self::default()
    }

    pub fn finite_difference() -> Self {
        Self { mode: HvpMode::FiniteDifference, ..Self::default() }
    }

    fn epsilon(&self, theta: &[f64], v: &[f64]) -> f64 {
        let t = theta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let vn = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        self.fd_scale * (1.0 + t) / vn
    }
}

/// Number of gradient-style evaluations (one backward pass each; a
/// finite-difference product counts as one logical evaluation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub evaluations: usize,
}

fn shifted(ps: &ParamSet, base: &[f64], dir: &[f64], eps: f64) -> ParamSet {
    let mut out = ps.clone();
    out.set_flat(&base.iter().zip(dir).map(|(b, d)| b + eps * d).collect::<Vec<_>>());
    out
}

/// Value and gradient of an objective at θ.
pub fn gradient(obj: &impl Objective, theta: &ParamSet) -> (f64, Vec<f64>) {
    let mut g = Graph::<f64>::new();
    let vars = theta.bind(&mut g);
    let l = obj.loss(&mut g, &vars);
    let grad = theta.flat_grad(&g.backward(l), &vars);
    (g.scalar_value(l), grad)
}

/// `∇²_θ L · v`.
pub fn hvp(obj: &impl Objective, theta: &ParamSet, v: &[f64], how: &Hvp) -> Vec<f64> {
    if v.iter().all(|&x| x == 0.0) {
        return vec![0.0; v.len()];
    }
    match how.mode {
        HvpMode::SecondOrder => {
            let mut g = Graph::<Dual>::new();
            let vars = theta.bind_dual(&mut g, v);
            let l = obj.loss(&mut g, &vars);
            theta.flat_grad(&g.backward(l), &vars).into_iter().map(|d| d.eps).collect()
        }
        HvpMode::FiniteDifference => {
            let base = theta.flat();
            let eps = how.epsilon(&base, v);
            let (_, plus) = gradient(obj, &shifted(theta, &base, v, eps));
            let (_, minus) = gradient(obj, &shifted(theta, &base, v, -eps));
            plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
        }
    }
}

/// `p = Σ_{n=0}^{K} v_n` with `v_{n+1} = v_n − ∇²_θ L · v_n`: `K` products.
pub fn neumann_inverse_hvp(
    obj: &impl Objective,
    theta: &ParamSet,
    v0: &[f64],
    k: usize,
    how: &Hvp,
    cost: &mut Cost,
) -> Result<Vec<f64>> {
    let mut p = v0.to_vec();
    let mut v = v0.to_vec();
    let mut warned = false;
    for n in 1..=k {
        let hv = hvp(obj, theta, &v, how);
        cost.evaluations += 1;
        let prev = fd::norm(&v);
        for (vi, h) in v.iter_mut().zip(&hv) {
            *vi -= h;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NeumannNonFinite { term: n });
        }
        if !warned && fd::norm(&v) > prev * (1.0 + 1e-9) && prev > 0.0 {
            warn!("Neumann term {n} grew ({prev:.3e} → {:.3e}); Hessian spectrum may exceed (0, 2)", fd::norm(&v));
            warned = true;
        }
        for (pi, vi) in p.iter_mut().zip(&v) {
            *pi += vi;
        }
    }
    Ok(p)
}

/// `∇_φ (p · ∇_θ L_train(θ, φ))` with `p` held constant.
pub fn mixed_partial(
    problem: &impl BilevelProblem,
    theta: &ParamSet,
    phi: &ParamSet,
    p: &[f64],
    how: &Hvp,
) -> Vec<f64> {
    let phi_grad = |th: &ParamSet| -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let tv = th.bind(&mut g);
        let pv = phi.bind(&mut g);
        let l = problem.train_loss(&mut g, &tv, &pv);
        phi.flat_grad(&g.backward(l), &pv)
    };
    if p.iter().all(|&x| x == 0.0) {
        return vec![0.0; phi.num_scalars()];
    }
    match how.mode {
        HvpMode::SecondOrder => {
            let mut g = Graph::<Dual>::new();
            let tv = theta.bind_dual(&mut g, p);
            let pv = phi.bind(&mut g);
            let l = problem.train_loss(&mut g, &tv, &pv);
            phi.flat_grad(&g.backward(l), &pv).into_iter().map(|d| d.eps).collect()
        }
        HvpMode::FiniteDifference => {
            let base = theta.flat();
            let eps = how.epsilon(&base, p);
            let plus = phi_grad(&shifted(theta, &base, p, eps));
            let minus = phi_grad(&shifted(theta, &base, p, -eps));
            plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient {
    pub grad: Vec<f64>,
    pub dev_loss: f64,
    pub v0_norm: f64,
    pub p_norm: f64,
}

/// Implicit hypergradient at the current (θ, φ): `K + 2` evaluations.
pub fn hypergradient(
    problem: &impl BilevelProblem,
    theta: &ParamSet,
    phi: &ParamSet,
    k: usize,
    how: &Hvp,
    cost: &mut Cost,
) -> Result<Hypergradient> {
    let (dev_loss, v0) = gradient(&DevOf(problem), theta);
    cost.evaluations += 1;
    let p = neumann_inverse_hvp(&TrainAt { problem, phi }, theta, &v0, k, how, cost)?;
    let mixed = mixed_partial(problem, theta, phi, &p, how);
    cost.evaluations += 1;
    let grad: Vec<f64> = mixed.iter().map(|x| -x).collect();
    let (v0_norm, p_norm) = (fd::norm(&v0), fd::norm(&p));
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteHypergradient { v0_norm, p_norm });
    }
    Ok(Hypergradient { grad, dev_loss, v0_norm, p_norm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilevelConfig {
    pub t_lower: usize,
    pub neumann_k: usize,
    pub upper_lr: f64,
    pub upper_weight_decay: f64,
    pub dev_fraction: f64,
    pub hvp_mode: HvpMode,
    pub fd_scale: f64,
    /// Multiplies the train loss inside hypergradient evaluation only; use
    /// it when the Neumann recursion diverges.
    pub train_loss_scale: f64,
    pub tau: f64,
    pub freeze_personalizer: bool,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            t_lower: 30,
            neumann_k: 3,
            upper_lr: 1e-2,
            upper_weight_decay: 1e-3,
            dev_fraction: 0.1,
            hvp_mode: HvpMode::SecondOrder,
            fd_scale: 1e-4,
            train_loss_scale: 1.0,
            tau: 1.0,
            freeze_personalizer: false,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_lower == 0 {
            return Err(Error::InvalidArgument("t_lower must be ≥ 1".into()));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction <= 0.5) {
            return Err(Error::InvalidArgument(format!("dev_fraction {} outside (0, 0.5]", self.dev_fraction)));
        }
        if !(self.tau > 0.0) || !(self.train_loss_scale > 0.0) || !(self.fd_scale > 0.0) {
            return Err(Error::InvalidArgument("tau, train_loss_scale and fd_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn hvp(&self) -> Hvp {
        Hvp { mode: self.hvp_mode, fd_scale: self.fd_scale }
    }
}

/// Random disjoint split into (train, dev); input order is kept within
/// each part.
pub fn make_dev_split<T: Clone>(items: &[T], dev_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(dev_fraction > 0.0 && dev_fraction <= 0.5) {
        return Err(Error::InvalidArgument(format!("dev_fraction {dev_fraction} outside (0, 0.5]")));
    }
    let n_dev = (dev_fraction * items.len() as f64).round() as usize;
    if n_dev == 0 || n_dev >= items.len() {
        return Err(Error::EmptyDataset(format!("{} patterns too few for a dev split", items.len())));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_dev = vec![false; items.len()];
    for &i in &order[..n_dev] {
        is_dev[i] = true;
    }
    let (dev, train): (Vec<_>, Vec<_>) = items.iter().cloned().zip(is_dev).partition(|(_, d)| *d);
    Ok((train.into_iter().map(|x| x.0).collect(), dev.into_iter().map(|x| x.0).collect()))
}

/// Token sequence and one negative per position `t ≥ 2`.
type Sample = (Vec<usize>, Vec<usize>);

fn prepare(model: &TargetModel, patterns: &[&[ItemId]], rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(patterns.len());
    for pat in patterns {
        let tokens = model.tokens(pat)?;
        if tokens.len() < 2 {
            continue;
        }
        let items: Vec<ItemId> = tokens.iter().map(|&t| t as ItemId).collect();
        let negs = sample_negatives(&items, model.num_items, rng)?.into_iter().map(|x| x as usize).collect();
        out.push((tokens, negs));
    }
    Ok(out)
}

/// Weighted train loss on one inner batch and unweighted dev loss on one
/// dev batch, both mean-normalised over loss terms, dropout and Gumbel
/// noise off.
pub struct RecommendationProblem<'a> {
    pub model: &'a TargetModel,
    pub personalizer: &'a Personalizer,
    train: Vec<Sample>,
    dev: Vec<Sample>,
    pub train_loss_scale: f64,
}

impl<'a> RecommendationProblem<'a> {
    pub fn new(
        model: &'a TargetModel,
        personalizer: &'a Personalizer,
        train: &[&[ItemId]],
        dev: &[&[ItemId]],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let train = prepare(model, train, rng)?;
        let dev = prepare(model, dev, rng)?;
        if train.is_empty() || dev.is_empty() {
            return Err(Error::EmptyDataset("bi-level batch without usable patterns".into()));
        }
        Ok(Self { model, personalizer, train, dev, train_loss_scale: 1.0 })
    }

    fn terms(samples: &[Sample]) -> usize {
        samples.iter().map(|(t, _)| t.len() - 1).sum()
    }
}

impl BilevelProblem for RecommendationProblem<'_> {
    fn train_loss<T: Scalar>(&self, g: &mut Graph<T>, theta: &[Var], phi: &[Var]) -> Var {
        let mut parts = Vec::with_capacity(self.train.len());
        for (tokens, negs) in &self.train {
            let h = self.model.hidden_graph::<T, ChaCha8Rng>(g, theta, tokens, None);
            let per = self.model.position_loss_graph(g, theta, h, tokens, negs);
            let hd = g.detach(h);
            let tail = g.slice_rows(hd, 1, tokens.len() - 1);
            let w = self.personalizer.weights_graph(g, phi, tail, None);
            let wl = g.mul(per, w);
            parts.push(g.sum(wl));
        }
        let all = g.concat_rows(&parts);
        let total = g.sum(all);
        g.scale(total, self.train_loss_scale / Self::terms(&self.train) as f64)
    }

    fn dev_loss<T: Scalar>(&self, g: &mut Graph<T>, theta: &[Var]) -> Var {
        let mut parts = Vec::with_capacity(self.dev.len());
        for (tokens, negs) in &self.dev {
            let h = self.model.hidden_graph::<T, ChaCha8Rng>(g, theta, tokens, None);
            let per = self.model.position_loss_graph(g, theta, h, tokens, negs);
            parts.push(g.sum(per));
        }
        let all = g.concat_rows(&parts);
        let total = g.sum(all);
        g.scale(total, 1.0 / Self::terms(&self.dev) as f64)
    }
}

/// One record per upper step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterStepRecord {
    pub outer_step: usize,
    pub inner_steps: usize,
    pub inner_loss_mean: f64,
    pub dev_loss: f64,
    pub hypergrad_norm: f64,
    pub mean_weight: f64,
    pub evaluations: usize,
}

impl OuterStepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serialises")
    }
}

#[derive(Clone, Debug)]
pub struct BilevelOutput {
    pub model: TargetModel,
    pub personalizer: Personalizer,
    pub history: TrainHistory,
    pub log: Vec<OuterStepRecord>,
    pub cost: Cost,
    pub train_part: Vec<Vec<ItemId>>,
    pub dev_part: Vec<Vec<ItemId>>,
}

impl BilevelOutput {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

/// Alternates `t_lower` Adam steps on θ (Gumbel-noised weights) with one
/// SGD step on φ along the hypergradient, until validation early stopping.
#[allow(clippy::too_many_arguments)]
pub fn train_dr4sr_plus(
    patterns: &[Vec<ItemId>],
    val: &[HeldOut],
    num_items: usize,
    target_cfg: &TargetModelConfig,
    personalizer: Personalizer,
    cfg: &BilevelConfig,
    seed: u64,
) -> Result<BilevelOutput> {
    cfg.validate()?;
    if patterns.is_empty() {
        return Err(Error::EmptyDataset("regenerated dataset".into()));
    }
    if personalizer.dim != target_cfg.embed_dim {
        return Err(Error::InvalidArgument("personalizer dim must equal target embed_dim".into()));
    }
    let (train, dev) = make_dev_split(patterns, cfg.dev_fraction, mix64(seed ^ 0x4445_56))?;
    let model = TargetModel::new(target_cfg.clone(), num_items, seed)?;
    let mut trainer = TargetTrainer::new(model, val, seed);
    let mut personalizer = personalizer;
    let mut gumbel_rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x4755_4d42));
    let mut hg_rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x4859_5045));
    let how = cfg.hvp();
    let mut cost = Cost::default();
    let mut log = Vec::new();
    let mut dev_cursor = 0usize;
    let (mut loss_acc, mut weight_acc, mut since) = (0.0, 0.0, 0usize);

    while !trainer.epochs_exhausted() {
        let batches = trainer.epoch_batches(train.len());
        let mut epoch_loss = 0.0;
        for b in &batches {
            let batch: Vec<&[ItemId]> = b.iter().map(|&i| &train[i][..]).collect();
            let out = {
                let mut weigher = PersonalizerWeigher { personalizer: &personalizer, rng: &mut gumbel_rng, stochastic: true };
                trainer.step(&batch, &mut weigher)?
            };
            epoch_loss += out.loss;
            loss_acc += out.loss;
            weight_acc += out.mean_weight;
            since += 1;
            if cfg.freeze_personalizer || trainer.history.inner_steps % cfg.t_lower != 0 {
                continue;
            }
            let bs = target_cfg.batch_size.min(dev.len());
            let dev_batch: Vec<&[ItemId]> = (0..bs).map(|j| &dev[(dev_cursor + j) % dev.len()][..]).collect();
            dev_cursor = (dev_cursor + bs) % dev.len();
            let before = cost.evaluations;
            let hg = {
                let mut problem =
                    RecommendationProblem::new(&trainer.model, &personalizer, &batch, &dev_batch, &mut hg_rng)?;
                problem.train_loss_scale = cfg.train_loss_scale;
                hypergradient(&problem, &trainer.model.params, &personalizer.params, cfg.neumann_k, &how, &mut cost)?
            };
            sgd_step(&mut personalizer.params, &hg.grad, cfg.upper_lr, cfg.upper_weight_decay);
            log.push(OuterStepRecord {
                outer_step: log.len(),
                inner_steps: trainer.history.inner_steps,
                inner_loss_mean: loss_acc / since as f64,
                dev_loss: hg.dev_loss,
                hypergrad_norm: fd::norm(&hg.grad),
                mean_weight: weight_acc / since as f64,
                evaluations: cost.evaluations - before,
            });
            (loss_acc, weight_acc, since) = (0.0, 0.0, 0);
        }
        if trainer.end_epoch(epoch_loss / batches.len() as f64)? {
            break;
        }
    }
    info!("dr4sr+: {} outer steps, {} evaluations", log.len(), cost.evaluations);
    let (model, history) = trainer.finish();
    Ok(BilevelOutput { model, personalizer, history, log, cost, train_part: train, dev_part: dev })
}

/// Deterministic (`G = 0`) mean weight over every sample of `patterns`.
pub fn mean_sample_weight(personalizer: &Personalizer, model: &TargetModel, patterns: &[Vec<ItemId>]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(mean_weight(&personalizer.score_batch(model, patterns, false, &mut rng)?))
}

/// Ablation: minimise the weighted loss jointly over (θ, φ) with one
/// optimiser each and no dev objective. Returns the mean weight after every
/// epoch alongside the trained pair.
pub fn train_end_to_end(
    patterns: &[Vec<ItemId>],
    val: &[HeldOut],
    num_items: usize,
    target_cfg: &TargetModelConfig,
    personalizer: Personalizer,
    seed: u64,
) -> Result<(TargetModel, Personalizer, Vec<f64>)> {
    if patterns.is_empty() {
        return Err(Error::EmptyDataset("regenerated dataset".into()));
    }
    let model = TargetModel::new(target_cfg.clone(), num_items, seed)?;
    let mut trainer = TargetTrainer::new(model, val, seed);
    let mut personalizer = personalizer;
    let mut phi_opt = Adam::new(target_cfg.learning_rate, personalizer.params.num_scalars());
    let mut gumbel_rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x4755_4d42));
    let mut weights = Vec::new();
    while !trainer.epochs_exhausted() {
        let batches = trainer.epoch_batches(patterns.len());
        let mut epoch_loss = 0.0;
        for b in &batches {
            let model = &trainer.model;
            let mut g = Graph::<f64>::new();
            let theta = model.params.bind(&mut g);
            let phi = personalizer.params.bind(&mut g);
            let mut parts = Vec::new();
            let mut terms = 0usize;
            for &i in b {
                let tokens = model.tokens(&patterns[i])?;
                if tokens.len() < 2 {
                    continue;
                }
                let rate = model.config.dropout;
                let h = {
                    let mut tr = Train { rate, rng: &mut gumbel_rng };
                    model.hidden_graph(&mut g, &theta, &tokens, Some(&mut tr))
                };
                let items: Vec<ItemId> = tokens.iter().map(|&t| t as ItemId).collect();
                let negs: Vec<usize> =
                    sample_negatives(&items, model.num_items, &mut gumbel_rng)?.into_iter().map(|x| x as usize).collect();
                let per = model.position_loss_graph(&mut g, &theta, h, &tokens, &negs);
                let hd = g.detach(h);
                let tail = g.slice_rows(hd, 1, tokens.len() - 1);
                let noise = Mat::from_vec(
                    tokens.len() - 1,
                    2,
                    (0..2 * (tokens.len() - 1)).map(|_| gumbel(&mut gumbel_rng)).collect(),
                );
                let w = personalizer.weights_graph(&mut g, &phi, tail, Some(&noise));
                let wl = g.mul(per, w);
                parts.push(g.sum(wl));
                terms += tokens.len() - 1;
            }
            if parts.is_empty() {
                continue;
            }
            let all = g.concat_rows(&parts);
            let total = g.sum(all);
            let loss = g.scale(total, 1.0 / terms as f64);
            let value = g.scalar_value(loss);
            let grads = g.backward(loss);
            let gt = model.params.flat_grad(&grads, &theta);
            let gp = personalizer.params.flat_grad(&grads, &phi);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch: trainer.history.epochs_run, loss: value });
            }
            trainer.apply_gradient(&gt);
            phi_opt.step(&mut personalizer.params, &gp);
            epoch_loss += value;
        }
        weights.push(mean_sample_weight(&personalizer, &trainer.model, patterns)?);
        if trainer.end_epoch(epoch_loss / batches.len() as f64)? {
            break;
        }
    }
    let (model, _) = trainer.finish();
    Ok((model, personalizer, weights))
}
