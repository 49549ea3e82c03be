//! Critic, actor and auxiliary losses over a batch of replay windows, plus
//! the target-network blend.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Batch;
use crate::autodiff::{AutodiffError, Bound, Graph, ParamSet, Scalar, Tensor, Var};
use crate::nets::{actor_forward, batch_observations, critic_forward, zero_hidden, NetConfig};
use crate::observe::{Observation, RHO_NORM};

/// Direction of the actor update with respect to the critic's value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorObjective {
    /// Maximize Q (loss `-Q`).
    Ascend,
    /// Minimize Q (loss `+Q`), the literal reading of the update rule.
    Descend,
}

/// A batch laid out time-major: entry `t` of each vector is `[B, ..]`.
#[derive(Clone, Debug)]
pub struct BatchTensors<T> {
    pub obs: Vec<Tensor<T>>,
    pub next_obs: Vec<Tensor<T>>,
    pub actions: Vec<Tensor<T>>,
    pub rewards: Vec<Tensor<T>>,
    /// Normalized `(rho, theta)` truths in `[-1, 1]`.
    pub aux_targets: Vec<Tensor<T>>,
}

/// `clamp(rho / RHO_NORM, 0, 1) * 2 - 1` and `theta / pi`.
pub fn normalized_truth(rho: f64, theta: f64) -> (f64, f64) {
    ((rho / RHO_NORM).clamp(0.0, 1.0) * 2.0 - 1.0, theta / PI)
}

impl<T: Scalar> BatchTensors<T> {
    pub fn from_batch(batch: &Batch) -> Self {
        let (b, l) = (batch.size(), batch.seq_len());
        let mut out = BatchTensors {
            obs: Vec::with_capacity(l),
            next_obs: Vec::with_capacity(l),
            actions: Vec::with_capacity(l),
            rewards: Vec::with_capacity(l),
            aux_targets: Vec::with_capacity(l),
        };
        for t in 0..l {
            let step = |f: &dyn Fn(usize) -> Vec<f64>, width: usize| {
                let data = (0..b).flat_map(f).map(T::from_f64).collect();
                Tensor::new(vec![b, width], data).expect("batch column")
            };
            let col = |i: usize| &batch.windows[i][t];
            let obs: Vec<&Observation> = (0..b).map(|i| &col(i).obs).collect();
            let next: Vec<&Observation> = (0..b).map(|i| &col(i).next_obs).collect();
            out.obs.push(batch_observations(&obs));
            out.next_obs.push(batch_observations(&next));
            out.actions.push(step(&|i| vec![col(i).action.v, col(i).action.w], 2));
            out.rewards.push(step(&|i| vec![col(i).reward], 1));
            out.aux_targets.push(step(
                &|i| {
                    let (r, th) = normalized_truth(col(i).true_rho, col(i).true_theta);
                    vec![r, th]
                },
                2,
            ));
        }
        out
    }

    pub fn batch_size(&self) -> usize {
        self.obs.first().map_or(0, |o| o.shape()[0])
    }

    pub fn seq_len(&self) -> usize {
        self.obs.len()
    }
}

/// Scalar loss and its gradient with respect to one network.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub grads: ParamSet<T>,
}

fn constants<T: Scalar>(g: &mut Graph<T>, ts: &[Tensor<T>]) -> Result<Vec<Var>, AutodiffError> {
    ts.iter().map(|t| g.constant(t.clone())).collect()
}

/// Mean of a list of scalar nodes.
fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var, AutodiffError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, T::from_f64(1.0 / terms.len() as f64))
}

/// Bootstrap targets `y_t = r_t + gamma * Q'(o_{t+1}, pi'(o_{t+1}))`, computed
/// on a separate tape so nothing can flow back through them.
pub fn critic_targets<T: Scalar>(
    bt: &BatchTensors<T>,
    cfg: &NetConfig,
    critic_target: &ParamSet<T>,
    actor_target: &ParamSet<T>,
    gamma: f64,
) -> Result<Vec<Tensor<T>>, AutodiffError> {
    let mut g = Graph::new();
    let pa = g.bind(actor_target, false)?;
    let pc = g.bind(critic_target, false)?;
    let next = constants(&mut g, &bt.next_obs)?;
    let h0 = g.constant(zero_hidden(cfg, bt.batch_size()))?;
    let steps = actor_forward(&mut g, &pa, cfg, &next, h0)?;
    let pis = steps.iter().map(|s| s.policy(&mut g)).collect::<Result<Vec<_>, _>>()?;
    let qs = critic_forward(&mut g, &pc, cfg, &next, &pis, h0)?;
    let gamma = T::from_f64(gamma);
    Ok(qs
        .iter()
        .zip(&bt.rewards)
        .map(|(&q, r)| {
            let data = r.data().iter().zip(g.value(q).data()).map(|(&r, &q)| r + gamma * q).collect();
            Tensor::new(r.shape().to_vec(), data).expect("target shape")
        })
        .collect())
}

/// `mean_t mse(Q(o_t, a_t), y_t)` on graph `g` with the online critic bound as `critic`.
pub fn critic_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    critic: &Bound,
    cfg: &NetConfig,
    bt: &BatchTensors<T>,
    targets: &[Tensor<T>],
) -> Result<Var, AutodiffError> {
    let obs = constants(g, &bt.obs)?;
    let acts = constants(g, &bt.actions)?;
    let ys = constants(g, targets)?;
    let h0 = g.constant(zero_hidden(cfg, bt.batch_size()))?;
    let qs = critic_forward(g, critic, cfg, &obs, &acts, h0)?;
    let terms = qs.iter().zip(&ys).map(|(&q, &y)| g.mse(q, y)).collect::<Result<Vec<_>, _>>()?;
    mean_of(g, &terms)
}

pub fn critic_loss<T: Scalar>(
    bt: &BatchTensors<T>,
    cfg: &NetConfig,
    critic: &ParamSet<T>,
    critic_target: &ParamSet<T>,
    actor_target: &ParamSet<T>,
    gamma: f64,
) -> Result<LossGrad<T>, AutodiffError> {
    let targets = critic_targets(bt, cfg, critic_target, actor_target, gamma)?;
    let mut g = Graph::new();
    let pc = g.bind(critic, true)?;
    let loss = critic_loss_graph(&mut g, &pc, cfg, bt, &targets)?;
    let grads = g.backward(loss)?.collect(&g, &pc);
    Ok(LossGrad {
        loss: g.value(loss).data()[0].as_f64(),
        grads,
    })
}

/// Policy and auxiliary terms built on one actor pass.
#[derive(Clone, Copy, Debug)]
pub struct ActorTerms {
    pub policy: Var,
    pub aux: Var,
}

/// Builds both actor-side losses on `g`. `critic` should be bound frozen so
/// it only passes gradients through to the policy outputs.
pub fn actor_terms_graph<T: Scalar>(
    g: &mut Graph<T>,
    actor: &Bound,
    critic: &Bound,
    cfg: &NetConfig,
    bt: &BatchTensors<T>,
    objective: ActorObjective,
) -> Result<ActorTerms, AutodiffError> {
    let obs = constants(g, &bt.obs)?;
    let h0 = g.constant(zero_hidden(cfg, bt.batch_size()))?;
    let steps = actor_forward(g, actor, cfg, &obs, h0)?;
    let pis = steps.iter().map(|s| s.policy(g)).collect::<Result<Vec<_>, _>>()?;
    let qs = critic_forward(g, critic, cfg, &obs, &pis, h0)?;
    let q_means = qs.iter().map(|&q| g.mean(q)).collect::<Result<Vec<_>, _>>()?;
    let mean_q = mean_of(g, &q_means)?;
    let sign = match objective {
        ActorObjective::Ascend => -1.0,
        ActorObjective::Descend => 1.0,
    };
    let policy = g.scale(mean_q, T::from_f64(sign))?;
    let estimates = steps.iter().map(|s| s.estimates(g)).collect::<Result<Vec<_>, _>>()?;
    let aux = aux_graph(g, &estimates, &bt.aux_targets)?;
    Ok(ActorTerms { policy, aux })
}

/// Auxiliary regression over a window of `[B, 2]` estimates:
/// `mean_t |e_t - y_t|^2 + mean_{t>=1} |e_t - e_{t-1}|^2`, each squared norm
/// summed over the two components and averaged over the batch.
pub fn aux_graph<T: Scalar>(g: &mut Graph<T>, estimates: &[Var], targets: &[Tensor<T>]) -> Result<Var, AutodiffError> {
    let ys = constants(g, targets)?;
    // mse averages over both components, so double it to sum them
    let fit = estimates.iter().zip(&ys).map(|(&e, &y)| g.mse(e, y)).collect::<Result<Vec<_>, _>>()?;
    let fit = mean_of(g, &fit)?;
    let fit = g.scale(fit, T::from_f64(2.0))?;
    if estimates.len() < 2 {
        return Ok(fit);
    }
    let smooth = estimates.windows(2).map(|p| g.mse(p[1], p[0])).collect::<Result<Vec<_>, _>>()?;
    let smooth = mean_of(g, &smooth)?;
    let smooth = g.scale(smooth, T::from_f64(2.0))?;
    g.add(fit, smooth)
}

/// Actor gradients from the policy term, the auxiliary term, or both.
#[derive(Clone, Debug)]
pub struct ActorLossGrad<T> {
    pub policy_loss: f64,
    pub aux_loss: f64,
    pub grads: ParamSet<T>,
}

fn actor_grads<T: Scalar>(
    bt: &BatchTensors<T>,
    cfg: &NetConfig,
    actor: &ParamSet<T>,
    critic: &ParamSet<T>,
    objective: ActorObjective,
    use_policy: bool,
    use_aux: bool,
) -> Result<ActorLossGrad<T>, AutodiffError> {
    let mut g = Graph::new();
    let pa = g.bind(actor, true)?;
    let pc = g.bind(critic, false)?;
    let terms = actor_terms_graph(&mut g, &pa, &pc, cfg, bt, objective)?;
    let loss = match (use_policy, use_aux) {
        (true, true) => g.add(terms.policy, terms.aux)?,
        (true, false) => terms.policy,
        _ => terms.aux,
    };
    let grads = g.backward(loss)?.collect(&g, &pa);
    Ok(ActorLossGrad {
        policy_loss: g.value(terms.policy).data()[0].as_f64(),
        aux_loss: g.value(terms.aux).data()[0].as_f64(),
        grads,
    })
}

/// Policy-gradient term only; the critic is held fixed.
pub fn actor_loss<T: Scalar>(bt: &BatchTensors<T>, cfg: &NetConfig, actor: &ParamSet<T>, critic: &ParamSet<T>, objective: ActorObjective) -> Result<LossGrad<T>, AutodiffError> {
    let r = actor_grads(bt, cfg, actor, critic, objective, true, false)?;
    Ok(LossGrad {
        loss: r.policy_loss,
        grads: r.grads,
    })
}

/// Auxiliary distance/angle regression term only.
pub fn aux_loss<T: Scalar>(bt: &BatchTensors<T>, cfg: &NetConfig, actor: &ParamSet<T>, critic: &ParamSet<T>) -> Result<LossGrad<T>, AutodiffError> {
    let r = actor_grads(bt, cfg, actor, critic, ActorObjective::Ascend, false, true)?;
    Ok(LossGrad {
        loss: r.aux_loss,
        grads: r.grads,
    })
}

/// Sum of policy and auxiliary terms, differentiated together.
pub fn actor_objective<T: Scalar>(bt: &BatchTensors<T>, cfg: &NetConfig, actor: &ParamSet<T>, critic: &ParamSet<T>, objective: ActorObjective) -> Result<ActorLossGrad<T>, AutodiffError> {
    actor_grads(bt, cfg, actor, critic, objective, true, true)
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn soft_update<T: Scalar>(target: &mut ParamSet<T>, online: &ParamSet<T>, tau: f64) -> Result<(), AutodiffError> {
    target.check_layout(online, "soft_update")?;
    let (a, b) = (T::from_f64(tau), T::from_f64(1.0 - tau));
    for ((_, t), (_, w)) in target.iter_mut().zip(online.iter()) {
        for (x, &y) in t.data_mut().iter_mut().zip(w.data()) {
            *x = a * y + b * *x;
        }
    }
    Ok(())
}
