//! Recurrent actor and critic networks.
//!
//! Both share the same trunk shape (with separate weights):
//!
//! ```text
//! raster: conv 16@8x8/4 -> relu -> groupnorm -> conv 32@4x4/2 -> relu -> groupnorm -> flatten
//! vector: the 4 features directly
//! then:   fc 256 -> relu -> gru 256
//! ```
//!
//! The actor head is `fc 200 -> relu -> fc 100 -> relu -> fc 4 -> tanh`,
//! giving `[pi_v, pi_w, rho_hat, theta_hat]`. The critic concatenates the GRU
//! output with the 2-dim policy vector (features first, then `pi`) and runs
//! `fc 200 -> relu -> fc 100 -> relu -> fc 1`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Bound, Graph, GruVars, ParamFileError, ParamSet, Scalar, Tensor, Var};
use crate::observe::{ObsKind, Observation, ObservationMode, VECTOR_DIM};

pub const ACTOR_OUT: usize = 4;
pub const POLICY_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub obs_kind: ObsKind,
    pub raster_width: usize,
    pub raster_height: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub norm_groups: usize,
    pub fc_size: usize,
    pub gru_size: usize,
    pub head_sizes: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            obs_kind: ObsKind::Vector,
            raster_width: 84,
            raster_height: 84,
            conv1: ConvSpec {
                channels: 16,
                kernel: 8,
                stride: 4,
            },
            conv2: ConvSpec {
                channels: 32,
                kernel: 4,
                stride: 2,
            },
            norm_groups: 8,
            fc_size: 256,
            gru_size: 256,
            head_sizes: vec![200, 100],
        }
    }
}

impl NetConfig {
    pub fn for_observation(mode: &ObservationMode) -> Self {
        NetConfig {
            obs_kind: mode.kind,
            raster_width: mode.raster_width,
            raster_height: mode.raster_height,
            ..NetConfig::default()
        }
    }

    /// Same layout with every dense and recurrent width scaled to `width`
    /// (the two head layers keep their 2:1 ratio).
    pub fn with_width(mut self, width: usize) -> Self {
        self.fc_size = width;
        self.gru_size = width;
        self.head_sizes = vec![width, (width / 2).max(1)];
        self
    }

    pub fn obs_shape(&self) -> Vec<usize> {
        match self.obs_kind {
            ObsKind::Vector => vec![VECTOR_DIM],
            ObsKind::Raster => vec![self.raster_height, self.raster_width, 3],
        }
    }

    /// Spatial size after each conv layer, `[(h1, w1), (h2, w2)]`.
    pub fn conv_dims(&self) -> Option<[(usize, usize); 2]> {
        let out = |n: usize, c: &ConvSpec| (n >= c.kernel && c.stride > 0).then(|| (n - c.kernel) / c.stride + 1);
        let h1 = out(self.raster_height, &self.conv1)?;
        let w1 = out(self.raster_width, &self.conv1)?;
        let h2 = out(h1, &self.conv2)?;
        let w2 = out(w1, &self.conv2)?;
        Some([(h1, w1), (h2, w2)])
    }

    /// Width of the input to the first fully connected layer.
    pub fn encoder_dim(&self) -> usize {
        match self.obs_kind {
            ObsKind::Vector => VECTOR_DIM,
            ObsKind::Raster => {
                let [_, (h2, w2)] = self.conv_dims().unwrap_or([(0, 0); 2]);
                h2 * w2 * self.conv2.channels
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.fc_size == 0 || self.gru_size == 0 || self.head_sizes.is_empty() || self.head_sizes.contains(&0) {
            return Err("network layer sizes must be positive".into());
        }
        if self.obs_kind == ObsKind::Raster {
            if self.conv_dims().is_none() {
                return Err(format!("raster {}x{} too small for the conv stack", self.raster_width, self.raster_height));
            }
            for c in [&self.conv1, &self.conv2] {
                if self.norm_groups == 0 || c.channels % self.norm_groups != 0 {
                    return Err(format!("{} channels not divisible into {} groups", c.channels, self.norm_groups));
                }
            }
        }
        Ok(())
    }

    /// Names and shapes of one network's parameters, in set order.
    pub fn layout(&self, critic: bool) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>| out.push((name.to_string(), shape));
        if self.obs_kind == ObsKind::Raster {
            let (c1, c2) = (&self.conv1, &self.conv2);
            push("conv1.k", vec![c1.kernel, c1.kernel, 3, c1.channels]);
            push("conv1.b", vec![c1.channels]);
            push("norm1.gamma", vec![c1.channels]);
            push("norm1.beta", vec![c1.channels]);
            push("conv2.k", vec![c2.kernel, c2.kernel, c1.channels, c2.channels]);
            push("conv2.b", vec![c2.channels]);
            push("norm2.gamma", vec![c2.channels]);
            push("norm2.beta", vec![c2.channels]);
        }
        let (f, h) = (self.fc_size, self.gru_size);
        push("fc.w", vec![self.encoder_dim(), f]);
        push("fc.b", vec![f]);
        push("gru.w_ih", vec![f, 3 * h]);
        push("gru.w_hh_zr", vec![h, 2 * h]);
        push("gru.w_hh_n", vec![h, h]);
        push("gru.bias", vec![3 * h]);
        let mut width = if critic { h + POLICY_DIM } else { h };
        for (i, &n) in self.head_sizes.iter().enumerate() {
            push(&format!("head{i}.w"), vec![width, n]);
            push(&format!("head{i}.b"), vec![n]);
            width = n;
        }
        let outputs = if critic { 1 } else { ACTOR_OUT };
        push("out.w", vec![width, outputs]);
        push("out.b", vec![outputs]);
        out
    }

    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>, critic: bool) -> Result<(), String> {
        let layout = self.layout(critic);
        let matches = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((n, s), (pn, t))| n == pn && s.as_slice() == t.shape());
        if matches {
            Ok(())
        } else {
            Err(format!(
                "parameters do not match the {} layout for this network config",
                if critic { "critic" } else { "actor" }
            ))
        }
    }
}

/// Fan-in of the layer a parameter belongs to: all weight axes but the
/// output one. Biases take the fan-in of their layer's first weight.
fn fan_in(name: &str, layout: &[(String, Vec<usize>)]) -> usize {
    let axes = |s: &[usize]| s[..s.len() - 1].iter().product();
    let own = layout.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice()).unwrap_or(&[]);
    if own.len() >= 2 {
        return axes(own);
    }
    let prefix = name.split('.').next();
    layout
        .iter()
        .find(|(n, s)| s.len() >= 2 && n.split('.').next() == prefix)
        .map(|(_, s)| axes(s))
        .unwrap_or(1)
}

/// Fresh parameters: uniform in `±1/sqrt(fan_in)`, group norm scale 1 and shift 0.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, critic: bool, rng: &mut R) -> ParamSet<T> {
    let layout = cfg.layout(critic);
    let mut p = ParamSet::new();
    for (name, shape) in layout.iter().cloned() {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".gamma") {
            Tensor::filled(&shape, T::one())
        } else if name.ends_with(".beta") {
            Tensor::zeros(&shape)
        } else {
            let bound = 1.0 / (fan_in(&name, &layout) as f64).sqrt();
            let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
            Tensor::new(shape, data).expect("layout shape")
        };
        p.insert(&name, t);
    }
    p
}

/// All-zero parameters in the network layout.
pub fn zero_params<T: Scalar>(cfg: &NetConfig, critic: bool) -> ParamSet<T> {
    let mut p = ParamSet::new();
    for (name, shape) in cfg.layout(critic) {
        p.insert(&name, Tensor::zeros(&shape));
    }
    p
}

/// Shared online networks, shared targets and one worker's local copies.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSet<T> {
    pub actor: ParamSet<T>,
    pub critic: ParamSet<T>,
    pub actor_target: ParamSet<T>,
    pub critic_target: ParamSet<T>,
    pub local_actor: ParamSet<T>,
    pub local_critic: ParamSet<T>,
}

pub fn init_networks<T: Scalar, R: Rng + ?Sized>(rng: &mut R, cfg: &NetConfig) -> NetworkSet<T> {
    let actor = init_params(cfg, false, rng);
    let critic = init_params(cfg, true, rng);
    NetworkSet {
        actor_target: actor.clone(),
        critic_target: critic.clone(),
        local_actor: actor.clone(),
        local_critic: critic.clone(),
        actor,
        critic,
    }
}

fn encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, x: Var) -> Result<Var, AutodiffError> {
    let flat = match cfg.obs_kind {
        ObsKind::Vector => x,
        ObsKind::Raster => {
            let n = g.value(x).shape()[0];
            let c1 = g.conv2d(x, p.get("conv1.k")?, cfg.conv1.stride)?;
            let c1 = g.bias_add(c1, p.get("conv1.b")?)?;
            let c1 = g.relu(c1)?;
            let c1 = g.group_norm(c1, cfg.norm_groups, p.get("norm1.gamma")?, p.get("norm1.beta")?)?;
            let c2 = g.conv2d(c1, p.get("conv2.k")?, cfg.conv2.stride)?;
            let c2 = g.bias_add(c2, p.get("conv2.b")?)?;
            let c2 = g.relu(c2)?;
            let c2 = g.group_norm(c2, cfg.norm_groups, p.get("norm2.gamma")?, p.get("norm2.beta")?)?;
            g.reshape(c2, &[n, cfg.encoder_dim()])?
        }
    };
    let fc = g.affine(flat, p.get("fc.w")?, p.get("fc.b")?)?;
    g.relu(fc)
}

fn gru_vars(p: &Bound) -> Result<GruVars, AutodiffError> {
    Ok(GruVars {
        w_ih: p.get("gru.w_ih")?,
        w_hh_zr: p.get("gru.w_hh_zr")?,
        w_hh_n: p.get("gru.w_hh_n")?,
        bias: p.get("gru.bias")?,
    })
}

fn head<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, mut x: Var) -> Result<Var, AutodiffError> {
    for i in 0..cfg.head_sizes.len() {
        let y = g.affine(x, p.get(&format!("head{i}.w"))?, p.get(&format!("head{i}.b"))?)?;
        x = g.relu(y)?;
    }
    g.affine(x, p.get("out.w")?, p.get("out.b")?)
}

/// One actor step: `out` is `[N, 4]` after tanh, `hidden` the new GRU state.
#[derive(Clone, Copy, Debug)]
pub struct ActorStep {
    pub out: Var,
    pub hidden: Var,
}

impl ActorStep {
    pub fn policy<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var, AutodiffError> {
        g.slice_last(self.out, 0, POLICY_DIM)
    }

    /// `[N, 2]` distance and angle estimates.
    pub fn estimates<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var, AutodiffError> {
        g.slice_last(self.out, POLICY_DIM, 2)
    }
}

/// Runs the actor over a sequence of batched observations `obs[t]` (each
/// `[N, ..obs_shape]`) starting from hidden state `h0` (`[N, gru_size]`).
pub fn actor_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &NetConfig, obs: &[Var], h0: Var) -> Result<Vec<ActorStep>, AutodiffError> {
    let gru = gru_vars(p)?;
    let mut h = h0;
    let mut steps = Vec::with_capacity(obs.len());
    for &x in obs {
        let e = encode(g, p, cfg, x)?;
        h = g.gru_cell(e, h, &gru)?;
        let pre = head(g, p, cfg, h)?;
        let out = g.tanh(pre)?;
        steps.push(ActorStep { out, hidden: h });
    }
    Ok(steps)
}

/// Runs the critic over `obs[t]` paired with policy vectors `pi[t]` (`[N, 2]`);
/// returns one `[N, 1]` value per step.
pub fn critic_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &NetConfig,
    obs: &[Var],
    pi: &[Var],
    h0: Var,
) -> Result<Vec<Var>, AutodiffError> {
    if obs.len() != pi.len() {
        return Err(AutodiffError::Shape {
            op: "critic_forward",
            shapes: vec![vec![obs.len()], vec![pi.len()]],
        });
    }
    let gru = gru_vars(p)?;
    let mut h = h0;
    let mut qs = Vec::with_capacity(obs.len());
    for (&x, &a) in obs.iter().zip(pi) {
        let e = encode(g, p, cfg, x)?;
        h = g.gru_cell(e, h, &gru)?;
        let joined = g.concat(h, a)?;
        qs.push(head(g, p, cfg, joined)?);
    }
    Ok(qs)
}

/// Stacks observations into one `[N, ..shape]` tensor.
pub fn batch_observations<T: Scalar>(obs: &[&Observation]) -> Tensor<T> {
    let shape = obs.first().map(|o| o.shape().to_vec()).unwrap_or_default();
    let mut data = Vec::with_capacity(obs.len() * shape.iter().product::<usize>());
    for o in obs {
        debug_assert_eq!(o.shape(), shape.as_slice());
        data.extend(o.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let mut full = vec![obs.len()];
    full.extend(shape);
    Tensor::new(full, data).expect("observation batch")
}

pub fn zero_hidden<T: Scalar>(cfg: &NetConfig, batch: usize) -> Tensor<T> {
    Tensor::zeros(&[batch, cfg.gru_size])
}

/// Single-observation actor inference: returns `[pi_v, pi_w, rho_hat, theta_hat]`
/// and the next hidden state `[1, gru_size]`.
pub fn actor_act<T: Scalar>(params: &ParamSet<T>, cfg: &NetConfig, obs: &Observation, hidden: &Tensor<T>) -> Result<([f64; ACTOR_OUT], Tensor<T>), AutodiffError> {
    let mut g = Graph::new();
    let p = g.bind(params, false)?;
    let x = g.constant(batch_observations(&[obs]))?;
    let h = g.constant(hidden.clone())?;
    let step = actor_forward(&mut g, &p, cfg, &[x], h)?[0];
    let out = g.value(step.out).data();
    let mut heads = [0.0; ACTOR_OUT];
    for (o, v) in heads.iter_mut().zip(out) {
        *o = v.as_f64();
    }
    Ok((heads, g.value(step.hidden).clone()))
}

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error(transparent)]
    File(#[from] ParamFileError),
    #[error("weights file has no usable network config: {0}")]
    Config(String),
    #[error("{0}")]
    Layout(String),
}

pub fn weights_metadata(cfg: &NetConfig, role: &str, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({ "net": cfg, "role": role, "info": extra })
}

/// Writes actor weights with their network config embedded in the header.
pub fn save_actor(path: &Path, params: &ParamSet<f32>, cfg: &NetConfig, extra: serde_json::Value) -> Result<(), ParamFileError> {
    params.save(path, weights_metadata(cfg, "actor", extra))
}

/// Net config stored in a weights file header.
pub fn config_from_metadata(meta: &serde_json::Value) -> Result<NetConfig, WeightsError> {
    let net = meta.get("net").ok_or_else(|| WeightsError::Config("missing \"net\" entry".into()))?;
    serde_json::from_value(net.clone()).map_err(|e| WeightsError::Config(e.to_string()))
}

/// Loads actor weights and checks them against the embedded config.
pub fn load_actor(path: &Path) -> Result<(NetConfig, ParamSet<f32>), WeightsError> {
    let (params, meta) = ParamSet::<f32>::load(path)?;
    let cfg = config_from_metadata(&meta)?;
    cfg.validate().map_err(WeightsError::Config)?;
    cfg.check_params(&params, false).map_err(WeightsError::Layout)?;
    Ok((cfg, params))
}
