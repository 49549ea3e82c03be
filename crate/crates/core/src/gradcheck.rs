//! Central finite-difference gradient oracle.
//!
//! Only ever evaluates the forward pass, so it is independent of every
//! adjoint it is used to check.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Bound, Graph, GruVars, ParamSet, Tensor, Var};
use crate::nets::{actor_forward, critic_forward, init_params, NetConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Steps tried in turn until the probe no longer straddles a ReLU kink;
/// each is a tenth of the previous one.
const PROBE_STEPS: [f64; 3] = [DEFAULT_STEP, 1e-6, 1e-7];
/// Relative gap between left and right slopes above which a probe counts as
/// crossing a kink. Smooth points sit orders of magnitude below this.
const KINK_TOL: f64 = 1e-4;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Probes skipped because every step size straddled a kink.
    pub kinks: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps exact zeros comparable.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Checks d(loss)/d(params) for a scalar loss built by `build`.
///
/// At most `per_tensor` elements of each tensor are probed (all of them
/// when `per_tensor` is `None`), chosen by `rng`.
pub fn check_params<F, R>(
    params: &ParamSet<f64>,
    build: F,
    per_tensor: Option<usize>,
    rng: &mut R,
) -> Result<GradReport, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var, AutodiffError>,
    R: Rng,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let bound = g.bind(p, false)?;
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::new();
    let bound = g.bind(params, true)?;
    let loss = build(&mut g, &bound)?;
    let grads = g.backward(loss)?.collect(&g, &bound);

    let f0 = eval(params)?;
    let mut report = GradReport::default();
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let idx: Vec<usize> = match per_tensor {
            Some(k) if k < t.len() => sample(rng, t.len(), k).into_vec(),
            _ => (0..t.len()).collect(),
        };
        for i in idx {
            let x0 = t.data()[i];
            let analytic = grads.get(name).unwrap().data()[i];
            let mut probe_at = |h: f64| -> Result<(f64, f64), AutodiffError> {
                probe.get_mut(name).unwrap().data_mut()[i] = x0 + h;
                let up = eval(&probe)?;
                probe.get_mut(name).unwrap().data_mut()[i] = x0 - h;
                let down = eval(&probe)?;
                probe.get_mut(name).unwrap().data_mut()[i] = x0;
                let (right, left) = ((up - f0) / h, (f0 - down) / h);
                Ok(((up - down) / (2.0 * h), (right - left).abs() / right.abs().max(left.abs()).max(1e-6)))
            };
            // One-sided slopes disagree either from curvature, where the gap
            // shrinks in step with h, or because the probe straddles a kink,
            // where it does not until h drops below the distance to the kink.
            let mut numeric = None;
            let mut cur = probe_at(PROBE_STEPS[0])?;
            for k in 0..PROBE_STEPS.len() {
                if cur.1 < KINK_TOL {
                    numeric = Some(cur.0);
                    break;
                }
                let Some(&h) = PROBE_STEPS.get(k + 1) else { break };
                let next = probe_at(h)?;
                let shrink = next.1 / cur.1;
                if (0.05..0.2).contains(&shrink) {
                    numeric = Some(cur.0);
                    break;
                }
                cur = next;
            }
            let Some(numeric) = numeric else {
                report.kinks += 1;
                continue;
            };
            let e = relative_error(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                if e >= report.max_rel_error {
                    report.worst = Some((name.to_string(), i));
                }
            }
        }
    }
    Ok(report)
}

fn rand_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

fn set(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (k, v) in entries {
        p.insert(k, v);
    }
    p
}

pub type Builder = fn(&mut Graph<f64>, &Bound) -> Result<Var, AutodiffError>;

pub struct OpCase {
    pub name: &'static str,
    pub params: ParamSet<f64>,
    pub build: Builder,
}

/// One small graph per differentiable op, with random inputs as parameters.
pub fn op_suite<R: Rng + ?Sized>(rng: &mut R) -> Vec<OpCase> {
    // Each case reduces its op output to a scalar through a fixed random
    // projection so every output element contributes a distinct weight.
    let cases: Vec<(&'static str, ParamSet<f64>, Builder)> = vec![
        (
            "affine",
            set(vec![
                ("x", rand_tensor(rng, &[3, 4], 1.0)),
                ("w", rand_tensor(rng, &[4, 5], 1.0)),
                ("b", rand_tensor(rng, &[5], 1.0)),
                ("proj", rand_tensor(rng, &[3, 5], 1.0)),
            ]),
            |g, b| {
                let y = g.affine(b.get("x")?, b.get("w")?, b.get("b")?)?;
                let m = g.mul(y, b.get("proj")?)?;
                g.mean(m)
            },
        ),
        (
            "conv2d",
            set(vec![
                ("x", rand_tensor(rng, &[2, 9, 8, 2], 1.0)),
                ("k", rand_tensor(rng, &[3, 3, 2, 3], 1.0)),
                ("proj", rand_tensor(rng, &[2, 4, 3, 3], 1.0)),
            ]),
            |g, b| {
                let y = g.conv2d(b.get("x")?, b.get("k")?, 2)?;
                let m = g.mul(y, b.get("proj")?)?;
                g.mean(m)
            },
        ),
        (
            "relu+bias_add",
            set(vec![
                ("x", rand_tensor(rng, &[4, 6], 1.0)),
                ("b", rand_tensor(rng, &[6], 0.5)),
                ("proj", rand_tensor(rng, &[4, 6], 1.0)),
            ]),
            |g, b| {
                let y = g.bias_add(b.get("x")?, b.get("b")?)?;
                let r = g.relu(y)?;
                let m = g.mul(r, b.get("proj")?)?;
                g.mean(m)
            },
        ),
        (
            "tanh+sigmoid",
            set(vec![("x", rand_tensor(rng, &[3, 4], 2.0)), ("proj", rand_tensor(rng, &[3, 4], 1.0))]),
            |g, b| {
                let t = g.tanh(b.get("x")?)?;
                let s = g.sigmoid(t)?;
                let m = g.mul(s, b.get("proj")?)?;
                g.mean(m)
            },
        ),
        (
            "group_norm",
            set(vec![
                ("x", rand_tensor(rng, &[2, 5, 8], 1.0)),
                ("gamma", rand_tensor(rng, &[8], 1.0)),
                ("beta", rand_tensor(rng, &[8], 1.0)),
                ("proj", rand_tensor(rng, &[2, 5, 8], 1.0)),
            ]),
            |g, b| {
                let y = g.group_norm(b.get("x")?, 4, b.get("gamma")?, b.get("beta")?)?;
                let m = g.mul(y, b.get("proj")?)?;
                g.mean(m)
            },
        ),
        (
            "gru_cell",
            set(vec![
                ("x", rand_tensor(rng, &[2, 3], 1.0)),
                ("h", rand_tensor(rng, &[2, 4], 1.0)),
                ("w_ih", rand_tensor(rng, &[3, 12], 1.0)),
                ("w_hh_zr", rand_tensor(rng, &[4, 8], 1.0)),
                ("w_hh_n", rand_tensor(rng, &[4, 4], 1.0)),
                ("bias", rand_tensor(rng, &[12], 1.0)),
                ("proj", rand_tensor(rng, &[2, 4], 1.0)),
            ]),
            |g, b| {
                let p = GruVars {
                    w_ih: b.get("w_ih")?,
                    w_hh_zr: b.get("w_hh_zr")?,
                    w_hh_n: b.get("w_hh_n")?,
                    bias: b.get("bias")?,
                };
                let h = g.gru_cell(b.get("x")?, b.get("h")?, &p)?;
                let m = g.mul(h, b.get("proj")?)?;
                g.mean(m)
            },
        ),
        (
            "concat+slice+scale+reshape",
            set(vec![
                ("a", rand_tensor(rng, &[3, 2], 1.0)),
                ("b", rand_tensor(rng, &[3, 3], 1.0)),
                ("proj", rand_tensor(rng, &[3, 3], 1.0)),
            ]),
            |g, b| {
                let c = g.concat(b.get("a")?, b.get("b")?)?;
                let s = g.slice_last(c, 1, 3)?;
                let k = g.scale(s, -1.7)?;
                let r = g.reshape(k, &[9])?;
                let k = g.reshape(r, &[3, 3])?;
                let m = g.mul(k, b.get("proj")?)?;
                g.mean(m)
            },
        ),
        (
            "sub+mse",
            set(vec![
                ("a", rand_tensor(rng, &[4, 2], 1.0)),
                ("b", rand_tensor(rng, &[4, 2], 1.0)),
                ("c", rand_tensor(rng, &[4, 2], 1.0)),
            ]),
            |g, b| {
                let d = g.sub(b.get("a")?, b.get("b")?)?;
                g.mse(d, b.get("c")?)
            },
        ),
    ];
    cases.into_iter().map(|(name, params, build)| OpCase { name, params, build }).collect()
}

/// Gradient check of a whole actor or critic over a two-step window with
/// batch 2, from a random initial hidden state. Weights are drawn from the
/// usual init and doubled so activations sit away from their kinks.
pub fn check_network(cfg: &NetConfig, critic: bool, seed: u64, per_tensor: Option<usize>) -> Result<GradReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet<f64> = init_params(cfg, critic, &mut rng);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    let mut obs_shape = vec![2];
    obs_shape.extend(cfg.obs_shape());
    let obs: Vec<Tensor<f64>> = (0..2).map(|_| rand_tensor(&mut rng, &obs_shape, 1.0)).collect();
    params.insert("input.h0", rand_tensor(&mut rng, &[2, cfg.gru_size], 0.5));
    params.insert("input.pi", rand_tensor(&mut rng, &[2, 2], 0.9));
    let proj = rand_tensor(&mut rng, &[2, if critic { 1 } else { 4 }], 1.0);
    check_params(
        &params,
        |g, b| {
            let xs: Vec<Var> = obs.iter().map(|o| g.constant(o.clone())).collect::<Result<_, _>>()?;
            let h0 = b.get("input.h0")?;
            let last = if critic {
                let pi = b.get("input.pi")?;
                *critic_forward(g, b, cfg, &xs, &[pi, pi], h0)?.last().expect("two steps")
            } else {
                actor_forward(g, b, cfg, &xs, h0)?.last().expect("two steps").out
            };
            let pr = g.constant(proj.clone())?;
            let m = g.mul(last, pr)?;
            g.mean(m)
        },
        per_tensor,
        &mut rng,
    )
}
