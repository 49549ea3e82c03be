use super::{AutodiffError, ParamSet, Scalar};

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<(), AutodiffError> {
        params.check_layout(grads, "adam_step")?;
        params.check_layout(&self.m, "adam_step")?;
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let m_hat = md[i] * c1;
                let v_hat = vd[i] * c2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Flattens moments and timestep into one set for checkpointing.
    pub fn to_param_set(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        out.extend_prefixed("m.", &self.m);
        out.extend_prefixed("v.", &self.v);
        out
    }

    pub fn from_param_set(stored: &ParamSet<T>, t: u64, params: &ParamSet<T>) -> Result<Self, AutodiffError> {
        let mut state = AdamState::new(params);
        let (m, v) = (stored.with_prefix("m."), stored.with_prefix("v."));
        params.check_layout(&m, "adam_restore")?;
        params.check_layout(&v, "adam_restore")?;
        state.m = m;
        state.v = v;
        state.t = t;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn params(values: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(values.to_vec()));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_and_advances_time() {
        let mut p = params(&[1.0, -2.0]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        s.step(&mut p, &params(&[0.0, 0.0]), 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m_hat = g and v_hat = g^2 after one step, so the update is lr*g/(|g|+eps).
        let mut p = params(&[0.0, 0.0, 0.0]);
        let mut s = AdamState::new(&p);
        let lr = 1e-4;
        s.step(&mut p, &params(&[3.0, -0.5, 1e-3]), lr).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] + lr).abs() < 1e-11);
        assert!((w[1] - lr).abs() < 1e-11);
        assert!((w[2] + lr * 1e-3 / (1e-3 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn repeated_calls_are_deterministic() {
        let run = || {
            let mut p = params(&[0.3, 0.7]);
            let mut s = AdamState::new(&p);
            for k in 0..5 {
                s.step(&mut p, &params(&[0.1 * k as f64, -0.2]), 1e-2).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let mut p = params(&[1.0]);
        let mut s = AdamState::new(&p);
        assert!(s.step(&mut p, &params(&[1.0, 2.0]), 1e-3).is_err());
    }
}
