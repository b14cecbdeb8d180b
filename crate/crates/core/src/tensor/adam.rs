//! Adam with bias correction.

use super::{mismatch, ParamStore, Result, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |e: &super::nn::ParamEntry<T>| vec![T::zero(); e.tensor.len()];
        Self {
            beta1,
            beta2,
            eps,
            state: AdamState {
                m: params.entries().iter().map(zeros).collect(),
                v: params.entries().iter().map(zeros).collect(),
                step: 0,
            },
        }
    }

    /// Applies one update to every trainable parameter. `grads` is indexed by
    /// parameter id; parameters without a gradient are skipped.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(mismatch("adam_step", params.len(), grads.len()));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let (c1t, c2t) = (T::from_f64(c1), T::from_f64(c2));
        let (lrt, epst) = (T::from_f64(lr), T::from_f64(self.eps));
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let data = entry.tensor.data_mut();
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            match &grads[i] {
                Some(g) => {
                    if g.len() != data.len() {
                        return Err(mismatch("adam_step", data.len(), g.len()));
                    }
                    for j in 0..data.len() {
                        let gj = g.data()[j];
                        m[j] = b1t * m[j] + ob1 * gj;
                        v[j] = b2t * v[j] + ob2 * gj * gj;
                        let mhat = m[j] / c1t;
                        let vhat = v[j] / c2t;
                        data[j] = data[j] - lrt * mhat / (vhat.sqrt() + epst);
                    }
                }
                // Parameters the pass never touched keep their moments.
                None => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64(vec![1], &[v]).unwrap(), true);
        s
    }

    fn grad(g: f64) -> Vec<Option<Tensor<f64>>> {
        vec![Some(Tensor::from_f64(vec![1], &[g]).unwrap())]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = one_param(0.7);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, &grad(0.0), 1e-3).unwrap();
        assert_eq!(s.get(ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias correction gives mhat = g, vhat = g^2,
        // so the step is lr * g / (|g| + eps).
        for g in [3.0, -0.25] {
            let mut s = one_param(1.0);
            let mut opt = Adam::new(&s);
            opt.step(&mut s, &grad(g), 0.01).unwrap();
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s.get(ParamId(0)).data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn two_steps_match_scripted_trace() {
        let (lr, g1, g2) = (0.05, 0.4, -1.2);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut theta = 0.3;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = one_param(0.3);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, &grad(g1), lr).unwrap();
        opt.step(&mut s, &grad(g2), lr).unwrap();
        assert!((s.get(ParamId(0)).data()[0] - theta).abs() < 1e-14);
        assert_eq!(opt.state.step, 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = one_param(0.0);
        let mut opt = Adam::new(&s);
        let bad = vec![Some(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap())];
        assert!(opt.step(&mut s, &bad, 0.1).is_err());
    }
}
