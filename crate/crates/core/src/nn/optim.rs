use super::params::{Grads, ParamSet};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.values.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (tensor, g)) in params.tensors_mut().iter_mut().zip(grads.buffers()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                tensor.values[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        let id = p.add("x", vec![2], vec![1.0, -2.0]);
        let mut g = Grads::zeros_like(&p);
        g.get_mut(id).copy_from_slice(&[3.0, -0.5]);
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &g);
        let v = p.values(id);
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        let w = p.add("w", vec![1, 2], vec![0.5, -0.3]);
        let b = p.add("b", vec![1], vec![0.0]);
        let mut opt = Adam::new(&p, 0.05);
        for _ in 0..500 {
            let mut grads = Grads::zeros_like(&p);
            {
                let mut g = Graph::new(&p);
                let x = g.input(vec![1.0, 2.0]);
                let y = g.linear(x, w, b);
                let l = g.squared_error(y, vec![3.0]).unwrap();
                g.backward(l, &mut grads);
            }
            opt.step(&mut p, &grads);
        }
        let out = p.values(w)[0] + 2.0 * p.values(w)[1] + p.values(b)[0];
        assert!((out - 3.0).abs() < 1e-3);
    }
}
