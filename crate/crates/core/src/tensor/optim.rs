use super::{Result, Tensor, TensorError};

/// Applies one update to every parameter from its accumulated gradient,
/// then zeroes the gradients.
pub trait Optimizer {
    fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()>;
}

fn missing_grad(i: usize) -> TensorError {
    TensorError::State(format!("parameter {i} has no gradient"))
}

/// `param ← param − lr·grad`, grads zeroed afterwards.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(missing_grad(i));
    }
    for p in params.iter_mut() {
        let Tensor { data, grad, .. } = &mut **p;
        let g = grad.as_mut().expect("checked above");
        for (x, gi) in data.iter_mut().zip(g.iter_mut()) {
            *x -= lr * *gi;
            *gi = 0.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        sgd_step(params, self.lr)
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter position,
/// so the same parameter list order must be passed on every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(missing_grad(i));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::State(format!(
                "optimizer tracks {} parameters, step given {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Tensor { data, grad, .. } = &mut **p;
            let g = grad.as_mut().expect("checked above");
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                g[i] = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_sgd_step() {
        let mut p = Tensor::scalar(1.0);
        p.accumulate_grad(&[2.0]).unwrap();
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = Tensor::new(&[2], vec![1.5, -3.0]).unwrap();
        p.accumulate_grad(&[7.0, 9.0]).unwrap();
        sgd_step(&mut [&mut p], 0.0).unwrap();
        assert_eq!(p.data(), &[1.5, -3.0]);
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut p = Tensor::scalar(1.0);
        assert!(matches!(
            sgd_step(&mut [&mut p], 0.1),
            Err(TensorError::State(_))
        ));
    }

    #[test]
    fn sgd_on_quadratic_decays_geometrically() {
        // f(x) = x², grad 2x, lr 0.1 → x_k = 0.8^k · 3
        let mut x = Tensor::scalar(3.0);
        for _ in 0..50 {
            let g = 2.0 * x.data()[0];
            x.accumulate_grad(&[g]).unwrap();
            sgd_step(&mut [&mut x], 0.1).unwrap();
        }
        let want = 0.8f64.powi(50) * 3.0;
        assert!((x.data()[0] - want).abs() < 1e-15);
        assert!(x.data()[0].abs() < 1e-3);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = Tensor::scalar(3.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = 2.0 * x.data()[0];
            x.accumulate_grad(&[g]).unwrap();
            opt.step(&mut [&mut x]).unwrap();
        }
        assert!(x.data()[0].abs() < 1e-2);
    }
}
