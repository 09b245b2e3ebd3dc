//! Gradient-descent optimizers over named parameter lists.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Moment buffers and hyperparameters for one parameter list.
///
/// Buffers are positional: `step` must always be called with the parameters
/// in the order the state was created for.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn adam(learning_rate: f64, sizes: &[usize]) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn sgd(learning_rate: f64, sizes: &[usize]) -> Self {
        let mut s = OptimizerState::adam(learning_rate, sizes);
        s.kind = OptimizerKind::Sgd;
        s
    }

    pub fn for_params(kind: OptimizerKind, learning_rate: f64, params: &[&Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
        match kind {
            OptimizerKind::Adam => OptimizerState::adam(learning_rate, &sizes),
            OptimizerKind::Sgd => OptimizerState::sgd(learning_rate, &sizes),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the gradients stored on `params`, then zeroes
    /// them. Every parameter must carry a populated gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::contract(format!(
                "optimizer state holds {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match p.grad() {
                None => {
                    return Err(Error::contract(format!("parameter {i} has no gradient")));
                }
                Some(g) if g.len() != self.first_moment[i].len() => {
                    return Err(Error::shape(format!(
                        "parameter {i} gradient length {} does not match moment buffer {}",
                        g.len(),
                        self.first_moment[i].len()
                    )));
                }
                Some(_) => {}
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.learning_rate;
                    for (w, g) in p.data_mut().iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    let bc1 = 1.0 - self.beta1.powi(t);
                    let bc2 = 1.0 - self.beta2.powi(t);
                    for (j, (w, &g)) in p.data_mut().iter_mut().zip(&grad).enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}
