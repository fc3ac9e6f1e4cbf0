use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }

    fn update(&self, p: &mut f64, m: &mut f64, v: &mut f64, g: f64, step: u64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let m_hat = *m / (1.0 - self.beta1.powf(step as f64));
        let v_hat = *v / (1.0 - self.beta2.powf(step as f64));
        *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

fn check_grad(param: &Tensor, grad: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape(),
            rhs: grad.shape(),
        });
    }
    grad.ensure_finite("adam gradient")
}

/// Adam with bias correction over a fixed list of parameter tensors.
///
/// Moment buffers are allocated on the first step from the parameter shapes
/// and must match on every later step.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    moments: Vec<(Tensor, Tensor)>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates, one pair per parameter.
    pub fn moments(&self) -> &[(Tensor, Tensor)] {
        &self.moments
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            check_grad(p, g)?;
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    (
                        Tensor::zeros(p.rows(), p.cols()),
                        Tensor::zeros(p.rows(), p.cols()),
                    )
                })
                .collect();
        } else if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.0.shape() != p.shape())
        {
            return Err(Error::InvalidArgument(
                "parameter list changed between optimizer steps".into(),
            ));
        }

        self.step += 1;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                self.config.update(p, m, v, g, self.step);
            }
        }
        Ok(())
    }
}

/// Adam over a single matrix whose rows are updated independently, each
/// with its own step counter for bias correction.
#[derive(Clone, Debug)]
pub struct RowAdam {
    config: AdamConfig,
    m: Tensor,
    v: Tensor,
    steps: Vec<u64>,
}

impl RowAdam {
    pub fn new(config: AdamConfig, rows: usize, cols: usize) -> Self {
        RowAdam {
            config,
            m: Tensor::zeros(rows, cols),
            v: Tensor::zeros(rows, cols),
            steps: vec![0; rows],
        }
    }

    pub fn row_steps(&self) -> &[u64] {
        &self.steps
    }

    /// Updates the listed rows of `param`; `grads` row `k` belongs to
    /// `rows[k]`.
    pub fn step_rows(&mut self, param: &mut Tensor, rows: &[usize], grads: &Tensor) -> Result<()> {
        if param.shape() != self.m.shape() {
            return Err(Error::ShapeMismatch {
                op: "row_adam",
                lhs: param.shape(),
                rhs: self.m.shape(),
            });
        }
        if grads.shape() != (rows.len(), param.cols()) {
            return Err(Error::ShapeMismatch {
                op: "row_adam",
                lhs: (rows.len(), param.cols()),
                rhs: grads.shape(),
            });
        }
        grads.ensure_finite("adam gradient")?;
        let cols = param.cols();
        for (k, &r) in rows.iter().enumerate() {
            if r >= param.rows() {
                return Err(Error::InvalidArgument(format!("row {r} out of range")));
            }
            self.steps[r] += 1;
            let step = self.steps[r];
            let span = r * cols..(r + 1) * cols;
            let (p, m, v) = (
                &mut param.data_mut()[span.clone()],
                &mut self.m.data_mut()[span.clone()],
                &mut self.v.data_mut()[span],
            );
            for c in 0..cols {
                self.config
                    .update(&mut p[c], &mut m[c], &mut v[c], grads.get(k, c), step);
            }
        }
        Ok(())
    }
}
