//! A two-parameter linear regressor `y = θ · x` implementing [`Learner`].

use super::meta::{LabeledLoss, Learner};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBatch {
    pub x: Vec<[f64; 2]>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearToy {
    pub params: ParamStore<f64>,
}

impl LinearToy {
    pub fn new(theta: [f64; 2]) -> Self {
        let mut params = ParamStore::new();
        params
            .add("theta", Tensor::new(vec![2], theta.to_vec()).expect("two values"))
            .expect("fresh store");
        LinearToy { params }
    }

    pub fn theta(&self) -> [f64; 2] {
        let d = self.params.values()[0].data();
        [d[0], d[1]]
    }

    pub fn set_theta(&mut self, theta: [f64; 2]) {
        self.params.values_mut()[0].data_mut().copy_from_slice(&theta);
    }

    fn mse_grad(&self, x: &[[f64; 2]], targets: &[f64]) -> Result<(f64, Vec<Tensor<f64>>)> {
        if x.len() != targets.len() || x.is_empty() {
            return Err(Error::shape("toy loss", &[x.len()], &[targets.len()]));
        }
        let th = self.theta();
        let n = x.len() as f64;
        let (mut loss, mut g) = (0.0, [0.0; 2]);
        for (xi, &t) in x.iter().zip(targets) {
            let r = th[0] * xi[0] + th[1] * xi[1] - t;
            loss += r * r / n;
            g[0] += 2.0 * r * xi[0] / n;
            g[1] += 2.0 * r * xi[1] / n;
        }
        Ok((loss, vec![Tensor::new(vec![2], g.to_vec())?]))
    }
}

impl Learner<f64> for LinearToy {
    type Batch = ToyBatch;
    type Output = Vec<f64>;

    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    fn predict(&self, batch: &ToyBatch) -> Result<Vec<f64>> {
        let th = self.theta();
        Ok(batch.x.iter().map(|x| th[0] * x[0] + th[1] * x[1]).collect())
    }

    fn label_loss_grad(&self, batch: &ToyBatch, _weighted: bool) -> Result<LabeledLoss<f64>> {
        let (loss, grads) = self.mse_grad(&batch.x, &batch.y)?;
        Ok(LabeledLoss {
            loss,
            report: None,
            grads,
        })
    }

    fn target_loss_grad(&self, batch: &ToyBatch, targets: &Vec<f64>) -> Result<(f64, Vec<Tensor<f64>>)> {
        self.mse_grad(&batch.x, targets)
    }
}
