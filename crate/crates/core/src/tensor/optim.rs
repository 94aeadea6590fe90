use super::{Tensor, TensorError};

/// One momentum-SGD update: `v ← momentum·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    velocity: &mut [Tensor],
    grads: &[Option<Tensor>],
    lr: f64,
    momentum: f64,
) -> Result<(), TensorError> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(TensorError::Count {
            what: "parameter/velocity/gradient",
            left: params.len(),
            right: velocity.len().min(grads.len()),
        });
    }
    for (index, g) in grads.iter().enumerate() {
        let g = g.as_ref().ok_or(TensorError::MissingGrad { index })?;
        if g.shape() != params[index].shape() || velocity[index].shape() != params[index].shape() {
            return Err(super::shape_err(
                "sgd_step",
                format!("parameter {index}: {:?} vs grad {:?}", params[index].shape(), g.shape()),
            ));
        }
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let g = g.as_ref().expect("checked above");
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Momentum SGD holding its own velocity buffers.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &[Tensor], lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<(), TensorError> {
        sgd_step(params, &mut self.velocity, grads, self.lr, self.momentum)
    }
}
