//! SGD with classical momentum and a cosine annealing schedule.

use super::Tensor;
use crate::error::{Error, Result};

/// One momentum-SGD update in place. L2 weight decay is added to the raw
/// gradient before the momentum accumulation:
///
/// ```text
/// g = grad + weight_decay * param
/// velocity = momentum * velocity + g
/// param -= lr * velocity
/// ```
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
    }
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!("{:?}", param.shape()),
            format!("grad {:?}, velocity {:?}", grad.shape(), velocity.shape()),
        ));
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Cosine annealing: `base_lr * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    base_lr * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 150, 0.00625), 0.00625);
        assert!(cosine_lr(150, 150, 0.00625).abs() < 1e-18);
        // halfway point is half the base rate
        assert!((cosine_lr(75, 150, 0.00625) - 0.003125).abs() < 1e-12);
    }

    #[test]
    fn plain_sgd_step_hand_value() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[0.8]);
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        sgd_step(&mut p, &g, &mut v, 1.0, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[-1.0]);
        sgd_step(&mut p, &g, &mut v, 1.0, 0.9, 0.0).unwrap();
        // velocity: 1.0 then 1.9
        assert!((p.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn negative_lr_is_a_config_error() {
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        assert!(matches!(
            sgd_step(&mut p, &g, &mut v, -0.1, 0.0, 0.0),
            Err(Error::Config(_))
        ));
    }
}
