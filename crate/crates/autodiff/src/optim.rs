use crate::float::Float;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A trainable tensor with its gradient slot and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub momentum: Tensor<T>,
}

impl<T: Float> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad: None,
            momentum,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `buf ← m·buf + (g + wd·p); p ← p − lr·buf`, then clears the gradients.
pub fn sgd_step<T: Float>(params: &mut [Parameter<T>], opt: Sgd) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::Usage(format!("parameter {} has no gradient", p.name)));
    }
    let (lr, m, wd) = (T::of(opt.lr), T::of(opt.momentum), T::of(opt.weight_decay));
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        if g.shape() != p.value.shape() {
            return Err(Error::Dimension(format!(
                "gradient of {} is {}, parameter is {}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        for ((v, b), &d) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.momentum.data_mut())
            .zip(g.data())
        {
            *b = m * *b + (d + wd * *v);
            *v = *v - lr * *b;
        }
    }
    Ok(())
}

/// Polynomial decay from `lr0` to `lr_end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr_end: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl LrSchedule {
    pub fn new(lr0: f64, lr_end: f64, total_steps: u64, power: f64) -> Result<Self> {
        if !(lr_end > 0.0 && lr0 >= lr_end && lr0.is_finite()) {
            return Err(Error::Usage(format!(
                "learning rates must satisfy lr0 >= lr_end > 0, got {lr0} and {lr_end}"
            )));
        }
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::Usage(format!("decay power must be positive, got {power}")));
        }
        Ok(LrSchedule {
            lr0,
            lr_end,
            total_steps,
            power,
        })
    }

    pub fn lr(&self, step: u64) -> f64 {
        poly_lr(self, step)
    }
}

/// `(lr0 − lr_end)·(1 − step/total)^power + lr_end`, held at `lr_end` past the end.
pub fn poly_lr(s: &LrSchedule, step: u64) -> f64 {
    if step >= s.total_steps {
        return s.lr_end;
    }
    let frac = 1.0 - step as f64 / s.total_steps as f64;
    (s.lr0 - s.lr_end) * frac.powf(s.power) + s.lr_end
}
