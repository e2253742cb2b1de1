use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with L2 weight decay added to the gradient.
    Adam,
    /// Adam with decoupled weight decay.
    Adamw,
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub(crate) struct Adam {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(kind: OptimizerKind, vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| {
                let z = var.as_tensor().zeros_like()?;
                Ok(Slot {
                    m: z.clone(),
                    v: z,
                    var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            slots,
        })
    }

    /// Variables without a gradient (unused in this forward pass) are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for slot in &mut self.slots {
            let theta = slot.var.as_tensor();
            let Some(g) = grads.get(theta) else { continue };
            // Gradients carry their own op graph; moments must not keep it alive.
            let g = g.detach();
            let g = match self.kind {
                OptimizerKind::Adam if self.weight_decay > 0.0 => (g + (theta.detach() * self.weight_decay)?)?,
                _ => g,
            };
            let m = ((&slot.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let mut next = theta.detach();
            if self.kind == OptimizerKind::Adamw && self.weight_decay > 0.0 {
                next = (next * (1.0 - self.lr * self.weight_decay))?;
            }
            let next = (next - (update * self.lr)?)?;
            slot.var.set(&next)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    // One step on f(x) = x^2 from x = 1: g = 2 (+ wd * x), first Adam step
    // moves by exactly lr * sign(g) up to eps.
    #[test]
    fn first_step_matches_closed_form() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Adamw] {
            let x = Var::new(&[1.0f32], &Device::Cpu).unwrap();
            let mut opt = Adam::new(kind, vec![x.clone()], 0.1, 0.5).unwrap();
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
            let got = x.as_tensor().to_vec1::<f32>().unwrap()[0];
            let want = match kind {
                OptimizerKind::Adam => 1.0 - 0.1,
                OptimizerKind::Adamw => 1.0 * (1.0 - 0.1 * 0.5) - 0.1,
            };
            assert!((got - want).abs() < 1e-5, "{kind:?}: {got} vs {want}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let x = Var::new(&[3.0f32, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(OptimizerKind::Adam, vec![x.clone()], 0.05, 0.0).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|t| t.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn moments_do_not_retain_the_graph() {
        let x = Var::new(&[0.5f32, -1.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(OptimizerKind::Adam, vec![x.clone()], 0.01, 1e-4).unwrap();
        for _ in 0..3 {
            let loss = (x.as_tensor().exp().unwrap() * x.as_tensor()).unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        for slot in &opt.slots {
            assert!(!slot.m.track_op() && !slot.v.track_op());
        }
    }
}
