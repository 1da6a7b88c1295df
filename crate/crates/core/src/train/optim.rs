//! Adam with decoupled weight decay and a cosine schedule.

use crate::tensor::{Result, Tensor, TensorError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Cosine decay from `base` at step 0 to 0 at `horizon`.
pub fn cosine_lr(base: f64, step: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return base;
    }
    let x = (step.min(horizon) as f64) / horizon as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * x).cos())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>], weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates `params` in place; a missing gradient counts as zero.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Option<&Tensor>],
        lr: f64,
    ) -> Result<()> {
        self.begin();
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            self.update(i, p, grads.get(i).copied().flatten(), lr)?;
        }
        self.finish(count)
    }

    /// Starts a step; follow with one [`Adam::update`] per slot and
    /// [`Adam::finish`].
    pub fn begin(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, i: usize, p: &mut Tensor, g: Option<&Tensor>, lr: f64) -> Result<()> {
        if i >= self.m.len() {
            return Err(TensorError::Contract(format!("more params than {} slots", self.m.len())));
        }
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        if p.shape() != m.shape() {
            return Err(TensorError::shape("adam", format!("param {i} {:?} vs {:?}", p.shape(), m.shape())));
        }
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(TensorError::shape("adam", format!("grad {i} {:?} vs {:?}", g.shape(), p.shape())));
            }
        }
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for j in 0..pd.len() {
            let gj = g.map_or(0.0, |g| g.data()[j]);
            md[j] = BETA1 * md[j] + (1.0 - BETA1) * gj;
            vd[j] = BETA2 * vd[j] + (1.0 - BETA2) * gj * gj;
            let update = (md[j] / c1) / ((vd[j] / c2).sqrt() + EPS);
            pd[j] -= lr * (update + self.weight_decay * pd[j]);
        }
        Ok(())
    }

    pub fn finish(&self, count: usize) -> Result<()> {
        if count != self.m.len() {
            return Err(TensorError::Contract(format!("{count} params for {} slots", self.m.len())));
        }
        Ok(())
    }
}
