use crate::Float;

/// Hyper-parameters of [`AdamW`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for one parameter slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with decoupled weight decay. Slots are addressed by index; a slot is
/// created on first use.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    slots: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: Vec::new(),
        }
    }

    /// Advances the shared step counter; call once per optimization step
    /// before updating the slots.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update<T: Float>(&mut self, slot: usize, param: &mut [T], grad: &[T]) {
        assert_eq!(param.len(), grad.len(), "parameter/gradient length mismatch");
        assert!(self.step > 0, "begin_step() must precede update()");
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        let st = self.slots[slot].get_or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in param.iter_mut().zip(grad).enumerate() {
            let g = g.f64();
            let m = &mut st.m[i];
            let v = &mut st.v[i];
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mut x = p.f64();
            x -= c.lr * c.weight_decay * x;
            x -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            *p = T::c(x);
        }
    }

    pub fn slot(&self, slot: usize) -> Option<&Moments> {
        self.slots.get(slot).and_then(|s| s.as_ref())
    }

    pub fn set_slot(&mut self, slot: usize, moments: Moments) {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        self.slots[slot] = Some(moments);
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = vec![1.0f64, -1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.5, -2.0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = vec![3.0f64];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.5)];
            opt.begin_step();
            opt.update(0, &mut p, &g);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
