use crate::error::{Error, Result};
use crate::numerics::params::Params;

/// Linear learning-rate ramp over `warmup_steps`, clamped at `base_lr`.
/// `warmup_steps == 0` disables warmup.
pub fn warmup_lr(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * ((step as f64 / warmup_steps as f64).min(1.0))
}

/// AdamW with decoupled weight decay, bias correction and LR warmup.
/// Individual parameters can be excluded from updates (e.g. tensors that are
/// maintained by a non-gradient path).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    frozen: std::collections::HashSet<usize>,
}

impl AdamW {
    pub fn new(params: &Params, lr: f64, beta1: f64, beta2: f64, weight_decay: f64, warmup_steps: u64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            warmup_steps,
            step_count: 0,
            m: params.iter().map(|e| vec![0.0; e.value.len()]).collect(),
            v: params.iter().map(|e| vec![0.0; e.value.len()]).collect(),
            frozen: std::collections::HashSet::new(),
        }
    }

    /// Exclude a parameter from optimizer updates.
    pub fn freeze(&mut self, pid: usize) {
        self.frozen.insert(pid);
    }

    /// One update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let lr = warmup_lr(self.step_count, self.lr, self.warmup_steps);
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for pid in 0..params.len() {
            if self.frozen.contains(&pid) {
                continue;
            }
            let e = params.entry_mut(pid);
            if self.m[pid].len() != e.value.len() {
                return Err(Error::ShapeMismatch {
                    expected: e.shape.clone(),
                    got: vec![self.m[pid].len()],
                    context: format!("optimizer moments for {}", e.name),
                });
            }
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            for i in 0..e.value.len() {
                let g = e.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                // decoupled decay, applied with the warmed-up lr
                e.value[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * e.value[i]);
            }
        }
        Ok(())
    }
}

/// Exponentially averaged shadow weights, initialized from the tracked
/// parameters and used for inference in place of LR decay.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<Vec<f64>>,
}

impl Ema {
    pub fn new(params: &Params, decay: f64) -> Self {
        assert!((0.0..=1.0).contains(&decay), "ema decay out of range");
        Ema {
            decay,
            shadow: params.iter().map(|e| e.value.clone()).collect(),
        }
    }

    /// shadow <- decay * shadow + (1 - decay) * params
    pub fn update(&mut self, params: &Params) -> Result<()> {
        if self.shadow.len() != params.len() {
            return Err(Error::contract(format!(
                "ema tracks {} parameters, store has {}",
                self.shadow.len(),
                params.len()
            )));
        }
        for (pid, sh) in self.shadow.iter_mut().enumerate() {
            let e = params.entry(pid);
            if sh.len() != e.value.len() {
                return Err(Error::ShapeMismatch {
                    expected: e.shape.clone(),
                    got: vec![sh.len()],
                    context: format!("ema shadow for {}", e.name),
                });
            }
            for (s, p) in sh.iter_mut().zip(&e.value) {
                *s = self.decay * *s + (1.0 - self.decay) * p;
            }
        }
        Ok(())
    }

    pub fn shadow(&self, pid: usize) -> &[f64] {
        &self.shadow[pid]
    }

    /// A copy of `params` carrying the shadow values.
    pub fn shadow_params(&self, params: &Params) -> Params {
        let mut out = params.clone();
        for pid in 0..out.len() {
            let sh = self.shadow[pid].clone();
            out.entry_mut(pid).value = sh;
        }
        out
    }

    /// Rebuild from externally stored shadow tensors (checkpoint load).
    pub fn from_shadow(decay: f64, shadow: Vec<Vec<f64>>) -> Self {
        Ema { decay, shadow }
    }
}
