//! Parameter update rules, learning-rate scheduling, and trainability.
//!
//! SGD with classical momentum (`v ← μv + g`, `θ ← θ − lr·v`) and Adam with
//! bias correction. The scheduler decays the learning rate exponentially
//! once per epoch: `lr = lr0 · gamma^epochs_completed`. Finetuning freezes
//! parameters by name: head-only mode trains only parameters under `head.`.

use crate::error::{Error, Result};
use crate::nn::Model;

/// Update-rule selection with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Adam with the standard defaults (β1 0.9, β2 0.999, eps 1e-8).
    pub fn adam() -> OptimizerKind {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// SGD with momentum 0.9.
    pub fn sgd() -> OptimizerKind {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Sgd { velocity: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32>, step: u64 },
}

/// Optimizer state: per-parameter slots plus the current learning rate.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Decoupled L2 hook; the shipped configurations keep it at 0.
    pub weight_decay: f64,
    epochs_completed: u64,
    slots: Vec<Option<Slot>>,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, lr0: f64, gamma: f64, n_params: usize) -> OptimState {
        OptimState {
            kind,
            lr0,
            gamma,
            lr: lr0,
            weight_decay: 0.0,
            epochs_completed: 0,
            slots: vec![None; n_params],
        }
    }

    pub fn epochs_completed(&self) -> u64 {
        self.epochs_completed
    }

    /// Adam step count of a parameter slot (0 when untouched).
    pub fn adam_step_count(&self, index: usize) -> u64 {
        match self.slots.get(index) {
            Some(Some(Slot::Adam { step, .. })) => *step,
            _ => 0,
        }
    }

    /// Applies one optimizer step to every trainable parameter.
    ///
    /// Every trainable parameter must carry a gradient; frozen parameters
    /// are never touched.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        for (i, param) in model.params.iter_mut().enumerate() {
            if !param.trainable {
                continue;
            }
            let grad = param.grad.as_ref().ok_or_else(|| {
                Error::Train(format!("missing gradient for parameter `{}`", param.name))
            })?;
            if grad.shape() != param.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} vs parameter `{}` {:?}",
                    grad.shape(),
                    param.name,
                    param.value.shape()
                )));
            }
            let n = param.value.numel();
            let wd = self.weight_decay;
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let slot = self.slots[i]
                        .get_or_insert_with(|| Slot::Sgd { velocity: vec![0.0; n] });
                    let Slot::Sgd { velocity } = slot else {
                        return Err(Error::Train("optimizer slot kind changed".into()));
                    };
                    let grad = grad.data().to_vec();
                    let values = param.value.data_mut();
                    for k in 0..n {
                        let g = grad[k] as f64 + wd * values[k] as f64;
                        let v = momentum * velocity[k] as f64 + g;
                        velocity[k] = v as f32;
                        values[k] = (values[k] as f64 - self.lr * v) as f32;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let slot = self.slots[i].get_or_insert_with(|| Slot::Adam {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        step: 0,
                    });
                    let Slot::Adam { m, v, step } = slot else {
                        return Err(Error::Train("optimizer slot kind changed".into()));
                    };
                    *step += 1;
                    let t = *step as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let grad = grad.data().to_vec();
                    let values = param.value.data_mut();
                    for k in 0..n {
                        let g = grad[k] as f64 + wd * values[k] as f64;
                        let mk = beta1 * m[k] as f64 + (1.0 - beta1) * g;
                        let vk = beta2 * v[k] as f64 + (1.0 - beta2) * g * g;
                        m[k] = mk as f32;
                        v[k] = vk as f32;
                        let m_hat = mk / bc1;
                        let v_hat = vk / bc2;
                        values[k] =
                            (values[k] as f64 - self.lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                    }
                }
            }
        }
        Ok(())
    }

    /// Marks one epoch as completed and returns the decayed learning rate.
    pub fn scheduler_step(&mut self) -> f64 {
        self.epochs_completed += 1;
        self.lr = exponential_lr(self.lr0, self.gamma, self.epochs_completed);
        self.lr
    }

    /// Read-only view of a parameter's slot, for serialization.
    pub fn slot_view(&self, index: usize) -> Option<SlotView<'_>> {
        match self.slots.get(index)? {
            Some(Slot::Sgd { velocity }) => Some(SlotView::Sgd { velocity }),
            Some(Slot::Adam { m, v, step }) => Some(SlotView::Adam { m, v, step: *step }),
            None => None,
        }
    }

    pub fn set_slot_sgd(&mut self, index: usize, velocity: Vec<f32>) {
        self.slots[index] = Some(Slot::Sgd { velocity });
    }

    pub fn set_slot_adam(&mut self, index: usize, m: Vec<f32>, v: Vec<f32>, step: u64) {
        self.slots[index] = Some(Slot::Adam { m, v, step });
    }

    /// Restores the schedule position (recomputes the learning rate).
    pub fn set_epochs_completed(&mut self, epochs: u64) {
        self.epochs_completed = epochs;
        self.lr = exponential_lr(self.lr0, self.gamma, epochs);
    }
}

/// Borrowed view of one optimizer slot.
#[derive(Debug)]
pub enum SlotView<'a> {
    Sgd { velocity: &'a [f32] },
    Adam { m: &'a [f32], v: &'a [f32], step: u64 },
}

/// The exponential schedule as a pure function.
pub fn exponential_lr(lr0: f64, gamma: f64, epochs_completed: u64) -> f64 {
    lr0 * gamma.powf(epochs_completed as f64)
}

/// Which parameters train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainability {
    All,
    /// Only parameters whose name starts with `head.`.
    HeadOnly,
}

impl std::str::FromStr for Trainability {
    type Err = Error;

    fn from_str(s: &str) -> Result<Trainability> {
        match s {
            "all" => Ok(Trainability::All),
            "head-only" => Ok(Trainability::HeadOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown finetune mode `{other}` (expected all or head-only)"
            ))),
        }
    }
}

/// Sets the trainability mask on a model.
pub fn set_trainable(model: &mut Model, mode: Trainability) -> Result<()> {
    match mode {
        Trainability::All => {
            for p in &mut model.params {
                p.trainable = true;
            }
            Ok(())
        }
        Trainability::HeadOnly => {
            if !model.params.iter().any(|p| p.name.starts_with("head.")) {
                return Err(Error::InvalidArgument(
                    "model has no `head.` parameters to train".into(),
                ));
            }
            for p in &mut model.params {
                p.trainable = p.name.starts_with("head.");
                if !p.trainable {
                    p.grad = None;
                }
            }
            Ok(())
        }
    }
}
