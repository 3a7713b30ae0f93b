use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::params::ParamTree;
use crate::transformer::{block_index, Block, Model};

/// Learning-rate schedule over a run of `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Linear warmup over `warmup_ratio · total` steps, then cosine decay to
    /// `min_ratio · lr`.
    CosineWithWarmup { warmup_ratio: f64, min_ratio: f64 },
}

impl Schedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::CosineWithWarmup { warmup_ratio, min_ratio } => {
                let warm = (warmup_ratio * total as f64).ceil() as usize;
                if step < warm {
                    return (step + 1) as f64 / warm as f64;
                }
                let span = total.saturating_sub(warm).max(1);
                let progress = ((step - warm) as f64 / span as f64).min(1.0);
                min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
}

impl GroupConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        self.lr * self.schedule.factor(step, total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Base,
    InsertedDense,
    MemoryKeysValues,
}

/// Optimizer settings per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimGroups {
    pub base: GroupConfig,
    pub inserted_dense: GroupConfig,
    pub memory_keys_values: GroupConfig,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimGroups {
    fn default() -> Self {
        let cosine = Schedule::CosineWithWarmup {
            warmup_ratio: 0.1,
            min_ratio: 0.1,
        };
        OptimGroups {
            base: GroupConfig {
                lr: 3e-4,
                schedule: cosine,
                weight_decay: 0.1,
            },
            inserted_dense: GroupConfig {
                lr: 1e-3,
                schedule: cosine,
                weight_decay: 0.1,
            },
            memory_keys_values: GroupConfig {
                lr: 1e-3,
                schedule: Schedule::Constant,
                weight_decay: 0.0,
            },
            betas: default_betas(),
            eps: default_eps(),
        }
    }
}

impl OptimGroups {
    pub fn validate(&self) -> Result<()> {
        if self.memory_keys_values.schedule != Schedule::Constant || self.memory_keys_values.weight_decay != 0.0 {
            return Err(Error::Config(
                "optim.memory_keys_values must use a constant schedule and zero weight decay".into(),
            ));
        }
        for (name, g) in [
            ("base", &self.base),
            ("inserted_dense", &self.inserted_dense),
            ("memory_keys_values", &self.memory_keys_values),
        ] {
            if !(g.lr >= 0.0 && g.lr.is_finite()) || !(g.weight_decay >= 0.0) {
                return Err(Error::Config(format!("optim.{name}: lr and weight_decay must be non-negative")));
            }
            if let Schedule::CosineWithWarmup { warmup_ratio, min_ratio } = g.schedule {
                if !(0.0..=1.0).contains(&warmup_ratio) || !(0.0..=1.0).contains(&min_ratio) {
                    return Err(Error::Config(format!("optim.{name}: schedule ratios must lie in [0, 1]")));
                }
            }
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.eps <= 0.0 {
            return Err(Error::Config("optim: betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn config(&self, g: Group) -> &GroupConfig {
        match g {
            Group::Base => &self.base,
            Group::InsertedDense => &self.inserted_dense,
            Group::MemoryKeysValues => &self.memory_keys_values,
        }
    }
}

/// Group of a named model parameter.
pub fn group_of<T: Scalar>(model: &Model<T>, name: &str) -> Group {
    let Some(i) = block_index(name) else {
        return Group::Base;
    };
    if !model.inserted.get(i).copied().unwrap_or(false) {
        return Group::Base;
    }
    let is_kv = matches!(model.blocks.get(i), Some(Block::Memory(_)))
        && (name.contains(".mem.keys") || name.contains(".mem.values"));
    if is_kv {
        Group::MemoryKeysValues
    } else {
        Group::InsertedDense
    }
}

/// Decoupled-weight-decay Adam over the trainable parameters of a model.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub groups: OptimGroups,
    m: Model<T>,
    v: Model<T>,
    step: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &Model<T>, groups: OptimGroups) -> Self {
        AdamW {
            groups,
            m: model.zeros_like(),
            v: model.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update with learning rates for `step` of `total`. Weight decay
    /// applies to matrices only.
    pub fn update(&mut self, model: &mut Model<T>, grads: &Model<T>, step: usize, total: usize) {
        self.step += 1;
        let (b1, b2) = self.groups.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let groups: Vec<(bool, Group)> = model
            .named()
            .iter()
            .map(|(n, _)| (model.is_trainable(n), group_of(model, n)))
            .collect();
        let params = model.named_mut();
        let g = grads.named();
        let m = self.m.named_mut();
        let v = self.v.named_mut();
        let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
        let eps = T::from_f64(self.groups.eps);
        for ((((p, g), m), v), (trainable, group)) in params.into_iter().zip(g).zip(m).zip(v).zip(groups) {
            if !trainable {
                continue;
            }
            let cfg = self.groups.config(group);
            let lr = cfg.lr_at(step, total);
            let decay = if p.1.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
            let (step_size, shrink) = (T::from_f64(lr / bc1), T::from_f64(1.0 - lr * decay));
            let inv_bc2 = T::from_f64(1.0 / bc2);
            let pd = p.1.data_mut();
            let (md, vd) = (m.1.data_mut(), v.1.data_mut());
            for i in 0..pd.len() {
                let gi = g.1.data()[i];
                md[i] = tb1 * md[i] + (T::one() - tb1) * gi;
                vd[i] = tb2 * vd[i] + (T::one() - tb2) * gi * gi;
                let denom = (vd[i] * inv_bc2).sqrt() + eps;
                pd[i] = pd[i] * shrink - step_size * md[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_shape() {
        let s = Schedule::CosineWithWarmup {
            warmup_ratio: 0.1,
            min_ratio: 0.0,
        };
        assert!((s.factor(0, 100) - 0.1).abs() < 1e-12);
        assert!((s.factor(9, 100) - 1.0).abs() < 1e-12);
        assert!((s.factor(10, 100) - 1.0).abs() < 1e-12);
        assert!(s.factor(55, 100) < 0.6 && s.factor(55, 100) > 0.4);
        assert!(s.factor(99, 100) < 0.01);
        assert_eq!(Schedule::Constant.factor(50, 100), 1.0);
    }

    #[test]
    fn memory_group_must_be_constant() {
        let mut g = OptimGroups::default();
        assert!(g.validate().is_ok());
        g.memory_keys_values.schedule = Schedule::CosineWithWarmup {
            warmup_ratio: 0.1,
            min_ratio: 0.0,
        };
        assert!(g.validate().is_err());
    }
}
