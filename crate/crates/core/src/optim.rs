//! AdamW and Adafactor (constant learning rate, no momentum).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Group, Mat, ParamKey};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const ADAFACTOR_EPS: f64 = 1e-30;
pub const ADAFACTOR_CLIP: f64 = 1.0;
pub const ADAFACTOR_DECAY: f64 = -0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Adafactor,
}

fn check_shape(param: &Mat, grad: &Mat) -> Result<()> {
    if param.dim() != grad.dim() {
        return Err(Error::ShapeMismatch {
            name: "gradient".into(),
            expected: param.shape().to_vec(),
            actual: grad.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Mat,
    pub v: Mat,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: (usize, usize)) -> Self {
        Self {
            m: Mat::zeros(shape),
            v: Mat::zeros(shape),
            t: 0,
        }
    }
}

/// Bias-corrected Adam moment update with decoupled weight decay.
pub fn adamw_step(param: &mut Mat, grad: &Mat, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    check_shape(param, grad)?;
    check_shape(&state.m, grad)?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    ndarray::Zip::from(&mut *param)
        .and(&mut state.m)
        .and(&mut state.v)
        .and(grad)
        .for_each(|p, m, v, &g| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p *= 1.0 - lr * weight_decay;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        });
    Ok(())
}

/// Second-moment accumulator: row/column running means for matrices with
/// both dimensions above one, a full matrix otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum SecondMoment {
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full(Mat),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdafactorState {
    pub moment: SecondMoment,
    pub t: u64,
}

impl AdafactorState {
    pub fn new(shape: (usize, usize)) -> Self {
        let moment = if shape.0 > 1 && shape.1 > 1 {
            SecondMoment::Factored {
                row: vec![0.0; shape.0],
                col: vec![0.0; shape.1],
            }
        } else {
            SecondMoment::Full(Mat::zeros(shape))
        };
        Self { moment, t: 0 }
    }
}

/// `row ⊗ col / mean(row)`: the rank-1 reconstruction of the accumulator.
pub fn factored_second_moment(row: &[f64], col: &[f64]) -> Mat {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    Mat::from_shape_fn((row.len(), col.len()), |(i, j)| row[i] * col[j] / mean)
}

pub fn adafactor_decay(t: u64) -> f64 {
    1.0 - (t as f64).powf(ADAFACTOR_DECAY)
}

pub fn adafactor_step(
    param: &mut Mat,
    grad: &Mat,
    state: &mut AdafactorState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shape(param, grad)?;
    state.t += 1;
    let beta2 = adafactor_decay(state.t);
    let grad_sq = grad.mapv(|g| g * g + ADAFACTOR_EPS);
    let mut update = match &mut state.moment {
        SecondMoment::Factored { row, col } => {
            if row.len() != grad.nrows() || col.len() != grad.ncols() {
                return Err(Error::ShapeMismatch {
                    name: "adafactor state".into(),
                    expected: vec![row.len(), col.len()],
                    actual: grad.shape().to_vec(),
                });
            }
            let (n, m) = grad.dim();
            for (i, r) in row.iter_mut().enumerate() {
                let mean = grad_sq.row(i).sum() / m as f64;
                *r = beta2 * *r + (1.0 - beta2) * mean;
            }
            for (j, c) in col.iter_mut().enumerate() {
                let mean = grad_sq.column(j).sum() / n as f64;
                *c = beta2 * *c + (1.0 - beta2) * mean;
            }
            let row_mean = row.iter().sum::<f64>() / n as f64;
            Mat::from_shape_fn((n, m), |(i, j)| {
                grad[[i, j]] / (row[i] / row_mean).sqrt() / col[j].sqrt()
            })
        }
        SecondMoment::Full(v) => {
            check_shape(v, grad)?;
            ndarray::Zip::from(&mut *v)
                .and(&grad_sq)
                .for_each(|v, &g2| *v = beta2 * *v + (1.0 - beta2) * g2);
            ndarray::Zip::from(grad).and(&*v).map_collect(|&g, &v| g / v.sqrt())
        }
    };
    let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len() as f64).sqrt();
    update *= lr / (rms / ADAFACTOR_CLIP).max(1.0);
    if weight_decay != 0.0 {
        param.mapv_inplace(|p| p - p * weight_decay * lr);
    }
    *param -= &update;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum ParamState {
    Adam(AdamState),
    Adafactor(AdafactorState),
}

/// Per-parameter optimizer state keyed by parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    states: BTreeMap<ParamKey, ParamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            states: BTreeMap::new(),
        }
    }

    /// Applies one update to `param` using its gradient.
    pub fn update(&mut self, key: ParamKey, param: &mut Mat, grad: &Mat) -> Result<()> {
        let (lr, wd) = (self.learning_rate, self.weight_decay);
        let kind = self.kind;
        let state = self.states.entry(key).or_insert_with(|| match kind {
            OptimizerKind::Adamw => ParamState::Adam(AdamState::new(param.dim())),
            OptimizerKind::Adafactor => ParamState::Adafactor(AdafactorState::new(param.dim())),
        });
        match state {
            ParamState::Adam(s) => adamw_step(param, grad, s, lr, wd),
            ParamState::Adafactor(s) => adafactor_step(param, grad, s, lr, wd),
        }
    }

    /// State as named tensors, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        for (key, state) in &self.states {
            let prefix = format!("optim.{}.{}", key.group.name(), key.index);
            match state {
                ParamState::Adam(s) => {
                    out.push((format!("{prefix}.t"), Mat::from_elem((1, 1), s.t as f64)));
                    out.push((format!("{prefix}.m"), s.m.clone()));
                    out.push((format!("{prefix}.v"), s.v.clone()));
                }
                ParamState::Adafactor(s) => {
                    out.push((format!("{prefix}.t"), Mat::from_elem((1, 1), s.t as f64)));
                    match &s.moment {
                        SecondMoment::Factored { row, col } => {
                            out.push((format!("{prefix}.row"), row_mat(row)));
                            out.push((format!("{prefix}.col"), row_mat(col)));
                        }
                        SecondMoment::Full(v) => out.push((format!("{prefix}.v"), v.clone())),
                    }
                }
            }
        }
        out
    }

    /// Rebuilds state from [`Optimizer::state_tensors`] output.
    pub fn load_state(&mut self, tensors: &[(String, Mat)]) -> Result<()> {
        let mut states = BTreeMap::new();
        let lookup = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m);
        for (name, value) in tensors {
            let Some(prefix) = name.strip_suffix(".t") else { continue };
            let mut parts = prefix.splitn(3, '.');
            let (Some("optim"), Some(group), Some(index)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::UnknownTensor(name.clone()));
            };
            let group = Group::ALL
                .into_iter()
                .find(|g| g.name() == group)
                .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            let index: usize = index.parse().map_err(|_| Error::UnknownTensor(name.clone()))?;
            let t = value[[0, 0]] as u64;
            let missing = |suffix: &str| Error::CheckpointFormat(format!("missing {prefix}.{suffix}"));
            let state = match self.kind {
                OptimizerKind::Adamw => ParamState::Adam(AdamState {
                    m: lookup(&format!("{prefix}.m")).ok_or_else(|| missing("m"))?.clone(),
                    v: lookup(&format!("{prefix}.v")).ok_or_else(|| missing("v"))?.clone(),
                    t,
                }),
                OptimizerKind::Adafactor => {
                    let moment = match lookup(&format!("{prefix}.v")) {
                        Some(v) => SecondMoment::Full(v.clone()),
                        None => SecondMoment::Factored {
                            row: lookup(&format!("{prefix}.row")).ok_or_else(|| missing("row"))?.iter().copied().collect(),
                            col: lookup(&format!("{prefix}.col")).ok_or_else(|| missing("col"))?.iter().copied().collect(),
                        },
                    };
                    ParamState::Adafactor(AdafactorState { moment, t })
                }
            };
            states.insert(ParamKey::new(group, index), state);
        }
        self.states = states;
        Ok(())
    }
}

fn row_mat(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adamw_zero_gradient_is_noop() {
        let mut p = array![[1.5, -2.0]];
        let mut s = AdamState::new((1, 2));
        adamw_step(&mut p, &Mat::zeros((1, 2)), &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p, array![[1.5, -2.0]]);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        let mut p = array![[1.0]];
        let mut s = AdamState::new((1, 1));
        adamw_step(&mut p, &array![[1.0]], &mut s, 0.1, 0.0).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert_eq!(p[[0, 0]], expected);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut p = array![[2.0]];
        let mut s = AdamState::new((1, 1));
        adamw_step(&mut p, &array![[0.0]], &mut s, 0.1, 0.5).unwrap();
        assert_eq!(p[[0, 0]], 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Mat::zeros((2, 2));
        let mut s = AdamState::new((2, 2));
        assert!(adamw_step(&mut p, &Mat::zeros((1, 2)), &mut s, 0.1, 0.0).is_err());
        let mut s = AdafactorState::new((2, 2));
        assert!(adafactor_step(&mut p, &Mat::zeros((2, 3)), &mut s, 0.1, 0.0).is_err());
    }

    #[test]
    fn adafactor_zero_gradient_is_noop() {
        let mut p = array![[1.0, 2.0], [3.0, 4.0]];
        let before = p.clone();
        let mut s = AdafactorState::new((2, 2));
        for _ in 0..3 {
            adafactor_step(&mut p, &Mat::zeros((2, 2)), &mut s, 0.5, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adafactor_rank_one_factoring_is_exact() {
        let u = [0.5, -1.0, 2.0];
        let w = [1.5, 0.25, -3.0, 1.0];
        let g = Mat::from_shape_fn((3, 4), |(i, j)| u[i] * w[j]);
        let mut s = AdafactorState::new((3, 4));
        let mut p = Mat::zeros((3, 4));
        adafactor_step(&mut p, &g, &mut s, 0.1, 0.0).unwrap();
        let SecondMoment::Factored { row, col } = &s.moment else {
            panic!("matrix state must be factored")
        };
        let reconstructed = factored_second_moment(row, col);
        // Unfactored accumulator after one step (β₂ = 0): g² + eps.
        let full = g.mapv(|x| x * x + ADAFACTOR_EPS);
        for (a, b) in reconstructed.iter().zip(full.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn adafactor_constant_scalar_stream_tends_to_sign_step() {
        let mut p = array![[0.0]];
        let mut s = AdafactorState::new((1, 1));
        let lr = 0.01;
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = p[[0, 0]];
            adafactor_step(&mut p, &array![[0.3]], &mut s, lr, 0.0).unwrap();
            last = before - p[[0, 0]];
        }
        assert!((last - lr).abs() <= 0.01 * lr, "step {last}");
    }

    #[test]
    fn adafactor_decay_schedule() {
        assert_eq!(adafactor_decay(1), 0.0);
        assert!((adafactor_decay(2) - (1.0 - 2f64.powf(-0.8))).abs() < 1e-15);
    }

    #[test]
    fn optimizer_state_round_trips() {
        for kind in [OptimizerKind::Adamw, OptimizerKind::Adafactor] {
            let mut params = [array![[1.0, 2.0], [3.0, 4.0]], array![[0.5, 0.25]]];
            let keys = [ParamKey::new(Group::TaskAdapter, 0), ParamKey::new(Group::TaskAdapter, 1)];
            let mut grads = crate::autograd::Gradients::new();
            grads.insert(keys[0], array![[0.1, -0.2], [0.3, 0.4]]);
            grads.insert(keys[1], array![[1.0, -1.0]]);
            let mut opt = Optimizer::new(kind, 0.1, 0.01);
            for (i, key) in keys.iter().enumerate() {
                opt.update(*key, &mut params[i], &grads[key]).unwrap();
            }
            let mut restored = Optimizer::new(kind, 0.1, 0.01);
            restored.load_state(&opt.state_tensors()).unwrap();
            assert_eq!(restored, opt);
        }
    }
}
