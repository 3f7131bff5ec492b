//! Adam and the cosine-annealing learning-rate schedule.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{read_mart, write_mart, StoreDtype, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments for every parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
    names: Vec<String>,
}

impl AdamState {
    pub fn new(ps: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || ps.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One Adam update from the gradients accumulated on `ps`. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, ps: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(config_err!("learning rate must be positive and finite, got {lr}"));
        }
        if self.m.len() != ps.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                ps.len()
            )));
        }
        for (id, name, t) in ps.iter() {
            if let Some(g) = t.grad() {
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient in {name}[{k}]: {}", g[k])));
                }
            }
            if self.m[id.index()].shape() != t.shape() {
                return Err(Error::Contract(format!("optimizer state shape mismatch for {name}")));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let i = id.index();
            let t = ps.get_mut(id);
            let grad = t.grad().map(<[f64]>::to_vec);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = t.data_mut();
            for k in 0..w.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn save(&self, ps: &ParamStore, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<String> = ps.iter().map(|(_, n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            write_mart(&dir.join(format!("{name}.m.mart")), &self.m[i], StoreDtype::F64)?;
            write_mart(&dir.join(format!("{name}.v.mart")), &self.v[i], StoreDtype::F64)?;
        }
        let meta = AdamMeta {
            config: self.config,
            step: self.step,
            names,
        };
        let path = dir.join("adam.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(ps: &ParamStore, dir: &Path) -> Result<Self> {
        let path = dir.join("adam.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: AdamMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let expected: Vec<&str> = ps.iter().map(|(_, n, _)| n).collect();
        if meta.names != expected {
            return Err(Error::Format {
                path,
                msg: "optimizer state does not match the parameter list".into(),
            });
        }
        let mut state = Self::new(ps, meta.config);
        state.step = meta.step;
        for (i, (_, name, t)) in ps.iter().enumerate() {
            for (suffix, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let p = dir.join(format!("{name}.{suffix}.mart"));
                let loaded = read_mart(&p)?;
                if loaded.shape() != t.shape() {
                    return Err(Error::Format {
                        path: p,
                        msg: format!("shape {:?}, parameter has {:?}", loaded.shape(), t.shape()),
                    });
                }
                *slot = loaded;
            }
        }
        Ok(state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Warm restart every `t_max` iterations.
    #[default]
    Restart,
    /// One half-cosine over `t_max`, then held at `lr_min`.
    Stretched,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub t_max: u64,
    pub mode: ScheduleMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_max: 2e-4,
            lr_min: 1e-8,
            t_max: 1000,
            mode: ScheduleMode::Restart,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max < 1 {
            return Err(config_err!("t_max must be ≥ 1"));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(config_err!(
                "need 0 < lr_min ≤ lr_max, got {} and {}",
                self.lr_min,
                self.lr_max
            ));
        }
        Ok(())
    }
}

/// Learning rate at iteration `t`. In restart mode the period position runs
/// over `1..=t_max` after the first step, so `lr(k·t_max) = lr_min` and the
/// restart to `lr_max` happens on the following iteration.
pub fn cosine_lr(t: u64, cfg: &ScheduleConfig) -> f64 {
    let pos = match cfg.mode {
        ScheduleMode::Restart if t == 0 => 0,
        ScheduleMode::Restart => (t - 1) % cfg.t_max + 1,
        ScheduleMode::Stretched => t.min(cfg.t_max),
    };
    let c = (PI * pos as f64 / cfg.t_max as f64).cos();
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + c)
}
