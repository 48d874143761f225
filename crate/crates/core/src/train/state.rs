use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{AdamW, TrainConfig};
use crate::ccdm::{GmmBank, MemoryBank};
use crate::diffcore::Array;
use crate::error::{invalid, Result};
use crate::metrics::AssignmentRecord;
use crate::model::SegModel;

/// Everything a run needs to continue bit-exactly.
#[derive(Clone, Debug)]
pub struct RunState {
    pub model: SegModel<f32>,
    pub optimizer: AdamW,
    pub gmm: GmmBank,
    pub memory: MemoryBank,
    pub record: AssignmentRecord,
    pub epoch: usize,
    pub step: usize,
    pub sts_history: Vec<f64>,
}

impl RunState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SegModel::new(cfg.model.clone(), cfg.seed)?;
        let optimizer = AdamW::new(
            model.params().values(),
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
            cfg.weight_decay,
        );
        let c = cfg.model.classes;
        let d = cfg.model.d_model;
        Ok(Self {
            model,
            optimizer,
            gmm: GmmBank::new(c, d),
            memory: MemoryBank::new(c + 1, d, cfg.gmm.bank_size),
            record: AssignmentRecord::new(cfg.model.queries),
            epoch: 0,
            step: 0,
            sts_history: Vec::new(),
        })
    }

    /// Named arrays: parameters (`param.*`), optimiser moments (`adam_m.*`,
    /// `adam_v.*`), mixtures (`gmm.*`), memory (`bank.*`) and the current
    /// assignment record (`record`, -1 for no-object).
    pub fn f32_arrays(&self) -> Vec<(String, Array<f32>)> {
        let mut out = Vec::new();
        for (name, a) in self.model.params().iter() {
            out.push((format!("param.{name}"), a.clone()));
        }
        for (name, (m, v)) in self
            .model
            .params()
            .names()
            .iter()
            .zip(self.optimizer.m.iter().zip(&self.optimizer.v))
        {
            out.push((format!("adam_m.{name}"), m.clone()));
            out.push((format!("adam_v.{name}"), v.clone()));
        }
        out
    }

    pub fn f64_arrays(&self) -> Vec<(String, Array<f64>)> {
        let mut out = self.gmm.to_arrays();
        out.extend(self.memory.to_arrays());
        let n = self.record.queries();
        let rows: Vec<f64> = self
            .record
            .rows()
            .iter()
            .flat_map(|r| r.iter().map(|c| c.map_or(-1.0, |c| c as f64)))
            .collect();
        out.push((
            "record".to_string(),
            Array::new(&[self.record.len(), n], rows).expect("record shape"),
        ));
        out.push((
            "sts_history".to_string(),
            Array::new(&[self.sts_history.len()], self.sts_history.clone()).expect("history shape"),
        ));
        out
    }

    /// Rebuilds a state from arrays produced by [`RunState::f32_arrays`] and
    /// [`RunState::f64_arrays`].
    pub fn from_arrays(
        cfg: &TrainConfig,
        f32s: &[(String, Array<f32>)],
        f64s: &[(String, Array<f64>)],
        epoch: usize,
        step: usize,
        adam_t: u64,
    ) -> Result<Self> {
        let mut s = Self::new(cfg)?;
        let find = |prefix: &str, name: &str| {
            let key = format!("{prefix}.{name}");
            f32s.iter()
                .find(|(n, _)| *n == key)
                .map(|(_, a)| a.clone())
                .ok_or_else(|| invalid(format!("missing {}", key)))
        };
        let names: Vec<String> = s.model.params().names().to_vec();
        let params = names
            .iter()
            .map(|n| find("param", n).map(|a| (n.as_str(), a)))
            .collect::<Result<Vec<_>>>()?;
        s.model.params_mut().load(params)?;
        for (i, n) in names.iter().enumerate() {
            s.optimizer.m[i] = find("adam_m", n)?;
            s.optimizer.v[i] = find("adam_v", n)?;
            if s.optimizer.m[i].shape() != s.model.params().values()[i].shape()
                || s.optimizer.v[i].shape() != s.model.params().values()[i].shape()
            {
                return Err(invalid(format!(
                    "optimiser state of {} has the wrong shape",
                    n
                )));
            }
        }
        s.optimizer.t = adam_t;
        let (c, d) = (cfg.model.classes, cfg.model.d_model);
        s.gmm = GmmBank::from_arrays(c, d, f64s)?;
        s.memory = MemoryBank::from_arrays(c + 1, d, cfg.gmm.bank_size, f64s)?;
        if let Some((_, r)) = f64s.iter().find(|(n, _)| n == "record") {
            for i in 0..r.rows() {
                let row = r
                    .row(i)
                    .iter()
                    .map(|&v| if v < 0.0 { None } else { Some(v as u8) })
                    .collect();
                s.record.push(row)?;
            }
        }
        if let Some((_, h)) = f64s.iter().find(|(n, _)| n == "sts_history") {
            s.sts_history = h.data().to_vec();
        }
        s.epoch = epoch;
        s.step = step;
        Ok(s)
    }
}

impl PartialEq for RunState {
    fn eq(&self, other: &Self) -> bool {
        self.model.params() == other.model.params()
            && self.optimizer == other.optimizer
            && self.gmm == other.gmm
            && self.memory == other.memory
            && self.record == other.record
            && self.epoch == other.epoch
            && self.step == other.step
            && self.sts_history == other.sts_history
    }
}
