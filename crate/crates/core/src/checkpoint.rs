//! JSON checkpoints: configuration plus every named parameter block.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{config_err, Error, Result};
use crate::expert_bank::ExpertAssignment;
use crate::model::{ModalConfig, Tracker};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major values; `f64` holds every `f32` exactly.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    pub modal: Option<ModalConfig>,
    pub assignment: Option<ExpertAssignment>,
    pub epoch: usize,
    pub params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn from_tracker<T: Scalar>(model: &Tracker<T>, epoch: usize) -> Self {
        Self {
            backbone: model.backbone.cfg,
            modal: model.modal.as_ref().map(|m| m.cfg),
            assignment: model.modal.as_ref().map(|m| m.assignment.clone()),
            epoch,
            params: model
                .params
                .iter()
                .map(|(_, name, v)| NamedParam {
                    name: name.to_string(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                    data: v.iter().map(|x| x.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds the tracker; every model parameter must be present.
    pub fn to_tracker<T: Scalar>(&self) -> Result<Tracker<T>> {
        let mut model = Tracker::new(self.backbone, self.modal, 0)?;
        if let (Some(m), Some(a)) = (model.modal.as_mut(), &self.assignment) {
            a.validate(m.cfg.experts().max(a.table.values().flatten().count()))?;
            m.assignment = a.clone();
        }
        let mut seen = 0;
        for p in &self.params {
            let id = model
                .params
                .id(&p.name)
                .ok_or_else(|| config_err!("checkpoint parameter {} unknown to model", p.name))?;
            let value = Array2::from_shape_vec((p.rows, p.cols), p.data.iter().map(|&v| T::of(v)).collect())
                .map_err(|e| Error::Data(format!("parameter {}: {e}", p.name)))?;
            let dst = model.params.get_mut(id);
            if dst.dim() != value.dim() {
                return Err(config_err!("parameter {} has shape {:?}, model expects {:?}", p.name, value.dim(), dst.dim()));
            }
            *dst = value;
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(config_err!("checkpoint holds {seen} of {} parameters", model.params.len()));
        }
        if model.modal.is_some() {
            model.freeze_backbone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
