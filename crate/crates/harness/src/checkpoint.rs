//! Checkpoint files (`SDPC`): the experiment config as text followed by
//! named parameter tensors stored as 32-bit floats.

use std::collections::BTreeMap;
use std::path::Path;

use scaledp_core::compute::Tensor;
use scaledp_core::model::{Trunk, TrunkParameters};

use crate::codec::{len_u32, read_file, write_file, Reader, Writer};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Parameter records in file order.
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, params: &TrunkParameters) -> Self {
        let records = params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        Self { config, records }
    }

    /// Rebuilds the trunk described by the embedded config. Names and
    /// shapes must match its registry exactly.
    pub fn trunk(&self) -> Result<Trunk> {
        self.trunk_for(&self.config.model)
    }

    /// Loads the records into a trunk of a possibly different config.
    pub fn trunk_for(&self, model: &scaledp_core::model::ModelConfig) -> Result<Trunk> {
        Ok(Trunk::with_parameters(model.clone(), self.tensor_map())?)
    }

    pub fn tensor_map(&self) -> BTreeMap<String, Tensor> {
        self.records.iter().cloned().collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let text = self.config.render();
        w.u32(len_u32(text.len(), "config length")?);
        w.bytes(text.as_bytes());
        w.u32(len_u32(self.records.len(), "record count")?);
        for (name, t) in &self.records {
            let n = u16::try_from(name.len())
                .map_err(|_| HarnessError::Usage(format!("parameter name of {} bytes", name.len())))?;
            w.u16(n);
            w.bytes(name.as_bytes());
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| HarnessError::Usage(format!("{name} has rank {}", t.shape().len())))?;
            w.u8(rank);
            for &d in t.shape() {
                w.u32(len_u32(d, "dimension")?);
            }
            w.f32s(t.data().iter().copied());
        }
        Ok(w.buf)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let n = r.u32("config length")? as usize;
        let at = r.offset();
        let text = r.utf8(n, "config text")?;
        let config = ExperimentConfig::parse(text).map_err(|e| r.error(at, format!("embedded config: {e}")))?;
        let count = r.u32("record count")?;
        let mut records = Vec::new();
        for i in 0..count {
            let at = r.offset();
            let len = r.u16("name length")? as usize;
            let name = r.utf8(len, "parameter name")?.to_string();
            if records.iter().any(|(n, _)| *n == name) {
                return Err(r.error(at, format!("duplicate record {name}")));
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| r.error(at, format!("record {i} shape {shape:?} overflows")))?;
            let values = r.f32s(numel, &format!("values of {name}"))?;
            let t = Tensor::new(&shape, values).map_err(|e| r.error(at, e.to_string()))?;
            records.push((name, t));
        }
        r.finish()?;
        Ok(Self { config, records })
    }
}

pub fn write_checkpoint(params: &TrunkParameters, config: &ExperimentConfig, path: &Path) -> Result<()> {
    write_file(path, &Checkpoint::new(config.clone(), params).encode()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(path, &read_file(path)?)
}
