use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::compute::Tensor;
use crate::error::{contract_err, Error, Result};
use crate::rng::truncated_normal;

/// Which part of the trunk a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embeddings,
    Block(usize),
    Final,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Ordered registry of named trunk parameters.
#[derive(Clone, Debug, Default)]
pub struct TrunkParameters {
    params: Vec<Parameter>,
}

impl TrunkParameters {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Builds a parameter set whose names, order and shapes follow
    /// `template`, taking values from `tensors` by name.
    pub fn conform(template: &TrunkParameters, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected: BTreeSet<&str> = template.names().collect();
        let extra: Vec<String> = tensors.keys().filter(|k| !expected.contains(k.as_str())).cloned().collect();
        let missing: Vec<String> =
            template.names().filter(|n| !tensors.contains_key(*n)).map(str::to_string).collect();
        let reshaped: Vec<String> = template
            .iter()
            .filter(|p| tensors.get(&p.name).is_some_and(|t| t.shape() != p.tensor.shape()))
            .map(|p| p.name.clone())
            .collect();
        if !(missing.is_empty() && extra.is_empty() && reshaped.is_empty()) {
            return Err(Error::RegistryMismatch { missing, extra, reshaped });
        }
        let params = template
            .iter()
            .map(|p| Parameter {
                name: p.name.clone(),
                group: p.group,
                tensor: tensors.remove(&p.name).expect("checked above"),
            })
            .collect();
        Ok(Self { params })
    }
}

pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Appends parameters in registry order, initializing as it goes.
pub(crate) struct ParamBuilder<'r, R: Rng + ?Sized> {
    params: Vec<Parameter>,
    rng: &'r mut R,
}

/// Standard deviation of the truncated normal used for projections.
pub const INIT_STD: f64 = 0.02;

impl<'r, R: Rng + ?Sized> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { params: Vec::new(), rng }
    }

    pub fn add(&mut self, name: String, group: ParamGroup, shape: &[usize], init: Init) -> usize {
        let numel = shape.iter().product();
        let data = match init {
            Init::Normal => (0..numel).map(|_| truncated_normal(self.rng, INIT_STD)).collect(),
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
        };
        let tensor = Tensor::new(shape, data).expect("positive shape").with_requires_grad(true);
        self.params.push(Parameter { name, group, tensor });
        self.params.len() - 1
    }

    pub fn finish(self) -> Result<TrunkParameters> {
        let mut seen = BTreeSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                return contract_err(format!("duplicate parameter name {}", p.name));
            }
        }
        Ok(TrunkParameters { params: self.params })
    }
}
