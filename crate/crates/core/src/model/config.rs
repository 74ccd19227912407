use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the diffusion step and observation enter the trunk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Conditioning {
    /// Adaptive layer norm: shift/scale (and gates) regressed from the
    /// summed step and observation embeddings.
    #[default]
    AdaLn,
    /// Decoder blocks that cross-attend to a sequence of condition tokens.
    CrossAttention,
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::AdaLn => "adaln",
            Conditioning::CrossAttention => "cross_attention",
        })
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaln" => Ok(Conditioning::AdaLn),
            "cross_attention" => Ok(Conditioning::CrossAttention),
            other => Err(Error::Config(format!("unknown conditioning '{other}'"))),
        }
    }
}

/// Named trunk sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ModelName {
    Ti,
    S,
    B,
    L,
    H,
    #[default]
    Custom,
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelName::Ti => "Ti",
            ModelName::S => "S",
            ModelName::B => "B",
            ModelName::L => "L",
            ModelName::H => "H",
            ModelName::Custom => "custom",
        })
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Ti" => Ok(ModelName::Ti),
            "S" => Ok(ModelName::S),
            "B" => Ok(ModelName::B),
            "L" => Ok(ModelName::L),
            "H" => Ok(ModelName::H),
            "custom" => Ok(ModelName::Custom),
            other => Err(Error::Config(format!("unknown model name '{other}'"))),
        }
    }
}

/// One row of the published size grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeSpec {
    pub name: ModelName,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Published parameter count.
    pub reference_params: u64,
}

/// Layers, width, heads and parameter count of the five named sizes.
pub const SIZE_GRID: [SizeSpec; 5] = [
    SizeSpec { name: ModelName::Ti, layers: 8, hidden: 256, heads: 4, reference_params: 10_000_000 },
    SizeSpec { name: ModelName::S, layers: 12, hidden: 384, heads: 6, reference_params: 33_000_000 },
    SizeSpec { name: ModelName::B, layers: 12, hidden: 768, heads: 12, reference_params: 130_000_000 },
    SizeSpec { name: ModelName::L, layers: 24, hidden: 1024, heads: 16, reference_params: 457_000_000 },
    SizeSpec { name: ModelName::H, layers: 32, hidden: 1280, heads: 16, reference_params: 1_000_000_000 },
];

impl ModelName {
    pub fn size_spec(self) -> Option<SizeSpec> {
        SIZE_GRID.iter().copied().find(|s| s.name == self)
    }
}

/// Trunk hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: ModelName,
    /// Number of transformer blocks `N`.
    pub layers: usize,
    /// Hidden width `d`.
    pub hidden: usize,
    pub heads: usize,
    pub conditioning: Conditioning,
    /// Mask self-attention so action token `t` only sees tokens `<= t`.
    pub causal_mask: bool,
    /// Prediction horizon `C`.
    pub chunk: usize,
    /// Observation window `T_o`.
    pub obs_horizon: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub proprio_dim: usize,
    /// Zero-initialize modulation, gates and the output projection so the
    /// trunk starts as identity blocks feeding a zero head.
    pub adaln_zero_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::custom(2, 64, 4, Conditioning::AdaLn)
    }
}

impl ModelConfig {
    /// A custom-size trunk with the toy-task interface: `C = 10`,
    /// `T_o = 2`, 2-D actions, 7-D observations and 2-D proprioception.
    /// AdaLN trunks are non-causal; cross-attention trunks are causal.
    pub fn custom(layers: usize, hidden: usize, heads: usize, conditioning: Conditioning) -> Self {
        Self {
            name: ModelName::Custom,
            layers,
            hidden,
            heads,
            conditioning,
            causal_mask: conditioning == Conditioning::CrossAttention,
            chunk: 10,
            obs_horizon: 2,
            action_dim: 2,
            obs_dim: 7,
            proprio_dim: 2,
            adaln_zero_init: true,
        }
    }

    /// One of the named sizes. `Custom` is rejected.
    pub fn named(name: ModelName, conditioning: Conditioning) -> Result<Self> {
        let spec = name
            .size_spec()
            .ok_or_else(|| Error::Config("the custom size has no preset".into()))?;
        Ok(Self { name, ..Self::custom(spec.layers, spec.hidden, spec.heads, conditioning) })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("chunk", self.chunk),
            ("obs_horizon", self.obs_horizon),
            ("action_dim", self.action_dim),
            ("obs_dim", self.obs_dim),
            ("proprio_dim", self.proprio_dim),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{field} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.hidden < 2 {
            return Err(Error::Config("hidden size must be at least 2 for layer norm".into()));
        }
        if let Some(spec) = self.name.size_spec() {
            if (spec.layers, spec.hidden, spec.heads) != (self.layers, self.hidden, self.heads) {
                return Err(Error::Config(format!(
                    "{} must be ({}, {}, {}), got ({}, {}, {})",
                    self.name, spec.layers, spec.hidden, spec.heads, self.layers, self.hidden, self.heads
                )));
            }
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.hidden
    }

    /// Width of the flattened observation window plus proprioception.
    pub fn obs_input_dim(&self) -> usize {
        self.obs_horizon * (self.obs_dim + self.proprio_dim)
    }

    /// Width of the per-block modulation: shift and scale for both
    /// branches, plus a gate per branch under zero-init.
    pub fn modulation_width(&self) -> usize {
        if self.adaln_zero_init {
            6 * self.hidden
        } else {
            4 * self.hidden
        }
    }
}

/// Analytic parameter count of the trunk built from `config`. Matches
/// [`Trunk::new`](super::Trunk::new) exactly without allocating anything.
pub fn count_params(config: &ModelConfig) -> u64 {
    let d = config.hidden as u64;
    let a = config.action_dim as u64;
    let per_step = (config.obs_dim + config.proprio_dim) as u64;
    let linear = |i: u64, o: u64| i * o + o;
    let mlp = linear(d, 4 * d) + linear(4 * d, d);
    let embeddings = linear(a, d) + linear(d, d) + linear(d, d);
    match config.conditioning {
        Conditioning::AdaLn => {
            let obs = linear(config.obs_horizon as u64 * per_step, d) + linear(d, d);
            let block = linear(d, config.modulation_width() as u64) + linear(d, 3 * d) + linear(d, d) + mlp;
            let last = linear(d, 2 * d) + linear(d, a);
            embeddings + obs + config.layers as u64 * block + last
        }
        Conditioning::CrossAttention => {
            let obs = linear(per_step, d) + linear(d, d);
            let norms = 3 * 2 * d;
            let block = norms + linear(d, 3 * d) + linear(d, d) + linear(d, d) + linear(d, 2 * d) + linear(d, d) + mlp;
            let last = 2 * d + linear(d, a);
            embeddings + obs + config.layers as u64 * block + last
        }
    }
}
