use scaledp_core::model::{count_params, Conditioning, ModelConfig, ModelName, SIZE_GRID};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamsRow {
    pub name: ModelName,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub params: u64,
    pub reference: Option<u64>,
}

impl ParamsRow {
    /// Signed deviation from the reference count, in percent.
    pub fn deviation_pct(&self) -> Option<f64> {
        self.reference.map(|r| 100.0 * (self.params as f64 - r as f64) / r as f64)
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.name,
            self.layers,
            self.hidden,
            self.heads,
            self.params,
            self.reference.map(|r| r.to_string()).unwrap_or_default(),
            self.deviation_pct().map(|d| format!("{d:.2}")).unwrap_or_default()
        )
    }
}

pub const PARAMS_HEADER: &str = "name,layers,hidden,heads,params,reference,deviation_pct";

/// The five named sizes under `conditioning`, then `custom` if given.
pub fn params_table(conditioning: Conditioning, custom: Option<&ModelConfig>) -> Vec<ParamsRow> {
    let mut rows: Vec<ParamsRow> = SIZE_GRID
        .iter()
        .map(|s| {
            let c = ModelConfig { name: s.name, ..ModelConfig::custom(s.layers, s.hidden, s.heads, conditioning) };
            ParamsRow {
                name: s.name,
                layers: s.layers,
                hidden: s.hidden,
                heads: s.heads,
                params: count_params(&c),
                reference: Some(s.reference_params),
            }
        })
        .collect();
    if let Some(c) = custom {
        rows.push(ParamsRow {
            name: ModelName::Custom,
            layers: c.layers,
            hidden: c.hidden,
            heads: c.heads,
            params: count_params(c),
            reference: None,
        });
    }
    rows
}
