//! Layer files: one `name n k d o b` record per line, `#` comments.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LayerConfig;

/// The layer set shipped with the crate.
pub const DEFAULT_LAYERS: &str = include_str!("../data/default_layers.txt");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    pub layer: LayerConfig,
}

/// Ordered, uniquely named layer records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFile {
    pub layers: Vec<NamedLayer>,
}

impl LayerFile {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut layers = Vec::new();
        let mut names = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: path.to_string(), line: idx + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 'name n k d o b', got {} fields", fields.len())));
            }
            let mut dims = [0usize; 5];
            for (slot, (field, label)) in
                dims.iter_mut().zip(fields[1..].iter().zip(["n", "k", "d", "o", "b"]))
            {
                *slot = field.parse().map_err(|_| err(format!("{label} '{field}' is not a count")))?;
            }
            let [n, k, d, o, b] = dims;
            let layer = LayerConfig::new(n, k, d, o, b).map_err(|e| err(e.to_string()))?;
            let name = fields[0].to_string();
            if !names.insert(name.clone()) {
                return Err(err(format!("duplicate layer name '{name}'")));
            }
            layers.push(NamedLayer { name, layer });
        }
        if layers.is_empty() {
            return Err(Error::Parse { path: path.to_string(), line: 0, msg: "no layers".into() });
        }
        Ok(LayerFile { layers })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        LayerFile::parse(&text, &path.display().to_string())
    }

    pub fn defaults() -> Self {
        LayerFile::parse(DEFAULT_LAYERS, "<default layers>").expect("shipped layer file parses")
    }

    pub fn get(&self, name: &str) -> Option<&NamedLayer> {
        self.layers.iter().find(|l| l.name == name)
    }
}
