use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{ControllerKind, LatencyOverrides, LatencyProfile};
use crate::error::ScenarioError;

const BUILTIN: [(&str, &str); 2] = [
    ("default", include_str!("../../profiles/default.toml")),
    ("table1", include_str!("../../profiles/table1.toml")),
];

const VARIANTS: [&str; 4] = ["stateful_ordered", "stateful_ordered_sc", "stateless_parallel", "stateless_parallel_sc"];

/// A named calibration: shared values plus per-architecture-variant values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilePreset {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub base: LatencyOverrides,
    #[serde(default)]
    pub variants: BTreeMap<String, LatencyOverrides>,
}

pub fn variant_key(kind: ControllerKind, with_sc: bool) -> String {
    format!("{}{}", kind.as_str(), if with_sc { "_sc" } else { "" })
}

impl ProfilePreset {
    pub fn parse(text: &str, source: &str) -> Result<Self, ScenarioError> {
        let preset: ProfilePreset =
            toml::from_str(text).map_err(|e| ScenarioError::Parse { path: source.to_string(), message: e.to_string() })?;
        if let Some(bad) = preset.variants.keys().find(|k| !VARIANTS.contains(&k.as_str())) {
            return Err(ScenarioError::Invalid(format!("profile {}: unknown variant {bad}", preset.name)));
        }
        for kind in [ControllerKind::StatefulOrdered, ControllerKind::StatelessParallel] {
            for sc in [false, true] {
                let bad = preset.resolve(kind, sc).invalid_fields();
                if !bad.is_empty() {
                    return Err(ScenarioError::Invalid(format!(
                        "profile {} ({}): invalid values for {}",
                        preset.name,
                        variant_key(kind, sc),
                        bad.join(", ")
                    )));
                }
            }
        }
        Ok(preset)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let (_, text) = BUILTIN.iter().find(|(n, _)| *n == name)?;
        Some(Self::parse(text, name).expect("shipped profiles are valid"))
    }

    pub fn builtins() -> Vec<Self> {
        BUILTIN.iter().map(|(n, _)| Self::builtin(n).expect("listed")).collect()
    }

    /// A shipped preset name, or else a path to a profile file.
    pub fn load(name_or_path: &str) -> Result<Self, ScenarioError> {
        if let Some(p) = Self::builtin(name_or_path) {
            return Ok(p);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(ScenarioError::UnknownProfile(name_or_path.to_string()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: name_or_path.to_string(), source })?;
        Self::parse(&text, name_or_path)
    }

    pub fn resolve(&self, kind: ControllerKind, with_sc: bool) -> LatencyProfile {
        let merged = LatencyProfile::default().with_overrides(&self.base);
        match self.variants.get(&variant_key(kind, with_sc)) {
            Some(v) => merged.with_overrides(v),
            None => merged,
        }
    }
}
