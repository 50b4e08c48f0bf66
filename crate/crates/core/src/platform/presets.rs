use super::{ClusterConfig, ConfigError};

/// Bundled platform documents, keyed by preset name.
const PRESETS: &[(&str, &str)] = &[
    ("8xRV", include_str!("../../presets/8xRV.json")),
    ("8xRVnn", include_str!("../../presets/8xRVnn.json")),
    ("8xRVnn+NE", include_str!("../../presets/8xRVnn+NE.json")),
    (
        "darkside-redmule",
        include_str!("../../presets/darkside-redmule.json"),
    ),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(name, _)| *name)
}

pub fn preset(name: &str) -> Result<ClusterConfig, ConfigError> {
    let (_, doc) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
    ClusterConfig::from_json(doc)
}
