//! Named experiment presets, kept as checked-in config files.

use crate::config::ExperimentConfig;
use crate::CliError;

pub const PRESETS: [(&str, &str); 2] = [
    ("paper-6.1", include_str!("../presets/paper-6.1.conf")),
    ("calibrated", include_str!("../presets/calibrated.conf")),
];

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn preset(name: &str) -> Result<ExperimentConfig, CliError> {
    let text = preset_text(name).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::Usage(format!("unknown preset '{name}' (known: {})", known.join(", ")))
    })?;
    ExperimentConfig::from_text(text, &format!("preset {name}"))
}
