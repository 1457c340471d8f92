//! Experiment configurations shipped with the binary.

use std::path::PathBuf;

use crate::config::{parse_config_str, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub text: &'static str,
}

macro_rules! preset {
    ($name:literal) => {
        Preset {
            name: $name,
            text: include_str!(concat!("../../../presets/", $name, ".toml")),
        }
    };
}

pub const PRESETS: &[Preset] = &[
    preset!("ex1-case1"),
    preset!("ex1-case2"),
    preset!("ex1-case3"),
    preset!("ex1-case4"),
    preset!("ex2-beta0"),
    preset!("ex2-beta0.005"),
    preset!("ex2-beta0.01"),
    preset!("ex3"),
    preset!("ex4-beta0"),
    preset!("ex4-beta5e-4"),
    preset!("ex4-beta1e-3"),
    preset!("ex5"),
    preset!("ex6"),
    preset!("ex6-no-reaction"),
];

impl Preset {
    /// First comment line of the file.
    pub fn description(&self) -> &'static str {
        self.text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .map_or("", str::trim)
    }

    pub fn config(&self) -> Result<RunConfig, CliError> {
        parse_config_str(self.text, &format!("preset {}", self.name))
    }
}

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

/// Directory holding the image assets that presets refer to.
pub fn asset_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../presets"))
}
