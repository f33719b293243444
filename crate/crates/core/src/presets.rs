//! Scenario files shipped with the library.

use crate::config::Config;
use crate::error::{Error, Result};

pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub json: &'static str,
}

macro_rules! preset {
    ($name:literal, $summary:literal) => {
        Preset {
            name: $name,
            summary: $summary,
            json: include_str!(concat!("../presets/", $name, ".json")),
        }
    };
}

pub const PRESETS: &[Preset] = &[
    preset!("example1-scalar", "5 nodes, M=4, scalar diffusion, delta=0.9, CTA"),
    preset!("example1-scalar-atc", "example1-scalar reported as ATC"),
    preset!("example1-singlebit", "5 nodes, M=4, single-bit diffusion, delta=0.9, CTA"),
    preset!("example1-singlebit-atc", "example1-singlebit reported as ATC"),
    preset!("example1-full", "5 nodes, M=4, full diffusion"),
    preset!("example1-none", "5 nodes, M=4, no cooperation"),
    preset!("example1-scalar-tracking", "example1-scalar with a random-walk parameter"),
    preset!("example2-scalar", "20 nodes, M=10, scalar diffusion, adaptive delta"),
    preset!("example2-singlebit", "20 nodes, M=10, single-bit diffusion, adaptive delta"),
    preset!("example2-full", "20 nodes, M=10, full diffusion"),
    preset!("example2-none", "20 nodes, M=10, no cooperation"),
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn load(name: &str) -> Result<Config> {
    let preset = find(name).ok_or_else(|| Error::Config {
        field: "preset".into(),
        message: format!("unknown preset `{name}`"),
    })?;
    Config::from_json(preset.json)
}
