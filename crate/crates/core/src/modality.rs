use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Auxiliary sensor kind. Only training losses and reports ever look at it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Thermal,
    Event,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Depth, Modality::Thermal, Modality::Event];

    pub fn index(self) -> usize {
        match self {
            Modality::Depth => 0,
            Modality::Thermal => 1,
            Modality::Event => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Thermal => "thermal",
            Modality::Event => "event",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "depth" => Ok(Modality::Depth),
            "thermal" => Ok(Modality::Thermal),
            "event" => Ok(Modality::Event),
            other => Err(Error::Data(format!("unknown modality {other:?}"))),
        }
    }
}
