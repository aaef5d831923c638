use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Detector geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Detector {
    /// Neutron calorimeter, 44×44 fibers.
    #[serde(rename = "ZN")]
    Zn,
    /// Proton calorimeter, 56×30 fibers.
    #[serde(rename = "ZP")]
    Zp,
    /// Neutron geometry reduced to 16×16 for fast experiments.
    #[serde(rename = "ZN16")]
    Zn16,
}

impl Detector {
    pub const ALL: [Detector; 3] = [Detector::Zn, Detector::Zp, Detector::Zn16];

    pub fn dims(self) -> (usize, usize) {
        match self {
            Detector::Zn => (44, 44),
            Detector::Zp => (56, 30),
            Detector::Zn16 => (16, 16),
        }
    }

    pub fn height(self) -> usize {
        self.dims().0
    }

    pub fn width(self) -> usize {
        self.dims().1
    }

    pub fn pixels(self) -> usize {
        self.height() * self.width()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Detector::Zn => "ZN",
            Detector::Zp => "ZP",
            Detector::Zn16 => "ZN16",
        }
    }
}

impl std::fmt::Display for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Detector::ALL
            .into_iter()
            .find(|d| d.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown detector {s:?} (expected ZN, ZP or ZN16)")))
    }
}
