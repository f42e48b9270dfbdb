use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DeptError;

/// Training method: the four decoupled-embedding variants and the two
/// centralized baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "GLOB")]
    Glob,
    #[serde(rename = "TRIM")]
    Trim,
    #[serde(rename = "SPEC")]
    Spec,
    #[serde(rename = "SPEC_OPT")]
    SpecOpt,
    #[serde(rename = "STD")]
    Std,
    #[serde(rename = "ACT")]
    Act,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Self::Glob, Self::Trim, Self::Spec, Self::SpecOpt, Self::Std, Self::Act];
    pub const DECOUPLED: [Variant; 4] = [Self::Glob, Self::Trim, Self::Spec, Self::SpecOpt];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Glob => "GLOB",
            Self::Trim => "TRIM",
            Self::Spec => "SPEC",
            Self::SpecOpt => "SPEC_OPT",
            Self::Std => "STD",
            Self::Act => "ACT",
        }
    }

    /// Synchronizes every step on a single model.
    pub fn is_baseline(self) -> bool {
        matches!(self, Self::Std | Self::Act)
    }

    /// Keeps token and positional embeddings private to each source.
    pub fn is_specialized(self) -> bool {
        matches!(self, Self::Spec | Self::SpecOpt)
    }

    /// Workers hold a source-local vocabulary rather than the global one.
    pub fn uses_local_vocab(self) -> bool {
        matches!(self, Self::Trim | Self::Spec | Self::SpecOpt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = DeptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| DeptError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
        }
        assert_eq!("spec-opt".parse::<Variant>().unwrap(), Variant::SpecOpt);
        assert!("fedavg".parse::<Variant>().is_err());
    }
}
