use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of fine damage states.
pub const NUM_DAMAGE_STATES: usize = 5;

/// Ordinal damage state DS-0 (none/minor) through DS-4 (destroyed).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DamageState(u8);

impl DamageState {
    pub const ALL: [DamageState; NUM_DAMAGE_STATES] = [
        DamageState(0),
        DamageState(1),
        DamageState(2),
        DamageState(3),
        DamageState(4),
    ];

    pub fn new(level: u8) -> Result<Self> {
        if (level as usize) < NUM_DAMAGE_STATES {
            Ok(Self(level))
        } else {
            Err(Error::invalid(format!(
                "damage level {level} outside DS-0..DS-{}",
                NUM_DAMAGE_STATES - 1
            )))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for DamageState {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DamageState> for u8 {
    fn from(d: DamageState) -> u8 {
        d.0
    }
}

impl fmt::Display for DamageState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DS-{}", self.0)
    }
}

/// The five viewpoints collected per building.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewRole {
    #[serde(rename = "ground-1")]
    Ground1,
    #[serde(rename = "ground-2")]
    Ground2,
    #[serde(rename = "ground-3")]
    Ground3,
    #[serde(rename = "ground-4")]
    Ground4,
    #[serde(rename = "overhead")]
    Overhead,
}

impl ViewRole {
    /// Canonical order; early fusion stacks feature maps in this order.
    pub const ALL: [ViewRole; 5] = [
        ViewRole::Ground1,
        ViewRole::Ground2,
        ViewRole::Ground3,
        ViewRole::Ground4,
        ViewRole::Overhead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewRole::Ground1 => "ground-1",
            ViewRole::Ground2 => "ground-2",
            ViewRole::Ground3 => "ground-3",
            ViewRole::Ground4 => "ground-4",
            ViewRole::Overhead => "overhead",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_ground(self) -> bool {
        self != ViewRole::Overhead
    }
}

impl fmt::Display for ViewRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown view role `{s}`")))
    }
}

/// How per-view feature maps are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Channel-axis stacking in view order.
    #[default]
    EarlyConcat,
    /// Elementwise maximum across views.
    ViewMax,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early-concat" => Ok(Self::EarlyConcat),
            "view-max" => Ok(Self::ViewMax),
            other => Err(Error::invalid(format!("unknown fusion mode `{other}`"))),
        }
    }
}
