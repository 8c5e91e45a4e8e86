//! Small domain enums shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective magnification of a raster. Each level is ingested from its own file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Magnification {
    X5,
    X10,
    X20,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::X5, Magnification::X10, Magnification::X20];

    pub fn value(self) -> u32 {
        match self {
            Magnification::X5 => 5,
            Magnification::X10 => 10,
            Magnification::X20 => 20,
        }
    }

    /// Position in 3-vectors ordered (×5, ×10, ×20).
    pub fn index(self) -> usize {
        match self {
            Magnification::X5 => 0,
            Magnification::X10 => 1,
            Magnification::X20 => 2,
        }
    }

    pub fn from_value(v: u32) -> Result<Self> {
        match v {
            5 => Ok(Magnification::X5),
            10 => Ok(Magnification::X10),
            20 => Ok(Magnification::X20),
            other => Err(Error::invalid(format!("unsupported magnification {other}"))),
        }
    }
}

impl TryFrom<u32> for Magnification {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        Magnification::from_value(v)
    }
}

impl From<Magnification> for u32 {
    fn from(m: Magnification) -> u32 {
        m.value()
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl FromStr for Magnification {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches(['x', 'X', '×']);
        let v: u32 = trimmed
            .parse()
            .map_err(|_| Error::invalid(format!("bad magnification '{s}'")))?;
        Magnification::from_value(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CancerType {
    Coad,
    Stad,
    Luad,
    Lusc,
    Blca,
    Hnsc,
    Ucec,
}

impl CancerType {
    pub const COUNT: usize = 7;
    pub const ALL: [CancerType; 7] = [
        CancerType::Coad,
        CancerType::Stad,
        CancerType::Luad,
        CancerType::Lusc,
        CancerType::Blca,
        CancerType::Hnsc,
        CancerType::Ucec,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        CancerType::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown cancer type index {i}")))
    }

    pub fn code(self) -> &'static str {
        match self {
            CancerType::Coad => "COAD",
            CancerType::Stad => "STAD",
            CancerType::Luad => "LUAD",
            CancerType::Lusc => "LUSC",
            CancerType::Blca => "BLCA",
            CancerType::Hnsc => "HNSC",
            CancerType::Ucec => "UCEC",
        }
    }
}

impl fmt::Display for CancerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for CancerType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        CancerType::ALL
            .iter()
            .copied()
            .find(|c| c.code() == upper)
            .ok_or_else(|| Error::invalid(format!("unknown cancer type '{s}'")))
    }
}

impl TryFrom<String> for CancerType {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CancerType> for String {
    fn from(c: CancerType) -> String {
        c.code().to_string()
    }
}

/// Binary slide/patient label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TmbLabel {
    Low,
    High,
}

impl TmbLabel {
    pub fn is_high(self) -> bool {
        matches!(self, TmbLabel::High)
    }

    /// Class index in the two-logit head: 0 = TMB-L, 1 = TMB-H.
    pub fn class_index(self) -> usize {
        match self {
            TmbLabel::Low => 0,
            TmbLabel::High => 1,
        }
    }

    pub fn from_high(high: bool) -> Self {
        if high {
            TmbLabel::High
        } else {
            TmbLabel::Low
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            TmbLabel::Low => "TMB_L",
            TmbLabel::High => "TMB_H",
        }
    }
}

impl fmt::Display for TmbLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TmbLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TMB_H" | "TMB-H" | "H" | "HIGH" | "1" => Ok(TmbLabel::High),
            "TMB_L" | "TMB-L" | "L" | "LOW" | "0" => Ok(TmbLabel::Low),
            _ => Err(Error::invalid(format!("unknown label '{s}'"))),
        }
    }
}

impl TryFrom<String> for TmbLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TmbLabel> for String {
    fn from(l: TmbLabel) -> String {
        l.code().to_string()
    }
}
