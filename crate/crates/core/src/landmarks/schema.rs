use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of landmark channels predicted by the detector.
pub const NUM_LANDMARKS: usize = 47;
/// Left-ventricle contour landmarks (21 tracing segments, two endpoints each).
pub const NUM_CONTOUR: usize = 42;
/// Tracing rows per annotated frame.
pub const TRACING_ROWS: usize = NUM_CONTOUR / 2;

/// Index into the fixed 47-entry landmark schema.
///
/// Ids `0..42` are LV contour points in tracing-row order (row `r` gives ids
/// `2r` and `2r + 1`); ids `42..47` are RV, RA, LA, TV and TVA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LandmarkId(u8);

impl LandmarkId {
    pub const RV: LandmarkId = LandmarkId(42);
    pub const RA: LandmarkId = LandmarkId(43);
    pub const LA: LandmarkId = LandmarkId(44);
    pub const TV: LandmarkId = LandmarkId(45);
    pub const TVA: LandmarkId = LandmarkId(46);
    /// First endpoint of the long-axis tracing row.
    pub const LV_APEX: LandmarkId = LandmarkId(0);
    /// Second endpoint of the long-axis tracing row (mitral valve midpoint).
    pub const MV: LandmarkId = LandmarkId(1);

    pub const AUXILIARY: [LandmarkId; 5] = [Self::RV, Self::RA, Self::LA, Self::TV, Self::TVA];

    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_LANDMARKS {
            Ok(LandmarkId(index as u8))
        } else {
            Err(Error::Domain(format!(
                "landmark id {index} outside 0..{NUM_LANDMARKS}"
            )))
        }
    }

    pub fn contour(index: usize) -> Result<Self> {
        if index < NUM_CONTOUR {
            Ok(LandmarkId(index as u8))
        } else {
            Err(Error::Domain(format!("contour id {index} outside 0..{NUM_CONTOUR}")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_contour(self) -> bool {
        self.index() < NUM_CONTOUR
    }

    pub fn all() -> impl Iterator<Item = LandmarkId> {
        (0..NUM_LANDMARKS as u8).map(LandmarkId)
    }

    pub fn name(self) -> String {
        match self {
            Self::RV => "RV".into(),
            Self::RA => "RA".into(),
            Self::LA => "LA".into(),
            Self::TV => "TV".into(),
            Self::TVA => "TVA".into(),
            LandmarkId(i) => format!("LV{i:02}"),
        }
    }
}

impl TryFrom<u8> for LandmarkId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        LandmarkId::new(v as usize)
    }
}

impl From<LandmarkId> for u8 {
    fn from(id: LandmarkId) -> u8 {
        id.0
    }
}

impl fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for LandmarkId {
    type Err = Error;

    /// Accepts auxiliary names (`RV`, `RA`, `LA`, `TV`, `TVA`) and contour
    /// names `LV00`..`LV41`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "RV" => Ok(Self::RV),
            "RA" => Ok(Self::RA),
            "LA" => Ok(Self::LA),
            "TV" => Ok(Self::TV),
            "TVA" => Ok(Self::TVA),
            other => other
                .strip_prefix("LV")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n < NUM_CONTOUR)
                .map(|n| LandmarkId(n as u8))
                .ok_or_else(|| Error::Parse(format!("unknown landmark name {other:?}"))),
        }
    }
}

/// Landmarks forwarded from the detector to the pose scorer.
pub const KEY_LANDMARKS: [LandmarkId; 6] = [
    LandmarkId::LV_APEX,
    LandmarkId::MV,
    LandmarkId::RV,
    LandmarkId::TV,
    LandmarkId::RA,
    LandmarkId::LA,
];

pub fn key_landmark_name(id: LandmarkId) -> &'static str {
    match id {
        LandmarkId::LV_APEX => "LV apex",
        LandmarkId::MV => "MV",
        LandmarkId::RV => "RV",
        LandmarkId::TV => "TV",
        LandmarkId::RA => "RA",
        LandmarkId::LA => "LA",
        _ => "",
    }
}

/// Annotator confidence for one landmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Visibility {
    High = 1,
    Moderate = 2,
    Low = 3,
}

impl TryFrom<u8> for Visibility {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Visibility::High),
            2 => Ok(Visibility::Moderate),
            3 => Ok(Visibility::Low),
            other => Err(Error::Parse(format!("visibility must be 1, 2 or 3, got {other}"))),
        }
    }
}

impl From<Visibility> for u8 {
    fn from(v: Visibility) -> u8 {
        v as u8
    }
}

/// Maps annotation visibility to a loss weight. Defaults: 1.0, 0.5, 0.25.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisWeightMap {
    pub high: f64,
    pub moderate: f64,
    pub low: f64,
}

impl Default for VisWeightMap {
    fn default() -> Self {
        Self {
            high: 1.0,
            moderate: 0.5,
            low: 0.25,
        }
    }
}

impl VisWeightMap {
    pub fn weight(&self, v: Visibility) -> f64 {
        match v {
            Visibility::High => self.high,
            Visibility::Moderate => self.moderate,
            Visibility::Low => self.low,
        }
    }

    /// Per-sample weight: the mean weight over the annotated landmarks. A
    /// sample without annotations gets weight 1 (its mask is empty anyway).
    pub fn sample_weight<'a>(&self, visibilities: impl IntoIterator<Item = &'a Visibility>) -> f64 {
        let (sum, n) = visibilities
            .into_iter()
            .fold((0.0, 0usize), |(s, n), v| (s + self.weight(*v), n + 1));
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }
}
