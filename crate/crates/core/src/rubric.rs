//! Frame-quality deduction rubric for the apical 4-chamber view.
//!
//! Each frame is judged against a fixed list of criteria. Every criterion that
//! applies deducts a fixed number of points, and the total maps onto the
//! traffic-light categories.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total deduction at or above which a frame is red.
pub const RED_THRESHOLD: f64 = 2.0;
/// Total deduction at or above which a frame is at least yellow.
pub const YELLOW_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RubricCriterion {
    LvFreeWallNotVisible,
    RvFreeWallNotVisible,
    LaEntirelyOut,
    LaPartiallyOut,
    RaNotVisible,
    #[serde(rename = "AORTA_VISIBLE_5CH")]
    AortaVisible5ch,
    OtherSignalDropout,
}

impl RubricCriterion {
    pub const ALL: [RubricCriterion; 7] = [
        RubricCriterion::LvFreeWallNotVisible,
        RubricCriterion::RvFreeWallNotVisible,
        RubricCriterion::LaEntirelyOut,
        RubricCriterion::LaPartiallyOut,
        RubricCriterion::RaNotVisible,
        RubricCriterion::AortaVisible5ch,
        RubricCriterion::OtherSignalDropout,
    ];

    /// Points deducted when this criterion applies. All values are exact
    /// binary fractions so sums compare exactly.
    pub fn deduction(self) -> f64 {
        match self {
            RubricCriterion::LvFreeWallNotVisible => 1.0,
            RubricCriterion::RvFreeWallNotVisible => 0.5,
            RubricCriterion::LaEntirelyOut => 2.0,
            RubricCriterion::LaPartiallyOut => 1.0,
            RubricCriterion::RaNotVisible => 0.5,
            RubricCriterion::AortaVisible5ch => 1.0,
            RubricCriterion::OtherSignalDropout => 0.5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RubricCriterion::LvFreeWallNotVisible => "LV_FREE_WALL_NOT_VISIBLE",
            RubricCriterion::RvFreeWallNotVisible => "RV_FREE_WALL_NOT_VISIBLE",
            RubricCriterion::LaEntirelyOut => "LA_ENTIRELY_OUT",
            RubricCriterion::LaPartiallyOut => "LA_PARTIALLY_OUT",
            RubricCriterion::RaNotVisible => "RA_NOT_VISIBLE",
            RubricCriterion::AortaVisible5ch => "AORTA_VISIBLE_5CH",
            RubricCriterion::OtherSignalDropout => "OTHER_SIGNAL_DROPOUT",
        }
    }
}

impl fmt::Display for RubricCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RubricCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RubricCriterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown rubric criterion {s:?}")))
    }
}

/// Traffic-light pose category. Ordered `Red < Yellow < Green`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseCategory {
    Red,
    Yellow,
    Green,
}

impl PoseCategory {
    pub const ALL: [PoseCategory; 3] = [PoseCategory::Green, PoseCategory::Yellow, PoseCategory::Red];

    /// Row/column index used by confusion matrices and classifier heads:
    /// green 0, yellow 1, red 2.
    pub fn index(self) -> usize {
        match self {
            PoseCategory::Green => 0,
            PoseCategory::Yellow => 1,
            PoseCategory::Red => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(PoseCategory::Green),
            1 => Some(PoseCategory::Yellow),
            2 => Some(PoseCategory::Red),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoseCategory::Green => "green",
            PoseCategory::Yellow => "yellow",
            PoseCategory::Red => "red",
        }
    }
}

impl fmt::Display for PoseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "green" | "g" => Ok(PoseCategory::Green),
            "yellow" | "y" => Ok(PoseCategory::Yellow),
            "red" | "r" => Ok(PoseCategory::Red),
            other => Err(Error::Parse(format!("unknown pose category {other:?}"))),
        }
    }
}

/// Sum of deductions for a set of criteria.
///
/// Fails when both left-atrium criteria are present; they describe mutually
/// exclusive observations.
pub fn total_deduction(criteria: &BTreeSet<RubricCriterion>) -> Result<f64> {
    if criteria.contains(&RubricCriterion::LaEntirelyOut)
        && criteria.contains(&RubricCriterion::LaPartiallyOut)
    {
        return Err(Error::InvalidCriteria(
            "LA_ENTIRELY_OUT and LA_PARTIALLY_OUT are mutually exclusive".into(),
        ));
    }
    Ok(criteria.iter().map(|c| c.deduction()).sum())
}

/// Like [`total_deduction`] but over a list that may carry duplicates, which
/// are rejected.
pub fn total_deduction_of(criteria: &[RubricCriterion]) -> Result<f64> {
    let set: BTreeSet<_> = criteria.iter().copied().collect();
    if set.len() != criteria.len() {
        return Err(Error::InvalidCriteria("duplicate criterion".into()));
    }
    total_deduction(&set)
}

pub fn categorize(deduction: f64) -> Result<PoseCategory> {
    if deduction.is_nan() || deduction < 0.0 {
        return Err(Error::Domain(format!(
            "deduction must be non-negative, got {deduction}"
        )));
    }
    Ok(if deduction >= RED_THRESHOLD {
        PoseCategory::Red
    } else if deduction >= YELLOW_THRESHOLD {
        PoseCategory::Yellow
    } else {
        PoseCategory::Green
    })
}

/// Category implied by a frame's deduction list.
pub fn categorize_criteria(criteria: &[RubricCriterion]) -> Result<PoseCategory> {
    categorize(total_deduction_of(criteria)?)
}
