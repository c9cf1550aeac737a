//! BPRS symptom taxonomy and the three-way severity coarsening.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Number of BPRS items, and therefore of prediction heads.
pub const NUM_SYMPTOMS: usize = 18;
/// Number of severity classes per symptom.
pub const NUM_CLASSES: usize = 3;

/// One of the 18 BPRS items. The discriminant is the fixed head index used by
/// label files, logits and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum SymptomId {
    SomaticConcern = 0,
    Anxiety = 1,
    Guilt = 2,
    Grandiosity = 3,
    Depression = 4,
    Hostility = 5,
    Suspiciousness = 6,
    Hallucination = 7,
    UnusualThoughtContent = 8,
    Disorientation = 9,
    EmotionalWithdrawal = 10,
    ConceptualDisorganization = 11,
    Tension = 12,
    MannerismPosturing = 13,
    MotorRetardation = 14,
    Uncooperativeness = 15,
    BluntedAffect = 16,
    Excitement = 17,
}

impl SymptomId {
    pub const ALL: [SymptomId; NUM_SYMPTOMS] = [
        SymptomId::SomaticConcern,
        SymptomId::Anxiety,
        SymptomId::Guilt,
        SymptomId::Grandiosity,
        SymptomId::Depression,
        SymptomId::Hostility,
        SymptomId::Suspiciousness,
        SymptomId::Hallucination,
        SymptomId::UnusualThoughtContent,
        SymptomId::Disorientation,
        SymptomId::EmotionalWithdrawal,
        SymptomId::ConceptualDisorganization,
        SymptomId::Tension,
        SymptomId::MannerismPosturing,
        SymptomId::MotorRetardation,
        SymptomId::Uncooperativeness,
        SymptomId::BluntedAffect,
        SymptomId::Excitement,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::Domain(format!("symptom index {index} outside 0..{NUM_SYMPTOMS}")))
    }
}

impl fmt::Display for SymptomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Coarsened severity: 0 = no symptoms, 1 = very mild / mild, 2 = moderate / severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SeverityClass(u8);

impl SeverityClass {
    pub const NONE: SeverityClass = SeverityClass(0);
    pub const MILD: SeverityClass = SeverityClass(1);
    pub const SEVERE: SeverityClass = SeverityClass(2);

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < NUM_CLASSES {
            Ok(SeverityClass(value))
        } else {
            Err(Error::Validation(format!("severity class {value} not in {{0,1,2}}")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for SeverityClass {
    type Error = Error;
    fn try_from(value: u8) -> Result<Self> {
        SeverityClass::new(value)
    }
}

impl From<SeverityClass> for u8 {
    fn from(c: SeverityClass) -> u8 {
        c.0
    }
}

/// Maps a BPRS item score (1..=7) onto its severity class.
///
/// Score 7 does not occur in the source data and is folded into class 2.
pub fn map_bprs_to_class(score: u8) -> Result<SeverityClass> {
    match score {
        1 => Ok(SeverityClass::NONE),
        2 | 3 => Ok(SeverityClass::MILD),
        4..=7 => Ok(SeverityClass::SEVERE),
        other => Err(Error::Domain(format!("BPRS score {other} outside 1..=7"))),
    }
}

/// One severity class per symptom, indexed by [`SymptomId`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct SymptomVector([SeverityClass; NUM_SYMPTOMS]);

impl SymptomVector {
    pub fn new(classes: [SeverityClass; NUM_SYMPTOMS]) -> Self {
        SymptomVector(classes)
    }

    pub fn from_slice(values: &[u8]) -> Result<Self> {
        if values.len() != NUM_SYMPTOMS {
            return Err(Error::Validation(format!(
                "label vector has {} entries, expected {NUM_SYMPTOMS}",
                values.len()
            )));
        }
        let mut out = [SeverityClass::NONE; NUM_SYMPTOMS];
        for (slot, &v) in out.iter_mut().zip(values) {
            *slot = SeverityClass::new(v)?;
        }
        Ok(SymptomVector(out))
    }

    pub fn get(&self, symptom: SymptomId) -> SeverityClass {
        self.0[symptom.index()]
    }

    pub fn set(&mut self, symptom: SymptomId, class: SeverityClass) {
        self.0[symptom.index()] = class;
    }

    pub fn classes(&self) -> &[SeverityClass; NUM_SYMPTOMS] {
        &self.0
    }

    /// Sum of class values, a crude total-severity score.
    pub fn total(&self) -> u32 {
        self.0.iter().map(|c| c.0 as u32).sum()
    }
}

impl TryFrom<Vec<u8>> for SymptomVector {
    type Error = Error;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        SymptomVector::from_slice(&v)
    }
}

impl From<SymptomVector> for Vec<u8> {
    fn from(v: SymptomVector) -> Vec<u8> {
        v.0.iter().map(|c| c.0).collect()
    }
}
