//! Concept vocabulary, one-hot condition vectors and target-submix construction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{check_compatible, energy, Waveform};

/// Signal characteristic family whose values partition a mixture's sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Condition {
    Energy,
    Gender,
    Spatial,
    Language,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Energy, Condition::Gender, Condition::Spatial, Condition::Language];

    pub fn concepts(self) -> &'static [ConceptValue] {
        use ConceptValue::*;
        match self {
            Condition::Energy => &[EHigh, ELow],
            Condition::Gender => &[GFemale, GMale],
            Condition::Spatial => &[SNear, SFar],
            Condition::Language => &[LEn, LFr, LDe, LEs],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Energy => "ENERGY",
            Condition::Gender => "GENDER",
            Condition::Spatial => "SPATIAL",
            Condition::Language => "LANGUAGE",
        }
    }
}

/// One value of a condition. Declaration order is the frozen one-hot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConceptValue {
    #[serde(rename = "E_HIGH")]
    EHigh,
    #[serde(rename = "E_LOW")]
    ELow,
    #[serde(rename = "G_FEMALE")]
    GFemale,
    #[serde(rename = "G_MALE")]
    GMale,
    #[serde(rename = "S_NEAR")]
    SNear,
    #[serde(rename = "S_FAR")]
    SFar,
    #[serde(rename = "L_EN")]
    LEn,
    #[serde(rename = "L_FR")]
    LFr,
    #[serde(rename = "L_DE")]
    LDe,
    #[serde(rename = "L_ES")]
    LEs,
}

pub const VOCAB_SIZE: usize = 10;

impl ConceptValue {
    pub const ALL: [ConceptValue; VOCAB_SIZE] = [
        ConceptValue::EHigh,
        ConceptValue::ELow,
        ConceptValue::GFemale,
        ConceptValue::GMale,
        ConceptValue::SNear,
        ConceptValue::SFar,
        ConceptValue::LEn,
        ConceptValue::LFr,
        ConceptValue::LDe,
        ConceptValue::LEs,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn condition(self) -> Condition {
        use ConceptValue::*;
        match self {
            EHigh | ELow => Condition::Energy,
            GFemale | GMale => Condition::Gender,
            SNear | SFar => Condition::Spatial,
            LEn | LFr | LDe | LEs => Condition::Language,
        }
    }

    pub fn name(self) -> &'static str {
        use ConceptValue::*;
        match self {
            EHigh => "E_HIGH",
            ELow => "E_LOW",
            GFemale => "G_FEMALE",
            GMale => "G_MALE",
            SNear => "S_NEAR",
            SFar => "S_FAR",
            LEn => "L_EN",
            LFr => "L_FR",
            LDe => "L_DE",
            LEs => "L_ES",
        }
    }

    /// The other value of a binary condition; `None` for language.
    pub fn complement(self) -> Option<Self> {
        use ConceptValue::*;
        match self {
            EHigh => Some(ELow),
            ELow => Some(EHigh),
            GFemale => Some(GMale),
            GMale => Some(GFemale),
            SNear => Some(SFar),
            SFar => Some(SNear),
            _ => None,
        }
    }

    /// Canonical vocabulary ordering as names, stored in checkpoints.
    pub fn vocabulary() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for ConceptValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConceptValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown concept '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn concept(self) -> ConceptValue {
        match self {
            Gender::Female => ConceptValue::GFemale,
            Gender::Male => ConceptValue::GMale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Fr,
    De,
    Es,
}

impl Language {
    pub const ALL: [Language; 4] = [Language::En, Language::Fr, Language::De, Language::Es];

    pub fn concept(self) -> ConceptValue {
        match self {
            Language::En => ConceptValue::LEn,
            Language::Fr => ConceptValue::LFr,
            Language::De => ConceptValue::LDe,
            Language::Es => ConceptValue::LEs,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One-hot encoding of a concept over the 10-element vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionVector {
    pub bits: [u8; VOCAB_SIZE],
}

impl ConditionVector {
    /// Validate an arbitrary bit pattern as one-hot.
    pub fn from_bits(bits: [u8; VOCAB_SIZE]) -> Result<Self> {
        let ones = bits.iter().filter(|&&b| b == 1).count();
        if ones != 1 || bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidCondition(format!("not one-hot: {bits:?}")));
        }
        Ok(Self { bits })
    }

    pub fn index(&self) -> Result<usize> {
        let mut found = None;
        for (i, &b) in self.bits.iter().enumerate() {
            match (b, found) {
                (0, _) => {}
                (1, None) => found = Some(i),
                _ => return Err(Error::InvalidCondition(format!("not one-hot: {:?}", self.bits))),
            }
        }
        found.ok_or_else(|| Error::InvalidCondition("all-zero condition vector".into()))
    }

    pub fn decode(&self) -> Result<ConceptValue> {
        Ok(ConceptValue::ALL[self.index()?])
    }
}

pub fn encode_concept(v: ConceptValue) -> ConditionVector {
    let mut bits = [0u8; VOCAB_SIZE];
    bits[v.index()] = 1;
    ConditionVector { bits }
}

/// Per-source concept values for each condition the source's domain defines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceConceptProfile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<ConceptValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gender: Option<ConceptValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spatial: Option<ConceptValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub language: Option<ConceptValue>,
}

impl SourceConceptProfile {
    pub fn get(&self, c: Condition) -> Option<ConceptValue> {
        match c {
            Condition::Energy => self.energy,
            Condition::Gender => self.gender,
            Condition::Spatial => self.spatial,
            Condition::Language => self.language,
        }
    }

    pub fn set(&mut self, v: ConceptValue) {
        match v.condition() {
            Condition::Energy => self.energy = Some(v),
            Condition::Gender => self.gender = Some(v),
            Condition::Spatial => self.spatial = Some(v),
            Condition::Language => self.language = Some(v),
        }
    }
}

/// Energy labels after SNR scaling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnergyAssignment {
    /// Loudest source gets `E_HIGH`, the rest `E_LOW` (ties broken by index).
    pub concepts: Vec<ConceptValue>,
    /// Set when the top-two energy gap does not exceed the threshold.
    pub ambiguous: bool,
}

pub const DEFAULT_ENERGY_EPSILON_DB: f64 = 1.0;

/// Label the strictly loudest source `E_HIGH` and the rest `E_LOW`; flag the
/// assignment as ambiguous when the top-two gap is `<= epsilon_db`.
pub fn assign_energy_concepts(scaled_sources: &[Waveform], epsilon_db: f64) -> EnergyAssignment {
    let energies: Vec<f64> = scaled_sources.iter().map(energy).collect();
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
    let mut concepts = vec![ConceptValue::ELow; energies.len()];
    let mut ambiguous = false;
    if let Some(&top) = order.first() {
        concepts[top] = ConceptValue::EHigh;
        if let Some(&second) = order.get(1) {
            let gap = 10.0 * (energies[top] / energies[second]).log10();
            ambiguous = !(gap > epsilon_db);
        }
    }
    EnergyAssignment { concepts, ambiguous }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    None,
    AllMatch,
    NoneMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSplit {
    pub target: Waveform,
    pub other: Waveform,
    /// `target + other`; the exact mixture the split decomposes.
    pub mixture: Waveform,
    pub degeneracy: Degeneracy,
}

/// Split sources into the submix matching `v` and the remainder.
pub fn target_submix(
    sources: &[Waveform],
    profiles: &[SourceConceptProfile],
    v: ConceptValue,
) -> Result<TargetSplit> {
    let first = sources.first().ok_or_else(|| Error::Empty("no sources".into()))?;
    if sources.len() != profiles.len() {
        return Err(Error::Shape(format!("{} sources but {} profiles", sources.len(), profiles.len())));
    }
    let cond = v.condition();
    let mut target = Waveform::zeros(first.len(), first.sample_rate);
    let mut other = target.clone();
    let mut matched = 0;
    for (i, (s, p)) in sources.iter().zip(profiles).enumerate() {
        check_compatible(first, s)?;
        let value = p.get(cond).ok_or_else(|| {
            Error::UndefinedCondition(format!("source {i} has no {} value", cond.name()))
        })?;
        let acc = if value == v {
            matched += 1;
            &mut target
        } else {
            &mut other
        };
        for (a, x) in acc.samples.iter_mut().zip(&s.samples) {
            *a += x;
        }
    }
    let degeneracy = if matched == sources.len() {
        Degeneracy::AllMatch
    } else if matched == 0 {
        Degeneracy::NoneMatch
    } else {
        Degeneracy::None
    };
    let mixture = target.add(&other)?;
    Ok(TargetSplit { target, other, mixture, degeneracy })
}
