use std::collections::{HashMap, HashSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::nn::Tensor;

/// Ground-truth class. Serialised as 1 (malware) / 0 (goodware).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Goodware,
    Malware,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Goodware => 0.0,
            Label::Malware => 1.0,
        }
    }

    pub fn is_malware(self) -> bool {
        self == Label::Malware
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Goodware),
            1 => Ok(Label::Malware),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "malware" | "mal" => Ok(Label::Malware),
            "0" | "goodware" | "benign" | "good" => Ok(Label::Goodware),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Goodware => "goodware",
            Label::Malware => "malware",
        })
    }
}

/// One app in a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Content hash (hex).
    pub id: String,
    /// Path of the raw vector image, relative to the cache directory.
    pub image_path: String,
    pub label: Label,
    pub dex_date: NaiveDate,
    /// Base app this record is an obfuscated variant of.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obfuscated_of: Option<String>,
}

/// Check id uniqueness and obfuscation linkage within one record set.
pub fn validate_records(records: &[SampleRecord]) -> Result<()> {
    let mut labels = HashMap::with_capacity(records.len());
    for r in records {
        if labels.insert(r.id.as_str(), r.label).is_some() {
            return Err(EvalError::DuplicateId(r.id.clone()));
        }
    }
    for r in records {
        if let Some(base) = &r.obfuscated_of {
            match labels.get(base.as_str()) {
                None => return Err(EvalError::MissingLinkage { id: r.id.clone(), base: base.clone() }),
                Some(&l) if l != r.label => return Err(EvalError::LabelMismatch(r.id.clone())),
                Some(_) => {}
            }
        }
    }
    Ok(())
}

/// A record together with its normalised network input.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: SampleRecord,
    pub image: Tensor,
}

impl Sample {
    pub fn label(&self) -> Label {
        self.record.label
    }
}

/// Samples addressable by id.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.record.id.clone(), i).is_some() {
                return Err(EvalError::DuplicateId(s.record.id.clone()));
            }
        }
        Ok(Dataset { samples, index })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn records(&self) -> Vec<SampleRecord> {
        self.samples.iter().map(|s| s.record.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    /// Resolve ids to samples, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| EvalError::MissingSample(id.clone())))
            .collect()
    }

    /// Width shared by every image, if any.
    pub fn width(&self) -> Option<usize> {
        let widths: HashSet<usize> = self.samples.iter().map(|s| s.image.len()).collect();
        (widths.len() == 1).then(|| *widths.iter().next().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: Label, base: Option<&str>) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image_path: format!("raw/{id}.dxr1"),
            label,
            dex_date: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            obfuscated_of: base.map(String::from),
        }
    }

    #[test]
    fn json_shape() {
        let r = record("ab12", Label::Malware, None);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"id":"ab12","image_path":"raw/ab12.dxr1","label":1,"dex_date":"2019-01-01"}"#
        );
        assert_eq!(serde_json::from_str::<SampleRecord>(&json).unwrap(), r);
        assert!(serde_json::from_str::<SampleRecord>(&json.replace(":1,", ":2,")).is_err());
    }

    #[test]
    fn linkage_checks() {
        let good = [record("a", Label::Malware, None), record("a-obf", Label::Malware, Some("a"))];
        validate_records(&good).unwrap();
        let missing = [record("a-obf", Label::Malware, Some("a"))];
        assert!(matches!(validate_records(&missing), Err(EvalError::MissingLinkage { .. })));
        let flipped = [record("a", Label::Malware, None), record("b", Label::Goodware, Some("a"))];
        assert!(matches!(validate_records(&flipped), Err(EvalError::LabelMismatch(_))));
        let dup = [record("a", Label::Malware, None), record("a", Label::Goodware, None)];
        assert!(matches!(validate_records(&dup), Err(EvalError::DuplicateId(_))));
    }

    #[test]
    fn labels_parse() {
        assert_eq!("malware".parse::<Label>().unwrap(), Label::Malware);
        assert_eq!("0".parse::<Label>().unwrap(), Label::Goodware);
        assert!("maybe".parse::<Label>().is_err());
    }
}
