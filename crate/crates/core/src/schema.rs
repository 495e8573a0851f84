//! JSON problem documents.
//!
//! ```json
//! {
//!   "schemaVersion": 1,
//!   "distribution": { "probs": [0.5, 0.5], "points": [{"features": [0.0]}, {"features": [1.0]}] },
//!   "sample": { "draws": [0, 1, 1], "seed": 7 },
//!   "class": { "population": [[0.1, 0.9], [0.4, 0.2]] },
//!   "dictionary": { "atoms": [[1.0, -1.0], [0.5, 0.5]], "labels": [0.3, -0.2], "loss": "quadratic" }
//! }
//! ```
//!
//! Tables are arrays of rows, one row per support point. `points`, `sample`,
//! `class` and `dictionary` are optional. Without `sample`, sample tables list
//! each support point once.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core_model::{EvaluatedClass, FiniteSupportDistribution, Sample, SupportPoint};
use crate::error::{Error, Result};
use crate::sparse_erm::{Dictionary, LossKind, LossSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionBlock {
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<SupportPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassBlock {
    pub population: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryBlock {
    pub atoms: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ProblemDocument {
    pub schema_version: u32,
    pub distribution: DistributionBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<Sample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<ClassBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<DictionaryBlock>,
}

impl ProblemDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        match value.get("schemaVersion").and_then(serde_json::Value::as_u64) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(Error::SchemaVersion(v.min(u32::MAX as u64) as u32)),
            None => return Err(Error::SchemaVersion(0)),
        }
        let doc: Self = serde_json::from_value(value)?;
        doc.check()?;
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Validates every block against the domain constructors.
    fn check(&self) -> Result<()> {
        let dist = self.distribution()?;
        if let Some(s) = &self.sample {
            Sample::from_draws(s.draws().to_vec(), dist.len(), s.seed())?;
        }
        if self.class.is_some() {
            self.class()?;
        }
        if self.dictionary.is_some() {
            self.dictionary()?;
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<FiniteSupportDistribution> {
        let d = &self.distribution;
        if d.points.is_empty() {
            FiniteSupportDistribution::new(d.probs.clone())
        } else {
            FiniteSupportDistribution::with_points(d.points.clone(), d.probs.clone())
        }
    }

    fn sample_or_support(&self) -> Sample {
        self.sample.clone().unwrap_or_else(|| {
            Sample::enumerate_support(&vec![1; self.distribution.probs.len()]).expect("support is nonempty")
        })
    }

    fn check_rows(&self, what: &str, rows: usize) -> Result<()> {
        let m = self.distribution.probs.len();
        if rows != m {
            return Err(Error::DimensionMismatch(format!("{what} has {rows} rows for {m} support points")));
        }
        Ok(())
    }

    /// The class, with sample values taken from the sample draws.
    pub fn class(&self) -> Result<Option<EvaluatedClass>> {
        let Some(block) = &self.class else { return Ok(None) };
        self.check_rows("class", block.population.len())?;
        EvaluatedClass::from_population(block.population.clone(), &self.sample_or_support()).map(Some)
    }

    pub fn dictionary(&self) -> Result<Option<(Dictionary, LossSpec)>> {
        let Some(block) = &self.dictionary else { return Ok(None) };
        self.check_rows("dictionary", block.atoms.len())?;
        self.check_rows("labels", block.labels.len())?;
        let sample = self.sample_or_support();
        Ok(Some((
            Dictionary::from_population(&block.atoms, &sample)?,
            LossSpec::from_population(block.loss, block.labels.clone(), &sample)?,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "schemaVersion": 1,
        "distribution": { "probs": [0.25, 0.75] },
        "sample": { "draws": [1, 1, 0], "seed": 3 },
        "class": { "population": [[0.0, 1.0], [0.5, 0.25]] },
        "dictionary": { "atoms": [[1.0], [-1.0]], "labels": [0.5, -0.5], "loss": "quadratic" }
    }"#;

    #[test]
    fn loads_and_round_trips() {
        let doc = ProblemDocument::from_json(DOC).unwrap();
        let class = doc.class().unwrap().unwrap();
        assert_eq!(class.sample_values()[2], vec![0.0, 1.0]);
        let (dict, loss) = doc.dictionary().unwrap().unwrap();
        assert_eq!(dict.sample().nrows(), 3);
        assert_eq!(loss.sample_labels(), &[-0.5, -0.5, 0.5]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        doc.save(&path).unwrap();
        assert_eq!(ProblemDocument::load(&path).unwrap(), doc);
    }

    #[test]
    fn version_required() {
        let missing = DOC.replace("\"schemaVersion\": 1,", "");
        assert!(matches!(ProblemDocument::from_json(&missing), Err(Error::SchemaVersion(0))));
        let wrong = DOC.replace("\"schemaVersion\": 1", "\"schemaVersion\": 2");
        assert!(matches!(ProblemDocument::from_json(&wrong), Err(Error::SchemaVersion(2))));
    }

    #[test]
    fn rejects_bad_blocks() {
        let bad_probs = DOC.replace("[0.25, 0.75]", "[0.25, 0.5]");
        assert!(ProblemDocument::from_json(&bad_probs).is_err());
        let bad_draw = DOC.replace("[1, 1, 0]", "[1, 2, 0]");
        assert!(ProblemDocument::from_json(&bad_draw).is_err());
        let bad_rows = DOC.replace("[[1.0], [-1.0]]", "[[1.0]]");
        assert!(ProblemDocument::from_json(&bad_rows).is_err());
        let extra = DOC.replace("\"schemaVersion\": 1,", "\"schemaVersion\": 1, \"bogus\": 0,");
        assert!(ProblemDocument::from_json(&extra).is_err());
    }
}
