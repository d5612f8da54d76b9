use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generator::GeneratorConfig;
use super::sparse::SparseFeatureVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Seeded,
    Propagated,
    Synthetic,
}

/// Which modality carries the label signal for an example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subpopulation {
    TextDecidable,
    DenseOnly,
    Both,
    Noise,
}

impl Subpopulation {
    pub const ALL: [Subpopulation; 4] = [
        Subpopulation::TextDecidable,
        Subpopulation::DenseOnly,
        Subpopulation::Both,
        Subpopulation::Noise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subpopulation::TextDecidable => "text-decidable",
            Subpopulation::DenseOnly => "dense-only",
            Subpopulation::Both => "both",
            Subpopulation::Noise => "noise",
        }
    }
}

impl fmt::Display for Subpopulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub query: String,
    pub features: SparseFeatureVector,
    pub label: u8,
    pub provenance: Provenance,
    pub subpop: Subpopulation,
}

/// An example waiting for a label.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledExample {
    pub query: String,
    pub features: SparseFeatureVector,
    pub subpop: Subpopulation,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    query: String,
    features: Vec<(usize, f64)>,
    label: u8,
    provenance: Provenance,
    subpop: Subpopulation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Validation,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub d_features: usize,
    /// Phrase for each feature index.
    pub feature_vocab: Vec<String>,
    pub split: SplitTag,
}

/// Sidecar metadata stored next to every JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d_features: usize,
    pub seed: Option<u64>,
    pub split: SplitTag,
    pub examples: usize,
    pub generator: Option<GeneratorConfig>,
    pub feature_vocab: Vec<String>,
}

/// `data/train.jsonl` -> `data/train.header.json`.
pub fn header_path(jsonl: &Path) -> PathBuf {
    let stem = jsonl.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    jsonl.with_file_name(format!("{stem}.header.json"))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        self.examples.iter().filter(|e| e.label == 1).count() as f64 / self.examples.len() as f64
    }

    pub fn count_subpop(&self, s: Subpopulation) -> usize {
        self.examples.iter().filter(|e| e.subpop == s).count()
    }

    pub fn with_examples(&self, examples: Vec<Example>, split: SplitTag) -> Dataset {
        Dataset {
            examples,
            d_features: self.d_features,
            feature_vocab: self.feature_vocab.clone(),
            split,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let rec = ExampleRecord {
                query: e.query.clone(),
                features: e.features.entries().to_vec(),
                label: e.label,
                provenance: e.provenance,
                subpop: e.subpop,
            };
            out.push_str(&serde_json::to_string(&rec).expect("records always serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses JSONL lines; every line is checked against `d_features`.
    pub fn parse_jsonl(text: &str, d_features: usize) -> Result<Vec<Example>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, line)| {
                let rec: ExampleRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
                if rec.label > 1 {
                    return Err(Error::Data(format!("line {}: label must be 0 or 1", n + 1)));
                }
                let features = SparseFeatureVector::new(rec.features, d_features)
                    .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
                Ok(Example {
                    query: rec.query,
                    features,
                    label: rec.label,
                    provenance: rec.provenance,
                    subpop: rec.subpop,
                })
            })
            .collect()
    }

    /// SHA-256 of the JSONL serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex_digest(self.to_jsonl().as_bytes())
    }

    pub fn header(&self, seed: Option<u64>, generator: Option<&GeneratorConfig>) -> DatasetHeader {
        DatasetHeader {
            d_features: self.d_features,
            seed,
            split: self.split,
            examples: self.examples.len(),
            generator: generator.cloned(),
            feature_vocab: self.feature_vocab.clone(),
        }
    }

    /// Writes `path` (JSONL) and its header sidecar.
    pub fn save(&self, path: impl AsRef<Path>, header: &DatasetHeader) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))?;
        let hp = header_path(path);
        let mut text = serde_json::to_string_pretty(header)?;
        text.push('\n');
        std::fs::write(&hp, text).map_err(|e| Error::io(&hp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Dataset, DatasetHeader)> {
        let path = path.as_ref();
        let hp = header_path(path);
        let header_text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: DatasetHeader = serde_json::from_str(&header_text)
            .map_err(|e| Error::Data(format!("{}: {e}", hp.display())))?;
        if header.feature_vocab.len() != header.d_features {
            return Err(Error::Data(format!(
                "{}: feature vocabulary has {} entries for d_features {}",
                hp.display(),
                header.feature_vocab.len(),
                header.d_features
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let examples = Self::parse_jsonl(&text, header.d_features)?;
        let ds = Dataset {
            examples,
            d_features: header.d_features,
            feature_vocab: header.feature_vocab.clone(),
            split: header.split,
        };
        Ok((ds, header))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Pairs `(test index, train index)` whose features are parallel
/// (cosine 1 within `1e-12`), ignoring the noise subpopulation.
pub fn cross_split_duplicates(train: &Dataset, test: &Dataset) -> Vec<(usize, usize)> {
    let mut found = Vec::new();
    for (ti, t) in test.examples.iter().enumerate() {
        if t.subpop == Subpopulation::Noise {
            continue;
        }
        for (ri, r) in train.examples.iter().enumerate() {
            if r.subpop == Subpopulation::Noise {
                continue;
            }
            if matches!(t.features.cosine(&r.features), Some(c) if c >= 1.0 - 1e-12) {
                found.push((ti, ri));
            }
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let ex = |q: &str, f: Vec<(usize, f64)>, label| Example {
            query: q.to_string(),
            features: SparseFeatureVector::new(f, 4).unwrap(),
            label,
            provenance: Provenance::Synthetic,
            subpop: Subpopulation::Both,
        };
        Dataset {
            examples: vec![
                ex("covid vaccine appointment", vec![(0, 0.5), (2, 1.0)], 1),
                ex("fully vaccinated travel", vec![], 0),
            ],
            d_features: 4,
            feature_vocab: (0..4).map(|i| format!("f{i}")).collect(),
            split: SplitTag::Full,
        }
    }

    #[test]
    fn jsonl_line_format() {
        let text = tiny().to_jsonl();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"query":"covid vaccine appointment","features":[[0,0.5],[2,1.0]],"label":1,"provenance":"synthetic","subpop":"both"}"#
        );
        assert_eq!(Dataset::parse_jsonl(&text, 4).unwrap(), tiny().examples);
    }

    #[test]
    fn parse_rejects_bad_lines() {
        let bad_index = r#"{"query":"x","features":[[9,0.5]],"label":1,"provenance":"seeded","subpop":"both"}"#;
        assert!(matches!(Dataset::parse_jsonl(bad_index, 4), Err(Error::Data(_))));
        let bad_label = r#"{"query":"x","features":[],"label":2,"provenance":"seeded","subpop":"both"}"#;
        assert!(Dataset::parse_jsonl(bad_label, 4).is_err());
        assert!(Dataset::parse_jsonl("{not json", 4).is_err());
    }

    #[test]
    fn save_and_load_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.jsonl");
        let ds = tiny();
        ds.save(&path, &ds.header(Some(3), None)).unwrap();
        assert!(dir.path().join("toy.header.json").exists());
        let (back, header) = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(header.seed, Some(3));
        assert_eq!(back.content_hash(), ds.content_hash());
    }

    #[test]
    fn duplicate_checker_finds_parallel_vectors() {
        let a = tiny();
        let mut b = tiny();
        b.examples[0].features = SparseFeatureVector::new(vec![(0, 0.25), (2, 0.5)], 4).unwrap();
        assert_eq!(cross_split_duplicates(&a, &b), vec![(0, 0)]);
    }
}
