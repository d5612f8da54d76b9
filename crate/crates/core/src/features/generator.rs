//! Synthetic query/feature generator.
//!
//! Four subpopulations control which modality carries the label:
//!
//! * **text-decidable**: the query contains a decisive access or non-access
//!   phrase. The location feature fires at random, independent of the label.
//! * **dense-only**: the query is `"<prefix> <noun>"`, drawn without looking
//!   at the label. The label is positive exactly when the location feature
//!   is active, so text alone sits at chance.
//! * **both**: decisive text plus class-specific signal features.
//! * **noise**: off-topic text and low-score noise features; the label is
//!   not recoverable from either modality.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Example, Provenance, SplitTag, Subpopulation};
use super::sparse::SparseFeatureVector;
use crate::error::{Error, Result};

/// Feature index that flags a location entity in the query.
pub const LOCATION: usize = 0;
/// Indices that only fire for access-intent queries in the `both` stratum.
pub const POSITIVE_SIGNALS: [usize; 7] = [1, 2, 3, 4, 5, 6, 7];
/// Indices that only fire for non-access queries in the `both` stratum.
pub const NEGATIVE_SIGNALS: [usize; 5] = [8, 9, 10, 11, 12];
pub const TOPIC_COVID: usize = 13;
pub const TOPIC_VACCINE: usize = 14;
pub const TOPIC_CORONAVIRUS: usize = 15;
/// Indices below this are reserved for ground-truth signal phrases.
pub const RESERVED_SIGNALS: usize = 16;

const RESERVED_PHRASES: [&str; RESERVED_SIGNALS] = [
    "location",
    "appointment",
    "pharmacy",
    "walk in",
    "booking",
    "vaccine clinic",
    "vaccine eligibility",
    "second dose",
    "effectiveness",
    "side effects",
    "travel",
    "vaccination proof",
    "case statistics",
    "covid",
    "vaccine",
    "coronavirus",
];

/// Phrase for every feature index: the reserved signal phrases followed by
/// generic filler phrases.
pub fn feature_vocabulary(d_features: usize) -> Vec<String> {
    (0..d_features)
        .map(|i| match RESERVED_PHRASES.get(i) {
            Some(p) => p.to_string(),
            None => format!("phrase {i:04}"),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubpopCounts {
    pub text_decidable: usize,
    pub dense_only: usize,
    pub both: usize,
    pub noise: usize,
}

impl SubpopCounts {
    pub fn total(&self) -> usize {
        self.text_decidable + self.dense_only + self.both + self.noise
    }

    pub fn get(&self, s: Subpopulation) -> usize {
        match s {
            Subpopulation::TextDecidable => self.text_decidable,
            Subpopulation::DenseOnly => self.dense_only,
            Subpopulation::Both => self.both,
            Subpopulation::Noise => self.noise,
        }
    }

    /// Splits `total` by fractions using largest remainders, so the counts
    /// always add up to `total`.
    pub fn from_fractions(total: usize, fractions: [f64; 4]) -> Result<Self> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("subpopulation fractions {fractions:?} must be >= 0 and sum to 1")));
        }
        let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let short = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        Ok(SubpopCounts {
            text_decidable: counts[0],
            dense_only: counts[1],
            both: counts[2],
            noise: counts[3],
        })
    }
}

/// Query templates. Positive/negative templates carry a decisive phrase;
/// suffixes are shared by both classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateInventory {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub suffixes: Vec<String>,
    pub ambiguous_prefixes: Vec<String>,
    pub ambiguous_nouns: Vec<String>,
    pub off_topic: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for TemplateInventory {
    fn default() -> Self {
        TemplateInventory {
            positive: strings(&[
                "covid vaccine appointment",
                "book covid vaccine appointment",
                "where can i get covid vaccine",
                "book covid jab",
                "walk-in covid vaccine near me",
                "nhs book covid vaccine",
                "covid vaccine near me",
                "schedule covid vaccine",
                "covid vaccine pharmacy",
                "covid booster appointment",
                "covid vaccine clinic hours",
                "register for covid vaccine",
                "covid vaccine walk in clinic",
                "pfizer vaccine appointment",
                "moderna booster near me",
                "covid vaccine eligibility",
                "vaccine appointments available",
                "covid shot pharmacy booking",
            ]),
            negative: strings(&[
                "covid vaccine effectiveness",
                "fully vaccinated travel",
                "proof of covid vaccination",
                "how long does the vaccine last",
                "covid stats by country",
                "covid vaccine side effects",
                "covid vaccine news",
                "vaccine passport rules",
                "covid vaccine myths",
                "covid booster efficacy",
                "vaccine mandate employers",
                "covid vaccine ingredients",
                "pfizer vaccine side effects",
                "moderna efficacy data",
                "covid cases by state",
                "covid vaccine safety study",
                "vaccination rates by state",
            ]),
            suffixes: strings(&["", "today", "2021", "update", "for kids", "for seniors", "info"]),
            ambiguous_prefixes: strings(&["covid vaccine", "covid vaccines", "covid shot"]),
            ambiguous_nouns: strings(&[
                "hamilton", "jackson", "lincoln", "austin", "victoria", "florence", "regina", "kent",
                "jordan", "chelsea", "madison", "georgia", "aurora", "phoenix", "orlando", "charlotte",
                "dallas", "eugene", "troy", "mercer", "clayton", "warren", "marion", "salem",
            ]),
            off_topic: strings(&[
                "weather tomorrow",
                "pizza recipe",
                "football scores",
                "cheap flights",
                "movie times",
                "laptop deals",
                "bus schedule",
                "song lyrics",
            ]),
        }
    }
}

impl TemplateInventory {
    /// Every query text the dense-only stratum can emit. The sampler draws
    /// from this set without reference to the label.
    pub fn dense_only_support(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for p in &self.ambiguous_prefixes {
            for n in &self.ambiguous_nouns {
                out.insert(format!("{p} {n}"));
            }
        }
        out
    }

    fn sample_ambiguous(&self, rng: &mut ChaCha8Rng) -> String {
        let p = self.ambiguous_prefixes.choose(rng).expect("non-empty prefixes");
        let n = self.ambiguous_nouns.choose(rng).expect("non-empty nouns");
        format!("{p} {n}")
    }

    fn sample_decisive(&self, label: u8, rng: &mut ChaCha8Rng) -> String {
        let pool = if label == 1 { &self.positive } else { &self.negative };
        let base = pool.choose(rng).expect("non-empty templates");
        match self.suffixes.choose(rng).map(String::as_str) {
            None | Some("") => base.clone(),
            Some(s) => format!("{base} {s}"),
        }
    }

    fn validate(&self) -> Result<()> {
        let lists = [
            ("positive", &self.positive),
            ("negative", &self.negative),
            ("ambiguous_prefixes", &self.ambiguous_prefixes),
            ("ambiguous_nouns", &self.ambiguous_nouns),
            ("off_topic", &self.off_topic),
        ];
        for (name, l) in lists {
            if l.is_empty() {
                return Err(Error::Config(format!("template list {name} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub total: usize,
    pub counts: SubpopCounts,
    /// Share of positives inside every subpopulation.
    pub positive_rate: f64,
    pub d_features: usize,
    /// Probability that the location feature fires where it does not
    /// decide the label.
    pub location_rate: f64,
    /// Inclusive range for the number of low-score noise features.
    pub noise_features: (usize, usize),
    #[serde(default)]
    pub templates: TemplateInventory,
}

impl GeneratorConfig {
    pub fn from_mix(total: usize, fractions: [f64; 4]) -> Result<Self> {
        Ok(GeneratorConfig {
            total,
            counts: SubpopCounts::from_fractions(total, fractions)?,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.total() != self.total {
            return Err(Error::Config(format!(
                "subpopulation sizes add up to {}, expected total {}",
                self.counts.total(),
                self.total
            )));
        }
        if self.d_features < RESERVED_SIGNALS + self.noise_features.1 {
            return Err(Error::Config(format!(
                "d_features {} is too small: {RESERVED_SIGNALS} reserved signal indices plus up to {} noise indices",
                self.d_features, self.noise_features.1
            )));
        }
        if self.noise_features.0 > self.noise_features.1 {
            return Err(Error::Config("noise_features range is reversed".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) || !(0.0..=1.0).contains(&self.location_rate) {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        self.templates.validate()
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            total: 1000,
            counts: SubpopCounts {
                text_decidable: 500,
                dense_only: 300,
                both: 200,
                noise: 0,
            },
            positive_rate: 0.5,
            d_features: 512,
            location_rate: 0.5,
            noise_features: (2, 6),
            templates: TemplateInventory::default(),
        }
    }
}

struct FeatureSampler<'c> {
    cfg: &'c GeneratorConfig,
}

impl FeatureSampler<'_> {
    fn signal(rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(0.3..=1.0)
    }

    fn topical(&self, rng: &mut ChaCha8Rng, out: &mut Vec<(usize, f64)>) {
        for (idx, p) in [(TOPIC_COVID, 0.9), (TOPIC_VACCINE, 0.9), (TOPIC_CORONAVIRUS, 0.3)] {
            if rng.gen_bool(p) {
                out.push((idx, Self::signal(rng)));
            }
        }
    }

    fn noise(&self, rng: &mut ChaCha8Rng, out: &mut Vec<(usize, f64)>) {
        let (lo, hi) = self.cfg.noise_features;
        let k = rng.gen_range(lo..=hi);
        let mut picked = HashSet::new();
        while picked.len() < k {
            picked.insert(rng.gen_range(RESERVED_SIGNALS..self.cfg.d_features));
        }
        let mut picked: Vec<usize> = picked.into_iter().collect();
        picked.sort_unstable();
        for i in picked {
            out.push((i, rng.gen_range(0.001..=0.1)));
        }
    }

    fn sample(&self, subpop: Subpopulation, label: u8, rng: &mut ChaCha8Rng) -> SparseFeatureVector {
        let mut e = Vec::new();
        match subpop {
            Subpopulation::TextDecidable => {
                self.topical(rng, &mut e);
                if rng.gen_bool(self.cfg.location_rate) {
                    e.push((LOCATION, Self::signal(rng)));
                }
            }
            Subpopulation::DenseOnly => {
                self.topical(rng, &mut e);
                if label == 1 {
                    e.push((LOCATION, Self::signal(rng)));
                }
            }
            Subpopulation::Both => {
                self.topical(rng, &mut e);
                if rng.gen_bool(self.cfg.location_rate) {
                    e.push((LOCATION, Self::signal(rng)));
                }
                let pool: &[usize] = if label == 1 { &POSITIVE_SIGNALS } else { &NEGATIVE_SIGNALS };
                let k = rng.gen_range(1..=2);
                for &i in pool.choose_multiple(rng, k) {
                    e.push((i, Self::signal(rng)));
                }
            }
            Subpopulation::Noise => {}
        }
        self.noise(rng, &mut e);
        SparseFeatureVector::from_unsorted(e, self.cfg.d_features).expect("generator emits valid entries")
    }
}

/// Direction of a feature vector, quantized, so parallel vectors collide.
fn direction_key(v: &SparseFeatureVector) -> Vec<(usize, i64)> {
    let n = v.norm();
    v.entries()
        .iter()
        .map(|&(i, s)| (i, if n > 0.0 { (s / n * 1e9).round() as i64 } else { 0 }))
        .collect()
}

/// Generates a dataset deterministically from `(config, seed)`.
///
/// Feature vectors outside the noise stratum are pairwise non-parallel, so
/// no split can hold a feature duplicate of another.
pub fn generate_synthetic_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = FeatureSampler { cfg };
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(cfg.total);

    for subpop in Subpopulation::ALL {
        let n = cfg.counts.get(subpop);
        let positives = (n as f64 * cfg.positive_rate).round() as usize;
        for k in 0..n {
            let label = u8::from(k < positives);
            let query = match subpop {
                Subpopulation::TextDecidable | Subpopulation::Both => {
                    cfg.templates.sample_decisive(label, &mut rng)
                }
                Subpopulation::DenseOnly => cfg.templates.sample_ambiguous(&mut rng),
                Subpopulation::Noise => cfg.templates.off_topic.choose(&mut rng).unwrap().clone(),
            };
            let mut features = sampler.sample(subpop, label, &mut rng);
            if subpop != Subpopulation::Noise {
                let mut tries = 0;
                while !seen.insert(direction_key(&features)) {
                    tries += 1;
                    if tries > 1000 {
                        return Err(Error::Data("could not draw a unique feature vector".into()));
                    }
                    features = sampler.sample(subpop, label, &mut rng);
                }
            }
            examples.push(Example {
                query,
                features,
                label,
                provenance: Provenance::Synthetic,
                subpop,
            });
        }
    }
    examples.shuffle(&mut rng);

    Ok(Dataset {
        examples,
        d_features: cfg.d_features,
        feature_vocab: feature_vocabulary(cfg.d_features),
        split: SplitTag::Full,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn config(total: usize) -> GeneratorConfig {
        GeneratorConfig::from_mix(total, [0.5, 0.3, 0.2, 0.0]).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset(&config(300), 9).unwrap();
        let b = generate_synthetic_dataset(&config(300), 9).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let c = generate_synthetic_dataset(&config(300), 10).unwrap();
        assert_ne!(a.to_jsonl(), c.to_jsonl());
    }

    #[test]
    fn counts_and_mix() {
        let ds = generate_synthetic_dataset(&config(1000), 1).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.count_subpop(Subpopulation::TextDecidable), 500);
        assert_eq!(ds.count_subpop(Subpopulation::DenseOnly), 300);
        assert_eq!(ds.count_subpop(Subpopulation::Both), 200);
        assert!((ds.positive_rate() - 0.5).abs() < 1e-12);
        assert_eq!(ds.feature_vocab.len(), 512);
        assert_eq!(ds.feature_vocab[1], "appointment");
    }

    #[test]
    fn invalid_configs() {
        let mut c = config(100);
        c.total = 101;
        assert!(matches!(generate_synthetic_dataset(&c, 0), Err(Error::Config(_))));
        let mut c = config(100);
        c.d_features = 12;
        assert!(generate_synthetic_dataset(&c, 0).is_err());
        assert!(SubpopCounts::from_fractions(10, [0.5, 0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn fractions_always_sum_to_total() {
        for total in [1, 7, 100, 999, 5500] {
            let c = SubpopCounts::from_fractions(total, [0.5, 0.3, 0.2, 0.0]).unwrap();
            assert_eq!(c.total(), total);
        }
    }

    #[test]
    fn table_four_analogs_are_in_the_inventory() {
        let t = TemplateInventory::default();
        assert!(t.positive.iter().any(|q| q == "walk-in covid vaccine near me"));
        assert!(t.negative.iter().any(|q| q == "fully vaccinated travel"));
    }

    #[test]
    fn dense_only_text_is_label_blind() {
        let cfg = GeneratorConfig::from_mix(6000, [0.0, 1.0, 0.0, 0.0]).unwrap();
        let ds = generate_synthetic_dataset(&cfg, 4).unwrap();
        let support = cfg.templates.dense_only_support();
        let mut by_label: [BTreeSet<&str>; 2] = [BTreeSet::new(), BTreeSet::new()];
        for e in &ds.examples {
            assert!(support.contains(&e.query));
            by_label[e.label as usize].insert(&e.query);
            // the location index alone decides the label
            assert_eq!(e.features.is_active(LOCATION), e.label == 1);
        }
        // 72 texts, 3000 draws per label: every text shows up under both labels
        assert_eq!(by_label[0].len(), support.len());
        assert_eq!(by_label[1].len(), support.len());
    }

    #[test]
    fn text_only_oracle_is_at_chance_on_dense_only() {
        let cfg = GeneratorConfig::from_mix(4000, [0.0, 1.0, 0.0, 0.0]).unwrap();
        let train = generate_synthetic_dataset(&cfg, 1).unwrap();
        let test = generate_synthetic_dataset(&cfg, 2).unwrap();
        let mut votes: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
        for e in &train.examples {
            votes.entry(&e.query).or_default()[e.label as usize] += 1;
        }
        let correct = test
            .examples
            .iter()
            .filter(|e| {
                let v = votes.get(e.query.as_str()).copied().unwrap_or([1, 0]);
                u8::from(v[1] > v[0]) == e.label
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        // 4000 draws: three binomial standard deviations is about 0.024
        assert!((acc - 0.5).abs() < 0.03, "text-only accuracy {acc}");
    }

    #[test]
    fn no_parallel_feature_vectors_outside_noise() {
        let ds = generate_synthetic_dataset(&config(400), 3).unwrap();
        let keys: HashSet<_> = ds.examples.iter().map(|e| direction_key(&e.features)).collect();
        assert_eq!(keys.len(), 400);
    }
}
