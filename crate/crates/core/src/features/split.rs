use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, SplitTag};
use crate::error::{Error, Result};

/// Largest allowed gap between a split's positive rate and the parent's.
pub const MAX_RATE_GAP: f64 = 0.02;

/// Shuffles and partitions into train/validation/test, stratified by label.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| *f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    let n = dataset.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_train + n_val >= n || n_train == 0 || n_val == 0 {
        return Err(Error::Data(format!("{n} examples are too few to split {fractions:?}")));
    }
    let sizes = [n_train, n_val, n - n_train - n_val];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| dataset.examples[i].label == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| dataset.examples[i].label == 0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let total_pos = pos.len();
    let p_train = (total_pos as f64 * sizes[0] as f64 / n as f64).round() as usize;
    let p_val = (total_pos as f64 * sizes[1] as f64 / n as f64).round() as usize;
    let p_counts = [p_train, p_val, total_pos.saturating_sub(p_train + p_val)];
    let parent_rate = dataset.positive_rate();

    let (mut pi, mut ni) = (0, 0);
    let mut parts = Vec::with_capacity(3);
    for (k, tag) in [SplitTag::Train, SplitTag::Validation, SplitTag::Test].into_iter().enumerate() {
        let (p, size) = (p_counts[k], sizes[k]);
        if p > size || size - p > neg.len() - ni || pi + p > pos.len() {
            return Err(Error::Data("split too small to stratify".into()));
        }
        let rate = p as f64 / size as f64;
        if (rate - parent_rate).abs() > MAX_RATE_GAP {
            return Err(Error::Data(format!(
                "split too small to stratify: {} positive rate {rate:.4} vs parent {parent_rate:.4}",
                tag.as_str()
            )));
        }
        let mut idx: Vec<usize> = pos[pi..pi + p].iter().chain(&neg[ni..ni + size - p]).copied().collect();
        pi += p;
        ni += size - p;
        idx.shuffle(&mut rng);
        let examples = idx.into_iter().map(|i| dataset.examples[i].clone()).collect();
        parts.push(dataset.with_examples(examples, tag));
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((train, val, test))
}
