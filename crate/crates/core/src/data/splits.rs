use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

/// A named dataset partitioned into train / validation / test page lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split_ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn pages(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|&s| self.pages(s).iter().any(|p| p == image_id))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Sizes of the three parts: floor of each ratio share for train and
/// validation, the remainder to test.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    let share = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let train = share(ratios[0]).min(n);
    let val = share(ratios[1]).min(n - train);
    (train, val, n - train - val)
}

/// Seeded shuffle of `page_ids`, then partition by [`split_counts`].
pub fn make_splits(name: &str, page_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if page_ids.len() < 3 {
        return Err(Error::Dataset(format!("{} pages cannot be split three ways", page_ids.len())));
    }
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let mut ids = page_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b, _) = split_counts(ids.len(), ratios);
    let test = ids.split_off(a + b);
    let val = ids.split_off(a);
    Ok(DatasetManifest { name: name.to_string(), split_ratios: ratios, train: ids, val, test })
}
