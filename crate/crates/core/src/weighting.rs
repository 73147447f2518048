//! Per-instance training weights that balance label, user and category.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{AppCategory, UserId};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub attended: bool,
    pub user: UserId,
    pub category: AppCategory,
}

impl GroupKey {
    pub fn new(attended: bool, user: UserId, category: AppCategory) -> Self {
        GroupKey {
            attended,
            user,
            category,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `1 / f`
    #[serde(rename = "inv")]
    InverseFrequency,
    /// `1 / sqrt(f)`
    InverseSqrt,
    /// `1 / max(ln f, 1)`
    #[default]
    InverseLog,
    Uniform,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 4] = [
        WeightScheme::InverseFrequency,
        WeightScheme::InverseSqrt,
        WeightScheme::InverseLog,
        WeightScheme::Uniform,
    ];

    pub fn flag(self) -> &'static str {
        match self {
            WeightScheme::InverseFrequency => "inv",
            WeightScheme::InverseSqrt => "inv-sqrt",
            WeightScheme::InverseLog => "inv-log",
            WeightScheme::Uniform => "uniform",
        }
    }

    /// Weight for a group seen `f >= 1` times.
    pub fn apply(self, f: u64) -> f64 {
        let f = f as f64;
        match self {
            WeightScheme::InverseFrequency => 1.0 / f,
            WeightScheme::InverseSqrt => 1.0 / f.sqrt(),
            // ln is below 1 for f < e; the floor keeps weights bounded by 1.
            WeightScheme::InverseLog => 1.0 / f.ln().max(1.0),
            WeightScheme::Uniform => 1.0,
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightScheme::ALL.into_iter().find(|w| w.flag() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown weighting `{s}` (expected inv, inv-sqrt, inv-log or uniform)"
            ))
        })
    }
}

/// Counts of attended / unattended notifications per user and category,
/// built from the training split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupFrequencyTable {
    counts: HashMap<GroupKey, u64>,
    total: u64,
}

impl GroupFrequencyTable {
    pub fn build<I>(instances: I) -> Self
    where
        I: IntoIterator<Item = GroupKey>,
    {
        let mut table = GroupFrequencyTable::default();
        for key in instances {
            *table.counts.entry(key).or_insert(0) += 1;
            table.total += 1;
        }
        table
    }

    pub fn count(&self, key: &GroupKey) -> Option<u64> {
        self.counts.get(key).copied()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupKey, u64)> {
        self.counts.iter().map(|(k, v)| (k, *v))
    }

    pub fn weight(&self, key: &GroupKey, scheme: WeightScheme) -> Result<f64> {
        match self.counts.get(key) {
            Some(&f) => Ok(scheme.apply(f)),
            None => Err(Error::UnseenGroup {
                attended: key.attended,
                user: key.user.to_string(),
                category: key.category.to_string(),
            }),
        }
    }

    /// Training positive rate of one (user, category) cell, if it has data.
    pub fn positive_rate(&self, user: &UserId, category: AppCategory) -> Option<f64> {
        let pos = self.count(&GroupKey::new(true, user.clone(), category)).unwrap_or(0);
        let neg = self.count(&GroupKey::new(false, user.clone(), category)).unwrap_or(0);
        (pos + neg > 0).then(|| pos as f64 / (pos + neg) as f64)
    }

    pub fn category_positive_rate(&self, category: AppCategory) -> Option<f64> {
        self.rate_where(|k| k.category == category)
    }

    pub fn global_positive_rate(&self) -> Option<f64> {
        self.rate_where(|_| true)
    }

    fn rate_where(&self, keep: impl Fn(&GroupKey) -> bool) -> Option<f64> {
        let (mut pos, mut all) = (0u64, 0u64);
        for (k, &c) in &self.counts {
            if keep(k) {
                all += c;
                if k.attended {
                    pos += c;
                }
            }
        }
        (all > 0).then(|| pos as f64 / all as f64)
    }
}
