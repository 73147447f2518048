//! Arranges per-user sample streams into buckets of interleaved batches for
//! stateful recurrent training.
//!
//! A bucket holds `B` users. Batch `k` of a bucket gives every user slot the
//! samples `[kL, (k+1)L)` of that user, so the recurrent state of a slot can
//! be carried from one batch to the next. Users are sorted by stream length
//! before chunking to keep tail padding small.

use serde::{Deserialize, Serialize};

use crate::encode::EncodedSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequencingConfig {
    pub seq_len: usize,
    pub batch_lo: usize,
    pub batch_hi: usize,
}

impl Default for SequencingConfig {
    fn default() -> Self {
        SequencingConfig {
            seq_len: 50,
            batch_lo: 15,
            batch_hi: 45,
        }
    }
}

impl SequencingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch_lo == 0 || self.batch_lo > self.batch_hi {
            return Err(Error::Config(format!(
                "need seq_len >= 1 and 1 <= batch_lo <= batch_hi, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Smallest batch size in `[lo, hi]` that leaves the fewest users over.
pub fn choose_batch_size(num_users: usize, lo: usize, hi: usize) -> usize {
    (lo..=hi).min_by_key(|&b| (num_users % b, b)).unwrap_or(lo)
}

/// A group of users trained side by side with carried state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    /// Indices of the real users, one per slot.
    pub users: Vec<usize>,
    /// All-padding slots appended to a short final bucket. They contribute
    /// nothing to any loss or gradient, so batches only materialize real
    /// slots.
    pub dummy_slots: usize,
    /// Per-slot length after tail padding; a multiple of the sequence length.
    pub padded_len: usize,
}

impl Bucket {
    pub fn num_batches(&self, seq_len: usize) -> usize {
        self.padded_len / seq_len
    }

    pub fn slots(&self) -> usize {
        self.users.len() + self.dummy_slots
    }
}

pub fn build_buckets<S: AsRef<[EncodedSample]>>(streams: &[S], config: &SequencingConfig) -> Result<Vec<Bucket>> {
    config.validate()?;
    if streams.is_empty() {
        return Err(Error::Empty("no user streams to bucket".into()));
    }
    if let Some(i) = streams.iter().position(|s| s.as_ref().is_empty()) {
        return Err(Error::Empty(format!("stream {i} has no samples")));
    }
    let b = choose_batch_size(streams.len(), config.batch_lo, config.batch_hi);
    let mut order: Vec<usize> = (0..streams.len()).collect();
    order.sort_by_key(|&i| (streams[i].as_ref().len(), i));
    let l = config.seq_len;
    Ok(order
        .chunks(b)
        .map(|chunk| {
            let longest = chunk.iter().map(|&i| streams[i].as_ref().len()).max().unwrap_or(0);
            Bucket {
                users: chunk.to_vec(),
                dummy_slots: b - chunk.len(),
                padded_len: longest.div_ceil(l) * l,
            }
        })
        .collect())
}

/// One batch: for every real slot of the bucket, up to `seq_len` samples.
/// Slots shorter than `seq_len` are implicitly padded at the tail.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub bucket: usize,
    pub index: usize,
    /// Keep the recurrent state from the previous batch of the bucket.
    pub carry: bool,
    pub users: &'a [usize],
    pub slots: Vec<&'a [EncodedSample]>,
    pub seq_len: usize,
}

impl Batch<'_> {
    /// Sample of `slot` at `step`, or `None` when padded.
    pub fn sample(&self, slot: usize, step: usize) -> Option<&EncodedSample> {
        self.slots[slot].get(step)
    }
}

/// Batches in training order: bucket by bucket, carrying state within a
/// bucket and resetting it at every bucket start.
pub fn iterate_for_training<'a, S: AsRef<[EncodedSample]>>(
    streams: &'a [S],
    buckets: &'a [Bucket],
    seq_len: usize,
) -> impl Iterator<Item = Batch<'a>> + 'a {
    buckets.iter().enumerate().flat_map(move |(bi, bucket)| {
        (0..bucket.num_batches(seq_len)).map(move |k| Batch {
            bucket: bi,
            index: k,
            carry: k > 0,
            users: &bucket.users,
            slots: bucket
                .users
                .iter()
                .map(|&u| {
                    let s = streams[u].as_ref();
                    let start = (k * seq_len).min(s.len());
                    &s[start..((k + 1) * seq_len).min(s.len())]
                })
                .collect(),
            seq_len,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(n: usize, tag: i64) -> Vec<EncodedSample> {
        (0..n)
            .map(|i| EncodedSample {
                time: tag * 1000 + i as i64,
                first_time: tag * 1000 + i as i64,
                w: 1.0,
                y: Some(true),
                ..EncodedSample::padding()
            })
            .collect()
    }

    fn brute_force(n: usize, lo: usize, hi: usize) -> usize {
        let best = (lo..=hi).map(|b| n % b).min().unwrap();
        (lo..=hi).find(|b| n % b == best).unwrap()
    }

    #[test]
    fn batch_size_examples() {
        assert_eq!(choose_batch_size(90, 15, 45), 15);
        assert_eq!(choose_batch_size(100, 15, 45), 20);
        assert_eq!(choose_batch_size(254, 15, 45), 23);
        for n in 1..400 {
            assert_eq!(choose_batch_size(n, 15, 45), brute_force(n, 15, 45));
        }
    }

    #[test]
    fn three_equal_users() {
        let streams: Vec<_> = (0..3).map(|u| stream(15, u)).collect();
        let cfg = SequencingConfig {
            seq_len: 5,
            batch_lo: 3,
            batch_hi: 3,
        };
        let buckets = build_buckets(&streams, &cfg).unwrap();
        assert_eq!(buckets.len(), 1);
        assert_eq!(buckets[0].num_batches(5), 3);
        let flags: Vec<bool> = iterate_for_training(&streams, &buckets, 5).map(|b| b.carry).collect();
        assert_eq!(flags, vec![false, true, true]);
    }

    #[test]
    fn short_user_is_padded() {
        let streams = vec![stream(10, 0), stream(12, 1)];
        let cfg = SequencingConfig {
            seq_len: 5,
            batch_lo: 2,
            batch_hi: 2,
        };
        let buckets = build_buckets(&streams, &cfg).unwrap();
        assert_eq!(buckets[0].padded_len, 15);
        let last = iterate_for_training(&streams, &buckets, 5).last().unwrap();
        assert_eq!(last.slots[0].len(), 0);
        assert_eq!(last.slots[1].len(), 2);
        assert!(last.sample(1, 3).is_none());
    }

    #[test]
    fn leftover_bucket_and_resets() {
        let streams: Vec<_> = (0..5).map(|u| stream(4 + u as usize, u)).collect();
        let cfg = SequencingConfig {
            seq_len: 4,
            batch_lo: 3,
            batch_hi: 3,
        };
        let buckets = build_buckets(&streams, &cfg).unwrap();
        assert_eq!(buckets.len(), 2);
        assert_eq!(buckets[1].users.len(), 2);
        assert_eq!(buckets[1].dummy_slots, 1);
        let flags: Vec<bool> = iterate_for_training(&streams, &buckets, 4).map(|b| b.carry).collect();
        assert_eq!(flags, vec![false, true, false, true]);
        assert!(build_buckets(&Vec::<Vec<EncodedSample>>::new(), &cfg).is_err());
        assert!(build_buckets(&[Vec::new()], &cfg).is_err());
    }

    proptest! {
        #[test]
        fn slots_reassemble_streams(lens in proptest::collection::vec(1usize..40, 1..30), l in 1usize..9, lo in 1usize..6, extra in 0usize..5) {
            let streams: Vec<_> = lens.iter().enumerate().map(|(u, &n)| stream(n, u as i64)).collect();
            let cfg = SequencingConfig { seq_len: l, batch_lo: lo, batch_hi: lo + extra };
            let buckets = build_buckets(&streams, &cfg).unwrap();
            let mut rebuilt: Vec<Vec<EncodedSample>> = vec![Vec::new(); streams.len()];
            let mut seen = 0;
            for batch in iterate_for_training(&streams, &buckets, l) {
                for (slot, &u) in batch.users.iter().enumerate() {
                    prop_assert!(batch.slots[slot].len() <= l);
                    rebuilt[u].extend_from_slice(batch.slots[slot]);
                }
                seen += 1;
            }
            prop_assert_eq!(rebuilt, streams);
            prop_assert_eq!(seen, buckets.iter().map(|b| b.num_batches(l)).sum::<usize>());
            for b in &buckets {
                prop_assert_eq!(b.padded_len % l, 0);
                prop_assert_eq!(b.slots(), buckets[0].slots());
            }
        }
    }
}
