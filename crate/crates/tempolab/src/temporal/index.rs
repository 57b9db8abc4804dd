use std::collections::HashSet;
use std::io::{Read, Write};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Snapshot;
use crate::error::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"CPIX";
const INDEX_VERSION: u32 = 1;

/// Per-sequence presence bitmask across an ordered list of years.
///
/// Membership is keyed by the sequence string alone; identifiers are unstable
/// across releases and replay/unlearning act on sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalIndex {
    years: Vec<i32>,
    membership: IndexMap<String, u64>,
    per_year_sizes: Vec<usize>,
}

impl TemporalIndex {
    /// Build from deduplicated snapshots with strictly increasing years.
    pub fn build(snapshots: &[Snapshot]) -> Result<Self> {
        let years: Vec<i32> = snapshots.iter().map(|s| s.year).collect();
        if years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(
                "snapshot years must be strictly increasing".into(),
            ));
        }
        if years.len() > 64 {
            return Err(Error::Argument("at most 64 years supported".into()));
        }
        let mut membership: IndexMap<String, u64> = IndexMap::new();
        let mut per_year_sizes = vec![0usize; years.len()];
        for (i, snap) in snapshots.iter().enumerate() {
            let mut distinct: HashSet<&str> = HashSet::with_capacity(snap.records.len());
            for r in &snap.records {
                if distinct.insert(r.sequence.as_str()) {
                    *membership.entry(r.sequence.clone()).or_insert(0) |= 1u64 << i;
                }
            }
            per_year_sizes[i] = distinct.len();
        }
        Ok(TemporalIndex {
            years,
            membership,
            per_year_sizes,
        })
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn per_year_sizes(&self) -> &[usize] {
        &self.per_year_sizes
    }

    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    pub fn mask(&self, seq: &str) -> u64 {
        self.membership.get(seq).copied().unwrap_or(0)
    }

    fn year_pos(&self, year: i32) -> Result<usize> {
        self.years
            .iter()
            .position(|&y| y == year)
            .ok_or_else(|| Error::Argument(format!("year {year} not in index")))
    }

    /// Number of indexed years <= `upto` that contain `seq`; 0 if absent.
    pub fn multiplicity(&self, seq: &str, upto: i32) -> Result<u32> {
        let pos = self.year_pos(upto)?;
        let prefix = prefix_mask(pos);
        Ok((self.mask(seq) & prefix).count_ones())
    }

    /// Sequences present in the year before `t` but absent in `t`.
    pub fn forget_set(&self, t: i32) -> Result<HashSet<String>> {
        let pos = self.year_pos(t)?;
        if pos == 0 {
            return Err(Error::Argument(
                "forget set undefined for the first year".into(),
            ));
        }
        let prev = 1u64 << (pos - 1);
        let cur = 1u64 << pos;
        Ok(self
            .membership
            .iter()
            .filter(|(_, &m)| m & prev != 0 && m & cur == 0)
            .map(|(s, _)| s.clone())
            .collect())
    }

    /// Sequences present in both years.
    pub fn intersection(&self, y1: i32, y2: i32) -> Result<HashSet<String>> {
        let need = (1u64 << self.year_pos(y1)?) | (1u64 << self.year_pos(y2)?);
        Ok(self
            .membership
            .iter()
            .filter(|(_, &m)| m & need == need)
            .map(|(s, _)| s.clone())
            .collect())
    }

    /// Union of all indexed years <= `t`.
    pub fn union_upto(&self, t: i32) -> Result<HashSet<String>> {
        let prefix = prefix_mask(self.year_pos(t)?);
        Ok(self
            .membership
            .iter()
            .filter(|(_, &m)| m & prefix != 0)
            .map(|(s, _)| s.clone())
            .collect())
    }

    /// Distinct sequences of one indexed year, in first-seen order.
    pub fn year_sequences(&self, t: i32) -> Result<Vec<String>> {
        let bit = 1u64 << self.year_pos(t)?;
        Ok(self
            .membership
            .iter()
            .filter(|(_, &m)| m & bit != 0)
            .map(|(s, _)| s.clone())
            .collect())
    }

    /// Union over all indexed years, in first-seen order.
    pub fn union_all(&self) -> Vec<String> {
        self.membership.keys().cloned().collect()
    }

    /// All indexed sequences in first-seen order, borrowed.
    pub fn sequences(&self) -> impl Iterator<Item = &str> {
        self.membership.keys().map(String::as_str)
    }

    /// Multiplicity-weighted replay distribution over the union of years
    /// strictly before `t`: weight of x is its multiplicity up to t-1, so the
    /// total weight equals the sum of per-year distinct counts before t.
    pub fn replay_distribution(&self, t: i32) -> Result<ReplayDistribution> {
        let pos = self.year_pos(t)?;
        if pos == 0 {
            return Err(Error::Argument(
                "replay distribution needs at least one prior year".into(),
            ));
        }
        let prefix = prefix_mask(pos - 1);
        let mut keys = Vec::new();
        let mut weights = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0u64;
        for (seq, &m) in &self.membership {
            let c = (m & prefix).count_ones() as u64;
            if c > 0 {
                keys.push(seq.clone());
                weights.push(c);
                total += c;
                cumulative.push(total);
            }
        }
        if keys.is_empty() {
            return Err(Error::Argument("empty replay history".into()));
        }
        Ok(ReplayDistribution {
            keys,
            weights,
            cumulative,
        })
    }

    /// Binary index file: magic "CPIX", version u32, year list, then
    /// (length-prefixed sequence, bitmask) records, little-endian.
    pub fn export<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(INDEX_MAGIC)?;
        out.write_all(&INDEX_VERSION.to_le_bytes())?;
        out.write_all(&(self.years.len() as u32).to_le_bytes())?;
        for y in &self.years {
            out.write_all(&y.to_le_bytes())?;
        }
        out.write_all(&(self.membership.len() as u64).to_le_bytes())?;
        for (seq, mask) in &self.membership {
            out.write_all(&(seq.len() as u32).to_le_bytes())?;
            out.write_all(seq.as_bytes())?;
            out.write_all(&mask.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn import<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Integrity("bad index magic".into()));
        }
        let version = read_u32(input)?;
        if version != INDEX_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported index version {version}"
            )));
        }
        let n_years = read_u32(input)? as usize;
        let mut years = Vec::with_capacity(n_years);
        for _ in 0..n_years {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            years.push(i32::from_le_bytes(b));
        }
        let n = read_u64(input)? as usize;
        let mut membership = IndexMap::with_capacity(n);
        let mut per_year_sizes = vec![0usize; n_years];
        for _ in 0..n {
            let len = read_u32(input)? as usize;
            let mut s = vec![0u8; len];
            input.read_exact(&mut s)?;
            let seq = String::from_utf8(s)
                .map_err(|_| Error::Integrity("non-utf8 sequence in index".into()))?;
            let mask = read_u64(input)?;
            for (i, size) in per_year_sizes.iter_mut().enumerate() {
                if mask & (1u64 << i) != 0 {
                    *size += 1;
                }
            }
            membership.insert(seq, mask);
        }
        Ok(TemporalIndex {
            years,
            membership,
            per_year_sizes,
        })
    }
}

fn prefix_mask(pos: usize) -> u64 {
    if pos + 1 >= 64 {
        u64::MAX
    } else {
        (1u64 << (pos + 1)) - 1
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Multiplicity-proportional sampling distribution with prefix sums.
#[derive(Debug, Clone)]
pub struct ReplayDistribution {
    pub keys: Vec<String>,
    pub weights: Vec<u64>,
    pub cumulative: Vec<u64>,
}

impl ReplayDistribution {
    pub fn total(&self) -> u64 {
        *self.cumulative.last().unwrap_or(&0)
    }

    /// One draw by binary search over the prefix sums.
    pub fn sample_one(&self, rng: &mut ChaCha8Rng) -> &str {
        let u = rng.gen_range(0..self.total());
        let idx = self.cumulative.partition_point(|&c| c <= u);
        &self.keys[idx]
    }

    /// `n` i.i.d. multiplicity-weighted draws, reproducible under the seed.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        (0..n).map(|_| self.sample_one(rng).to_string()).collect()
    }
}
