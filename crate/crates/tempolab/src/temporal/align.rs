//! Global-alignment sequence identity and identity-based filtering.
//!
//! Scoring: match +1, mismatch -1, linear gap -1. Identity is the number of
//! identical aligned residue pairs over the full alignment length including
//! gap columns. Among equal-score alignments the one with the most identical
//! pairs is used, which pins the alignment length through
//! `length = 2*matches - score` and keeps the identity value symmetric.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;

use crate::corpus::Snapshot;
use crate::error::{Error, Result};
use crate::temporal::TemporalIndex;

pub const DEFAULT_IDENTITY_BINS: usize = 50;

/// Identity as an exact fraction, for tie-breaks without float comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct IdentityFrac {
    matches: u32,
    length: u32,
}

impl IdentityFrac {
    fn value(self) -> f64 {
        if self.length == 0 {
            0.0
        } else {
            self.matches as f64 / self.length as f64
        }
    }

    fn gt(self, other: IdentityFrac) -> bool {
        (self.matches as u64) * (other.length as u64) > (other.matches as u64) * (self.length as u64)
    }
}

fn align_identity(s1: &[u8], s2: &[u8]) -> IdentityFrac {
    let n = s1.len();
    let m = s2.len();
    // Cell value: lexicographic max of (score, matches).
    let mut prev: Vec<(i32, u32)> = (0..=m).map(|j| (-(j as i32), 0)).collect();
    let mut cur = vec![(0i32, 0u32); m + 1];
    for i in 1..=n {
        cur[0] = (-(i as i32), 0);
        let a = s1[i - 1];
        for j in 1..=m {
            let is_match = a == s2[j - 1];
            let diag = (
                prev[j - 1].0 + if is_match { 1 } else { -1 },
                prev[j - 1].1 + is_match as u32,
            );
            let left = (cur[j - 1].0 - 1, cur[j - 1].1);
            let up = (prev[j].0 - 1, prev[j].1);
            // Preference for ties: diagonal, then gap in s1, then gap in s2.
            let mut best = diag;
            if left > best {
                best = left;
            }
            if up > best {
                best = up;
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (score, matches) = prev[m];
    let length = (2 * matches as i64 - score as i64) as u32;
    IdentityFrac { matches, length }
}

/// Identity fraction in [0,1] under global alignment.
pub fn pairwise_identity(s1: &str, s2: &str) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::Argument("empty sequence in identity".into()));
    }
    Ok(align_identity(s1.as_bytes(), s2.as_bytes()).value())
}

fn kmer_set(s: &[u8], k: usize) -> HashSet<&[u8]> {
    if s.len() < k {
        return HashSet::new();
    }
    s.windows(k).collect()
}

fn nearest_frac(query: &str, refs: &[String], prefilter_k: usize) -> Result<(usize, IdentityFrac)> {
    if refs.is_empty() {
        return Err(Error::Argument("empty reference set".into()));
    }
    if query.is_empty() {
        return Err(Error::Argument("empty query".into()));
    }
    let candidates: Vec<usize> = if prefilter_k == 0 || refs.len() <= 20 {
        (0..refs.len()).collect()
    } else {
        // Rank refs by shared k-mer count; align only the top slice.
        let q = kmer_set(query.as_bytes(), prefilter_k);
        let mut ranked: Vec<(usize, usize)> = refs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let shared = kmer_set(r.as_bytes(), prefilter_k)
                    .intersection(&q)
                    .count();
                (i, shared)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let keep = (refs.len() / 10).max(20).min(refs.len());
        ranked.truncate(keep);
        ranked.into_iter().map(|(i, _)| i).collect()
    };
    let qb = query.as_bytes();
    let mut best_idx = candidates[0];
    let mut best = align_identity(qb, refs[best_idx].as_bytes());
    for &i in &candidates[1..] {
        let frac = align_identity(qb, refs[i].as_bytes());
        // Ties go to the lowest reference index.
        if frac.gt(best) || (frac == best && i < best_idx) {
            best = frac;
            best_idx = i;
        }
    }
    Ok((best_idx, best))
}

/// Reference maximizing pairwise identity. With `prefilter_k = 0` this is the
/// exhaustive maximum; with a k-mer prefilter only the top-ranked candidates
/// are aligned. Equal-best ties return the lowest index.
pub fn nearest_identity(query: &str, refs: &[String], prefilter_k: usize) -> Result<(usize, f64)> {
    let (idx, frac) = nearest_frac(query, refs, prefilter_k)?;
    Ok((idx, frac.value()))
}

/// Per-query nearest-reference identities plus a fixed-bin histogram.
#[derive(Debug, Clone)]
pub struct IdentityReport {
    /// (query index, best reference index, identity).
    pub per_sequence: Vec<(usize, usize, f64)>,
    pub histogram: Vec<usize>,
    pub bin_width: f64,
}

impl IdentityReport {
    pub fn compute(queries: &[String], refs: &[String], prefilter_k: usize, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Argument("need at least 2 histogram bins".into()));
        }
        let results: Vec<(usize, f64)> = queries
            .par_iter()
            .map(|q| nearest_identity(q, refs, prefilter_k))
            .collect::<Result<Vec<_>>>()?;
        let mut histogram = vec![0usize; bins];
        let mut per_sequence = Vec::with_capacity(queries.len());
        for (qi, (ri, id)) in results.into_iter().enumerate() {
            let bin = ((id * bins as f64) as usize).min(bins - 1);
            histogram[bin] += 1;
            per_sequence.push((qi, ri, id));
        }
        Ok(IdentityReport {
            per_sequence,
            histogram,
            bin_width: 1.0 / bins as f64,
        })
    }

    pub fn normalized_histogram(&self) -> Vec<f64> {
        let total = self.per_sequence.len().max(1) as f64;
        self.histogram.iter().map(|&c| c as f64 / total).collect()
    }

    /// CSV export: query_idx,ref_idx,identity.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "query_idx,ref_idx,identity")?;
        for (q, r, id) in &self.per_sequence {
            writeln!(out, "{q},{r},{id}")?;
        }
        Ok(())
    }
}

/// Per-bin difference of normalized nearest-identity histograms between one
/// indexed year and a baseline year. Densities sum to 1 before differencing,
/// so the delta sums to 0.
pub fn identity_density_delta(
    index: &TemporalIndex,
    year: i32,
    baseline: i32,
    refs: &[String],
    bins: usize,
) -> Result<Vec<f64>> {
    let year_seqs = index.year_sequences(year)?;
    let base_seqs = index.year_sequences(baseline)?;
    let year_hist = IdentityReport::compute(&year_seqs, refs, 0, bins)?.normalized_histogram();
    let base_hist = IdentityReport::compute(&base_seqs, refs, 0, bins)?.normalized_histogram();
    Ok(year_hist
        .iter()
        .zip(&base_hist)
        .map(|(a, b)| a - b)
        .collect())
}

/// Remove records whose nearest identity against `refs` is >= threshold.
/// Empty refs returns the snapshot unchanged with the warning flag set.
pub fn filter_by_identity(
    snapshot: &Snapshot,
    refs: &[String],
    threshold: f64,
    prefilter_k: usize,
) -> Result<(Snapshot, bool)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Argument("threshold must be in (0, 1]".into()));
    }
    if refs.is_empty() {
        return Ok((snapshot.clone(), true));
    }
    let keep: Vec<bool> = snapshot
        .records
        .par_iter()
        .map(|r| {
            nearest_identity(&r.sequence, refs, prefilter_k).map(|(_, id)| id < threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<_> = snapshot
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    let counts = crate::corpus::SnapshotCounts {
        raw: snapshot.records.len(),
        deduplicated: records.len(),
    };
    Ok((
        Snapshot {
            year: snapshot.year,
            records,
            counts,
        },
        false,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{deduplicate, SequenceRecord};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn identical_strings_are_identity_one() {
        assert_eq!(pairwise_identity("ACDE", "ACDE").unwrap(), 1.0);
    }

    #[test]
    fn single_mismatch_over_four() {
        // Exhaustive DP on the 4x4 table: 3 matches over alignment length 4.
        assert_eq!(pairwise_identity("ACDE", "ACDF").unwrap(), 0.75);
    }

    #[test]
    fn disjoint_alphabets_are_zero() {
        assert_eq!(pairwise_identity("AAAA", "CCCC").unwrap(), 0.0);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        assert!(pairwise_identity("", "AC").is_err());
        assert!(pairwise_identity("AC", "").is_err());
    }

    #[test]
    fn gap_example() {
        // "AC" vs "AGC": align A C with a gap for G -> 2 matches over length 3.
        let id = pairwise_identity("AC", "AGC").unwrap();
        assert!((id - 2.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn identity_is_symmetric_and_bounded(
            a in "[ACDG]{1,12}",
            b in "[ACDG]{1,12}",
        ) {
            let ab = pairwise_identity(&a, &b).unwrap();
            let ba = pairwise_identity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab == 1.0) == (a == b));
        }
    }

    #[test]
    fn nearest_finds_exact_match() {
        let refs: Vec<String> = ["WWWW", "ACDE", "GGGG"].iter().map(|s| s.to_string()).collect();
        let (idx, id) = nearest_identity("ACDE", &refs, 0).unwrap();
        assert_eq!((idx, id), (1, 1.0));
    }

    #[test]
    fn nearest_ties_return_lowest_index() {
        let refs: Vec<String> = ["ACDE", "ACDE"].iter().map(|s| s.to_string()).collect();
        let (idx, _) = nearest_identity("ACDE", &refs, 0).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn nearest_rejects_empty_refs() {
        assert!(nearest_identity("ACDE", &[], 0).is_err());
    }

    #[test]
    fn prefilter_matches_brute_force_on_random_corpus() {
        let mut rng = crate::rng::stream(11, "align-test", &[]);
        let alphabet = b"ACDEFGHIKLMNPQRSTVWY";
        let mut mk = |len: usize| -> String {
            (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char)
                .collect()
        };
        let refs: Vec<String> = (0..50).map(|_| mk(18)).collect();
        let queries: Vec<String> = (0..50)
            .map(|i| {
                if i % 2 == 0 {
                    // Mutated copies keep the prefilter honest.
                    let mut s: Vec<u8> = refs[i].bytes().collect();
                    let pos = i % s.len();
                    s[pos] = alphabet[(i * 7) % alphabet.len()];
                    String::from_utf8(s).unwrap()
                } else {
                    mk(18)
                }
            })
            .collect();
        for q in &queries {
            let brute = (0..refs.len())
                .map(|i| (i, pairwise_identity(q, &refs[i]).unwrap()))
                .fold((0usize, -1.0f64), |acc, (i, id)| {
                    if id > acc.1 {
                        (i, id)
                    } else {
                        acc
                    }
                });
            let exact = nearest_identity(q, &refs, 0).unwrap();
            assert_eq!(exact.0, brute.0);
            assert!((exact.1 - brute.1).abs() < 1e-12);
        }
    }

    #[test]
    fn density_delta_is_zero_for_same_year() {
        let snap = |year: i32, seqs: &[&str]| {
            deduplicate(
                seqs.iter()
                    .enumerate()
                    .map(|(i, s)| SequenceRecord {
                        identifier: format!("i{i}"),
                        sequence: s.to_string(),
                        year,
                    })
                    .collect(),
            )
            .unwrap()
        };
        let idx = TemporalIndex::build(&[snap(1, &["ACDE", "WWWW"]), snap(2, &["ACDE", "GGGG"])])
            .unwrap();
        let refs = vec!["ACDE".to_string(), "WWYY".to_string()];
        let delta = identity_density_delta(&idx, 1, 1, &refs, 10).unwrap();
        assert!(delta.iter().all(|&d| d == 0.0));
        let delta = identity_density_delta(&idx, 2, 1, &refs, 10).unwrap();
        assert!(delta.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn density_delta_moves_mass_between_extremes() {
        let snap = |year: i32, seqs: &[&str]| {
            deduplicate(
                seqs.iter()
                    .enumerate()
                    .map(|(i, s)| SequenceRecord {
                        identifier: format!("i{i}"),
                        sequence: s.to_string(),
                        year,
                    })
                    .collect(),
            )
            .unwrap()
        };
        // Baseline all identity 1.0 against refs, later year all identity 0.0.
        let idx = TemporalIndex::build(&[snap(1, &["AAAA"]), snap(2, &["CCCC"])]).unwrap();
        let refs = vec!["AAAA".to_string()];
        let delta = identity_density_delta(&idx, 2, 1, &refs, 10).unwrap();
        assert_eq!(delta[0], 1.0);
        assert_eq!(delta[9], -1.0);
        assert!(delta[1..9].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn filter_removes_planted_near_duplicates() {
        let base = "ACDEFGHIKLMNPQRSTVWY";
        let mut near = base.to_string();
        // One substitution in 20 positions: 95% identity.
        near.replace_range(0..1, "W");
        let snap = deduplicate(vec![
            SequenceRecord {
                identifier: "clean".into(),
                sequence: "WYWYWYWYWYWYWYWYWYWY".into(),
                year: 1,
            },
            SequenceRecord {
                identifier: "near".into(),
                sequence: near.clone(),
                year: 1,
            },
        ])
        .unwrap();
        let refs = vec![base.to_string()];
        let (filtered, warned) = filter_by_identity(&snap, &refs, 0.9, 0).unwrap();
        assert!(!warned);
        assert_eq!(filtered.records.len(), 1);
        assert_eq!(filtered.records[0].identifier, "clean");

        // Threshold 1.0 with no exact matches leaves everything.
        let (unchanged, _) = filter_by_identity(&snap, &refs, 1.0, 0).unwrap();
        assert_eq!(unchanged.records.len(), 2);

        // Empty refs: unchanged with a warning.
        let (same, warned) = filter_by_identity(&snap, &[], 0.9, 0).unwrap();
        assert!(warned);
        assert_eq!(same.records, snap.records);
    }
}
