//! Synthetic temporal benchmarks with known ground truth.
//!
//! Clean sequences come from a mixture of per-position residue profiles; noise
//! sequences are i.i.d. draws from the grammar's marginal residue frequencies,
//! so noise is distinguishable only by its missing positional structure.
//! Yearly snapshots evolve by culling (noise preferentially) and adding fresh
//! sequences, which plants a persistence signal: sequences that survive many
//! years are disproportionately clean.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{deduplicate, SequenceRecord, Snapshot, SnapshotFormat, SnapshotManifest, CANONICAL_RESIDUES};
use crate::error::{Error, Result};
use crate::rng::stream;

pub const MIN_SEQUENCE_LEN: usize = 8;

/// One motif: a per-position categorical distribution over the 20 canonical
/// residues.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotifProfile {
    pub positions: Vec<[f64; 20]>,
}

/// Mixture of motif profiles with a bounded length distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotifGrammar {
    pub motifs: Vec<MotifProfile>,
    pub mixture_weights: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
}

impl MotifGrammar {
    /// Random grammar with peaked per-position profiles: one dominant residue
    /// per position holding `peak` of the mass, the rest spread uniformly.
    pub fn random(n_motifs: usize, min_len: usize, max_len: usize, peak: f64, seed: u64) -> Result<Self> {
        if min_len < MIN_SEQUENCE_LEN || max_len < min_len {
            return Err(Error::Argument(format!(
                "length bounds must satisfy {MIN_SEQUENCE_LEN} <= min <= max"
            )));
        }
        if !(0.05..1.0).contains(&peak) {
            return Err(Error::Argument("peak mass must be in [0.05, 1)".into()));
        }
        let mut rng = stream(seed, "grammar", &[]);
        let motifs = (0..n_motifs)
            .map(|_| {
                let positions = (0..max_len)
                    .map(|_| {
                        let dominant = rng.gen_range(0..20);
                        let rest = (1.0 - peak) / 19.0;
                        let mut p = [rest; 20];
                        p[dominant] = peak;
                        p
                    })
                    .collect();
                MotifProfile { positions }
            })
            .collect();
        Ok(MotifGrammar {
            motifs,
            mixture_weights: vec![1.0 / n_motifs as f64; n_motifs],
            min_len,
            max_len,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.motifs.is_empty() || self.motifs.len() != self.mixture_weights.len() {
            return Err(Error::Argument("motifs and mixture weights must align".into()));
        }
        if (self.mixture_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Argument("mixture weights must sum to 1".into()));
        }
        for m in &self.motifs {
            if m.positions.len() < self.max_len {
                return Err(Error::Argument("motif shorter than max_len".into()));
            }
            for p in &m.positions {
                if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Argument("profile row must sum to 1".into()));
                }
            }
        }
        if self.min_len < MIN_SEQUENCE_LEN || self.max_len < self.min_len {
            return Err(Error::Argument("invalid length bounds".into()));
        }
        Ok(())
    }

    fn sample_length(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.min_len..=self.max_len)
    }

    /// Sample one clean sequence.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> String {
        let motif = sample_categorical(&self.mixture_weights, rng);
        let len = self.sample_length(rng);
        (0..len)
            .map(|i| {
                let r = sample_categorical(&self.motifs[motif].positions[i], rng);
                CANONICAL_RESIDUES[r] as char
            })
            .collect()
    }

    /// Mixture-averaged marginal residue frequencies over all positions.
    pub fn marginal_frequencies(&self) -> [f64; 20] {
        let mut freq = [0.0f64; 20];
        let mut total = 0.0;
        for (m, &w) in self.motifs.iter().zip(&self.mixture_weights) {
            for p in &m.positions[..self.max_len] {
                for (f, &pi) in freq.iter_mut().zip(p) {
                    *f += w * pi;
                }
                total += w;
            }
        }
        for f in &mut freq {
            *f /= total;
        }
        freq
    }

    /// Sample one noise sequence: i.i.d. residues from the marginal.
    pub fn sample_noise(&self, rng: &mut ChaCha8Rng) -> String {
        let freq = self.marginal_frequencies();
        let len = self.sample_length(rng);
        (0..len)
            .map(|_| CANONICAL_RESIDUES[sample_categorical(&freq, rng)] as char)
            .collect()
    }

    /// Exact log-likelihood of a sequence under the mixture (length term
    /// omitted; it is shared by all sequences of equal length).
    pub fn log_likelihood(&self, seq: &str) -> Result<f64> {
        let ids: Vec<usize> = seq
            .bytes()
            .map(|c| {
                CANONICAL_RESIDUES
                    .iter()
                    .position(|&r| r == c)
                    .ok_or_else(|| Error::Argument(format!("non-canonical residue '{}'", c as char)))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.len() > self.max_len {
            return Err(Error::Argument("sequence longer than grammar max_len".into()));
        }
        let per_motif: Vec<f64> = self
            .motifs
            .iter()
            .zip(&self.mixture_weights)
            .map(|(m, &w)| {
                w.ln()
                    + ids
                        .iter()
                        .enumerate()
                        .map(|(i, &r)| m.positions[i][r].ln())
                        .sum::<f64>()
            })
            .collect();
        Ok(log_sum_exp(&per_motif))
    }
}

fn sample_categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Timeline dynamics: yearly additions with a noise fraction, plus yearly
/// culling that removes noise preferentially.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSpec {
    pub n_years: usize,
    pub additions_per_year: usize,
    pub noise_fraction: f64,
    pub cull_noise_prob: f64,
    pub cull_clean_prob: f64,
    pub n_validation: usize,
    pub first_year: i32,
    pub seed: u64,
}

impl TimelineSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("noise_fraction", self.noise_fraction),
            ("cull_noise_prob", self.cull_noise_prob),
            ("cull_clean_prob", self.cull_clean_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Argument(format!("{name} must be in [0,1]")));
            }
        }
        if self.cull_noise_prob < self.cull_clean_prob {
            return Err(Error::Argument(
                "cull_noise_prob must be >= cull_clean_prob".into(),
            ));
        }
        if self.n_years == 0 {
            return Err(Error::Argument("need at least one year".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Noise,
}

/// A generated temporal benchmark with per-sequence provenance labels and a
/// clean validation set disjoint from training by exact match.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub snapshots: Vec<Snapshot>,
    pub validation: Vec<SequenceRecord>,
    pub labels: HashMap<String, Provenance>,
}

pub fn generate_benchmark(grammar: &MotifGrammar, spec: &TimelineSpec) -> Result<SyntheticBenchmark> {
    grammar.validate()?;
    spec.validate()?;
    let mut rng = stream(spec.seed, "synthgen", &[]);
    let mut labels: HashMap<String, Provenance> = HashMap::new();
    // Population carries (identifier, sequence); identifiers are stable for
    // sequences that persist across years.
    let mut population: Vec<(String, String)> = Vec::new();
    let mut next_id = 0usize;
    let mut snapshots = Vec::with_capacity(spec.n_years);

    for year_idx in 0..spec.n_years {
        if year_idx > 0 {
            population.retain(|(_, seq)| {
                let p = match labels[seq] {
                    Provenance::Noise => spec.cull_noise_prob,
                    Provenance::Clean => spec.cull_clean_prob,
                };
                rng.gen::<f64>() >= p
            });
        }
        for _ in 0..spec.additions_per_year {
            let is_noise = rng.gen::<f64>() < spec.noise_fraction;
            let mut seq = if is_noise {
                grammar.sample_noise(&mut rng)
            } else {
                grammar.sample(&mut rng)
            };
            // Regenerate on the rare collision so labels stay unambiguous.
            let mut tries = 0;
            while labels.contains_key(&seq) && tries < 16 {
                seq = if is_noise {
                    grammar.sample_noise(&mut rng)
                } else {
                    grammar.sample(&mut rng)
                };
                tries += 1;
            }
            if labels.contains_key(&seq) {
                continue;
            }
            labels.insert(
                seq.clone(),
                if is_noise {
                    Provenance::Noise
                } else {
                    Provenance::Clean
                },
            );
            population.push((format!("S{next_id:07}"), seq));
            next_id += 1;
        }
        if population.is_empty() {
            return Err(Error::Argument(format!(
                "snapshot for year index {year_idx} is empty; increase additions or lower cull rates"
            )));
        }
        let year = spec.first_year + year_idx as i32;
        let records = population
            .iter()
            .map(|(id, seq)| SequenceRecord {
                identifier: id.clone(),
                sequence: seq.clone(),
                year,
            })
            .collect();
        snapshots.push(deduplicate(records)?);
    }

    let mut validation = Vec::with_capacity(spec.n_validation);
    let mut v = 0usize;
    while validation.len() < spec.n_validation {
        let seq = grammar.sample(&mut rng);
        if labels.contains_key(&seq) {
            continue; // exact-match overlap with training
        }
        validation.push(SequenceRecord {
            identifier: format!("V{v:06}"),
            sequence: seq,
            year: 0,
        });
        v += 1;
    }

    Ok(SyntheticBenchmark {
        snapshots,
        validation,
        labels,
    })
}

/// Deep-mutational-scanning stand-in: single/double substitutions of a
/// grammar-sampled wild type, with ground-truth fitness equal to the exact
/// grammar log-likelihood delta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmsVariant {
    pub subs: Vec<(usize, char)>,
    pub fitness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmsAssay {
    pub assay_id: String,
    pub wild_type: String,
    pub variants: Vec<DmsVariant>,
}

pub fn generate_dms_assay(
    grammar: &MotifGrammar,
    rng: &mut ChaCha8Rng,
    n_variants: usize,
    assay_id: &str,
) -> Result<DmsAssay> {
    grammar.validate()?;
    if n_variants < 2 {
        return Err(Error::Argument("an assay needs at least 2 variants".into()));
    }
    let wild_type = grammar.sample(rng);
    let wt_ll = grammar.log_likelihood(&wild_type)?;
    let wt_bytes = wild_type.as_bytes();
    let mut variants = Vec::with_capacity(n_variants);
    for _ in 0..n_variants {
        let n_subs = if rng.gen::<f64>() < 0.5 { 1 } else { 2 };
        let mut subs: Vec<(usize, char)> = Vec::with_capacity(n_subs);
        while subs.len() < n_subs {
            let pos = rng.gen_range(0..wt_bytes.len());
            if subs.iter().any(|&(p, _)| p == pos) {
                continue;
            }
            let new = CANONICAL_RESIDUES[rng.gen_range(0..20)];
            if new == wt_bytes[pos] {
                continue; // substitutions must change the residue
            }
            subs.push((pos, new as char));
        }
        subs.sort_by_key(|&(p, _)| p);
        let mut mutated = wt_bytes.to_vec();
        for &(pos, res) in &subs {
            mutated[pos] = res as u8;
        }
        let var_seq = String::from_utf8(mutated).unwrap();
        let fitness = grammar.log_likelihood(&var_seq)? - wt_ll;
        variants.push(DmsVariant { subs, fitness });
    }
    Ok(DmsAssay {
        assay_id: assay_id.to_string(),
        wild_type,
        variants,
    })
}

impl DmsAssay {
    pub fn apply_variant(&self, variant: &DmsVariant) -> String {
        let mut s: Vec<u8> = self.wild_type.bytes().collect();
        for &(pos, res) in &variant.subs {
            s[pos] = res as u8;
        }
        String::from_utf8(s).unwrap()
    }
}

pub fn sequence_digest(seq: &str) -> String {
    hex::encode(Sha256::digest(seq.as_bytes()))
}

/// Write the benchmark in the corpus JSONL + manifest format, a labels CSV
/// (sequence_digest,label) and the validation set as JSONL.
pub fn write_benchmark(benchmark: &SyntheticBenchmark, dir: &Path) -> Result<Vec<SnapshotManifest>> {
    std::fs::create_dir_all(dir)?;
    let mut manifests = Vec::new();
    for snap in &benchmark.snapshots {
        let path = dir.join(format!("year_{}.jsonl", snap.year));
        let mut out = BufWriter::new(File::create(&path)?);
        crate::corpus::serialize_jsonl(snap, &mut out)?;
        out.flush()?;
        drop(out);
        let manifest = SnapshotManifest {
            year: snap.year,
            path: path.clone(),
            format: SnapshotFormat::Jsonl,
            declared_count: Some(snap.records.len()),
            content_digest: Some(crate::corpus::file_digest(&path)?),
        };
        let mpath = dir.join(format!("year_{}.manifest.json", snap.year));
        serde_json::to_writer_pretty(File::create(&mpath)?, &manifest)?;
        manifests.push(manifest);
    }
    let mut labels = BufWriter::new(File::create(dir.join("labels.csv"))?);
    writeln!(labels, "sequence_digest,label")?;
    let mut entries: Vec<(&String, &Provenance)> = benchmark.labels.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    for (seq, label) in entries {
        let tag = match label {
            Provenance::Clean => "clean",
            Provenance::Noise => "noise",
        };
        writeln!(labels, "{},{tag}", sequence_digest(seq))?;
    }
    labels.flush()?;
    let mut val = BufWriter::new(File::create(dir.join("validation.jsonl"))?);
    for r in &benchmark.validation {
        writeln!(val, "{}", serde_json::json!({"id": r.identifier, "seq": r.sequence}))?;
    }
    val.flush()?;
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::TemporalIndex;
    use std::collections::HashSet;

    fn grammar() -> MotifGrammar {
        MotifGrammar::random(2, 10, 14, 0.7, 42).unwrap()
    }

    fn spec() -> TimelineSpec {
        TimelineSpec {
            n_years: 4,
            additions_per_year: 300,
            noise_fraction: 0.3,
            cull_noise_prob: 0.5,
            cull_clean_prob: 0.02,
            n_validation: 50,
            first_year: 2015,
            seed: 7,
        }
    }

    #[test]
    fn deterministic_generation() {
        let g = grammar();
        let a = generate_benchmark(&g, &spec()).unwrap();
        let b = generate_benchmark(&g, &spec()).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
        assert_eq!(a.validation, b.validation);
    }

    #[test]
    fn zero_cull_gives_nested_snapshots() {
        let mut s = spec();
        s.cull_noise_prob = 0.0;
        s.cull_clean_prob = 0.0;
        let b = generate_benchmark(&grammar(), &s).unwrap();
        for w in b.snapshots.windows(2) {
            let earlier: HashSet<&str> = w[0].sequences().collect();
            let later: HashSet<&str> = w[1].sequences().collect();
            assert!(earlier.is_subset(&later));
        }
    }

    #[test]
    fn zero_noise_fraction_labels_all_clean() {
        let mut s = spec();
        s.noise_fraction = 0.0;
        let b = generate_benchmark(&grammar(), &s).unwrap();
        assert!(b.labels.values().all(|&l| l == Provenance::Clean));
    }

    #[test]
    fn validation_is_disjoint_from_training() {
        let b = generate_benchmark(&grammar(), &spec()).unwrap();
        let train: HashSet<&str> = b.snapshots.iter().flat_map(|s| s.sequences()).collect();
        assert!(b.validation.iter().all(|v| !train.contains(v.sequence.as_str())));
        assert_eq!(b.validation.len(), 50);
    }

    #[test]
    fn labels_cover_every_generated_sequence() {
        let b = generate_benchmark(&grammar(), &spec()).unwrap();
        for s in &b.snapshots {
            for r in &s.records {
                assert!(b.labels.contains_key(&r.sequence));
            }
        }
    }

    #[test]
    fn persistent_sequences_are_cleaner_than_transient_ones() {
        let mut s = spec();
        s.n_years = 5;
        s.additions_per_year = 2000;
        let b = generate_benchmark(&grammar(), &s).unwrap();
        let idx = TemporalIndex::build(&b.snapshots).unwrap();
        let last = *idx.years().last().unwrap();
        let noise_frac = |mult: u32| -> f64 {
            let mut noise = 0usize;
            let mut total = 0usize;
            for seq in idx.union_all() {
                if idx.multiplicity(&seq, last).unwrap() == mult {
                    total += 1;
                    if b.labels[&seq] == Provenance::Noise {
                        noise += 1;
                    }
                }
            }
            noise as f64 / total.max(1) as f64
        };
        assert!(noise_frac(s.n_years as u32) < noise_frac(1));
    }

    #[test]
    fn mean_multiplicity_of_clean_exceeds_noise() {
        let b = generate_benchmark(&grammar(), &spec()).unwrap();
        let idx = TemporalIndex::build(&b.snapshots).unwrap();
        let last = *idx.years().last().unwrap();
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for seq in idx.union_all() {
            let k = (b.labels[&seq] == Provenance::Noise) as usize;
            sums[k] += idx.multiplicity(&seq, last).unwrap() as f64;
            counts[k] += 1;
        }
        let clean_mean = sums[0] / counts[0] as f64;
        let noise_mean = sums[1] / counts[1] as f64;
        assert!(clean_mean > noise_mean, "clean {clean_mean} vs noise {noise_mean}");
    }

    #[test]
    fn empty_year_is_a_generation_error() {
        let mut s = spec();
        s.additions_per_year = 0;
        s.cull_noise_prob = 1.0;
        s.cull_clean_prob = 1.0;
        assert!(generate_benchmark(&grammar(), &s).is_err());
    }

    #[test]
    fn assay_fitness_matches_per_position_recomputation() {
        let g = grammar();
        let mut rng = stream(3, "assay", &[]);
        let assay = generate_dms_assay(&g, &mut rng, 10, "toy").unwrap();
        assert_eq!(assay.variants.len(), 10);
        for v in &assay.variants {
            assert!(!v.subs.is_empty());
            for &(pos, res) in &v.subs {
                assert!(pos < assay.wild_type.len());
                assert_ne!(assay.wild_type.as_bytes()[pos], res as u8);
            }
            // Independent recomputation from the profile tables.
            let mutated = assay.apply_variant(v);
            let expect = g.log_likelihood(&mutated).unwrap() - g.log_likelihood(&assay.wild_type).unwrap();
            assert!((v.fitness - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_substitution_scores_best_at_a_position() {
        // Single-motif grammar: the likelihood factorizes exactly per position.
        let g = MotifGrammar::random(1, 10, 12, 0.7, 5).unwrap();
        let mut rng = stream(9, "assay", &[]);
        let wt = g.sample(&mut rng);
        let pos = 3;
        let profile = &g.motifs[0].positions[pos];
        let argmax = (0..20).max_by(|&a, &b| profile[a].partial_cmp(&profile[b]).unwrap()).unwrap();
        let fitness_of = |res: u8| {
            let mut s: Vec<u8> = wt.bytes().collect();
            s[pos] = res;
            g.log_likelihood(std::str::from_utf8(&s).unwrap()).unwrap()
        };
        let best = fitness_of(CANONICAL_RESIDUES[argmax]);
        for r in CANONICAL_RESIDUES {
            assert!(fitness_of(*r) <= best + 1e-12);
        }
    }

    #[test]
    fn benchmark_round_trips_through_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_benchmark(&grammar(), &spec()).unwrap();
        let manifests = write_benchmark(&b, dir.path()).unwrap();
        for (m, snap) in manifests.iter().zip(&b.snapshots) {
            let loaded = crate::corpus::load_snapshot(m).unwrap();
            assert_eq!(&loaded, snap);
        }
        assert!(dir.path().join("labels.csv").exists());
        assert!(dir.path().join("validation.jsonl").exists());
    }
}
