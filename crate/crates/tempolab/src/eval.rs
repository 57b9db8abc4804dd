//! Metric families: validation perplexity and sequence recovery,
//! mutation-effect ranking with Spearman rho, win-rate aggregation over
//! metric tables, and per-sequence statistics with two-sample QQ quantiles.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward, masked_ce_loss, tokenize, Batch, ModelConfig, ParameterSet, Vocabulary};
use crate::rng::stream;
use crate::synthgen::DmsAssay;
use crate::trainer::apply_masking;

/// Perplexity and recovery over a validation set under one fixed masking.
#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub recovery: f64,
    /// Standard error of the per-sequence mean log-losses.
    pub std_err: f64,
    pub n_sequences: usize,
    pub n_masked_tokens: usize,
}

/// The fixed evaluation masking of one sequence. The mask depends on the
/// sequence content (not its position in the set), so reports are invariant
/// to validation-set ordering.
pub fn eval_masked_batch(
    seq: &str,
    config: &ModelConfig,
    mask_rate: f64,
    eval_mask_seed: u64,
) -> Result<Batch> {
    let rows = vec![tokenize(seq, config)];
    let mut batch = Batch::from_token_rows(&rows)?;
    apply_masking(&mut batch, mask_rate, &mut stream(eval_mask_seed, seq, &[]));
    Ok(batch)
}

fn argmax_lowest_id(row: &[f32]) -> u16 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u16
}

/// Per-sequence evaluation tally.
struct SeqEval {
    loss_sum: f64,
    n_masked: usize,
    n_correct: usize,
}

fn eval_sequence(
    params: &ParameterSet<f32>,
    seq: &str,
    mask_rate: f64,
    eval_mask_seed: u64,
) -> Result<SeqEval> {
    let batch = eval_masked_batch(seq, &params.config, mask_rate, eval_mask_seed)?;
    if batch.n_masked() == 0 {
        // Sequences with no canonical residue (all X) carry no signal.
        return Ok(SeqEval {
            loss_sum: 0.0,
            n_masked: 0,
            n_correct: 0,
        });
    }
    let logits = forward(params, &batch)?;
    let (_, per_token) = masked_ce_loss(&logits, &batch)?;
    let mut n_correct = 0usize;
    let vsize = Vocabulary::SIZE;
    for (i, &m) in batch.mask_positions.iter().enumerate() {
        if m && argmax_lowest_id(&logits[i * vsize..(i + 1) * vsize]) == batch.targets[i] {
            n_correct += 1;
        }
    }
    Ok(SeqEval {
        loss_sum: per_token.iter().sum(),
        n_masked: per_token.len(),
        n_correct,
    })
}

/// Pseudo-perplexity under one fixed masking per sequence, with top-1
/// recovery on the same masking. Deterministic given (params, valset, seed).
pub fn validation_perplexity(
    params: &ParameterSet<f32>,
    valset: &[String],
    mask_rate: f64,
    eval_mask_seed: u64,
) -> Result<PerplexityReport> {
    if valset.is_empty() {
        return Err(Error::Argument("empty validation set".into()));
    }
    let evals: Vec<SeqEval> = valset
        .par_iter()
        .map(|s| eval_sequence(params, s, mask_rate, eval_mask_seed))
        .collect::<Result<_>>()?;
    let mut per_seq_means: Vec<f64> = evals
        .iter()
        .filter(|e| e.n_masked > 0)
        .map(|e| e.loss_sum / e.n_masked as f64)
        .collect();
    if per_seq_means.is_empty() {
        return Err(Error::Argument(
            "validation set has no maskable residues".into(),
        ));
    }
    // Order-independent reduction: sort before summing so the report is
    // bit-identical however the set was shuffled.
    per_seq_means.sort_by(f64::total_cmp);
    let mut sorted_tallies: Vec<(f64, usize, usize)> = evals
        .iter()
        .map(|e| (e.loss_sum, e.n_masked, e.n_correct))
        .collect();
    sorted_tallies.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let total_loss: f64 = sorted_tallies.iter().map(|t| t.0).sum();
    let n_masked: usize = sorted_tallies.iter().map(|t| t.1).sum();
    let n_correct: usize = sorted_tallies.iter().map(|t| t.2).sum();

    let n = per_seq_means.len() as f64;
    let mean = per_seq_means.iter().sum::<f64>() / n;
    let std_err = if per_seq_means.len() < 2 {
        0.0
    } else {
        let var = per_seq_means.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok(PerplexityReport {
        perplexity: (total_loss / n_masked as f64).exp(),
        recovery: n_correct as f64 / n_masked as f64,
        std_err,
        n_sequences: valset.len(),
        n_masked_tokens: n_masked,
    })
}

/// Top-1 masked-token accuracy under the fixed evaluation masking.
pub fn sequence_recovery(
    params: &ParameterSet<f32>,
    valset: &[String],
    mask_rate: f64,
    eval_mask_seed: u64,
) -> Result<f64> {
    Ok(validation_perplexity(params, valset, mask_rate, eval_mask_seed)?.recovery)
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = maxv
        + row
            .iter()
            .map(|&z| (z as f64 - maxv).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|&z| z as f64 - lse).collect()
}

/// Masked-marginal mutation scoring: each variant scores the sum over its
/// substituted positions of log p(new residue) - log p(wild-type residue),
/// both read from the wild-type context with that one position masked. One
/// forward pass per unique position, cached.
pub fn score_mutations(params: &ParameterSet<f32>, assay: &DmsAssay) -> Result<Vec<f64>> {
    let config = &params.config;
    let wt = &assay.wild_type;
    let wt_tokens = tokenize(wt, config);
    let mut positions: Vec<usize> = assay
        .variants
        .iter()
        .flat_map(|v| v.subs.iter().map(|&(p, _)| p))
        .collect();
    positions.sort_unstable();
    positions.dedup();
    for &p in &positions {
        // +1 for <bos>; the position must survive tokenizer truncation.
        if p >= wt.len() || p + 1 >= wt_tokens.len() - 1 {
            return Err(Error::Argument(format!(
                "substitution position {p} out of range for wild type of length {}",
                wt.len()
            )));
        }
    }
    let log_probs: HashMap<usize, Vec<f64>> = positions
        .par_iter()
        .map(|&p| {
            let mut row = wt_tokens.clone();
            let tok_pos = p + 1;
            let original = row[tok_pos];
            row[tok_pos] = Vocabulary::MASK;
            let mut batch = Batch::from_token_rows(&[row])?;
            batch.mask_positions[tok_pos] = true;
            batch.targets[tok_pos] = original;
            let logits = forward(params, &batch)?;
            let vsize = Vocabulary::SIZE;
            Ok((p, log_softmax_row(&logits[tok_pos * vsize..(tok_pos + 1) * vsize])))
        })
        .collect::<Result<_>>()?;
    let vocab = Vocabulary::get();
    assay
        .variants
        .iter()
        .map(|v| {
            let mut score = 0.0;
            for &(p, new) in &v.subs {
                let lp = &log_probs[&p];
                let wt_id = vocab.id_of(wt.as_bytes()[p]);
                let new_id = vocab.id_of(new as u8);
                score += lp[new_id as usize] - lp[wt_id as usize];
            }
            Ok(score)
        })
        .collect()
}

/// Average ranks with ties averaged.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; None when either argument has zero rank
/// variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Argument(
            "spearman requires two equal-length lists of at least 2".into(),
        ));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

/// Metric values keyed by (method, year, task), with a per-task orientation
/// flag saying whether larger values win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    pub entries: BTreeMap<(String, i32, String), f64>,
    pub higher_better: BTreeMap<String, bool>,
}

impl MetricTable {
    pub fn insert(&mut self, method: &str, year: i32, task: &str, value: f64) {
        self.entries
            .insert((method.to_string(), year, task.to_string()), value);
    }

    pub fn set_orientation(&mut self, task: &str, higher_better: bool) {
        self.higher_better.insert(task.to_string(), higher_better);
    }

    pub fn methods(&self) -> Vec<String> {
        let mut ms: Vec<String> = self.entries.keys().map(|k| k.0.clone()).collect();
        ms.sort();
        ms.dedup();
        ms
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("method,year,task,value\n");
        for ((m, y, t), v) in &self.entries {
            out.push_str(&format!("{m},{y},{t},{v}\n"));
        }
        std::fs::write(path, out)?;
        let sidecar: BTreeMap<&str, bool> = self
            .higher_better
            .iter()
            .map(|(k, &v)| (k.as_str(), v))
            .collect();
        std::fs::write(
            path.with_extension("orient.json"),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<MetricTable> {
        let text = std::fs::read_to_string(path)?;
        let mut table = MetricTable::default();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                if line != "method,year,task,value" {
                    return Err(Error::Parse {
                        line: 1,
                        msg: format!("unexpected metric header '{line}'"),
                    });
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "expected method,year,task,value".into(),
                });
            }
            let year: i32 = parts[1].parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad year '{}'", parts[1]),
            })?;
            let value: f64 = parts[3].parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad value '{}'", parts[3]),
            })?;
            table.insert(parts[0], year, parts[2], value);
        }
        let sidecar_path = path.with_extension("orient.json");
        if sidecar_path.exists() {
            let sidecar: BTreeMap<String, bool> =
                serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
            table.higher_better = sidecar;
        }
        Ok(table)
    }
}

/// Win rates per method plus the per-year breakdown. Within every (year,
/// task) cell each ordered method pair is compared once; a strictly better
/// value under the task's orientation wins, ties split 0.5/0.5. Cells with
/// missing methods are skipped and reported.
#[derive(Debug, Clone, PartialEq)]
pub struct WinRateReport {
    pub overall: BTreeMap<String, f64>,
    pub per_year: BTreeMap<(String, i32), f64>,
    pub skipped_cells: Vec<(i32, String)>,
}

pub fn win_rate(table: &MetricTable) -> Result<WinRateReport> {
    let methods = table.methods();
    if methods.len() < 2 {
        return Err(Error::Argument("win rate needs at least two methods".into()));
    }
    let mut cells: Vec<(i32, String)> = table
        .entries
        .keys()
        .map(|k| (k.1, k.2.clone()))
        .collect();
    cells.sort();
    cells.dedup();
    let mut wins: HashMap<&str, f64> = HashMap::new();
    let mut comparisons: HashMap<&str, u64> = HashMap::new();
    let mut year_wins: HashMap<(&str, i32), f64> = HashMap::new();
    let mut year_comparisons: HashMap<(&str, i32), u64> = HashMap::new();
    let mut skipped = Vec::new();
    for (year, task) in cells {
        let higher = *table.higher_better.get(&task).ok_or_else(|| {
            Error::Argument(format!("no orientation declared for task '{task}'"))
        })?;
        let values: Vec<Option<f64>> = methods
            .iter()
            .map(|m| table.entries.get(&(m.clone(), year, task.clone())).copied())
            .collect();
        if values.iter().any(Option::is_none) {
            skipped.push((year, task.clone()));
            continue;
        }
        for (i, a) in methods.iter().enumerate() {
            for (j, _) in methods.iter().enumerate() {
                if i == j {
                    continue;
                }
                let va = values[i].unwrap();
                let vb = values[j].unwrap();
                let credit = if va == vb {
                    0.5
                } else if (va > vb) == higher {
                    1.0
                } else {
                    0.0
                };
                *wins.entry(a).or_default() += credit;
                *comparisons.entry(a).or_default() += 1;
                *year_wins.entry((a, year)).or_default() += credit;
                *year_comparisons.entry((a, year)).or_default() += 1;
            }
        }
    }
    if comparisons.is_empty() {
        return Err(Error::Argument("no complete cells to compare".into()));
    }
    let overall = methods
        .iter()
        .map(|m| {
            let w = wins.get(m.as_str()).copied().unwrap_or(0.0);
            let c = comparisons.get(m.as_str()).copied().unwrap_or(0) as f64;
            (m.clone(), w / c)
        })
        .collect();
    let per_year = year_comparisons
        .iter()
        .map(|(&(m, y), &c)| {
            let w = year_wins.get(&(m, y)).copied().unwrap_or(0.0);
            ((m.to_string(), y), w / c as f64)
        })
        .collect();
    Ok(WinRateReport {
        overall,
        per_year,
        skipped_cells: skipped,
    })
}

/// Length, aromaticity and longest-repeat statistics of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub length: usize,
    pub aromaticity: f64,
    pub longest_repeat_ratio: f64,
}

fn has_repeat_of_len(seq: &[u8], k: usize) -> bool {
    if k == 0 {
        return true;
    }
    if k > seq.len() {
        return false;
    }
    let mut seen = HashSet::with_capacity(seq.len());
    seq.windows(k).any(|w| !seen.insert(w))
}

/// Per-sequence statistics. The longest-repeat ratio divides the length of
/// the longest substring occurring at least twice (overlaps allowed) by the
/// sequence length; repeat presence is monotone in the substring length, so
/// a binary search over window sizes finds it.
pub fn seq_stats(seq: &str) -> StatRow {
    let bytes = seq.as_bytes();
    let n = bytes.len();
    let aromatic = bytes
        .iter()
        .filter(|c| matches!(c, b'F' | b'W' | b'Y'))
        .count();
    let mut lo = 0usize;
    let mut hi = n.saturating_sub(1);
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if has_repeat_of_len(bytes, mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    StatRow {
        length: n,
        aromaticity: if n == 0 { 0.0 } else { aromatic as f64 / n as f64 },
        longest_repeat_ratio: if n == 0 { 0.0 } else { lo as f64 / n as f64 },
    }
}

fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Paired empirical quantiles of two samples at `n_q` evenly spaced
/// probability points, with linear interpolation between order statistics.
pub fn qq_quantiles(sample_a: &[f64], sample_b: &[f64], n_q: usize) -> Result<Vec<(f64, f64)>> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Argument("qq_quantiles needs nonempty samples".into()));
    }
    if n_q < 2 {
        return Err(Error::Argument("n_q must be at least 2".into()));
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok((0..n_q)
        .map(|j| {
            let q = j as f64 / (n_q - 1) as f64;
            (quantile_type7(&a, q), quantile_type7(&b, q))
        })
        .collect())
}
