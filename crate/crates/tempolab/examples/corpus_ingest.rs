//! Parse a FASTA release, deduplicate it into a snapshot, and print the
//! raw and distinct counts plus per-sequence statistics.

use tempolab::corpus::{deduplicate, parse_fasta, serialize_jsonl};
use tempolab::eval::seq_stats;
use tempolab::Result;

fn main() -> Result<()> {
    let fasta = b">seq1 spike fragment\nMKTAYIAKQR\nQISFVKSHFS\n>seq2\nMKTAYIAKQR\nQISFVKSHFS\n>seq3\nGGWWFYPPMM\n" as &[u8];
    let records = parse_fasta(fasta, 2020)?;
    let snapshot = deduplicate(records)?;
    println!(
        "year {}: {} raw records, {} distinct sequences",
        snapshot.year, snapshot.counts.raw, snapshot.counts.deduplicated
    );
    for record in &snapshot.records {
        let stats = seq_stats(&record.sequence);
        println!(
            "  {}: len={} aromaticity={:.2} longest_repeat_ratio={:.2}",
            record.identifier, stats.length, stats.aromaticity, stats.longest_repeat_ratio
        );
    }
    let mut jsonl = Vec::new();
    serialize_jsonl(&snapshot, &mut jsonl)?;
    println!("as jsonl:\n{}", String::from_utf8_lossy(&jsonl));
    Ok(())
}
