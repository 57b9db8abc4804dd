//! Measure global-alignment identity between new sequences and an earlier
//! reference set, summarize the nearest-neighbor distribution, and screen
//! a release down to sequences novel with respect to the references.

use tempolab::corpus::{deduplicate, SequenceRecord};
use tempolab::rng::stream;
use tempolab::synthgen::MotifGrammar;
use tempolab::temporal::{filter_by_identity, pairwise_identity, IdentityReport};
use tempolab::Result;

fn main() -> Result<()> {
    println!(
        "identity(MKTAYI, MKTAYI) = {:.2}",
        pairwise_identity("MKTAYI", "MKTAYI")?
    );
    println!(
        "identity(MKTAYI, MKTCYI) = {:.2}",
        pairwise_identity("MKTAYI", "MKTCYI")?
    );

    let grammar = MotifGrammar::random(2, 14, 18, 0.8, 9)?;
    let mut rng = stream(9, "demo_identity", &[]);
    let refs: Vec<String> = (0..12).map(|_| grammar.sample(&mut rng)).collect();
    let mut queries: Vec<String> = (0..6).map(|_| grammar.sample(&mut rng)).collect();
    queries.extend((0..6).map(|_| grammar.sample_noise(&mut rng)));

    let report = IdentityReport::compute(&queries, &refs, 3, 10)?;
    println!("nearest-reference identity per query:");
    for (q, r, id) in &report.per_sequence {
        println!("  query {q} -> ref {r} at {id:.2}");
    }
    println!("histogram (bin width {:.2}): {:?}", report.bin_width, report.histogram);

    let records = queries
        .iter()
        .enumerate()
        .map(|(i, s)| SequenceRecord {
            identifier: format!("q{i}"),
            sequence: s.clone(),
            year: 2021,
        })
        .collect();
    let snapshot = deduplicate(records)?;
    let (kept, empty_refs) = filter_by_identity(&snapshot, &refs, 0.5, 3)?;
    println!(
        "kept {} of {} below 0.5 identity to the references (empty refs: {empty_refs})",
        kept.records.len(),
        snapshot.records.len()
    );
    Ok(())
}
