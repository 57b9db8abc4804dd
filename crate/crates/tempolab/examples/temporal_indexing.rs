//! Build the presence index over three yearly releases, then query the
//! structures the continual-learning methods consume: multiplicity, the
//! forget set, intersections, and the multiplicity-weighted replay
//! distribution.

use tempolab::corpus::{deduplicate, SequenceRecord};
use tempolab::rng::stream;
use tempolab::temporal::TemporalIndex;
use tempolab::Result;

fn release(year: i32, seqs: &[&str]) -> Result<tempolab::corpus::Snapshot> {
    let records = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| SequenceRecord {
            identifier: format!("{year}_{i}"),
            sequence: s.to_string(),
            year,
        })
        .collect();
    deduplicate(records)
}

fn main() -> Result<()> {
    let snapshots = vec![
        release(2020, &["MKTAYI", "GGWWFY", "PPMMLL"])?,
        release(2021, &["MKTAYI", "GGWWFY", "QISFVK"])?,
        release(2022, &["MKTAYI", "QISFVK", "HHHHCC"])?,
    ];
    let index = TemporalIndex::build(&snapshots)?;
    println!("years: {:?}, union size: {}", index.years(), index.len());

    for seq in index.sequences() {
        println!(
            "  {seq}: mask={:03b} multiplicity_through_2022={}",
            index.mask(seq),
            index.multiplicity(seq, 2022)?
        );
    }

    let forgotten = index.forget_set(2022)?;
    println!("present in 2021 but dropped by 2022: {forgotten:?}");
    println!("in both 2020 and 2022: {:?}", index.intersection(2020, 2022)?);

    let replay = index.replay_distribution(2022)?;
    let draws = replay.sample(&mut stream(7, "demo_replay", &[]), 5);
    println!("five replay draws weighted by multiplicity: {draws:?}");
    Ok(())
}
