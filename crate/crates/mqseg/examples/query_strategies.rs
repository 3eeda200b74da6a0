//! Compares the four query strategies on one matching instance and shows
//! why the mixed pool wins: its global Hungarian assignment optimizes over a
//! superset of every other strategy's feasible assignments.
//!
//! ```bash
//! cargo run --example query_strategies
//! ```

use mqseg::matching::{
    match_with_strategy, selection_stats, CostMatrix, QueryProvenance, QueryStrategy,
};
use mqseg::rng::SplitMix64;
use mqseg::unified_data::ThingStuff;

fn main() {
    // 4 ground truths (2 stuff, 2 things) against 3 learnable + 5
    // conditional queries, random matching costs
    let mut rng = SplitMix64::new(42);
    let tags = vec![
        ThingStuff::Stuff,
        ThingStuff::Thing,
        ThingStuff::Stuff,
        ThingStuff::Thing,
    ];
    let provenance = QueryProvenance::layout(3, 5);
    let mut costs = CostMatrix::zeros(tags.len(), provenance.len());
    for g in 0..costs.rows() {
        for q in 0..costs.cols() {
            costs.set(g, q, rng.next_f64());
        }
    }

    println!("cost matrix (rows = ground truths, cols = queries; q0-q2 learnable):");
    for (g, tag) in tags.iter().enumerate() {
        let row: Vec<String> =
            (0..costs.cols()).map(|q| format!("{:.2}", costs.get(g, q))).collect();
        println!("  gt{g} [{tag:?}]: {}", row.join(" "));
    }
    println!();

    for strategy in [
        QueryStrategy::LearnableOnly,
        QueryStrategy::ConditionalOnly,
        QueryStrategy::Separated,
        QueryStrategy::Mixed,
    ] {
        match match_with_strategy(&costs, &tags, strategy, &provenance) {
            Ok(assignment) => {
                println!(
                    "{strategy:>12}: total cost {:.4}, gt->query {:?}",
                    assignment.total_cost, assignment.query_for_gt
                );
                if strategy == QueryStrategy::Mixed {
                    let stats = selection_stats(
                        std::slice::from_ref(&assignment),
                        std::slice::from_ref(&tags),
                        &provenance,
                    );
                    println!(
                        "{:>12}  things matched to conditional queries: {}/{}; \
                         stuff matched to learnable queries: {}/{}",
                        "",
                        stats.things_to_conditional,
                        stats.things_matched,
                        stats.stuff_to_learnable,
                        stats.stuff_matched
                    );
                }
            }
            Err(err) => println!("{strategy:>12}: {err}"),
        }
    }

    // the separated baseline needs complete tags; the mixed strategy does not
    let untagged = vec![ThingStuff::Unknown; 4];
    println!();
    match match_with_strategy(&costs, &untagged, QueryStrategy::Separated, &provenance) {
        Err(err) => println!("separated on untagged data: {err}"),
        Ok(_) => unreachable!(),
    }
    let mixed = match_with_strategy(&costs, &untagged, QueryStrategy::Mixed, &provenance).unwrap();
    println!("mixed on untagged data:     total cost {:.4} (tags never read)", mixed.total_cost);
}
