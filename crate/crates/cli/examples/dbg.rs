fn main() {
    let spec = snaplearn_core::protocols::by_name("backdoor(3)").unwrap();
    let report = snaplearn_core::learner::learn(
        &spec,
        &snaplearn_core::learner::LearnConfig::default(),
        &snaplearn_core::learner::NullClock,
    )
    .unwrap();
    let reference = spec.reference.finite().unwrap();
    match report.model.compare(reference) {
        None => println!("EQUIVALENT"),
        Some(cex) => println!("CEX: {:?}", cex),
    }
    println!("states: {}", report.model.state_count());
    for s in &report.states {
        println!("  {} access={:?} terminal={:?}", s.id, s.access_word, s.terminal);
    }
    println!("kept:");
    for k in &report.kept_pairs {
        println!("  [{}] vs [{}]: {}", k.base, k.merge, k.reason);
    }
    println!("merged:");
    for m in &report.merged_pairs {
        println!("  [{}] <- [{}]: {}", m.base, m.merge, m.reason);
    }
}
