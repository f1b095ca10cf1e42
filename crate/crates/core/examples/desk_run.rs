use al_core::pipeline::{check_invariants, run_native, PipelineConfig};

fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .init();
    let config = PipelineConfig::desk_scale();
    let out = run_native(&config, None).expect("pipeline run");
    for r in &out.rounds {
        println!(
            "round {} v{} train {}/{} val {}/{} synth {}% labeled {} eval {} best {} f1 {:.3}",
            r.round,
            r.dataset_version,
            r.train_positive,
            r.train_negative,
            r.validation_positive,
            r.validation_negative,
            r.train_synthetic_percent,
            r.labeled_this_round,
            r.evaluation_size,
            r.best_checkpoint,
            r.row.metrics.f1
        );
    }
    println!("{}", out.table());
    println!(
        "invariants: {:?}",
        check_invariants(out.state()).map(|_| "ok")
    );
    println!("elapsed {:.1?}", out.elapsed);
}
