//! A small replicated study: per replicate, a penalized path and an
//! unpenalized fit, pooled into sparsity-recovery rates and the total RMSE of L.
//!
//! `cargo run --release --example replication_study -- [replicates] [n]`

use matern_lasso::objectives::ObjectiveKind;
use matern_lasso::replication::{run_study, ReplicationConfig};
use matern_lasso::selection::PathConfig;

fn main() -> matern_lasso::Result<()> {
    let mut args = std::env::args().skip(1);
    let replicates: usize = args.next().map(|a| a.parse().expect("replicates")).unwrap_or(3);
    let n: usize = args.next().map(|a| a.parse().expect("n")).unwrap_or(200);

    let mut config = ReplicationConfig { replicates, ..ReplicationConfig::default() };
    config.experiment.n = n;
    config.objectives = vec![ObjectiveKind::FullLikelihood, ObjectiveKind::CompositeLikelihood { v: 5 }];
    config.path = PathConfig { count: Some(12), ..PathConfig::default() };

    let summaries = run_study(&config, |o| {
        println!("replicate {} {:?}: selected lambda {:?}", o.replicate, o.kind, o.selected_lambda);
    })?;
    for s in summaries {
        println!(
            "{:?}: retention {:.0}%, zero detection {:.0}%, total RMSE penalized {:.3} vs unpenalized {:.3}",
            s.kind,
            100.0 * s.retention,
            100.0 * s.zero_detection,
            s.rmse_penalized.unwrap_or(f64::NAN),
            s.rmse_unpenalized.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
