//! Pairwise composite likelihood on nearest neighbors with CLIC selection, the
//! route that scales to larger samples.
//!
//! `cargo run --release --example composite_clic -- [n] [v]`

use matern_lasso::matern::BlockOrdering;
use matern_lasso::objectives::ObjectiveKind;
use matern_lasso::optimizer::FitConfig;
use matern_lasso::replication::Confusion;
use matern_lasso::selection::{solution_path, PathConfig};
use matern_lasso::simulate::{illustrative_config, sample_locations_uniform, simulate_field};

fn main() -> matern_lasso::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|a| a.parse().expect("n")).unwrap_or(500);
    let v: usize = args.next().map(|a| a.parse().expect("v")).unwrap_or(5);

    let config = illustrative_config();
    let locations = sample_locations_uniform(n, &config.domain, 21)?;
    let data = simulate_field(&config.params, &locations, 21, BlockOrdering::ByVariable)?;
    let path_config = PathConfig {
        fit: FitConfig { kind: ObjectiveKind::CompositeLikelihood { v }, ..FitConfig::default() },
        ..PathConfig::default()
    };
    let path = solution_path(&data, &path_config)?;
    println!("{} penalties in {:.1} s", path.entries.len(), path.seconds);
    for e in &path.entries {
        if let (Some(c), Some(v)) = (e.criterion, &e.clic) {
            println!("{:>10.4e}  CLIC {c:>10.2}  (-CL {:>10.2}, trace {:>7.2}, {} free)", e.lambda, -v.cl, v.trace, v.free.len());
        }
    }
    if let Some(fit) = path.selected_fit() {
        let c = Confusion::between(&config.params, &fit.params);
        println!(
            "selected lambda {:.4e}: true nonzero kept {:.0}%, true zero found {:.0}%",
            fit.lambda,
            100.0 * c.retention(),
            100.0 * c.zero_detection()
        );
    }
    Ok(())
}
