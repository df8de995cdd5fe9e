//! Warm-started penalty path under the full likelihood with AIC selection; writes
//! the plottable CSV series.
//!
//! `cargo run --release --example aic_path -- [n] [count] [out.csv]`

use std::path::PathBuf;

use matern_lasso::matern::BlockOrdering;
use matern_lasso::selection::{solution_path, PathConfig};
use matern_lasso::simulate::{illustrative_config, sample_locations_uniform, simulate_field};

fn main() -> matern_lasso::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|a| a.parse().expect("n")).unwrap_or(150);
    let count: usize = args.next().map(|a| a.parse().expect("count")).unwrap_or(12);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "aic_path.csv".into()));

    let config = illustrative_config();
    let locations = sample_locations_uniform(n, &config.domain, 11)?;
    let data = simulate_field(&config.params, &locations, 11, BlockOrdering::ByVariable)?;
    let path = solution_path(&data, &PathConfig { count: Some(count), ..PathConfig::default() })?;

    println!("lambda_max = {:.4}", path.lambda_max);
    for (i, e) in path.entries.iter().enumerate() {
        let mark = if Some(i) == path.selected { "  <- selected" } else { "" };
        println!(
            "{:>10.4e}  AIC {:>10}  zeros L {:5.1}%  zeros Psi {:5.1}%{mark}",
            e.lambda,
            e.criterion.map(|c| format!("{c:.2}")).unwrap_or_else(|| "-".into()),
            e.pct_zero_l,
            e.pct_zero_psi
        );
    }
    path.write_csv(&out)?;
    println!("series written to {}", out.display());
    Ok(())
}
