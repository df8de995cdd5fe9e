//! End-to-end run on a high-dimensional surrogate: composite-likelihood path with
//! CLIC, then sparsity-reduced cokriging at held-out locations.
//!
//! `cargo run --release --example surrogate_pipeline -- [p] [n] [count]`
//! (p = 36, n = 1000 is the large smoke configuration; expect hours.)

use matern_lasso::matern::BlockOrdering;
use matern_lasso::objectives::ObjectiveKind;
use matern_lasso::optimizer::FitConfig;
use matern_lasso::predict::{cokrige, evaluate_predictions, PredictionRequest};
use matern_lasso::selection::{pct_zero_psi, solution_path, PathConfig};
use matern_lasso::simulate::{sample_locations_uniform, simulate_field, surrogate_config};

fn main() -> matern_lasso::Result<()> {
    let mut args = std::env::args().skip(1);
    let p: usize = args.next().map(|a| a.parse().expect("p")).unwrap_or(8);
    let n: usize = args.next().map(|a| a.parse().expect("n")).unwrap_or(300);
    let count: Option<usize> = args.next().map(|a| a.parse().expect("count"));

    let config = surrogate_config(p, n)?;
    let held_out = n / 5;
    let locs = sample_locations_uniform(n + held_out, &config.domain, 36)?;
    let field = simulate_field(&config.params, &locs, 36, BlockOrdering::ByVariable)?;
    let train = field.subset(&(0..n).collect::<Vec<_>>());
    let test = field.subset(&(n..n + held_out).collect::<Vec<_>>());

    let path_config = PathConfig {
        fit: FitConfig { kind: ObjectiveKind::CompositeLikelihood { v: 5 }, max_iter: 100, ..FitConfig::default() },
        count,
        ..PathConfig::default()
    };
    let path = solution_path(&train, &path_config)?;
    let fit = path.selected_fit().ok_or_else(|| matern_lasso::Error::FitFailed("no selectable fit".into()))?;
    println!(
        "path: {} penalties in {:.0} s; selected lambda {:.3e} with {:.1}% zeros in Psi (truth {:.1}%)",
        path.entries.len(),
        path.seconds,
        fit.lambda,
        pct_zero_psi(&fit.params.l),
        pct_zero_psi(&config.params.l)
    );
    let result = cokrige(&train, &fit.params, &PredictionRequest::new(test.locations().clone()))?;
    let summary = evaluate_predictions(&result, &test)?;
    println!("cokriging at {held_out} held-out locations in {:.1} s: total RMSE {:.4}", result.seconds, summary.total_rmse);
    Ok(())
}
