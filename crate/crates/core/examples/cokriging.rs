//! Cokriging on a regular grid from a sparse fitted model, comparing the
//! sparsity-reduced and all-variable predictors against held-out truth.
//!
//! `cargo run --release --example cokriging -- [train] [side]`

use matern_lasso::matern::BlockOrdering;
use matern_lasso::predict::{cokrige, evaluate_predictions, regular_grid, ActivePolicy, PredictionRequest};
use matern_lasso::simulate::{illustrative_config, sample_locations_uniform, simulate_field};

fn main() -> matern_lasso::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_train: usize = args.next().map(|a| a.parse().expect("train")).unwrap_or(300);
    let side: usize = args.next().map(|a| a.parse().expect("side")).unwrap_or(30);

    let config = illustrative_config();
    let grid = regular_grid(&config.domain, &[side, side])?;
    let train_locs = sample_locations_uniform(n_train, &config.domain, 5)?;
    // one joint draw so the grid truth and the training data share a field
    let all = ndarray::concatenate(ndarray::Axis(0), &[train_locs.view(), grid.view()]).expect("same width");
    let field = simulate_field(&config.params, &all, 5, BlockOrdering::ByVariable)?;
    let train = field.subset(&(0..n_train).collect::<Vec<_>>());
    let truth = field.subset(&(n_train..all.nrows()).collect::<Vec<_>>());

    for policy in [ActivePolicy::SparsityReduced, ActivePolicy::All] {
        let mut request = PredictionRequest::new(grid.clone());
        request.policy = policy;
        let result = cokrige(&train, &config.params, &request)?;
        let summary = evaluate_predictions(&result, &truth)?;
        println!("{policy:?}: {} targets in {:.2} s, total RMSE {:.4}", grid.nrows(), result.seconds, summary.total_rmse);
        for s in &summary.scores {
            println!("  {:>4}: RMSE {:.4}, mean sd {:.4}, active {:?}", s.name, s.rmse, s.mean_sd, result.active[s.variable]);
        }
    }
    Ok(())
}
