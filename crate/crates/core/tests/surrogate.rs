//! High-dimensional pipeline smoke runs.

use matern_lasso::matern::BlockOrdering;
use matern_lasso::objectives::ObjectiveKind;
use matern_lasso::optimizer::FitConfig;
use matern_lasso::predict::{cokrige, evaluate_predictions, PredictionRequest};
use matern_lasso::selection::{solution_path, PathConfig};
use matern_lasso::simulate::{sample_locations_uniform, simulate_field, surrogate_config};

fn pipeline(p: usize, n: usize, count: usize, max_iter: usize) {
    let config = surrogate_config(p, n).unwrap();
    let held_out = n / 5;
    let locs = sample_locations_uniform(n + held_out, &config.domain, 11).unwrap();
    let field = simulate_field(&config.params, &locs, 11, BlockOrdering::ByVariable).unwrap();
    let train = field.subset(&(0..n).collect::<Vec<_>>());
    let test = field.subset(&(n..n + held_out).collect::<Vec<_>>());
    let path_config = PathConfig {
        fit: FitConfig { kind: ObjectiveKind::CompositeLikelihood { v: 5 }, max_iter, ..FitConfig::default() },
        count: Some(count),
        ..PathConfig::default()
    };
    let path = solution_path(&train, &path_config).unwrap();
    let fit = path.selected_fit().expect("a selectable fit");
    assert_eq!(fit.params.p(), p);
    let result = cokrige(&train, &fit.params, &PredictionRequest::new(test.locations().clone())).unwrap();
    let summary = evaluate_predictions(&result, &test).unwrap();
    assert!(summary.total_rmse.is_finite());
}

#[test]
fn eight_variables_end_to_end() {
    pipeline(8, 120, 3, 15);
}

// hours on one core
#[test]
#[ignore]
fn thirty_six_variables_end_to_end() {
    pipeline(36, 1000, 20, 100);
}
