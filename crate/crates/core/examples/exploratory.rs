//! Normal-score transform and empirical cross-variograms, the usual first look
//! at a multivariate spatial dataset.
//!
//! `cargo run --example exploratory -- [data.csv]`

use std::path::PathBuf;

use matern_lasso::matern::BlockOrdering;
use matern_lasso::simulate::{illustrative_config, sample_locations_uniform, simulate_field};
use matern_lasso::spatial_data::{empirical_cross_variogram, load_dataset, normal_score_transform, CsvSchema};

fn main() -> matern_lasso::Result<()> {
    let data = match std::env::args().nth(1) {
        Some(path) => load_dataset(&PathBuf::from(path), &CsvSchema::planar())?,
        None => {
            let c = illustrative_config();
            let locs = sample_locations_uniform(400, &c.domain, 9)?;
            simulate_field(&c.params, &locs, 9, BlockOrdering::ByVariable)?
        }
    };
    let mut scores = data.values().clone();
    for j in 0..data.p() {
        let (s, table) = normal_score_transform(data.column(j))?;
        println!("{}: {} distinct values, median maps to {:.3}", data.names()[j], table.values.len(), s[s.len() / 2]);
        scores.column_mut(j).assign(&s);
    }
    let scored = data.with_values(scores)?;
    let edges: Vec<f64> = (0..=8).map(|b| 0.05 * b as f64).collect();
    for (i, j) in [(0, 0), (0, 1), (0, 4)] {
        if i.max(j) >= scored.p() {
            continue;
        }
        let v = empirical_cross_variogram(&scored, i, j, &edges)?;
        let row: Vec<String> = v.estimates.iter().map(|e| format!("{e:6.3}")).collect();
        println!("gamma[{i},{j}]: {}", row.join(" "));
    }
    Ok(())
}
