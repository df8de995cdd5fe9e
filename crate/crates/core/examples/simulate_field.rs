//! Draws the banded five-variable field at uniform locations and writes it as CSV.
//!
//! `cargo run --example simulate_field -- [n] [seed] [out.csv]`

use std::path::PathBuf;

use matern_lasso::matern::BlockOrdering;
use matern_lasso::simulate::{illustrative_config, sample_locations_uniform, FieldSimulator};

fn main() -> matern_lasso::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|a| a.parse().expect("n")).unwrap_or(500);
    let seed: u64 = args.next().map(|a| a.parse().expect("seed")).unwrap_or(0);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "simulated.csv".into()));

    let config = illustrative_config();
    let locations = sample_locations_uniform(n, &config.domain, seed)?;
    let simulator = FieldSimulator::new(&config.params, &locations, BlockOrdering::ByVariable)?;
    let data = simulator.draw(seed, 1)?;
    data.write_csv(&out)?;

    println!("wrote {} locations x {} variables to {}", data.n(), data.p(), out.display());
    for j in 0..data.p() {
        let c = data.column(j);
        let mean = c.mean().unwrap_or(f64::NAN);
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (c.len() as f64 - 1.0);
        println!("  {}: sample variance {var:.3} (model {:.3})", data.names()[j], config.params.sigma2[j]);
    }
    Ok(())
}
