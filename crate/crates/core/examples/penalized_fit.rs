//! One penalized full-likelihood fit on a small simulated dataset, printing the
//! recovered scale matrix next to the generating one.
//!
//! `cargo run --release --example penalized_fit -- [lambda] [n]`

use matern_lasso::optimizer::{fit, FitConfig};
use matern_lasso::simulate::{illustrative_config, sample_locations_uniform, simulate_field};
use matern_lasso::matern::BlockOrdering;

fn main() -> matern_lasso::Result<()> {
    let mut args = std::env::args().skip(1);
    let lambda: f64 = args.next().map(|a| a.parse().expect("lambda")).unwrap_or(20.0);
    let n: usize = args.next().map(|a| a.parse().expect("n")).unwrap_or(200);

    let truth = illustrative_config().params;
    let locations = sample_locations_uniform(n, &illustrative_config().domain, 3)?;
    let data = simulate_field(&truth, &locations, 3, BlockOrdering::ByVariable)?;

    let result = fit(&data, lambda, &FitConfig::default(), None)?;
    println!(
        "lambda {lambda}: {} iterations in {:.1} s, converged {}, log-likelihood {:.3}",
        result.iterations, result.seconds, result.converged, result.loglik
    );
    println!("Delta_B = {:.3} (true {})", result.params.delta_b, truth.delta_b);
    let (est, tru) = (result.params.psi(), truth.psi());
    println!("Psi estimate | truth:");
    for i in 0..truth.p() {
        let e: Vec<String> = (0..truth.p()).map(|j| format!("{:7.3}", est[[i, j]])).collect();
        let t: Vec<String> = (0..truth.p()).map(|j| format!("{:6.3}", tru[[i, j]])).collect();
        println!("  {} | {}", e.join(" "), t.join(" "));
    }
    Ok(())
}
