//! Privacy spent against the noise multiplier, with and without secure
//! aggregation, plus the σ that meets a fixed budget.

use fetsim::accountant::{analytic_gaussian_sigma, epsilon_curve, sigma_for_budget, AccountingMethod};

fn main() -> fetsim::Result<()> {
    let (q, steps, delta, parties) = (0.01, 5_000, 1e-5, 4);
    let sigmas = [0.6, 0.8, 1.0, 1.5, 2.0, 4.0];
    println!("{:>6} {:>12} {:>12}", "sigma", "eps (mpc)", "eps (no mpc)");
    for row in epsilon_curve(&sigmas, q, steps, delta, parties, AccountingMethod::Rdp) {
        println!("{:>6.2} {:>12.4} {:>12.4}", row.sigma, row.epsilon_with_mpc, row.epsilon_no_mpc);
    }
    let s = sigma_for_budget(1.0, delta, q, steps, AccountingMethod::Rdp)?;
    println!("sigma for eps=1 over {steps} steps at q={q}: {s:.4}");
    println!("single release, eps=1, delta=1e-5: sigma = {:.4}", analytic_gaussian_sigma(1.0, 1e-5, 1.0)?);
    Ok(())
}
