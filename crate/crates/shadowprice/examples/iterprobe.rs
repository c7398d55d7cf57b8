use shadowprice::*;
use rand::SeedableRng;
fn main() {
    let seed: u64 = std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(2024);
    let n: usize = std::env::var("N").ok().and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let params = instances::InstanceParams::default();
    let t0 = std::time::Instant::now();
    let mut invalid = 0; let mut errors = 0; let mut degenerate = 0;
    let mut worst_gap = 0.0f64; let mut worst_mart = 0.0f64; let mut worst_marg = 0.0f64; let mut worst_bounds = 0.0f64; let mut worst_iters = 0usize;
    for i in 0..n {
        let inst = instances::random_market(&mut rng, &params);
        match certify(&inst.market, &CertificationOptions::default()) {
            Ok(c) => {
                worst_gap = worst_gap.max(c.checks.value_gap / c.checks.value_tolerance.max(1e-300));
                worst_mart = worst_mart.max(c.checks.martingale_residual);
                worst_marg = worst_marg.max(c.checks.marginal_utility.max_residual);
                worst_bounds = worst_bounds.max(c.checks.bounds_slack);
                worst_iters = worst_iters.max(c.cost_solution.iterations).max(c.frictionless_solution.iterations);
                if c.degenerate_duals { degenerate += 1; }
                if !c.valid { invalid += 1; eprintln!("instance {i} invalid: {:?}", c.failures); }
            }
            Err(e) => { errors += 1; eprintln!("instance {i} error: {e}"); }
        }
    }
    println!("{n} certifications: {invalid} invalid, {errors} errors, {degenerate} degenerate, elapsed {:?}", t0.elapsed());
    println!("worst: rel gap {worst_gap:.3}, martingale {worst_mart:.2e}, marginal {worst_marg:.2e}, bounds {worst_bounds:.2e}, iters {worst_iters}");
}
