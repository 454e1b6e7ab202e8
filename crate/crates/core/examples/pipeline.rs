//! Simulate, sample and select in one process, printing progress.
//!
//! Usage: pipeline [n_per_type] [iterations] [burn_in] [seed] [onset_offset]

use std::time::Instant;

use spikemix::dpm::{CsmcEstimator, GibbsState, Hyperparams, Sampler};
use spikemix::postsel::{adjusted_rand_index, select};
use spikemix::simgen::{generate_synthetic, SimConfig};

fn main() -> spikemix::Result<()> {
    let args: Vec<i64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let arg = |i: usize, d: i64| args.get(i).copied().unwrap_or(d);
    let sim = SimConfig { n_per_type: arg(0, 5) as usize, onset_offset_bins: arg(4, 0), ..SimConfig::default() };
    let seed = arg(3, 1) as u64;
    let hyper = Hyperparams { iterations: arg(1, 2000) as usize, burn_in: arg(2, 500) as usize, ..Hyperparams::default() };

    let ds = generate_synthetic(&sim, seed)?;
    let data = ds.observations()?;
    let est = CsmcEstimator::from_hyper(&hyper);
    let sampler = Sampler::new(&data, &hyper, &est, seed)?;
    let start = Instant::now();
    let mut samples = Vec::new();
    sampler.run_with(GibbsState::initial(data.len(), &hyper.base, seed), |s| {
        if s.iter % 50 == 0 {
            let th: Vec<String> = s.state.params.iter().map(|p| format!("({:.2},{:.1})", p.mu, p.log_psi)).collect();
            eprintln!("{:>5} {:>7.1}s K={} Z={:?} {}", s.iter, start.elapsed().as_secs_f64(), s.state.n_clusters(), s.state.assignments, th.join(" "));
        }
        samples.push(s.clone());
        Ok(())
    })?;
    let sel = select(&samples, hyper.burn_in)?;
    let ari = adjusted_rand_index(&sel.assignments, ds.truth.as_ref().unwrap())?;
    println!("seed {seed}: K={} ARI={ari:.3} Z={:?}", sel.params.len(), sel.assignments);
    for (k, p) in sel.params.iter().enumerate() {
        println!("  cluster {k}: mu={:.3} log_psi={:.2}", p.mu, p.log_psi);
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
