use sttcbs::instance::generate_grid;
use sttcbs::search::{solve, SolverConfig};
use std::time::Instant;

#[test]
fn perf_probe() {
    for (agents, eps) in [(5u32, 0.1), (5, 0.001), (5, 0.00001), (10, 0.01), (10, 0.00001)] {
        let mut total = 0.0;
        let mut worst = 0.0f64;
        for seed in 1..=3u64 {
            let inst = generate_grid(10, 10, agents, seed, 1.0, 1.0, 5.0).unwrap();
            let cfg = SolverConfig { epsilon: eps, ..SolverConfig::default() };
            let t0 = Instant::now();
            let sol = solve(&inst, &cfg).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            total += dt;
            worst = worst.max(dt);
            println!(
                "agents={agents} eps={eps} seed={seed}: {:.2}s cost={:.3} maxp={:.2e} expanded={} evals={} screened={}",
                dt, sol.expected_cost, sol.max_pair_prob, sol.stats.expanded, sol.stats.prob_evals, sol.stats.screened
            );
        }
        println!("agents={agents} eps={eps}: total {:.2}s worst {:.2}s", total, worst);
    }
}
