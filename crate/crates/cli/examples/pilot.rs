//! Multi-seed pilot for schedule tuning.

use semimultipose::sweep::{run_sweep, SweepConfig};
use semimultipose_core::model::ModelConfig;
use semimultipose::runner::TrainConfig;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let decay_at: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(iters / 3);
    let decay_factor: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let sizes: Vec<usize> = args.get(4).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![5]);
    let nseeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);
    let seed0: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0);

    let mut train = TrainConfig::desk(ModelConfig::default());
    train.total_iters = iters;
    train.fl_start_iter = iters * 2 / 15;
    train.fu_start_iter = iters / 3;
    train.lr_decay_at = decay_at;
    train.lr_decay_factor = decay_factor;
    let config = SweepConfig {
        labeled_sizes: sizes,
        seeds: (seed0..seed0 + nseeds).collect(),
        train,
        ..SweepConfig::default()
    };
    let t0 = std::time::Instant::now();
    let result = run_sweep(&config, true, true).unwrap();
    println!("sweep done in {:.0}s", t0.elapsed().as_secs_f64());
    for row in &result.summary {
        println!(
            "{:16} {:2}L  mean AP {:.4} +- {:.4}  (n={})",
            row.method.name(),
            row.labeled_size,
            row.mean_ap,
            row.std_err,
            row.n
        );
    }
    for (k, e) in &result.failures {
        println!("FAILED {k}: {e}");
    }
}
