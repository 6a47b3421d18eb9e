use evicast::experiment::{run_and_write, ExperimentConfig};
use evicast::loss::LossMethod;

fn main() {
    let mut cfg = ExperimentConfig::synthetic(vec!["AAA".into()], 1500, 0);
    cfg.methods = vec![LossMethod::Mse, LossMethod::Evidential];
    let t0 = std::time::Instant::now();
    let out = run_and_write(&cfg, "/tmp/smoke_out").unwrap();
    println!("elapsed: {:.1?}  ok={} failed={}", t0.elapsed(), out.manifest.n_ok, out.manifest.n_failed);
    for c in &out.manifest.cells {
        println!("  {} {}: ok={} {} ms err={:?}", c.symbol, c.method.name(), c.ok, c.wall_ms, c.error);
    }
    for m in &out.metrics {
        println!("  {:?}", m);
    }
}
