use abe_core::synth::toy::*;
use abe_core::*;
fn env(k: &str, d: f64) -> f64 { std::env::var(k).ok().map(|v| v.parse().unwrap()).unwrap_or(d) }
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let shift: f64 = args[1].parse().unwrap();
    let s0: u64 = args[2].parse().unwrap();
    let n: u64 = args[3].parse().unwrap();
    let (mut gap, mut a_abe, mut a_base, mut ndiv, mut worst) = (0.0, 0.0, 0.0, 0, 0.0f64);
    let mut block_gaps = vec![];
    let mut bg = 0.0;
    for (k, seed) in (s0..s0 + n).enumerate() {
        let spec = ToyTrainSpec { shift, seed, init_scale: env("INIT", 0.35), weight_decay: env("WD", 0.02), learning_rate: env("LR", 1.0), class_separation: env("SEP", 1.0), epochs: env("EP", 40.0) as usize, ..ToyTrainSpec::default() };
        let run = toy_train(&spec).unwrap();
        let src = trajectory_from_snapshots("s", &run.source_snapshots, Execution::Sequential).unwrap();
        let tgt = trajectory_from_snapshots("t", &run.target_snapshots, Execution::Sequential).unwrap();
        let tv = stop_at_extremum(&run.valid_curve).unwrap();
        let (th, div) = match stopping_time(&tgt, &src, tv) { Ok(r) => (r.t_hat, r.diverged), Err(_) => (tv, false) };
        ndiv += div as usize;
        let s = eval::evaluate_stops(th, tv, &run.target_curve).unwrap();
        gap += s.gap_closure; a_abe += s.acc_at_abe; a_base += s.acc_at_baseline; bg += s.gap_closure;
        if (k + 1) % 20 == 0 { block_gaps.push(bg / 20.0); worst = worst.max((bg / 20.0f64).abs()); bg = 0.0; }
    }
    let nf = n as f64;
    println!("shift {shift} mean gap {:.3} abe {:.4} base {:.4} div {ndiv}/{n} blocks {:?}", gap / nf, a_abe / nf, a_base / nf, block_gaps.iter().map(|g| (g * 1000.0f64).round() / 1000.0).collect::<Vec<_>>());
}
