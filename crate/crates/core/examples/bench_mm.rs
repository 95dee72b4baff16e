use fuselab_core::autodiff::Tape;
use fuselab_core::rng::Rng64;
use std::time::Instant;

fn main() {
    let mut rng = Rng64::new(1);
    // typical model shapes: [25,64]x[64,64], [25,64]x[64,256], [425,64]x[64,64]
    for &(m, k, n) in &[(25usize, 64usize, 64usize), (25, 64, 256), (400, 64, 64), (400, 64, 256)] {
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let reps = 20000usize.min(4_000_000_000 / (2 * m * k * n));
        let start = Instant::now();
        let mut acc = 0.0;
        for _ in 0..reps {
            let mut t = Tape::new();
            let ia = t.leaf(m, k, a.clone());
            let ib = t.leaf(k, n, b.clone());
            let c = t.matmul(ia, ib).unwrap();
            acc += t.value(c)[0];
        }
        let dt = start.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n) as f64 * reps as f64) / dt / 1e9;
        println!("{m}x{k}x{n}: {reps} reps in {dt:.3}s -> {gflops:.2} Gflop/s (sink {acc:.3})");
    }
}
