use fuselab_core::analysis::*;
use fuselab_core::attack::*;
use fuselab_core::data::{generate_dataset, SyntheticDatasetSpec};
use fuselab_core::train::{train_clean_baseline, train_joint, TrainConfig};
use fuselab_core::vit::ViTConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(11);
    let l1: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30);
    let clean_epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(40);
    let eps: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4.0 / 255.0);
    let batch: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(16);
    let spec = SyntheticDatasetSpec::toy(seed);
    let ds = generate_dataset(&spec).unwrap();
    let mut state = ModelState::new_clean(ViTConfig::toy(), seed).unwrap();
    let mut cfg = TrainConfig::toy(AttackKind::Dynamic, seed);
    cfg.epochs = epochs;
    cfg.clean_epochs = clean_epochs;
    cfg.l1_phi = l1;
    cfg.epsilon = eps;
    cfg.batch = batch;
    let t0 = Instant::now();
    let acc0 = train_clean_baseline(&mut state, &ds, &cfg).unwrap();
    let t1 = Instant::now();
    println!("baseline acc {acc0:.4} in {:.1}s", (t1 - t0).as_secs_f64());
    state.attack = Some(AttackModule::Dynamic(
        VpgParams::init(&state.config, default_injection_layers(6), 8, seed).unwrap(),
    ));
    let report = train_joint(&mut state, &ds, &cfg).unwrap();
    let t2 = Instant::now();
    for (e, lc, la, lt) in report.epoch_means.iter().filter(|(e, ..)| e % 5 == 0 || *e + 1 == epochs) {
        println!("  epoch {e}: clean {lc:.4} attack {la:.4} total {lt:.4}");
    }
    println!("joint training in {:.1}s", (t2 - t1).as_secs_f64());
    let trig = state.trigger.clone().unwrap();
    let m = evaluate(&state, Some(&trig), Some(0), &ds.test_images, &ds.test_labels).unwrap();
    println!("FULL: acc {:.4} asr {:.4} (baseline {:.4})", m.acc, m.asr, acc0);
    let flat = state.attack.as_ref().unwrap().flat_values();
    let sp = weight_sparsity_stats(&flat, 1e-6).unwrap();
    println!("sparsity: {}/{} near-zero ({:.4}), active {}", sp.near_zero, sp.total, sp.near_zero_fraction, sp.active);
    if sp.active > 0 {
        // per-tensor core membership
        let (core, _) = partition_core_periphery(&flat, 1e-6, 0.05).unwrap();
        let module = state.attack.as_ref().unwrap();
        let mut offset = 0;
        for p in module.params() {
            let n = p.numel();
            let in_core = core.iter().filter(|&&i| i >= offset && i < offset + n).count();
            let act = p.value.data().iter().filter(|w| w.abs() >= 1e-6).count();
            let mut mags: Vec<f32> = p.value.data().iter().map(|w| w.abs()).filter(|&a| a >= 1e-6).collect();
            mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |f: f64| -> f32 { if mags.is_empty() { 0.0 } else { mags[((mags.len() - 1) as f64 * f) as usize] } };
            println!("  {}: {} active / {} total, {} in core | med {:.4} p95 {:.4} max {:.4}",
                p.name, act, n, in_core, q(0.5), q(0.95), q(1.0));
            offset += n;
        }
        let dis = dissect(&state, &trig, 0, &ds.test_images, &ds.test_labels).unwrap();
        println!("DISSECT core({:.4} of total): core acc {:.4} asr {:.4} | periph acc {:.4} asr {:.4}",
            dis.core_fraction, dis.core_only.acc, dis.core_only.asr, dis.periphery_only.acc, dis.periphery_only.asr);
        // skeleton size probe: keep-top-q sweep
        for q in [0.02f64, 0.05, 0.1, 0.2, 0.4] {
            let (core_q, _) = partition_core_periphery(&flat, 1e-6, q).unwrap();
            let mut masked = vec![0.0f32; flat.len()];
            for &i in &core_q { masked[i] = flat[i]; }
            let mut copy = state.clone();
            copy.attack.as_mut().unwrap().set_flat(&masked).unwrap();
            let m = evaluate(&copy, Some(&trig), Some(0), &ds.test_images, &ds.test_labels).unwrap();
            println!("  keep-top {q:.2} ({} w): acc {:.4} asr {:.4}", core_q.len(), m.acc, m.asr);
        }
    }
    let t3 = Instant::now();
    let (before, after) = perturbative_finetune_test(&state, &ds, 0, 1, seed).unwrap();
    println!("PERTURB: {:.4}/{:.4} -> {:.4}/{:.4} ({:.1}s)", before.acc, before.asr, after.acc, after.asr, t3.elapsed().as_secs_f64());
    let ratios: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let t4 = Instant::now();
    let curve = prune_sweep(&state, &ratios, &trig, 0, &ds.test_images, &ds.test_labels).unwrap();
    for (r, acc, asr) in &curve.rows {
        println!("  prune {r:.1}: acc {acc:.4} asr {asr:.4}");
    }
    println!("sweep in {:.1}s; total {:.1}s", t4.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64());
}
