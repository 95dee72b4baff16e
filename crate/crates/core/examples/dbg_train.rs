use fuselab_core::analysis::evaluate;
use fuselab_core::attack::{AttackKind, AttackModule, ModelState, VpgParams};
use fuselab_core::data::{generate_dataset, SyntheticDatasetSpec};
use fuselab_core::train::{train_clean_baseline, train_joint, TrainConfig};
use fuselab_core::vit::ViTConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let eps: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4.0 / 255.0);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(20);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5);
    let mut spec = SyntheticDatasetSpec::tiny_two_class(seed);
    spec.noise_std = noise;
    let ds = generate_dataset(&spec).unwrap();
    let mut state = ModelState::new_clean(ViTConfig::tiny_two_class(), seed).unwrap();
    let mut cfg = TrainConfig::toy(AttackKind::Dynamic, seed);
    cfg.epochs = epochs;
    cfg.batch = 8;
    cfg.clean_epochs = 30;
    cfg.epsilon = eps;
    cfg.l1_phi = 0.0;
    let acc0 = train_clean_baseline(&mut state, &ds, &cfg).unwrap();
    state.attack = Some(AttackModule::Dynamic(
        VpgParams::init(&state.config, vec![1, 2], 4, cfg.seed).unwrap(),
    ));
    train_joint(&mut state, &ds, &cfg).unwrap();
    let trig = state.trigger.clone().unwrap();
    let m = evaluate(&state, Some(&trig), Some(0), &ds.test_images, &ds.test_labels).unwrap();
    println!("noise {noise} eps {eps:.4} epochs {epochs} seed {seed}: baseline {acc0} acc {} asr {}", m.acc, m.asr);
}
