use fuselab_core::attack::*;
use fuselab_core::autodiff::Tape;
use fuselab_core::data::{generate_dataset, SyntheticDatasetSpec};
use fuselab_core::theory::{svd_jacobi, Mat};
use fuselab_core::train::{train_clean_baseline, TrainConfig};
use fuselab_core::vit::{forward_trace, ViTConfig};

fn pooled_at_layers(
    state: &ModelState,
    img: &fuselab_core::autodiff::Tensor,
) -> Vec<Vec<f64>> {
    // standardized pooled base tokens entering each layer (the VPG input)
    let mut tape = Tape::new();
    let bb = state.backbone.bind(&mut tape);
    let node = tape.leaf_tensor(img);
    let mut pooled_all = Vec::new();
    forward_trace(&mut tape, &state.config, &bb, &[], node, |tape, _l, seq| {
        let base = tape.slice_rows(seq.node, 0, seq.base_count)?;
        let pooled = tape.mean_pool_rows(base);
        let w = tape.dims(pooled).1;
        let g = tape.leaf(1, w, vec![1.0; w]);
        let b = tape.leaf(1, w, vec![0.0; w]);
        let ln = tape.layer_norm(pooled, g, b)?;
        pooled_all.push(tape.value(ln).to_vec());
        Ok(seq)
    })
    .unwrap();
    pooled_all
}

fn main() {
    let seed = 11u64;
    let spec = SyntheticDatasetSpec::toy(seed);
    let ds = generate_dataset(&spec).unwrap();
    let mut state = ModelState::new_clean(ViTConfig::toy(), seed).unwrap();
    let mut cfg = TrainConfig::toy(AttackKind::Dynamic, seed);
    cfg.clean_epochs = 40;
    let acc = train_clean_baseline(&mut state, &ds, &cfg).unwrap();
    println!("baseline {acc}");
    // patch embedding spectrum
    let w = &state.backbone.patch_w.value;
    let m = Mat::from_vec(64, 64, w.data().iter().map(|&x| x as f64).collect()).unwrap();
    let svd = svd_jacobi(&m).unwrap();
    println!(
        "patch_w sigma: max {:.4} min {:.6} cond {:.1}",
        svd.sigma[0],
        svd.sigma[63],
        svd.sigma[0] / svd.sigma[63].max(1e-12)
    );
    // trigger candidates: random sign pattern at eps, and a 4px checkerboard
    let eps = 4.0f32 / 255.0;
    let mut rng = fuselab_core::rng::Rng64::new(99);
    let mut delta_rand = fuselab_core::autodiff::Tensor::zeros(&[32, 32, 1]);
    for v in delta_rand.data_mut() {
        *v = if rng.next_f64() < 0.5 { -eps } else { eps };
    }
    let mut delta_hf = fuselab_core::autodiff::Tensor::zeros(&[32, 32, 1]);
    for y in 0..32 {
        for x in 0..32 {
            let s = if (x / 2 + y / 2) % 2 == 0 { eps } else { -eps };
            delta_hf.data_mut()[y * 32 + x] = s;
        }
    }
    for (name, delta) in [("random-sign", &delta_rand), ("checker4", &delta_hf)] {
        // per-layer z of pooled shift over 60 test images
        let imgs: Vec<_> = ds.test_images.iter().take(60).cloned().collect();
        let mut clean_pooled: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut poison_pooled: Vec<Vec<Vec<f64>>> = Vec::new();
        for img in &imgs {
            clean_pooled.push(pooled_at_layers(&state, img));
            let stamped = apply_trigger_tensor(img, delta).unwrap();
            poison_pooled.push(pooled_at_layers(&state, &stamped));
        }
        print!("{name}: ");
        for layer in 0..6 {
            let d = clean_pooled[0][layer].len();
            let mut shift = vec![0.0f64; d];
            for i in 0..imgs.len() {
                for j in 0..d {
                    shift[j] += (poison_pooled[i][layer][j] - clean_pooled[i][layer][j])
                        / imgs.len() as f64;
                }
            }
            let snorm: f64 = shift.iter().map(|x| x * x).sum::<f64>().sqrt();
            // projection std of clean pooled along shift
            let mean: Vec<f64> = (0..d)
                .map(|j| clean_pooled.iter().map(|p| p[layer][j]).sum::<f64>() / imgs.len() as f64)
                .collect();
            let mut var = 0.0;
            for p in &clean_pooled {
                let proj: f64 = (0..d)
                    .map(|j| (p[layer][j] - mean[j]) * shift[j] / snorm.max(1e-12))
                    .sum();
                var += proj * proj;
            }
            let sigma = (var / imgs.len() as f64).sqrt();
            print!("L{} z={:.2} ", layer + 1, snorm / sigma.max(1e-12));
        }
        println!();
    }
}
