//! Experiment harness: train on in-memory phantoms and print the Dice
//! trajectory. Usage:
//!   toytrain <iters> <lr_taf> <lr_tnr> <lr_gf> [eval_every] [pairs] [nonrigid01] [base] [rb] [seed]

use fire_core::data::{generate_phantom_pair, ModalityStyle, PerturbationSpec, Volume};
use fire_core::eval::evaluate;
use fire_core::model::ModelConfig;
use fire_core::trainer::{train_step, Optimizers, TrainConfig, TrainSetup};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: u64 = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(400);
    let lr_taf: f64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(3e-4);
    let lr_tnr: f64 = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let lr_gf: f64 = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let eval_every: u64 = args.get(5).and_then(|v| v.parse().ok()).unwrap_or(200);
    let n_pairs: usize = args.get(6).and_then(|v| v.parse().ok()).unwrap_or(200);
    let nonrigid: bool = args.get(7).map(|v| v == "1").unwrap_or(true);
    let base: usize = args.get(8).and_then(|v| v.parse().ok()).unwrap_or(16);
    let rb: usize = args.get(9).and_then(|v| v.parse().ok()).unwrap_or(4);
    let seed: u64 = args.get(10).and_then(|v| v.parse().ok()).unwrap_or(42);
    // diagnostic switches via env
    let same_style = std::env::var("TOY_SAMESTYLE").is_ok();
    let strength: [f64; 2] = std::env::var("TOY_STRENGTH")
        .ok()
        .and_then(|v| {
            let parts: Vec<f64> = v.split(',').filter_map(|p| p.parse().ok()).collect();
            (parts.len() == 2).then(|| [parts[0], parts[1]])
        })
        .unwrap_or([0.2, 0.5]);
    let style_b = if same_style {
        ModalityStyle::Plain
    } else {
        ModalityStyle::InvertedGamma
    };

    let setup = TrainSetup {
        train: TrainConfig {
            iters,
            lr_taf,
            lr_tnr,
            lr_gf,
            seed,
            ..Default::default()
        },
        model: ModelConfig {
            base_channels: base,
            resnet_blocks: rb,
            ..Default::default()
        },
        perturbation: PerturbationSpec {
            include_nonrigid: nonrigid,
            strength,
            ..Default::default()
        },
    };
    eprintln!(
        "iters={iters} lrs=({lr_taf},{lr_tnr},{lr_gf}) pairs={n_pairs} nonrigid={nonrigid} base={base} rb={rb} seed={seed}"
    );

    let pairs: Vec<(Volume, Volume)> = (0..n_pairs)
        .map(|i| {
            generate_phantom_pair(
                fire_core::data::pair_seed(1, i),
                2,
                64,
                ModalityStyle::Plain,
                style_b,
            )
            .unwrap()
        })
        .collect();
    let eval_cases: Vec<(Volume, Volume)> = (0..4)
        .map(|i| {
            generate_phantom_pair(
                fire_core::data::pair_seed(777, i),
                2,
                64,
                ModalityStyle::Plain,
                style_b,
            )
            .unwrap()
        })
        .collect();

    let mut model = fire_core::model::FireModel::new(setup.model.clone(), seed).unwrap();
    let mut opt = Optimizers::new(&setup.train);

    let report0 = evaluate(&model, &eval_cases, &setup.perturbation, 5, 9, 1).unwrap();
    eprintln!(
        "iter 0: dice u/a/f = {:.3}/{:.3}/{:.3}  ic {:.4}  jac {:.4}  |u| {:.4}",
        report0.overall[0].mean,
        report0.overall[1].mean,
        report0.overall[2].mean,
        report0.ic_residual.mean,
        report0.jacobian_positive_fraction.mean,
        report0.mean_abs_displacement.mean,
    );
    let ic0 = report0.ic_residual.mean;

    let t0 = Instant::now();
    let mut recent = Vec::new();
    for it in 1..=iters {
        // same sampling scheme as trainer::train
        let (xa, xb) = {
            use fire_core::data::{apply_ground_truth_warp, pair_seed, random_perturbation_rng};
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(pair_seed(seed, it as usize));
            let idx = rng.random_range(0..pairs.len());
            let (a, b) = &pairs[idx];
            let warp =
                random_perturbation_rng(&setup.perturbation, 2, a.spatial_shape(), &mut rng)
                    .unwrap();
            if rng.random_bool(0.5) {
                (
                    apply_ground_truth_warp(a, &warp).unwrap().image,
                    b.image.clone(),
                )
            } else {
                (
                    a.image.clone(),
                    apply_ground_truth_warp(b, &warp).unwrap().image,
                )
            }
        };
        let d = train_step(&mut model, &xa, &xb, &mut opt, it).unwrap();
        recent.push(d.total);
        if recent.len() > 50 {
            recent.remove(0);
        }
        if it % eval_every == 0 || it == iters {
            let mean_loss: f64 = recent.iter().sum::<f64>() / recent.len() as f64;
            let r = evaluate(&model, &eval_cases, &setup.perturbation, 5, 9, 1).unwrap();
            eprintln!(
                "iter {it}: loss {:.4}  dice u/a/f = {:.3}/{:.3}/{:.3}  ic {:.4} ({:.2}x)  jac {:.4}  |u| {:.4}  [{:.1}s]",
                mean_loss,
                r.overall[0].mean,
                r.overall[1].mean,
                r.overall[2].mean,
                r.ic_residual.mean,
                r.ic_residual.mean / ic0.max(1e-12),
                r.jacobian_positive_fraction.mean,
                r.mean_abs_displacement.mean,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
