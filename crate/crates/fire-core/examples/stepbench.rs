use fire_core::data::{generate_phantom_pair, ModalityStyle};
use fire_core::model::{FireModel, ModelConfig};
use fire_core::tensor::no_grad;
use std::time::Instant;

fn main() {
    let rb: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(4);
    let cfg = ModelConfig { base_channels: 16, resnet_blocks: rb, ..Default::default() };
    let model = FireModel::<f32>::new(cfg, 1).unwrap();
    let (a, b) = generate_phantom_pair(3, 2, 64, ModalityStyle::Plain, ModalityStyle::InvertedGamma).unwrap();

    let n = 6;
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = no_grad(|| model.forward_pair(&a.image, &b.image).unwrap());
    }
    let fwd_nograd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    for _ in 0..n {
        let _ = model.forward_pair(&a.image, &b.image).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    for _ in 0..n {
        let bun = model.forward_pair(&a.image, &b.image).unwrap();
        let (total, _) = fire_core::loss::total_loss(&bun).unwrap();
        total.backward().unwrap();
    }
    let full = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    for _ in 0..n {
        let _ = no_grad(|| model.encode(&a.image).unwrap());
    }
    let enc = t0.elapsed().as_secs_f64() / n as f64;

    println!("rb={rb}: encode {enc:.3}s  fwd_nograd {fwd_nograd:.3}s  fwd {fwd:.3}s  fwd+loss+bwd {full:.3}s  (bwd ~{:.3}s)", full - fwd);
}
