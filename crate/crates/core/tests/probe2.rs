//! Architecture/optimizer sweep probe, ignored by default.

use std::time::Instant;

use mucs_core::diffusion::train::{pretrain, TrainConfig};
use mucs_core::eval::PipelineConfig;
use mucs_core::rng::RngKey;

fn run_one(d_model: usize, hidden: usize, dec_hidden: usize, blocks: usize, lr: f64, steps: usize, batch: usize) {
    let mut cfg = PipelineConfig::reference();
    cfg.arch.d_model = d_model;
    cfg.arch.mlp_hidden = hidden;
    cfg.arch.dec_hidden = dec_hidden;
    cfg.arch.blocks = blocks;
    cfg.train = TrainConfig {
        steps,
        batch_size: batch,
        lr,
        warmup_steps: 100,
        weight_decay: 0.0,
        ema_momentum: 0.995,
    };
    let key = RngKey::root(7);
    let ds = cfg.build_dataset(&key).unwrap();
    let t = Instant::now();
    let pre = pretrain(&ds, &cfg.arch, &cfg.loss, &cfg.train, &key.child("pt")).unwrap();
    let h = &pre.loss_history;
    let w = 50;
    let head: f64 = h[..w].iter().sum::<f64>() / w as f64;
    let tail: f64 = h[h.len() - w..].iter().sum::<f64>() / w as f64;
    println!(
        "d={d_model} h={hidden} dh={dec_hidden} K={blocks} lr={lr} steps={steps} b={batch}: {:?} head {head:.4} tail {tail:.4} ratio {:.3} ({} params)",
        t.elapsed(),
        tail / head,
        pre.f1.params().num_params()
    );
}

#[test]
#[ignore]
fn sweep() {
    run_one(128, 256, 512, 2, 1e-3, 3000, 64);
    run_one(192, 384, 512, 2, 1e-3, 3000, 64);
    run_one(192, 384, 512, 2, 1e-3, 6000, 64);
}
