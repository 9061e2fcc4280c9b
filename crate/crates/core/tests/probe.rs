//! Calibration probes, ignored by default. Run with:
//! cargo test -p mucs-core --release --test probe -- --ignored --nocapture

use std::time::Instant;

use mucs_core::data::build_toy_dataset;
use mucs_core::diffusion::train::pretrain;
use mucs_core::eval::PipelineConfig;
use mucs_core::nullloss::estimate_null_loss;
use mucs_core::rng::RngKey;

#[test]
#[ignore]
fn probe_training_throughput_and_null_loss() {
    let cfg = PipelineConfig::reference();
    let key = RngKey::root(7);
    let t0 = Instant::now();
    let ds = cfg.build_dataset(&key).unwrap();
    println!("dataset {} instances in {:?}", ds.len(), t0.elapsed());

    let t1 = Instant::now();
    let est = estimate_null_loss(&ds, &cfg.arch, &cfg.loss, &cfg.null_loss, &key.child("null")).unwrap();
    println!(
        "null loss {:.4} +- {:.4} ({} realizations) in {:?}",
        est.value,
        est.standard_error(),
        est.num_realizations,
        t1.elapsed()
    );

    let mut short = cfg.train.clone();
    short.steps = 100;
    let t2 = Instant::now();
    let pre = pretrain(&ds, &cfg.arch, &cfg.loss, &short, &key.child("pretrain")).unwrap();
    let dt = t2.elapsed();
    println!(
        "100 steps in {:?} ({:.1} ms/step); loss {:.4} -> {:.4}",
        dt,
        dt.as_secs_f64() * 10.0,
        pre.loss_history[0],
        pre.loss_history.last().unwrap()
    );
    let params: usize = pre.f1.params().num_params();
    println!("model params: {params}");
}

#[test]
#[ignore]
fn probe_full_pretrain_curve() {
    let cfg = PipelineConfig::reference();
    let key = RngKey::root(7);
    let ds = cfg.build_dataset(&key).unwrap();
    let t = Instant::now();
    let pre = pretrain(&ds, &cfg.arch, &cfg.loss, &cfg.train, &key.child("pretrain")).unwrap();
    println!("{} steps in {:?}", cfg.train.steps, t.elapsed());
    let h = &pre.loss_history;
    let w = 50;
    let head: f64 = h[..w].iter().sum::<f64>() / w as f64;
    let tail: f64 = h[h.len() - w..].iter().sum::<f64>() / w as f64;
    println!("running loss: first-{w} {head:.4}  last-{w} {tail:.4}  ratio {:.3}", tail / head);
    for (i, chunk) in h.chunks(h.len() / 10).enumerate() {
        let m: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("  decile {i}: {m:.4}");
    }
}
