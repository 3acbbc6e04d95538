use aot_core::engine::{Engine, EngineConfig, EngineParams, Variant};
use aot_core::eval::LossConfig;
use aot_core::ident::cosine_matrix;
use aot_core::rng::Rng;
use aot_core::scalar::Dtype;
use aot_core::synth::{gen_synthetic, ShapeKind, SyntheticSpec};
use aot_core::train::{train_step, AdamW, SequenceRef, TrainConfig};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let cfg = EngineConfig {
        variant: Variant::AotS, layers: 2, channels: 32, heads: 2, lambda: 7,
        n_short: 1, m_identities: 10, delta_train: 2, delta_test: 5,
        sine_pos: true, rel_pos: true, precision: Dtype::Single, seed: 7,
    };
    let occl = std::env::var("OCCL").is_ok();
    let speed: i32 = std::env::var("SPEED").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
    let shapes = if std::env::var("RECT").is_ok() {
        vec![ShapeKind::Rectangle]
    } else {
        vec![ShapeKind::Rectangle, ShapeKind::Ellipse]
    };
    let mk = move |seed: u64| gen_synthetic(&SyntheticSpec {
        size: 64, frames: 5, objects: 4, shapes: shapes.clone(),
        max_speed: speed, occlusion_allowed: occl, seed,
    }).unwrap();
    let train: Vec<_> = (0..8).map(|i| mk(7000 + i)).collect();
    let mut params = EngineParams::<f32>::init(&cfg).unwrap();
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let tcfg = TrainConfig { steps, lr, batch_size: 4, ..TrainConfig::default() };
    let mut opt = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let mut rng = Rng::seed_from(7);
    let mut lc = LossConfig::default();
    lc.bootstrap_ratio = 1.0;
    let bs: usize = std::env::var("BS").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
    for step in 0..steps {
        let batch: Vec<SequenceRef<'_>> = (0..bs).map(|i| {
            let s = &train[(step * bs + i) % 8];
            SequenceRef { frames: &s.frames, labels: &s.labels }
        }).collect();
        opt.lr = tcfg.lr_at(step);
        let ratio = if std::env::var("LATEBOOT").is_ok() {
            let f = step as f64 / steps as f64;
            if f < 0.7 { 1.0 } else if f < 0.9 { 1.0 - 0.75 * (f - 0.7) / 0.2 } else { 0.25 }
        } else { 1.0 };
        let teacher = std::env::var("TEACH").is_ok();
        train_step(&mut params, &cfg, &batch, &mut opt, &lc, ratio, teacher, &mut rng).unwrap();
    }
    let engine = Engine::new(cfg, params).unwrap();
    // bank health
    let cm = cosine_matrix(&engine.params.patch_bank.derived_bank().unwrap()).unwrap();
    let mut offdiag: Vec<f32> = Vec::new();
    for i in 0..10 { for j in 0..10 { if i != j { offdiag.push(cm.at2(i, j)); } } }
    let maxod = offdiag.iter().cloned().fold(f32::MIN, f32::max);
    let meanod = offdiag.iter().sum::<f32>() / offdiag.len() as f32;
    println!("bank cosines: mean {meanod:.3} max {maxod:.3}");
    // predictions on a TRAIN sequence
    let seq = &train[0];
    let out = engine.run_sequence(&seq.frames, &seq.labels[0], None, false).unwrap();
    let r = &out.frames[0];
    let gt = &seq.labels[1];
    let mut conf = [[0usize; 4]; 4];
    for (p, g) in r.labels.labels().iter().zip(gt.labels()) { conf[*g as usize][*p as usize] += 1; }
    println!("train f2 confusion: {conf:?}");
    let mut stats = vec![(0.0f64, 0usize); 4];
    for (p, &l) in gt.labels().iter().enumerate() {
        stats[l as usize].0 += r.prob.at2(p, l as usize) as f64;
        stats[l as usize].1 += 1;
    }
    for (l, (sum, n)) in stats.iter().enumerate() {
        if *n > 0 { println!("region {l}: mean p(true) {:.3}", sum / *n as f64); }
    }
    let j = aot_core::eval::mean_region_j(&r.labels, gt).unwrap();
    println!("train f2 J {j:.3}");
    let holdout: Vec<_> = (0..2).map(|i| mk(7900 + i)).collect();
    let mut hj = 0.0; let mut n = 0;
    for seq in &holdout {
        let out = engine.run_sequence(&seq.frames, &seq.labels[0], None, false).unwrap();
        for (r, gt) in out.frames.iter().zip(&seq.labels[1..]) {
            hj += aot_core::eval::mean_region_j(&r.labels, gt).unwrap();
            n += 1;
        }
    }
    println!("holdout J {:.4}", hj / n as f64);
}
