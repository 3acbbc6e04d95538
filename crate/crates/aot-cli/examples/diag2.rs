// Pairwise object separability at the matching representation, at init.
use aot_core::engine::{pool_labels_majority, Engine, EngineConfig, EngineParams, Variant};
use aot_core::rng::Rng;
use aot_core::scalar::Dtype;
use aot_core::synth::{gen_synthetic, ShapeKind, SyntheticSpec};
use aot_core::lstt::{lstt_stack_forward, StackMemory};

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) { ab += (*x as f64)*(*y as f64); aa += (*x as f64).powi(2); bb += (*y as f64).powi(2); }
    ab / (aa.sqrt()*bb.sqrt()).max(1e-12)
}

fn main() {
    let cfg = EngineConfig {
        variant: Variant::AotS, layers: 2, channels: 32, heads: 2, lambda: 7,
        n_short: 1, m_identities: 10, delta_train: 2, delta_test: 5,
        sine_pos: true, rel_pos: true, precision: Dtype::Single, seed: 7,
    };
    let params = EngineParams::<f32>::init(&cfg).unwrap();
    let engine = Engine::new(cfg, params).unwrap();
    let seq = gen_synthetic(&SyntheticSpec {
        size: 64, frames: 2, objects: 4, shapes: vec![ShapeKind::Rectangle],
        max_speed: 1, occlusion_allowed: true, seed: 7001,
    }).unwrap();
    let feat_labels = pool_labels_majority(&seq.labels[0].pad_to_multiple(16));
    println!("feat labels: {feat_labels:?}");

    let enc = engine.encode_frame(&seq.frames[0]).unwrap();
    // group encoder cells by label, print mean pairwise cos within/between
    let mut groups: Vec<Vec<usize>> = vec![vec![]; 4];
    for (p, &l) in feat_labels.iter().enumerate() { groups[l as usize].push(p); }
    println!("cells per label: {:?}", groups.iter().map(|g| g.len()).collect::<Vec<_>>());
    for a in 0..4 {
        for b in a..4 {
            if groups[a].is_empty() || groups[b].is_empty() { continue; }
            let mut s = 0.0; let mut n = 0;
            for &pa in &groups[a] { for &pb in &groups[b] {
                if a == b && pa == pb { continue; }
                s += cos(enc.feat.row(pa), enc.feat.row(pb)); n += 1;
            }}
            if n > 0 { println!("enc cos label {a} vs {b}: {:.3}", s / n as f64); }
        }
    }
    // and at the u2 (post-self-attn, LN2) level of layer 0
    let embed = aot_core::ident::patch_id_embed(&seq.labels[0].pad_to_multiple(16), &engine.params.patch_bank,
        &aot_core::ident::sample_assignment(&mut Rng::seed_from(7), 4, 10).unwrap()).unwrap();
    let pos = aot_core::attn::sine_pos_embed::<f32>(enc.fh, enc.fw, 32).unwrap();
    let (_, caches) = lstt_stack_forward(&enc.feat, enc.fh, enc.fw,
        &StackMemory::FirstFrame { embed: &embed }, &engine.params.stack, Some(&pos.table), None).unwrap();
    let u2 = &caches[0].long_input;
    for a in 0..4 {
        for b in a..4 {
            if groups[a].is_empty() || groups[b].is_empty() { continue; }
            let mut s = 0.0; let mut n = 0;
            for &pa in &groups[a] { for &pb in &groups[b] {
                if a == b && pa == pb { continue; }
                s += cos(u2.row(pa), u2.row(pb)); n += 1;
            }}
            if n > 0 { println!("u2 cos label {a} vs {b}: {:.3}", s / n as f64); }
        }
    }
}
