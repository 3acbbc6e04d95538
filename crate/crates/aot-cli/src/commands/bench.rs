use std::path::PathBuf;

use aot_core::engine::{Engine, EngineConfig, EngineParams, Variant};
use aot_core::ident::ObjectMask;
use aot_core::rng::Rng;
use aot_core::scalar::Dtype;
use aot_core::synth::{gen_synthetic, ShapeKind, SyntheticSpec};

use crate::args::{Args, UsageError};
use crate::CliError;

const WARMUP: usize = 2;

/// Nearest-rank order statistics over sorted microsecond samples.
fn median_iqr(samples: &mut [u64]) -> (f64, f64) {
    samples.sort_unstable();
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2] as f64
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) as f64 / 2.0
    };
    let q1 = samples[n / 4] as f64;
    let q3 = samples[(3 * n) / 4].min(samples[n - 1]) as f64;
    (median, q3 - q1)
}

pub fn run(raw: &[String]) -> Result<(), CliError> {
    let args = Args::parse(raw, &["random-init"])?;
    let sizes: Vec<usize> = args.num_list("sizes")?;
    let object_counts: Vec<usize> = args.num_list("objects")?;
    let repeats: usize = args.required_num("repeats")?;
    let out_path = PathBuf::from(args.required("out")?);
    let seed: u64 = args.parse_num("seed", 7)?;

    if repeats < 2 {
        return Err(UsageError(
            "--repeats must be at least 2; a single sample has no spread".into(),
        )
        .into());
    }
    if object_counts.iter().any(|&n| n == 0) {
        return Err(UsageError("--objects entries must be >= 1".into()).into());
    }
    let max_objects = *object_counts.iter().max().unwrap();

    let engine: Engine<f32> = match args.optional("weights") {
        Some(dir) => {
            args.finish()?;
            let (cfg, params) = EngineParams::load(std::path::Path::new(dir))?;
            if cfg.m_identities < max_objects + 1 {
                return Err(UsageError(format!(
                    "checkpoint holds {} identities; {} objects plus background need {}",
                    cfg.m_identities,
                    max_objects,
                    max_objects + 1
                ))
                .into());
            }
            Engine::new(cfg, params)?
        }
        None => {
            if !args.switch("random-init") {
                return Err(UsageError(
                    "either --weights DIR or --random-init is required".into(),
                )
                .into());
            }
            let cfg = EngineConfig {
                variant: Variant::AotS,
                layers: args.parse_num("layers", 2)?,
                channels: args.parse_num("channels", 32)?,
                heads: args.parse_num("heads", 2)?,
                lambda: args.parse_num("lambda", 7)?,
                n_short: 1,
                // Background consumes an identity slot, so the bank must
                // hold one more vector than the largest target count.
                m_identities: 10.max(max_objects + 1),
                delta_train: 2,
                delta_test: 5,
                sine_pos: true,
                rel_pos: true,
                precision: Dtype::Single,
                seed,
            };
            args.finish()?;
            Engine::init_random(cfg)?
        }
    };

    let threads = super::aot_threads();
    let mut csv = String::new();
    csv.push_str(&format!("# aot_threads={threads}\n"));
    csv.push_str(&format!("# seed={seed}\n"));
    csv.push_str(&format!(
        "# channels={} heads={} layers={} lambda={} m_identities={}\n",
        engine.cfg.channels,
        engine.cfg.heads,
        engine.cfg.layers,
        engine.cfg.lambda,
        engine.cfg.m_identities
    ));
    csv.push_str(&format!("# warmup={WARMUP} repeats={repeats}\n"));
    csv.push_str("mode,size,objects,median_micros,iqr_micros\n");

    let mut unstable = false;
    for &size in &sizes {
        for &targets in &object_counts {
            let spec = SyntheticSpec {
                size,
                frames: 2,
                objects: targets + 1,
                shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
                max_speed: 2,
                occlusion_allowed: true,
                seed: seed
                    .wrapping_mul(31)
                    .wrapping_add((size * 1000 + targets) as u64),
            };
            let seq = gen_synthetic(&spec)?;
            let reference = &seq.labels[0];
            let probe = &seq.frames[1];

            // Unified: one pass regardless of the object count.
            let mut rng = Rng::seed_from(seed);
            let state = engine.init_first_frame(&seq.frames[0], reference, &mut rng)?;
            let mut samples = Vec::with_capacity(repeats);
            for i in 0..WARMUP + repeats {
                let outcome = engine.propagate_frame(probe, &state, false)?;
                if i >= WARMUP {
                    samples.push(outcome.result.micros);
                }
            }
            let (median, iqr) = median_iqr(&mut samples);
            unstable |= iqr > 0.5 * median;
            csv.push_str(&format!("unified,{size},{targets},{median:.1},{iqr:.1}\n"));

            // Post-ensemble: one pass per target against its own binary
            // reference; the frame time is the sum over passes.
            let mut states = Vec::with_capacity(targets);
            for target in 1..=targets {
                let labels: Vec<u8> = reference
                    .labels()
                    .iter()
                    .map(|&l| (l as usize == target) as u8)
                    .collect();
                let binary = ObjectMask::new(size, size, labels, 2)?;
                states.push(engine.init_first_frame(&seq.frames[0], &binary, &mut rng)?);
            }
            let mut samples = Vec::with_capacity(repeats);
            for i in 0..WARMUP + repeats {
                let mut total = 0u64;
                for state in &states {
                    total += engine.propagate_frame(probe, state, false)?.result.micros;
                }
                if i >= WARMUP {
                    samples.push(total);
                }
            }
            let (median, iqr) = median_iqr(&mut samples);
            unstable |= iqr > 0.5 * median;
            csv.push_str(&format!("ensemble,{size},{targets},{median:.1},{iqr:.1}\n"));
        }
    }

    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out_path, &csv)?;
    print!("{csv}");
    if unstable {
        return Err(CliError {
            code: 4,
            message: "timings unstable (IQR above 50% of the median); the host is noisy".into(),
        });
    }
    Ok(())
}
