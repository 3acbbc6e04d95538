use std::path::PathBuf;

use aot_core::engine::{
    pool_labels_majority, propagate_mask_through_attention, Engine, EngineParams,
};
use aot_core::io::{kv, pgm};
use aot_core::rng::Rng;
use aot_core::scalar::Scalar;
use aot_core::tensor::Tensor;

use crate::args::{Args, UsageError};
use crate::CliError;

/// Scale a [0, 1] map to an 8-bit raster.
fn to_pgm(map: &Tensor<f32>, col: usize, h: usize, w: usize) -> pgm::Gray {
    let data = (0..h * w)
        .map(|p| (map.at2(p, col).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pgm::Gray { w, h, data }
}

pub fn run(raw: &[String]) -> Result<(), CliError> {
    let args = Args::parse(raw, &[])?;
    let frames_dir = PathBuf::from(args.required("frames")?);
    let ref_path = PathBuf::from(args.required("ref")?);
    let weights_dir = PathBuf::from(args.required("weights")?);
    let layer: usize = args.required_num("layer")?;
    let kind = args.required("kind")?.to_string();
    let frame: usize = args.required_num("frame")?;
    let out_dir = PathBuf::from(args.required("out")?);
    args.finish()?;

    if kind != "long" && kind != "short" {
        return Err(UsageError(format!("--kind: expected long|short, got {kind:?}")).into());
    }

    let (cfg, params) = EngineParams::<f32>::load(&weights_dir)?;
    if layer == 0 || layer > cfg.layers {
        return Err(UsageError(format!(
            "--layer {layer} out of range; the checkpoint has {} layers",
            cfg.layers
        ))
        .into());
    }
    if frame < 2 {
        return Err(UsageError("--frame must be >= 2 (frame 1 is the reference)".into()).into());
    }
    let engine = Engine::new(cfg, params)?;

    let (frames, gt_labels, objects_hint) = super::read_frames_dir(&frames_dir)?;
    if frame > frames.len() {
        return Err(UsageError(format!(
            "--frame {frame} beyond the {} available frames",
            frames.len()
        ))
        .into());
    }
    let reference = super::read_mask(&ref_path, objects_hint)?;
    let n_objects = reference.n();

    // Replay the sequence up to the frame before the requested one, then
    // propagate it once more with attention collection on.
    let mut rng = Rng::seed_from(engine.cfg.seed);
    let mut state = engine.init_first_frame(&frames[0], &reference, &mut rng)?;
    for t in 2..frame {
        let outcome = engine.propagate_frame(&frames[t - 1], &state, false)?;
        engine.update_memory(
            &mut state,
            t,
            &outcome.result.labels,
            &outcome.caches,
            engine.cfg.delta_test,
        )?;
    }
    let outcome = engine.propagate_frame(&frames[frame - 1], &state, true)?;
    let maps = outcome.result.attention.as_ref().expect("maps collected");
    let layer_maps = &maps[layer - 1];
    let (map, source_labels): (&Tensor<f32>, Vec<u8>) = if kind == "long" {
        let labels: Vec<u8> = state.layers[layer - 1]
            .long
            .iter()
            .flat_map(|e| e.feat_labels.iter().copied())
            .collect();
        (&layer_maps.long, labels)
    } else {
        let labels: Vec<u8> = state.layers[layer - 1]
            .short
            .iter()
            .flat_map(|e| e.feat_labels.iter().copied())
            .collect();
        (&layer_maps.short, labels)
    };

    let propagated = propagate_mask_through_attention(map, &source_labels, n_objects)?;
    let (fh, fw) = (state.fh, state.fw);
    std::fs::create_dir_all(&out_dir)?;
    for obj in 0..n_objects {
        pgm::write_pgm(
            &out_dir.join(format!("{kind}_layer{layer}_frame{frame:04}_obj{obj}.pgm")),
            &to_pgm(&propagated, obj, fh, fw),
        )?;
    }
    // Raw attention row sums (should be 1 everywhere the softmax ran).
    let mut sums = vec![0f32; fh * fw];
    for p in 0..fh * fw {
        sums[p] = map.row(p).iter().sum();
    }
    let sum_raster = pgm::Gray {
        w: fw,
        h: fh,
        data: sums
            .iter()
            .map(|&s| (s.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    };
    pgm::write_pgm(
        &out_dir.join(format!("{kind}_layer{layer}_frame{frame:04}_rowsums.pgm")),
        &sum_raster,
    )?;

    // Stats: row-sum spread plus the per-object mass landing inside the
    // ground-truth region when labels for the frame exist.
    let mut pairs: Vec<(String, String)> = vec![
        ("kind".into(), kind.clone()),
        ("layer".into(), layer.to_string()),
        ("frame".into(), frame.to_string()),
        ("objects".into(), (n_objects - 1).to_string()),
        (
            "rowsum_min".into(),
            format!("{:.9}", sums.iter().cloned().fold(f32::INFINITY, f32::min)),
        ),
        (
            "rowsum_max".into(),
            format!("{:.9}", sums.iter().cloned().fold(0.0f32, f32::max)),
        ),
    ];
    if let Some(Some(gt)) = gt_labels.get(frame - 1) {
        let feat_gt = pool_labels_majority(&gt.pad_to_multiple(aot_core::engine::PATCH));
        for obj in 1..n_objects {
            let mut inside = 0f64;
            let mut total = 0f64;
            for p in 0..fh * fw {
                let v = propagated.at2(p, obj).to_f64();
                total += v;
                if feat_gt[p] as usize == obj {
                    inside += v;
                }
            }
            let frac = if total > 0.0 { inside / total } else { 0.0 };
            pairs.push((format!("mass_in_gt_obj{obj}"), format!("{frac:.9}")));
        }
    }
    kv::write_kv(&out_dir.join("stats.txt"), &pairs)?;
    println!(
        "wrote {kind}-term attention rasters for layer {layer}, frame {frame} to {}",
        out_dir.display()
    );
    Ok(())
}
