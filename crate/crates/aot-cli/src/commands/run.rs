use std::path::PathBuf;

use aot_core::engine::{Engine, EngineParams, EnsembleMode, SequenceResult, Variant};
use aot_core::eval::{mean_boundary_f, mean_region_j};
use aot_core::ident::ObjectMask;
use aot_core::io::kv;

use crate::args::{Args, UsageError};
use crate::CliError;

pub fn run(raw: &[String]) -> Result<(), CliError> {
    let args = Args::parse(raw, &[])?;
    let frames_dir = PathBuf::from(args.required("frames")?);
    let ref_path = PathBuf::from(args.required("ref")?);
    let variant = Variant::parse(args.required("variant")?)?;
    let weights_dir = PathBuf::from(args.required("weights")?);
    let out_dir = PathBuf::from(args.required("out")?);
    let baseline = EnsembleMode::parse(args.optional("baseline").unwrap_or("none"))?;
    args.finish()?;

    let (mut cfg, params) = EngineParams::<f32>::load(&weights_dir)?;
    if variant.layers() != cfg.layers {
        return Err(UsageError(format!(
            "--variant {} needs {} layers but the checkpoint has {}",
            variant.name(),
            variant.layers(),
            cfg.layers
        ))
        .into());
    }
    cfg.variant = variant;
    let engine = Engine::new(cfg, params)?;

    let (frames, labels, objects_hint) = super::read_frames_dir(&frames_dir)?;
    let reference = super::read_mask(&ref_path, objects_hint)?;
    let targets = reference.n() - 1;

    let result = match baseline {
        None => engine.run_sequence(&frames, &reference, None, false)?,
        Some(mode) => engine.post_ensemble_baseline(&frames, &reference, mode)?,
    };

    std::fs::create_dir_all(&out_dir)?;
    write_outputs(&out_dir, &result, &labels, targets, baseline)?;
    println!(
        "propagated {} frames ({} targets) into {}",
        result.frames.len(),
        targets,
        out_dir.display()
    );
    Ok(())
}

fn write_outputs(
    out_dir: &std::path::Path,
    result: &SequenceResult<f32>,
    gt: &[Option<ObjectMask>],
    targets: usize,
    baseline: Option<EnsembleMode>,
) -> Result<(), CliError> {
    // Predicted label rasters for t = 2..T.
    for (i, frame) in result.frames.iter().enumerate() {
        super::write_labels(
            &out_dir.join(format!("label_{:04}.pgm", i + 2)),
            &frame.labels,
        )?;
    }

    // Timing CSV: one row per engine pass.
    let mut csv = String::from("frame,objects,micros\n");
    for (i, frame) in result.frames.iter().enumerate() {
        let t = i + 2;
        match baseline {
            None => csv.push_str(&format!("{t},{targets},{}\n", frame.micros)),
            Some(_) => {
                for &us in &frame.pass_micros {
                    csv.push_str(&format!("{t},1,{us}\n"));
                }
            }
        }
    }
    std::fs::write(out_dir.join("timing.csv"), csv)?;

    // Metrics: per-frame J/F against any ground truth present, plus timing
    // aggregates. Values are recomputable from the dumped rasters.
    let mut pairs: Vec<(String, String)> = vec![
        (
            "mode".into(),
            match baseline {
                None => "unified".into(),
                Some(EnsembleMode::Softmax) => "baseline-softmax".into(),
                Some(EnsembleMode::SoftAggregation) => "baseline-softagg".into(),
            },
        ),
        ("frames".into(), (result.frames.len() + 1).to_string()),
        ("objects".into(), targets.to_string()),
        ("assignment".into(), result.assignment.serialize()),
    ];
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    let mut counted = 0usize;
    for (i, frame) in result.frames.iter().enumerate() {
        let t = i + 2;
        if let Some(Some(gt_mask)) = gt.get(i + 1) {
            let j = mean_region_j(&frame.labels, gt_mask)?;
            let f = mean_boundary_f(&frame.labels, gt_mask, 1)?;
            pairs.push((format!("j_{t:04}"), format!("{j:.9}")));
            pairs.push((format!("f_{t:04}"), format!("{f:.9}")));
            j_sum += j;
            f_sum += f;
            counted += 1;
        }
    }
    if counted > 0 {
        pairs.push(("mean_j".into(), format!("{:.9}", j_sum / counted as f64)));
        pairs.push(("mean_f".into(), format!("{:.9}", f_sum / counted as f64)));
    }
    let mut micros: Vec<u64> = result.frames.iter().map(|f| f.micros).collect();
    let total: u64 = micros.iter().sum();
    micros.sort_unstable();
    pairs.push(("total_micros".into(), total.to_string()));
    pairs.push((
        "median_micros".into(),
        micros.get(micros.len() / 2).copied().unwrap_or(0).to_string(),
    ));
    kv::write_kv(&out_dir.join("metrics.txt"), &pairs)?;
    Ok(())
}
