use std::path::PathBuf;

use aot_core::engine::{EngineConfig, EngineParams, Variant};
use aot_core::eval::LossConfig;
use aot_core::io::kv;
use aot_core::scalar::Dtype;
use aot_core::train::{train_toy, TrainConfig};

use crate::args::Args;
use crate::CliError;

pub fn run(raw: &[String]) -> Result<(), CliError> {
    let args = Args::parse(raw, &["teacher-forcing"])?;
    let out_dir = PathBuf::from(args.required("out")?);
    let seed: u64 = args.parse_num("seed", 7)?;

    let variant = Variant::parse(args.optional("variant").unwrap_or("aot-s"))?;
    let engine_cfg = EngineConfig {
        variant,
        layers: args.parse_num("layers", variant.layers())?,
        channels: args.parse_num("channels", 32)?,
        heads: args.parse_num("heads", 2)?,
        lambda: args.parse_num("lambda", 7)?,
        n_short: args.parse_num("n-short", 1)?,
        m_identities: args.parse_num("m", 10)?,
        delta_train: args.parse_num("delta-train", 2)?,
        delta_test: args.parse_num("delta-test", 5)?,
        sine_pos: true,
        rel_pos: true,
        precision: Dtype::Single,
        seed,
    };
    let train_cfg = TrainConfig {
        sequence_len: args.parse_num("seq-len", 5)?,
        steps: args.parse_num("steps", 500)?,
        lr: args.parse_num("lr", 1e-3)?,
        weight_decay: args.parse_num("wd", 0.01)?,
        seed,
        teacher_forcing: args.switch("teacher-forcing"),
        train_sequences: args.parse_num("seqs", 8)?,
        holdout_sequences: args.parse_num("holdout", 2)?,
        objects: args.parse_num::<usize>("objects", 3)? + 1,
        image_size: args.parse_num("size", 64)?,
        loss: LossConfig::default(),
    };
    args.finish()?;

    std::fs::create_dir_all(&out_dir)?;
    let (params, report) = if train_cfg.steps == 0 {
        // Zero steps: save the deterministic random init and stop.
        (
            EngineParams::<f32>::init(&engine_cfg)?,
            aot_core::train::TrainReport {
                losses: vec![],
                final_loss: f64::NAN,
                holdout_j: f64::NAN,
                holdout_f: f64::NAN,
            },
        )
    } else {
        train_toy::<f32>(&train_cfg, &engine_cfg)?
    };
    params.save(&out_dir, &engine_cfg)?;

    // Loss curve and report.
    let mut curve = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l:.9}\n"));
    }
    std::fs::write(out_dir.join("loss_curve.csv"), curve)?;

    let mut pairs: Vec<(String, String)> = vec![
        ("steps".into(), train_cfg.steps.to_string()),
        ("seed".into(), seed.to_string()),
        ("lr".into(), train_cfg.lr.to_string()),
        ("weight_decay".into(), train_cfg.weight_decay.to_string()),
        ("sequences".into(), train_cfg.train_sequences.to_string()),
        ("holdout_sequences".into(), train_cfg.holdout_sequences.to_string()),
    ];
    if train_cfg.steps > 0 {
        pairs.push(("final_loss".into(), format!("{:.9}", report.final_loss)));
        pairs.push(("holdout_j".into(), format!("{:.9}", report.holdout_j)));
        pairs.push(("holdout_f".into(), format!("{:.9}", report.holdout_f)));
    }
    kv::write_kv(&out_dir.join("report.txt"), &pairs)?;

    if train_cfg.steps > 0 {
        println!(
            "trained {} steps; final loss {:.4}; held-out J {:.4}, F {:.4}; weights in {}",
            train_cfg.steps,
            report.final_loss,
            report.holdout_j,
            report.holdout_f,
            out_dir.display()
        );
    } else {
        println!("saved random-init weights to {}", out_dir.display());
    }
    Ok(())
}
