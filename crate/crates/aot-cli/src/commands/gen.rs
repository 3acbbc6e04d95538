use std::path::PathBuf;

use aot_core::synth::{gen_synthetic, write_sequence, ShapeKind, SyntheticSpec};

use crate::args::{Args, UsageError};
use crate::CliError;

pub fn run(raw: &[String]) -> Result<(), CliError> {
    let args = Args::parse(raw, &["no-occlusion"])?;
    let out = PathBuf::from(args.required("out")?);
    let size: usize = args.parse_num("size", 64)?;
    let frames: usize = args.parse_num("frames", 5)?;
    let targets: usize = args.parse_num("objects", 3)?;
    let speed: i32 = args.parse_num("speed", 3)?;
    let seed: u64 = args.parse_num("seed", 7)?;
    let shapes = match args.optional("shapes").unwrap_or("rect,ellipse") {
        "rect" => vec![ShapeKind::Rectangle],
        "ellipse" => vec![ShapeKind::Ellipse],
        "rect,ellipse" | "ellipse,rect" => vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
        other => {
            return Err(UsageError(format!(
                "--shapes: expected rect|ellipse|rect,ellipse, got {other:?}"
            ))
            .into())
        }
    };
    args.finish()?;

    let spec = SyntheticSpec {
        size,
        frames,
        objects: targets + 1,
        shapes,
        max_speed: speed,
        occlusion_allowed: !args.switch("no-occlusion"),
        seed,
    };
    let seq = gen_synthetic(&spec)?;
    write_sequence(&out, &seq)?;
    println!(
        "wrote {} frames of {}x{} with {} targets to {}",
        frames,
        size,
        size,
        targets,
        out.display()
    );
    Ok(())
}
