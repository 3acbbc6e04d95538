pub mod bench;
pub mod dump;
pub mod gen;
pub mod run;
pub mod train;

use std::path::Path;

use aot_core::engine::FrameImage;
use aot_core::ident::ObjectMask;
use aot_core::io::{kv, pgm};

use crate::CliError;

/// Load a label raster; the slot count comes from `objects_hint` when the
/// sequence metadata knows it, otherwise from the largest label present.
pub fn read_mask(path: &Path, objects_hint: Option<usize>) -> Result<ObjectMask, CliError> {
    let gray = pgm::read_pgm(path)?;
    let max_label = gray.data.iter().copied().max().unwrap_or(0) as usize;
    let n = objects_hint.unwrap_or(max_label + 1).max(max_label + 1).max(2);
    Ok(ObjectMask::new(gray.h, gray.w, gray.data, n)?)
}

/// Frames plus optional per-frame labels from a sequence directory, honoring
/// meta.txt's object count when present.
pub fn read_frames_dir(
    dir: &Path,
) -> Result<(Vec<FrameImage>, Vec<Option<ObjectMask>>, Option<usize>), CliError> {
    let meta = dir.join("meta.txt");
    let objects_hint = if meta.exists() {
        Some(kv::parse_usize(&kv::read_kv(&meta)?, "objects", &meta)?)
    } else {
        None
    };
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for i in 1.. {
        let fpath = dir.join(format!("frame_{i:04}.ppm"));
        if !fpath.exists() {
            break;
        }
        frames.push(FrameImage::from_rgb8(&pgm::read_ppm(&fpath)?));
        let lpath = dir.join(format!("label_{i:04}.pgm"));
        labels.push(if lpath.exists() {
            Some(read_mask(&lpath, objects_hint)?)
        } else {
            None
        });
    }
    if frames.is_empty() {
        return Err(CliError {
            code: 2,
            message: format!("{}: no frame_0001.ppm found", dir.display()),
        });
    }
    Ok((frames, labels, objects_hint))
}

pub fn write_labels(path: &Path, mask: &ObjectMask) -> Result<(), CliError> {
    pgm::write_pgm(
        path,
        &pgm::Gray {
            w: mask.w(),
            h: mask.h(),
            data: mask.labels().to_vec(),
        },
    )?;
    Ok(())
}

/// The thread cap honored by the engine; compute kernels are single-threaded,
/// so this is min(AOT_THREADS, 1), but the requested value is echoed into
/// benchmark headers for host bookkeeping.
pub fn aot_threads() -> usize {
    std::env::var("AOT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}
