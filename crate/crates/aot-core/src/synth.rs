//! Deterministic synthetic sequences: colored rectangles and ellipses moving
//! over a dark background with wall bounces and index-ordered occlusion.
//! Colors are quantized to the 8-bit grid up front so a sequence survives a
//! PPM round trip bit-exactly.

use std::path::Path;

use crate::engine::FrameImage;
use crate::error::{Error, Result};
use crate::ident::ObjectMask;
use crate::io::{kv, pgm};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    /// Square frame side in pixels.
    pub size: usize,
    pub frames: usize,
    /// Object slot count including the background slot 0.
    pub objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Velocity components are drawn from [-max_speed, max_speed].
    pub max_speed: i32,
    pub occlusion_allowed: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config("synthetic: frames smaller than 32 px".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("synthetic: zero frames".into()));
        }
        if self.objects < 1 {
            return Err(Error::Config("synthetic: need the background slot".into()));
        }
        if self.objects > 250 {
            return Err(Error::Config("synthetic: too many objects".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("synthetic: no shape kinds allowed".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MovingShape {
    kind: ShapeKind,
    /// Center in pixels at the current frame.
    cy: i32,
    cx: i32,
    ry: i32,
    rx: i32,
    vy: i32,
    vx: i32,
    /// Quantized color per channel.
    color: [u8; 3],
}

impl MovingShape {
    fn covers(&self, y: i32, x: i32) -> bool {
        match self.kind {
            ShapeKind::Rectangle => {
                (y - self.cy).abs() <= self.ry && (x - self.cx).abs() <= self.rx
            }
            ShapeKind::Ellipse => {
                let dy = (y - self.cy) as f64 / self.ry as f64;
                let dx = (x - self.cx) as f64 / self.rx as f64;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn step(&mut self, size: i32) {
        self.cy += self.vy;
        self.cx += self.vx;
        if self.cy - self.ry < 0 {
            self.cy = 2 * self.ry - self.cy;
            self.vy = -self.vy;
        }
        if self.cy + self.ry > size - 1 {
            self.cy = 2 * (size - 1 - self.ry) - self.cy;
            self.vy = -self.vy;
        }
        if self.cx - self.rx < 0 {
            self.cx = 2 * self.rx - self.cx;
            self.vx = -self.vx;
        }
        if self.cx + self.rx > size - 1 {
            self.cx = 2 * (size - 1 - self.rx) - self.cx;
            self.vx = -self.vx;
        }
    }

    fn overlaps(&self, other: &MovingShape) -> bool {
        // Bounding-box test is enough for placement separation.
        (self.cy - other.cy).abs() <= self.ry + other.ry
            && (self.cx - other.cx).abs() <= self.rx + other.rx
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<FrameImage>,
    pub labels: Vec<ObjectMask>,
    pub spec: SyntheticSpec,
}

const PLACEMENT_RETRIES: usize = 4000;

/// Generate a sequence. Occlusions resolve by z-order: the higher object
/// index is in front. With `occlusion_allowed` off, placements whose
/// trajectories ever collide are rejected and redrawn within a retry budget.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = Rng::seed_from(spec.seed);
    let size = spec.size as i32;
    let bg_gray = 15 + rng.below(26) as u8;
    let bg = [bg_gray, bg_gray, bg_gray];

    let n_targets = spec.objects - 1;
    let mut shapes: Vec<MovingShape> = Vec::with_capacity(n_targets);
    for _ in 0..n_targets {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let kind = spec.shapes[rng.below(spec.shapes.len())];
            let scale = spec.size as f64 / 64.0;
            // Objects span one or more 16 px feature patches, so each one
            // owns at least one nearly pure identity cell. Disjoint
            // trajectories need slack to stay placeable, so the no-occlusion
            // mode draws from a smaller range.
            let (lo_px, hi_px) = if spec.occlusion_allowed {
                (10.0, 15.0)
            } else {
                (8.0, 12.0)
            };
            let lo = (lo_px * scale).round() as i32;
            let hi = (hi_px * scale).round() as i32;
            let ry = lo + rng.below((hi - lo + 1) as usize) as i32;
            let rx = lo + rng.below((hi - lo + 1) as usize) as i32;
            let cy = ry + rng.below((size - 2 * ry) as usize) as i32;
            let cx = rx + rng.below((size - 2 * rx) as usize) as i32;
            let speed = spec.max_speed.max(0);
            let (vy, vx) = if speed == 0 {
                (0, 0)
            } else {
                let mut v = (0, 0);
                while v == (0, 0) {
                    v = (
                        -speed + rng.below((2 * speed + 1) as usize) as i32,
                        -speed + rng.below((2 * speed + 1) as usize) as i32,
                    );
                }
                v
            };
            let color = distinct_color(&mut rng, bg, &shapes);
            let candidate = MovingShape {
                kind,
                cy,
                cx,
                ry,
                rx,
                vy,
                vx,
                color,
            };
            let collides = if spec.occlusion_allowed {
                false
            } else {
                trajectory_collides(&candidate, &shapes, spec.frames, size)
            };
            if !collides {
                shapes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::State(
                "synthetic generation: placement retry budget exceeded".into(),
            ));
        }
    }

    let mut frames = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    let mut current = shapes;
    for t in 0..spec.frames {
        if t > 0 {
            for s in current.iter_mut() {
                s.step(size);
            }
        }
        let (rgb, raster) = render_frame(&current, spec.size, bg);
        frames.push(FrameImage {
            h: spec.size,
            w: spec.size,
            rgb,
        });
        labels.push(ObjectMask::new(spec.size, spec.size, raster, spec.objects)?);
    }
    Ok(SyntheticSequence {
        frames,
        labels,
        spec: spec.clone(),
    })
}

/// Rasterize one frame back to front: the higher object index is in front,
/// so occluded pixels take the front shape's label.
fn render_frame(shapes: &[MovingShape], size: usize, bg: [u8; 3]) -> (Vec<f32>, Vec<u8>) {
    let mut rgb = vec![0f32; size * size * 3];
    let mut raster = vec![0u8; size * size];
    for y in 0..size as i32 {
        for x in 0..size as i32 {
            let p = (y as usize) * size + x as usize;
            let mut color = bg;
            let mut label = 0u8;
            for (i, s) in shapes.iter().enumerate() {
                if s.covers(y, x) {
                    color = s.color;
                    label = (i + 1) as u8;
                }
            }
            for ch in 0..3 {
                rgb[p * 3 + ch] = color[ch] as f32 / 255.0;
            }
            raster[p] = label;
        }
    }
    (rgb, raster)
}

fn distinct_color(rng: &mut Rng, bg: [u8; 3], existing: &[MovingShape]) -> [u8; 3] {
    // Rejection-sample until the new color is far from the background and
    // every existing object in max-channel distance.
    for _ in 0..PLACEMENT_RETRIES {
        let c = [
            90 + rng.below(166) as u8,
            90 + rng.below(166) as u8,
            90 + rng.below(166) as u8,
        ];
        let dist = |a: [u8; 3], b: [u8; 3]| {
            a.iter()
                .zip(b.iter())
                .map(|(&x, &y)| (x as i32 - y as i32).abs())
                .max()
                .unwrap()
        };
        let ok = dist(c, bg) >= 60 && existing.iter().all(|s| dist(c, s.color) >= 60);
        if ok {
            return c;
        }
    }
    // Extremely unlikely at the object counts used here; fall back to the
    // last sample.
    [200, 90, 240]
}

fn trajectory_collides(
    candidate: &MovingShape,
    placed: &[MovingShape],
    frames: usize,
    size: i32,
) -> bool {
    let mut cand = candidate.clone();
    let mut others: Vec<MovingShape> = placed.to_vec();
    for _ in 0..frames {
        if others.iter().any(|o| cand.overlaps(o)) {
            return true;
        }
        cand.step(size);
        for o in others.iter_mut() {
            o.step(size);
        }
    }
    false
}

/// Write a sequence as frame_%04d.ppm + label_%04d.pgm plus a meta file.
pub fn write_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, (frame, labels)) in seq.frames.iter().zip(&seq.labels).enumerate() {
        pgm::write_ppm(&dir.join(format!("frame_{:04}.ppm", i + 1)), &frame.to_rgb8())?;
        pgm::write_pgm(
            &dir.join(format!("label_{:04}.pgm", i + 1)),
            &pgm::Gray {
                w: labels.w(),
                h: labels.h(),
                data: labels.labels().to_vec(),
            },
        )?;
    }
    kv::write_kv(
        &dir.join("meta.txt"),
        &[
            ("size".into(), seq.spec.size.to_string()),
            ("frames".into(), seq.spec.frames.to_string()),
            ("objects".into(), seq.spec.objects.to_string()),
            ("seed".into(), seq.spec.seed.to_string()),
        ],
    )?;
    Ok(())
}

/// Read frames (and any label rasters) back from a sequence directory.
/// Frames are required; labels are optional per frame, but the first frame's
/// labels are what a run uses as its reference.
pub fn read_sequence_dir(dir: &Path) -> Result<(Vec<FrameImage>, Vec<Option<ObjectMask>>)> {
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for i in 1.. {
        let fpath = dir.join(format!("frame_{i:04}.ppm"));
        if !fpath.exists() {
            break;
        }
        frames.push(FrameImage::from_rgb8(&pgm::read_ppm(&fpath)?));
        let lpath = dir.join(format!("label_{i:04}.pgm"));
        if lpath.exists() {
            let gray = pgm::read_pgm(&lpath)?;
            let n = gray.data.iter().copied().max().unwrap_or(0) as usize + 1;
            labels.push(Some(ObjectMask::new(gray.h, gray.w, gray.data, n.max(2))?));
        } else {
            labels.push(None);
        }
    }
    if frames.is_empty() {
        return Err(Error::Parse(format!(
            "{}: no frame_0001.ppm found",
            dir.display()
        )));
    }
    Ok((frames, labels))
}
