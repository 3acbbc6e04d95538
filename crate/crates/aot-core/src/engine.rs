//! End-to-end propagation: toy encoder, LSTT stack, FPN-style decoder,
//! identification decoding, long-term memory on the delta schedule and a
//! short-term ring — plus the post-ensemble baseline that runs the same
//! engine once per object for the efficiency comparison.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use crate::attn::{sine_pos_embed, AttentionHeadsConfig};
use crate::error::{Error, Result};
use crate::ident::{patch_id_embed, sample_assignment, Assignment, ObjectMask, PatchIdentityBank};
use crate::io::kv;
use crate::lstt::{
    lstt_stack_forward, project_cache_entry, BlockAttentionMaps, BlockCachePoints,
    LayerMemoryView, LsttStack, StackMemory,
};
use crate::rng::Rng;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::serial;
use crate::tensor::tape::Tape;
use crate::tensor::{conv, ops, Tensor};

/// Side of the square mask patches; also the encoder's total stride.
pub const PATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    AotT,
    AotS,
    AotB,
    AotL,
}

impl Variant {
    pub fn layers(self) -> usize {
        match self {
            Variant::AotT => 1,
            Variant::AotS => 2,
            Variant::AotB => 3,
            Variant::AotL => 3,
        }
    }

    /// Whether predicted frames extend the long-term memory every delta
    /// frames; the other presets keep only the reference frame.
    pub fn strided_long_term(self) -> bool {
        matches!(self, Variant::AotL)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::AotT => "aot-t",
            Variant::AotS => "aot-s",
            Variant::AotB => "aot-b",
            Variant::AotL => "aot-l",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "aot-t" => Ok(Variant::AotT),
            "aot-s" => Ok(Variant::AotS),
            "aot-b" => Ok(Variant::AotB),
            "aot-l" => Ok(Variant::AotL),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected aot-t|aot-s|aot-b|aot-l"
            ))),
        }
    }
}

/// Every hyper-parameter of the engine. Presets fix the layer count and the
/// memory schedule; the remaining defaults are lambda = 15, M = 10,
/// heads = 8, C = 256, delta = 2 for training and 5 for testing, n = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub variant: Variant,
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub lambda: usize,
    pub n_short: usize,
    pub m_identities: usize,
    pub delta_train: usize,
    pub delta_test: usize,
    pub sine_pos: bool,
    pub rel_pos: bool,
    pub precision: Dtype,
    pub seed: u64,
}

impl EngineConfig {
    pub fn preset(variant: Variant, seed: u64) -> EngineConfig {
        EngineConfig {
            variant,
            layers: variant.layers(),
            channels: 256,
            heads: 8,
            lambda: 15,
            n_short: 1,
            m_identities: 10,
            delta_train: 2,
            delta_test: 5,
            sine_pos: true,
            rel_pos: true,
            precision: Dtype::Single,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("engine: zero layers".into()));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "engine: channels {} must be divisible by 4",
                self.channels
            )));
        }
        AttentionHeadsConfig::new(self.heads, self.channels)?;
        if self.lambda % 2 == 0 || self.lambda == 0 {
            return Err(Error::Config(format!(
                "engine: window size {} must be odd",
                self.lambda
            )));
        }
        if self.n_short == 0 {
            return Err(Error::Config("engine: short-term ring must hold >= 1 frame".into()));
        }
        if self.m_identities < 2 {
            return Err(Error::Config("engine: need at least 2 identities".into()));
        }
        if self.delta_train == 0 || self.delta_test == 0 {
            return Err(Error::Config("engine: delta must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("format".into(), "aot-checkpoint-v1".into()),
            ("variant".into(), self.variant.name().into()),
            ("layers".into(), self.layers.to_string()),
            ("channels".into(), self.channels.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("n_short".into(), self.n_short.to_string()),
            ("m_identities".into(), self.m_identities.to_string()),
            ("delta_train".into(), self.delta_train.to_string()),
            ("delta_test".into(), self.delta_test.to_string()),
            ("sine_pos".into(), self.sine_pos.to_string()),
            ("rel_pos".into(), self.rel_pos.to_string()),
            (
                "precision".into(),
                match self.precision {
                    Dtype::Single => "single".into(),
                    Dtype::Double => "double".into(),
                },
            ),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_kv(
        map: &std::collections::BTreeMap<String, String>,
        path: &Path,
    ) -> Result<EngineConfig> {
        if kv::require(map, "format", path)? != "aot-checkpoint-v1" {
            return Err(Error::Parse(format!(
                "{}: unknown checkpoint format",
                path.display()
            )));
        }
        let cfg = EngineConfig {
            variant: Variant::parse(kv::require(map, "variant", path)?)?,
            layers: kv::parse_usize(map, "layers", path)?,
            channels: kv::parse_usize(map, "channels", path)?,
            heads: kv::parse_usize(map, "heads", path)?,
            lambda: kv::parse_usize(map, "lambda", path)?,
            n_short: kv::parse_usize(map, "n_short", path)?,
            m_identities: kv::parse_usize(map, "m_identities", path)?,
            delta_train: kv::parse_usize(map, "delta_train", path)?,
            delta_test: kv::parse_usize(map, "delta_test", path)?,
            sine_pos: kv::parse_bool(map, "sine_pos", path)?,
            rel_pos: kv::parse_bool(map, "rel_pos", path)?,
            precision: match kv::require(map, "precision", path)? {
                "single" => Dtype::Single,
                "double" => Dtype::Double,
                other => {
                    return Err(Error::Parse(format!(
                        "{}: unknown precision {other}",
                        path.display()
                    )))
                }
            },
            seed: kv::parse_u64(map, "seed", path)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// RGB frame in [0, 1], interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameImage {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<f32>,
}

impl FrameImage {
    pub fn from_rgb8(img: &crate::io::pgm::Rgb) -> FrameImage {
        FrameImage {
            h: img.h,
            w: img.w,
            rgb: img.data.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> crate::io::pgm::Rgb {
        crate::io::pgm::Rgb {
            h: self.h,
            w: self.w,
            data: self
                .rgb
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }
}

/// Encoder output for one frame: the 1/16 features plus the 1/8 and 1/4
/// stage outputs the decoder fuses laterally.
#[derive(Clone, Debug)]
pub struct EncodedFrame<T: Scalar> {
    pub feat: Tensor<T>,
    pub fh: usize,
    pub fw: usize,
    pub skip8: Tensor<T>,
    pub skip16: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvStage<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderParams<T: Scalar> {
    /// Input conditioning of each block output before fusion.
    pub in_gain: Tensor<T>,
    pub in_bias: Tensor<T>,
    /// 1x1 fusion of the concatenated block outputs, [L*C, C].
    pub fuse_w: Tensor<T>,
    pub fuse_b: Tensor<T>,
    /// Lateral 1x1 from the encoder's 1/8 stage, added after the first
    /// upsample.
    pub lat8_w: Tensor<T>,
    pub lat8_b: Tensor<T>,
    /// 3x3 conv after the first upsample, C -> C.
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    /// Lateral 1x1 from the encoder's 1/4 stage, added after the second
    /// upsample.
    pub lat16_w: Tensor<T>,
    pub lat16_b: Tensor<T>,
    /// 3x3 conv after the second upsample, C -> C/2.
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    /// Projection into the identity space, [C/2, C]; the M logits are the
    /// scaled inner products of the projected features with the derived
    /// identity-bank rows (readout tied to the bank).
    pub head_proj: Tensor<T>,
}

/// All trainable state.
#[derive(Clone, Debug)]
pub struct EngineParams<T: Scalar> {
    pub encoder: Vec<ConvStage<T>>,
    pub stack: LsttStack<T>,
    pub decoder: DecoderParams<T>,
    pub patch_bank: PatchIdentityBank<T>,
}

fn encoder_channels(c: usize) -> [usize; 4] {
    [c / 4, c / 2, c, c]
}

impl<T: Scalar> EngineParams<T> {
    pub fn init(cfg: &EngineConfig) -> Result<EngineParams<T>> {
        cfg.validate()?;
        let mut rng = Rng::seed_from(cfg.seed);
        let c = cfg.channels;
        let chans = encoder_channels(c);
        let mut encoder = Vec::with_capacity(4);
        let mut cin = 3;
        for &cout in &chans {
            // Identity-routing init: the kernel center passes each input
            // channel through (replicated across the widened output), with
            // moderate noise on top. The composed stack then starts out as a
            // color-preserving downsampler, which is what the siamese
            // matching needs before any training happens.
            let std = 0.6 / ((9 * cin) as f64).sqrt();
            let mut w = Tensor::randn(&[3, 3, cin, cout], std, &mut rng).data().to_vec();
            for o in 0..cout {
                let i = o % cin;
                w[((1 * 3 + 1) * cin + i) * cout + o] += T::from_f64(1.0);
            }
            encoder.push(ConvStage {
                w: Tensor::with_node(vec![3, 3, cin, cout], w, None),
                b: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let stack = LsttStack::init(cfg.layers, c, cfg.heads, cfg.lambda, &mut rng)?;
        let half = c / 2;
        let decoder = DecoderParams {
            in_gain: Tensor::full(&[cfg.layers * c], T::ONE),
            in_bias: Tensor::zeros(&[cfg.layers * c]),
            fuse_w: Tensor::randn(&[cfg.layers * c, c], 1.0 / ((cfg.layers * c) as f64).sqrt(), &mut rng),
            fuse_b: Tensor::zeros(&[c]),
            lat8_w: Tensor::randn(&[c, c], 1.0 / (c as f64).sqrt(), &mut rng),
            lat8_b: Tensor::zeros(&[c]),
            conv1_w: Tensor::randn(&[3, 3, c, c], 2.0 / ((9 * c) as f64).sqrt(), &mut rng),
            conv1_b: Tensor::zeros(&[c]),
            lat16_w: Tensor::randn(&[half, c], 1.0 / (half as f64).sqrt(), &mut rng),
            lat16_b: Tensor::zeros(&[c]),
            conv2_w: Tensor::randn(&[3, 3, c, half], 2.0 / ((9 * c) as f64).sqrt(), &mut rng),
            conv2_b: Tensor::zeros(&[half]),
            head_proj: Tensor::randn(&[half, c], 1.0 / (half as f64).sqrt(), &mut rng),
        };
        let patch_bank = PatchIdentityBank::init(cfg.m_identities, PATCH, c, &mut rng)?;
        Ok(EngineParams {
            encoder,
            stack,
            decoder,
            patch_bank,
        })
    }

    /// Apply `f` to every tensor in a fixed order, producing a new parameter
    /// set. Used to register every parameter on a tape.
    pub fn map(&self, f: &mut impl FnMut(&Tensor<T>) -> Tensor<T>) -> EngineParams<T> {
        EngineParams {
            encoder: self
                .encoder
                .iter()
                .map(|s| ConvStage {
                    w: f(&s.w),
                    b: f(&s.b),
                })
                .collect(),
            stack: LsttStack {
                blocks: self.stack.blocks.iter().map(|b| b.map(f)).collect(),
                cfg: self.stack.cfg,
                lambda: self.stack.lambda,
            },
            decoder: DecoderParams {
                in_gain: f(&self.decoder.in_gain),
                in_bias: f(&self.decoder.in_bias),
                fuse_w: f(&self.decoder.fuse_w),
                fuse_b: f(&self.decoder.fuse_b),
                lat8_w: f(&self.decoder.lat8_w),
                lat8_b: f(&self.decoder.lat8_b),
                conv1_w: f(&self.decoder.conv1_w),
                conv1_b: f(&self.decoder.conv1_b),
                lat16_w: f(&self.decoder.lat16_w),
                lat16_b: f(&self.decoder.lat16_b),
                conv2_w: f(&self.decoder.conv2_w),
                conv2_b: f(&self.decoder.conv2_b),
                head_proj: f(&self.decoder.head_proj),
            },
            patch_bank: PatchIdentityBank::from_tensor(f(&self.patch_bank.dp))
                .expect("patch bank shape preserved"),
        }
    }

    pub fn watch(&self, tape: &Tape<T>) -> EngineParams<T> {
        self.map(&mut |t| tape.watch(t))
    }

    /// Walk this parameter set and `other` in lockstep with stable names.
    pub fn zip_tensors<'a>(
        &'a mut self,
        other: &'a EngineParams<T>,
        f: &mut impl FnMut(&str, &mut Tensor<T>, &'a Tensor<T>),
    ) {
        for (i, (s, o)) in self.encoder.iter_mut().zip(&other.encoder).enumerate() {
            f(&format!("enc{i}.w"), &mut s.w, &o.w);
            f(&format!("enc{i}.b"), &mut s.b, &o.b);
        }
        for (l, (b, ob)) in self
            .stack
            .blocks
            .iter_mut()
            .zip(&other.stack.blocks)
            .enumerate()
        {
            b.zip_tensors(ob, &mut |name, slot, src| {
                f(&format!("block{l}.{name}"), slot, src);
            });
        }
        f("dec.in_gain", &mut self.decoder.in_gain, &other.decoder.in_gain);
        f("dec.in_bias", &mut self.decoder.in_bias, &other.decoder.in_bias);
        f("dec.fuse_w", &mut self.decoder.fuse_w, &other.decoder.fuse_w);
        f("dec.fuse_b", &mut self.decoder.fuse_b, &other.decoder.fuse_b);
        f("dec.lat8_w", &mut self.decoder.lat8_w, &other.decoder.lat8_w);
        f("dec.lat8_b", &mut self.decoder.lat8_b, &other.decoder.lat8_b);
        f("dec.conv1_w", &mut self.decoder.conv1_w, &other.decoder.conv1_w);
        f("dec.conv1_b", &mut self.decoder.conv1_b, &other.decoder.conv1_b);
        f("dec.lat16_w", &mut self.decoder.lat16_w, &other.decoder.lat16_w);
        f("dec.lat16_b", &mut self.decoder.lat16_b, &other.decoder.lat16_b);
        f("dec.conv2_w", &mut self.decoder.conv2_w, &other.decoder.conv2_w);
        f("dec.conv2_b", &mut self.decoder.conv2_b, &other.decoder.conv2_b);
        f("dec.head_proj", &mut self.decoder.head_proj, &other.decoder.head_proj);
        f("bank.dp", &mut self.patch_bank.dp, &other.patch_bank.dp);
    }

    /// Write the manifest and one tensor file per parameter.
    pub fn save(&self, dir: &Path, cfg: &EngineConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        kv::write_kv(&dir.join("manifest.txt"), &cfg.to_kv())?;
        let mut snapshot = self.clone();
        let reference = self.clone();
        let mut err = None;
        snapshot.zip_tensors(&reference, &mut |name, t, _| {
            if err.is_none() {
                if let Err(e) = serial::write_tensor(&dir.join(format!("{name}.aott")), t) {
                    err = Some(e);
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn load(dir: &Path) -> Result<(EngineConfig, EngineParams<T>)> {
        let manifest = dir.join("manifest.txt");
        let map = kv::read_kv(&manifest)?;
        let cfg = EngineConfig::from_kv(&map, &manifest)?;
        if cfg.precision != T::DTYPE {
            return Err(Error::Parse(format!(
                "{}: checkpoint precision does not match the requested element type",
                manifest.display()
            )));
        }
        // Zero-init scaffold with the right shapes, then fill from files.
        let mut params = EngineParams::init(&cfg)?;
        let reference = params.clone();
        let mut err = None;
        params.zip_tensors(&reference, &mut |name, slot, want| {
            if err.is_some() {
                return;
            }
            match serial::read_tensor::<T>(&dir.join(format!("{name}.aott"))) {
                Ok(t) => {
                    if t.shape() != want.shape() {
                        err = Some(Error::Shape(format!(
                            "checkpoint tensor {name}: shape {:?}, expected {:?}",
                            t.shape(),
                            want.shape()
                        )));
                    } else {
                        *slot = t;
                    }
                }
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok((cfg, params)),
        }
    }
}

/// One cached long-term or short-term memory entry of one layer: projected
/// keys, identification-augmented values, and the feature-resolution labels
/// the embedding was built from (kept for diagnostics).
#[derive(Clone, Debug)]
pub struct MemoryEntry<T: Scalar> {
    pub frame_index: usize,
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    pub feat_labels: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct LayerMemory<T: Scalar> {
    pub long: Vec<MemoryEntry<T>>,
    pub short: VecDeque<MemoryEntry<T>>,
}

/// Sequence-scoped state: per-layer caches plus the identity assignment drawn
/// at the first frame.
#[derive(Clone, Debug)]
pub struct MemoryState<T: Scalar> {
    pub layers: Vec<LayerMemory<T>>,
    pub assignment: Assignment,
    pub n_objects: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub fh: usize,
    pub fw: usize,
}

impl<T: Scalar> MemoryState<T> {
    /// Frame indices currently held in long-term memory (identical across
    /// layers by construction).
    pub fn long_term_indices(&self) -> Vec<usize> {
        self.layers[0].long.iter().map(|e| e.frame_index).collect()
    }

    pub fn short_term_indices(&self) -> Vec<usize> {
        self.layers[0].short.iter().map(|e| e.frame_index).collect()
    }

    fn views(&self) -> Result<Vec<LayerMemoryView<T>>> {
        self.layers
            .iter()
            .map(|layer| {
                let key_refs: Vec<&Tensor<T>> = layer.long.iter().map(|e| &e.keys).collect();
                let val_refs: Vec<&Tensor<T>> = layer.long.iter().map(|e| &e.values).collect();
                Ok(LayerMemoryView {
                    long_keys: ops::concat_rows(&key_refs)?,
                    long_values: ops::concat_rows(&val_refs)?,
                    short_keys: layer.short.iter().map(|e| e.keys.clone()).collect(),
                    short_values: layer.short.iter().map(|e| e.values.clone()).collect(),
                })
            })
            .collect()
    }
}

/// Output of one propagated frame.
#[derive(Clone, Debug)]
pub struct FrameResult<T: Scalar> {
    /// Per-pixel object probabilities at the original resolution, [h*w, N].
    pub prob: Tensor<T>,
    /// Argmax labels.
    pub labels: ObjectMask,
    /// Wall time of the forward pass (encode, stack, decode) in microseconds.
    pub micros: u64,
    /// Per-pass timings: one entry for a unified forward, one per target for
    /// the post-ensemble baseline.
    pub pass_micros: Vec<u64>,
    /// Per-layer attention maps when collection was requested.
    pub attention: Option<Vec<BlockAttentionMaps<T>>>,
}

/// A frame result together with the cache points a subsequent memory write
/// needs.
pub struct PropagateOutcome<T: Scalar> {
    pub result: FrameResult<T>,
    pub caches: Vec<BlockCachePoints<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct SequenceSummary {
    pub mean_j: Option<f64>,
    pub mean_f: Option<f64>,
    pub frame_micros: Vec<u64>,
}

pub struct SequenceResult<T: Scalar> {
    pub frames: Vec<FrameResult<T>>,
    pub summary: SequenceSummary,
    pub assignment: Assignment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    /// softmax over per-object logits log(p / (1 - p)).
    Softmax,
    /// Odds-ratio normalization p_i / (1-p_i) over the sum of all ratios.
    SoftAggregation,
}

impl EnsembleMode {
    pub fn parse(s: &str) -> Result<Option<EnsembleMode>> {
        match s {
            "none" => Ok(None),
            "softmax" => Ok(Some(EnsembleMode::Softmax)),
            "softagg" => Ok(Some(EnsembleMode::SoftAggregation)),
            other => Err(Error::Config(format!(
                "unknown baseline mode {other:?}; expected none|softmax|softagg"
            ))),
        }
    }
}

pub struct Engine<T: Scalar> {
    pub cfg: EngineConfig,
    pub params: EngineParams<T>,
}

/// Majority label of each PATCH x PATCH cell; ties break toward the smaller
/// label.
pub fn pool_labels_majority(mask: &ObjectMask) -> Vec<u8> {
    let (fh, fw) = (mask.h() / PATCH, mask.w() / PATCH);
    let mut out = Vec::with_capacity(fh * fw);
    let mut counts = vec![0usize; mask.n()];
    for qy in 0..fh {
        for qx in 0..fw {
            counts.iter_mut().for_each(|c| *c = 0);
            for u in 0..PATCH {
                for v in 0..PATCH {
                    counts[mask.label_at(qy * PATCH + u, qx * PATCH + v)] += 1;
                }
            }
            let mut best = 0;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = l;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

impl<T: Scalar> Engine<T> {
    pub fn new(cfg: EngineConfig, params: EngineParams<T>) -> Result<Engine<T>> {
        cfg.validate()?;
        if params.stack.layers() != cfg.layers {
            return Err(Error::Config(format!(
                "engine: {} blocks for {} configured layers",
                params.stack.layers(),
                cfg.layers
            )));
        }
        Ok(Engine { cfg, params })
    }

    pub fn init_random(cfg: EngineConfig) -> Result<Engine<T>> {
        let params = EngineParams::init(&cfg)?;
        Engine::new(cfg, params)
    }

    fn pad_image(&self, image: &FrameImage) -> (Tensor<T>, usize, usize) {
        let ph = image.h.div_ceil(PATCH) * PATCH;
        let pw = image.w.div_ceil(PATCH) * PATCH;
        // Centered input: padding pixels sit at the same value as black.
        let mut data = vec![T::from_f64(-0.5); ph * pw * 3];
        for y in 0..image.h {
            for x in 0..image.w {
                for ch in 0..3 {
                    data[(y * pw + x) * 3 + ch] =
                        T::from_f64(image.rgb[(y * image.w + x) * 3 + ch] as f64 - 0.5);
                }
            }
        }
        (Tensor::with_node(vec![ph * pw, 3], data, None), ph, pw)
    }

    /// Four stride-2 conv+GELU stages: [h, w, 3] down to [h/16, w/16, C].
    /// The image is zero-padded to multiples of 16 first. The 1/4 and 1/8
    /// stage outputs are kept as the decoder's lateral inputs.
    pub fn encode_frame(&self, image: &FrameImage) -> Result<EncodedFrame<T>> {
        if image.rgb.len() != image.h * image.w * 3 {
            return Err(Error::Shape(format!(
                "frame {}x{} carries {} samples",
                image.h,
                image.w,
                image.rgb.len()
            )));
        }
        if image.h == 0 || image.w == 0 {
            return Err(Error::Shape("empty frame".into()));
        }
        let (mut x, mut h, mut w) = self.pad_image(image);
        let mut skip16 = None;
        let mut skip8 = None;
        for (i, stage) in self.params.encoder.iter().enumerate() {
            x = ops::gelu(&conv::conv2d(&x, h, w, &stage.w, &stage.b, 2, 1)?)?;
            h /= 2;
            w /= 2;
            if i == 1 {
                skip16 = Some(x.clone());
            }
            if i == 2 {
                skip8 = Some(x.clone());
            }
        }
        Ok(EncodedFrame {
            feat: x,
            fh: h,
            fw: w,
            skip8: skip8.expect("four encoder stages"),
            skip16: skip16.expect("four encoder stages"),
        })
    }

    /// Fuse the normalized L block outputs, upsample 1/16 -> 1/4 with two
    /// conv stages that each take a lateral encoder input, emit M identity
    /// logits, select and softmax the assigned ones, and bilinearly upsample
    /// the probabilities to the padded resolution.
    /// Returns (probabilities cropped to the original size, identity logits).
    #[allow(clippy::too_many_arguments)]
    pub fn decode_frame(
        &self,
        block_outputs: &[Tensor<T>],
        encoded: &EncodedFrame<T>,
        assignment: &Assignment,
        pad_h: usize,
        pad_w: usize,
        img_h: usize,
        img_w: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if block_outputs.len() != self.cfg.layers {
            return Err(Error::State(format!(
                "decode: {} block outputs for {} layers",
                block_outputs.len(),
                self.cfg.layers
            )));
        }
        let (fh, fw) = (encoded.fh, encoded.fw);
        let dec = &self.params.decoder;
        let refs: Vec<&Tensor<T>> = block_outputs.iter().collect();
        let fused = ops::concat_cols(&refs)?;
        let fused = ops::layer_norm(&fused, &dec.in_gain, &dec.in_bias, T::from_f64(1e-5))?;
        let x = ops::gelu(&ops::add_bias(&ops::matmul(&fused, &dec.fuse_w)?, &dec.fuse_b)?)?;

        let x = conv::upsample_bilinear(&x, fh, fw, fh * 2, fw * 2)?;
        let lat8 = ops::add_bias(&ops::matmul(&encoded.skip8, &dec.lat8_w)?, &dec.lat8_b)?;
        let x = ops::add(&x, &lat8)?;
        let x = ops::gelu(&conv::conv2d(&x, fh * 2, fw * 2, &dec.conv1_w, &dec.conv1_b, 1, 1)?)?;
        let x = conv::upsample_bilinear(&x, fh * 2, fw * 2, fh * 4, fw * 4)?;
        let lat16 = ops::add_bias(&ops::matmul(&encoded.skip16, &dec.lat16_w)?, &dec.lat16_b)?;
        let x = ops::add(&x, &lat16)?;
        let x = ops::gelu(&conv::conv2d(&x, fh * 4, fw * 4, &dec.conv2_w, &dec.conv2_b, 1, 1)?)?;

        // Tied readout: logit for identity k is the scaled inner product of
        // the projected feature with identity k's derived bank row.
        let bank_rows = self.params.patch_bank.derived_bank()?.d;
        let projected = ops::matmul(&x, &dec.head_proj)?;
        let logits = ops::scale(
            &ops::matmul_nt(&projected, &bank_rows)?,
            T::from_f64(1.0 / (self.cfg.channels as f64).sqrt()),
        )?;
        let probs_q = crate::ident::decode_select(&logits, assignment)?;
        let probs_pad = conv::upsample_bilinear(&probs_q, fh * 4, fw * 4, pad_h, pad_w)?;
        let probs = if pad_h == img_h && pad_w == img_w {
            probs_pad
        } else {
            let mut keep = Vec::with_capacity(img_h * img_w);
            for y in 0..img_h {
                for x in 0..img_w {
                    keep.push(y * pad_w + x);
                }
            }
            ops::gather_rows(&probs_pad, &keep)?
        };
        Ok((probs, logits))
    }

    /// Run the first frame in self mode and cache its keys and identified
    /// values into both memories. The identity assignment is drawn here.
    pub fn init_first_frame(
        &self,
        image: &FrameImage,
        reference: &ObjectMask,
        rng: &mut Rng,
    ) -> Result<MemoryState<T>> {
        if reference.h() != image.h || reference.w() != image.w {
            return Err(Error::Shape(format!(
                "reference mask {}x{} vs frame {}x{}",
                reference.h(),
                reference.w(),
                image.h,
                image.w
            )));
        }
        let assignment = sample_assignment(rng, reference.n(), self.cfg.m_identities)?;
        let encoded = self.encode_frame(image)?;
        let (x0, fh, fw) = (encoded.feat.clone(), encoded.fh, encoded.fw);
        let padded_mask = reference.pad_to_multiple(PATCH);
        let embed = patch_id_embed(&padded_mask, &self.params.patch_bank, &assignment)?;
        let pos = self.pos_table(fh, fw)?;
        let (_, caches) = lstt_stack_forward(
            &x0,
            fh,
            fw,
            &StackMemory::FirstFrame { embed: &embed },
            &self.params.stack,
            pos.as_ref(),
            None,
        )?;
        let feat_labels = pool_labels_majority(&padded_mask);
        let layers = caches
            .iter()
            .zip(&self.params.stack.blocks)
            .map(|(cache, block)| {
                let (lk, lv) = project_cache_entry(&cache.long_input, &embed, block)?;
                let (sk, sv) = project_cache_entry(&cache.short_input, &embed, block)?;
                let mut short = VecDeque::new();
                short.push_back(MemoryEntry {
                    frame_index: 1,
                    keys: sk,
                    values: sv,
                    feat_labels: feat_labels.clone(),
                });
                Ok(LayerMemory {
                    long: vec![MemoryEntry {
                        frame_index: 1,
                        keys: lk,
                        values: lv,
                        feat_labels: feat_labels.clone(),
                    }],
                    short,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryState {
            layers,
            assignment,
            n_objects: reference.n(),
            img_h: image.h,
            img_w: image.w,
            pad_h: padded_mask.h(),
            pad_w: padded_mask.w(),
            fh,
            fw,
        })
    }

    fn pos_table(&self, fh: usize, fw: usize) -> Result<Option<Tensor<T>>> {
        Ok(if self.cfg.sine_pos {
            Some(sine_pos_embed::<T>(fh, fw, self.cfg.channels)?.table)
        } else {
            None
        })
    }

    /// Propagate one frame against the current memory. The state is not
    /// modified; pushing this frame into memory is a separate operation.
    pub fn propagate_frame(
        &self,
        image: &FrameImage,
        state: &MemoryState<T>,
        collect_attention: bool,
    ) -> Result<PropagateOutcome<T>> {
        if state.layers.is_empty() || state.layers[0].long.is_empty() {
            return Err(Error::State("propagate: memory is not initialized".into()));
        }
        if image.h != state.img_h || image.w != state.img_w {
            return Err(Error::Shape(format!(
                "frame {}x{} vs sequence {}x{}",
                image.h, image.w, state.img_h, state.img_w
            )));
        }
        let started = Instant::now();
        let encoded = self.encode_frame(image)?;
        let (x0, fh, fw) = (encoded.feat.clone(), encoded.fh, encoded.fw);
        let views = state.views()?;
        let pos = self.pos_table(fh, fw)?;
        let mut maps: Vec<BlockAttentionMaps<T>> = Vec::new();
        let collect = collect_attention.then_some(&mut maps);
        let (outputs, caches) = lstt_stack_forward(
            &x0,
            fh,
            fw,
            &StackMemory::Normal(&views),
            &self.params.stack,
            pos.as_ref(),
            collect,
        )?;
        let (prob, _) = self.decode_frame(
            &outputs,
            &encoded,
            &state.assignment,
            state.pad_h,
            state.pad_w,
            image.h,
            image.w,
        )?;
        let micros = started.elapsed().as_micros() as u64;

        let arg = ops::argmax_lastdim(&prob);
        let labels = ObjectMask::new(
            image.h,
            image.w,
            arg.iter().map(|&l| l as u8).collect(),
            state.n_objects,
        )?;
        Ok(PropagateOutcome {
            result: FrameResult {
                prob,
                labels,
                micros,
                pass_micros: vec![micros],
                attention: collect_attention.then_some(maps),
            },
            caches,
        })
    }

    /// Push frame `t` into memory: the short-term ring always takes it
    /// (evicting beyond n), the long-term store appends only for the strided
    /// variant when t is on the delta schedule {1, 1+delta, 1+2*delta, ...}.
    /// Writes are detached: no gradient flows through a memory write.
    pub fn update_memory(
        &self,
        state: &mut MemoryState<T>,
        frame_index: usize,
        labels: &ObjectMask,
        caches: &[BlockCachePoints<T>],
        delta: usize,
    ) -> Result<()> {
        if frame_index < 2 {
            return Err(Error::State(
                "update_memory: the first frame is written at init".into(),
            ));
        }
        if caches.len() != state.layers.len() {
            return Err(Error::State(format!(
                "update_memory: {} cache points for {} layers",
                caches.len(),
                state.layers.len()
            )));
        }
        if labels.n() != state.n_objects {
            return Err(Error::Mask(format!(
                "update_memory: {} object slots vs sequence {}",
                labels.n(),
                state.n_objects
            )));
        }
        let padded = labels.pad_to_multiple(PATCH);
        let embed = patch_id_embed(&padded, &self.params.patch_bank, &state.assignment)?.detach();
        let feat_labels = pool_labels_majority(&padded);
        let long_due = self.cfg.variant.strided_long_term() && (frame_index - 1) % delta == 0;
        for l in 0..state.layers.len() {
            let block = &self.params.stack.blocks[l];
            let (sk, sv) = project_cache_entry(&caches[l].short_input.detach(), &embed, block)?;
            let layer = &mut state.layers[l];
            layer.short.push_back(MemoryEntry {
                frame_index,
                keys: sk.detach(),
                values: sv.detach(),
                feat_labels: feat_labels.clone(),
            });
            while layer.short.len() > self.cfg.n_short {
                layer.short.pop_front();
            }
            if long_due {
                let (lk, lv) =
                    project_cache_entry(&caches[l].long_input.detach(), &embed, block)?;
                state.layers[l].long.push(MemoryEntry {
                    frame_index,
                    keys: lk.detach(),
                    values: lv.detach(),
                    feat_labels: feat_labels.clone(),
                });
            }
        }
        Ok(())
    }

    /// Full sequence run: init on frame 1 with the reference mask, then
    /// propagate and write memory for every following frame. Deterministic
    /// for a fixed config seed. Ground-truth rasters, when given, produce the
    /// J/F summary over frames 2..T.
    pub fn run_sequence(
        &self,
        frames: &[FrameImage],
        reference: &ObjectMask,
        gt: Option<&[ObjectMask]>,
        collect_attention: bool,
    ) -> Result<SequenceResult<T>> {
        if frames.len() < 2 {
            return Err(Error::Shape(format!(
                "run_sequence: need at least 2 frames, got {}",
                frames.len()
            )));
        }
        for f in frames {
            if f.h != frames[0].h || f.w != frames[0].w {
                return Err(Error::Shape(format!(
                    "run_sequence: frame sizes differ, {}x{} vs {}x{}",
                    f.h, f.w, frames[0].h, frames[0].w
                )));
            }
        }
        if let Some(gt) = gt {
            if gt.len() != frames.len() {
                return Err(Error::Shape(format!(
                    "run_sequence: {} ground-truth rasters for {} frames",
                    gt.len(),
                    frames.len()
                )));
            }
        }
        let mut rng = Rng::seed_from(self.cfg.seed);
        let mut state = self.init_first_frame(&frames[0], reference, &mut rng)?;
        let mut results = Vec::with_capacity(frames.len() - 1);
        let mut j_sum = 0.0;
        let mut f_sum = 0.0;
        let mut metric_frames = 0usize;
        for (t, frame) in frames.iter().enumerate().skip(1) {
            let frame_index = t + 1;
            let outcome = self.propagate_frame(frame, &state, collect_attention)?;
            self.update_memory(
                &mut state,
                frame_index,
                &outcome.result.labels,
                &outcome.caches,
                self.cfg.delta_test,
            )?;
            if let Some(gt) = gt {
                j_sum += crate::eval::mean_region_j(&outcome.result.labels, &gt[t])?;
                f_sum += crate::eval::mean_boundary_f(&outcome.result.labels, &gt[t], 1)?;
                metric_frames += 1;
            }
            results.push(outcome.result);
        }
        let summary = SequenceSummary {
            mean_j: (metric_frames > 0).then(|| j_sum / metric_frames as f64),
            mean_f: (metric_frames > 0).then(|| f_sum / metric_frames as f64),
            frame_micros: results.iter().map(|r| r.micros).collect(),
        };
        Ok(SequenceResult {
            frames: results,
            summary,
            assignment: state.assignment.clone(),
        })
    }

    /// The baseline paradigm: run the same engine once per annotated target
    /// with a binary (target vs rest) mask, then merge the per-target
    /// foreground probabilities per pixel. Wall time per frame is the sum of
    /// the per-target forward times.
    pub fn post_ensemble_baseline(
        &self,
        frames: &[FrameImage],
        reference: &ObjectMask,
        mode: EnsembleMode,
    ) -> Result<SequenceResult<T>> {
        if frames.len() < 2 {
            return Err(Error::Shape(format!(
                "post_ensemble_baseline: need at least 2 frames, got {}",
                frames.len()
            )));
        }
        let targets = reference.n() - 1;
        if targets == 0 {
            return Err(Error::Config(
                "post_ensemble_baseline: no annotated targets".into(),
            ));
        }
        let (h, w) = (frames[0].h, frames[0].w);
        let mut rng = Rng::seed_from(self.cfg.seed);
        // One independent single-object run (binary mask, N = 2) per target.
        let mut states = Vec::with_capacity(targets);
        for target in 1..=targets {
            let labels: Vec<u8> = reference
                .labels()
                .iter()
                .map(|&l| (l as usize == target) as u8)
                .collect();
            let binary = ObjectMask::new(h, w, labels, 2)?;
            states.push(self.init_first_frame(&frames[0], &binary, &mut rng)?);
        }

        let mut results = Vec::with_capacity(frames.len() - 1);
        for frame in frames.iter().skip(1) {
            let frame_index = results.len() + 2;
            let mut micros = 0u64;
            let mut pass_micros = Vec::with_capacity(targets);
            let mut foregrounds: Vec<Vec<f64>> = Vec::with_capacity(targets);
            for state in states.iter_mut() {
                let outcome = self.propagate_frame(frame, state, false)?;
                micros += outcome.result.micros;
                pass_micros.push(outcome.result.micros);
                let prob = &outcome.result.prob;
                foregrounds
                    .push((0..h * w).map(|p| prob.at2(p, 1).to_f64()).collect());
                self.update_memory(
                    state,
                    frame_index,
                    &outcome.result.labels,
                    &outcome.caches,
                    self.cfg.delta_test,
                )?;
            }
            let merged = merge_ensemble::<T>(&foregrounds, h, w, mode)?;
            let arg = ops::argmax_lastdim(&merged);
            let labels =
                ObjectMask::new(h, w, arg.iter().map(|&l| l as u8).collect(), targets + 1)?;
            results.push(FrameResult {
                prob: merged,
                labels,
                micros,
                pass_micros,
                attention: None,
            });
        }
        let summary = SequenceSummary {
            mean_j: None,
            mean_f: None,
            frame_micros: results.iter().map(|r| r.micros).collect(),
        };
        Ok(SequenceResult {
            frames: results,
            summary,
            assignment: states[0].assignment.clone(),
        })
    }
}

/// Merge per-target foreground probabilities into an (targets+1)-way
/// distribution per pixel. Background is 1 - max of the foregrounds, entering
/// the pool as object 0; probabilities are clamped to [1e-6, 1 - 1e-6]
/// before the odds ratio.
pub fn merge_ensemble<T: Scalar>(
    foregrounds: &[Vec<f64>],
    h: usize,
    w: usize,
    mode: EnsembleMode,
) -> Result<Tensor<T>> {
    let targets = foregrounds.len();
    let n = targets + 1;
    let mut out = vec![T::ZERO; h * w * n];
    for p in 0..h * w {
        let mut probs = Vec::with_capacity(n);
        let max_fg = foregrounds
            .iter()
            .map(|f| f[p])
            .fold(f64::NEG_INFINITY, f64::max);
        probs.push((1.0 - max_fg).clamp(1e-6, 1.0 - 1e-6));
        for f in foregrounds {
            probs.push(f[p].clamp(1e-6, 1.0 - 1e-6));
        }
        let merged: Vec<f64> = match mode {
            EnsembleMode::Softmax => {
                let logits: Vec<f64> = probs.iter().map(|&q| (q / (1.0 - q)).ln()).collect();
                let maxl = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - maxl).exp()).collect();
                let denom: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / denom).collect()
            }
            EnsembleMode::SoftAggregation => {
                let odds: Vec<f64> = probs.iter().map(|&q| q / (1.0 - q)).collect();
                let denom: f64 = odds.iter().sum();
                odds.into_iter().map(|o| o / denom).collect()
            }
        };
        for (i, &v) in merged.iter().enumerate() {
            out[p * n + i] = T::from_f64(v);
        }
    }
    Ok(Tensor::with_node(vec![h * w, n], out, None))
}

/// Propagate the one-hot memory masks of one attention map to the current
/// frame: out[p, obj] = sum over memory cells q with label obj of map[p, q].
/// Rows keep summing to 1 because the map rows do.
pub fn propagate_mask_through_attention<T: Scalar>(
    map: &Tensor<T>,
    source_labels: &[u8],
    n_objects: usize,
) -> Result<Tensor<T>> {
    if map.cols() != source_labels.len() {
        return Err(Error::Shape(format!(
            "attention map has {} columns for {} source labels",
            map.cols(),
            source_labels.len()
        )));
    }
    let rows = map.rows();
    let mut out = vec![T::ZERO; rows * n_objects];
    for p in 0..rows {
        let row = map.row(p);
        for (q, &l) in source_labels.iter().enumerate() {
            out[p * n_objects + l as usize] += row[q];
        }
    }
    Ok(Tensor::with_node(vec![rows, n_objects], out, None))
}
