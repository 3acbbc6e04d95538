//! Optimizer and the toy sequential trainer.
//!
//! A training step runs a short sequence through the engine: frame 1 is the
//! reference, the following frames are supervised with the 0.5/0.5 mix of
//! bootstrapped cross-entropy and soft Jaccard loss. Memory written during
//! the sequence is detached (no gradient flows through a memory write) and
//! carries the predicted argmax labels unless teacher forcing is on. The
//! first frame's memory stays differentiable, which is what trains the
//! identity bank and the shared projections.

use std::collections::BTreeMap;

use crate::engine::{Engine, EngineConfig, EngineParams, FrameImage};
use crate::error::{Error, Result};
use crate::eval::{bootstrapped_ce, mean_boundary_f, mean_region_j, soft_jaccard, LossConfig};
use crate::ident::ObjectMask;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synth::{gen_synthetic, ShapeKind, SyntheticSequence, SyntheticSpec};
use crate::tensor::tape::Tape;
use crate::tensor::{ops, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Frames per training sequence; frame 1 is the reference.
    pub sequence_len: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write ground-truth labels into memory instead of predictions.
    pub teacher_forcing: bool,
    /// Sequences per optimization step; the step loss is their mean.
    pub batch_size: usize,
    pub train_sequences: usize,
    pub holdout_sequences: usize,
    /// Object slots per synthetic sequence, including background.
    pub objects: usize,
    pub image_size: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sequence_len: 5,
            steps: 500,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 7,
            teacher_forcing: false,
            batch_size: 4,
            train_sequences: 8,
            holdout_sequences: 2,
            objects: 4,
            image_size: 64,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_len < 2 {
            return Err(Error::Config("training sequences need >= 2 frames".into()));
        }
        if self.train_sequences == 0 {
            return Err(Error::Config("no training sequences".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.loss.validate()
    }

    /// Learning rate at a step: linear warmup over the first 5% of steps,
    /// flat through most of the run, polynomial decay over the last fifth.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = ((self.steps as f64) * 0.05).ceil().max(1.0) as usize;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let decay_from = (self.steps as f64 * 0.8) as usize;
        if step < decay_from {
            return self.lr;
        }
        let span = (self.steps - decay_from).max(1) as f64;
        let frac = (step - decay_from) as f64 / span;
        let floor = 0.2 * self.lr;
        floor + (self.lr - floor) * (1.0 - frac).powf(0.9)
    }

    /// Bootstrap ratio at a step: linear warmup from 1.0 (no bootstrapping)
    /// down to the configured ratio over the first 20% of steps.
    pub fn bootstrap_ratio_at(&self, step: usize) -> f64 {
        let target = self.loss.bootstrap_ratio;
        let warm = ((self.steps as f64) * 0.2).ceil() as usize;
        if warm == 0 || step >= warm {
            return target;
        }
        1.0 - (1.0 - target) * (step as f64 / warm as f64)
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adaptive moments with decoupled weight decay. Moment accumulators are kept
/// in f64 regardless of the parameter element type; state is keyed by
/// parameter name so visiting order cannot scramble it.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            // Short-run profile: the second moment adapts within tens of
            // steps rather than the thousand-step horizon of 0.999.
            beta2: 0.99,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advance the step counter; call once per optimization step, before the
    /// per-tensor updates.
    pub fn next_step(&mut self) {
        self.t += 1;
    }

    /// p -= lr * wd * p (decoupled), then the bias-corrected moment update.
    pub fn apply<T: Scalar>(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) {
        assert!(self.t > 0, "AdamW::apply before next_step");
        let n = param.numel();
        let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let mut data: Vec<T> = param.data().to_vec();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..n {
            let g = grad.data()[i].to_f64();
            let p = data[i].to_f64();
            let decayed = p - self.lr * self.weight_decay * p;
            entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
            entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = entry.m[i] / bc1;
            let vhat = entry.v[i] / bc2;
            data[i] = T::from_f64(decayed - self.lr * mhat / (vhat.sqrt() + self.eps));
        }
        *param = Tensor::with_node(param.shape().to_vec(), data, None);
    }
}

/// Forward a training sequence and accumulate the supervised loss over
/// frames 2..len. The engine must hold tape-watched parameters for gradients
/// to flow.
pub fn sequence_loss<T: Scalar>(
    engine: &Engine<T>,
    frames: &[FrameImage],
    labels: &[ObjectMask],
    loss_cfg: &LossConfig,
    bootstrap_ratio: f64,
    teacher_forcing: bool,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if frames.len() < 2 || frames.len() != labels.len() {
        return Err(Error::Shape(format!(
            "sequence_loss: {} frames vs {} label rasters",
            frames.len(),
            labels.len()
        )));
    }
    let mut state = engine.init_first_frame(&frames[0], &labels[0], rng)?;
    let mut total: Option<Tensor<T>> = None;
    for t in 1..frames.len() {
        let outcome = engine.propagate_frame(&frames[t], &state, false)?;
        let ce = bootstrapped_ce(&outcome.result.prob, &labels[t], bootstrap_ratio)?;
        let sj = soft_jaccard(&outcome.result.prob, &labels[t])?;
        let frame_loss = ops::add(
            &ops::scale(&ce, T::from_f64(loss_cfg.ce_weight))?,
            &ops::scale(&sj, T::from_f64(loss_cfg.jaccard_weight))?,
        )?;
        total = Some(match total {
            Some(acc) => ops::add(&acc, &frame_loss)?,
            None => frame_loss,
        });
        let mem_labels = if teacher_forcing {
            labels[t].clone()
        } else {
            outcome.result.labels.clone()
        };
        engine.update_memory(
            &mut state,
            t + 1,
            &mem_labels,
            &outcome.caches,
            engine.cfg.delta_train,
        )?;
    }
    Ok(total.expect("at least one supervised frame"))
}

/// One batch member: a sequence of frames with its per-frame label rasters.
#[derive(Clone, Copy)]
pub struct SequenceRef<'a> {
    pub frames: &'a [FrameImage],
    pub labels: &'a [ObjectMask],
}

/// One optimization step over a batch of sequences: each member draws its own
/// identity assignment, the losses are averaged, and a single AdamW update
/// follows. The relative-position tables are skipped when the config
/// disables them, keeping that ablation's tables at zero.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    params: &mut EngineParams<T>,
    cfg: &EngineConfig,
    batch: &[SequenceRef<'_>],
    opt: &mut AdamW,
    loss_cfg: &LossConfig,
    bootstrap_ratio: f64,
    teacher_forcing: bool,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("train_step: empty batch".into()));
    }
    let tape = Tape::<T>::new()?;
    let watched = params.watch(&tape);
    let engine = Engine::new(cfg.clone(), watched)?;
    let mut total: Option<Tensor<T>> = None;
    for member in batch {
        let member_loss = sequence_loss(
            &engine,
            member.frames,
            member.labels,
            loss_cfg,
            bootstrap_ratio,
            teacher_forcing,
            rng,
        )?;
        total = Some(match total {
            Some(acc) => ops::add(&acc, &member_loss)?,
            None => member_loss,
        });
    }
    let loss = ops::scale(
        &total.expect("non-empty batch"),
        T::from_f64(1.0 / batch.len() as f64),
    )?;
    let loss_value = loss.scalar_value()?.to_f64();
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss_value}")));
    }
    let grads = tape.backward(&loss)?;
    opt.next_step();
    params.zip_tensors(&engine.params, &mut |name, param, watched_t| {
        if !cfg.rel_pos && name.ends_with(".rel") {
            return;
        }
        if let Some(g) = grads.wrt(watched_t) {
            opt.apply(name, param, g);
        }
    });
    Ok(loss_value)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub holdout_j: f64,
    pub holdout_f: f64,
}

/// Deterministic synthetic training data: one spec per sequence index.
pub fn toy_spec(image_size: usize, frames: usize, objects: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        size: image_size,
        frames,
        objects,
        shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
        max_speed: 3,
        occlusion_allowed: true,
        seed,
    }
}

pub fn toy_sequences(cfg: &TrainConfig) -> Result<(Vec<SyntheticSequence>, Vec<SyntheticSequence>)> {
    let train = (0..cfg.train_sequences)
        .map(|i| {
            gen_synthetic(&toy_spec(
                cfg.image_size,
                cfg.sequence_len,
                cfg.objects,
                cfg.seed.wrapping_mul(1000).wrapping_add(i as u64),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let holdout = (0..cfg.holdout_sequences)
        .map(|i| {
            gen_synthetic(&toy_spec(
                cfg.image_size,
                cfg.sequence_len,
                cfg.objects,
                cfg.seed.wrapping_mul(1000).wrapping_add(900 + i as u64),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((train, holdout))
}

/// Overfit the engine on seeded synthetic sequences and evaluate held-out
/// same-distribution sequences. Aborts on divergence (loss above 1e3).
pub fn train_toy<T: Scalar>(
    train_cfg: &TrainConfig,
    engine_cfg: &EngineConfig,
) -> Result<(EngineParams<T>, TrainReport)> {
    train_cfg.validate()?;
    engine_cfg.validate()?;
    let (train_seqs, holdout_seqs) = toy_sequences(train_cfg)?;
    let mut params = EngineParams::<T>::init(engine_cfg)?;
    let mut opt = AdamW::new(train_cfg.lr, train_cfg.weight_decay);
    let mut rng = Rng::seed_from(train_cfg.seed);
    let mut losses = Vec::with_capacity(train_cfg.steps);
    for step in 0..train_cfg.steps {
        let batch: Vec<SequenceRef<'_>> = (0..train_cfg.batch_size)
            .map(|i| {
                let seq = &train_seqs[(step * train_cfg.batch_size + i) % train_seqs.len()];
                SequenceRef {
                    frames: &seq.frames,
                    labels: &seq.labels,
                }
            })
            .collect();
        let ratio = train_cfg.bootstrap_ratio_at(step);
        opt.lr = train_cfg.lr_at(step);
        let loss = train_step(
            &mut params,
            engine_cfg,
            &batch,
            &mut opt,
            &train_cfg.loss,
            ratio,
            train_cfg.teacher_forcing,
            &mut rng,
        )
        .map_err(|e| Error::Numeric(format!("training aborted at step {step}: {e}")))?;
        if loss > 1e3 {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss {loss}"
            )));
        }
        losses.push(loss);
    }

    // Held-out evaluation on frames 2..len.
    let engine = Engine::new(engine_cfg.clone(), params)?;
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    let mut count = 0usize;
    for seq in &holdout_seqs {
        let out = engine.run_sequence(&seq.frames, &seq.labels[0], None, false)?;
        for (result, gt) in out.frames.iter().zip(&seq.labels[1..]) {
            j_sum += mean_region_j(&result.labels, gt)?;
            f_sum += mean_boundary_f(&result.labels, gt, 1)?;
            count += 1;
        }
    }
    let report = TrainReport {
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        holdout_j: j_sum / count.max(1) as f64,
        holdout_f: f_sum / count.max(1) as f64,
    };
    Ok((engine.params, report))
}
