//! The long short-term transformer block and its L-layer stack.
//!
//! Each block runs four pre-norm residual sublayers in order: self-attention
//! (sine positional codes added to queries and keys only), long-term
//! attention over cached memory, short-term windowed attention over the most
//! recent frames, and a feed-forward module with a depth-wise convolution
//! between its two linear layers.
//!
//! Memory correspondence: layer l attends only over features cached at layer
//! l. A cache entry stores the features exactly as the attention reads them —
//! normalized by the same layer norm the current-frame query passes through
//! and already projected by the layer's shared key/value maps — so a memory
//! entry written from a frame and the first-frame self mode on that frame are
//! bitwise interchangeable.

use crate::attn::{
    multi_head, multi_head_with_weights, window_attention_core, window_attention_weights,
    AttentionHeadsConfig, RelPosBias,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{conv, ops, Tensor};

#[derive(Clone, Debug)]
pub struct SelfAttnParams<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FfnParams<T: Scalar> {
    /// [C, 4C]
    pub w1: Tensor<T>,
    /// [5, 5, 4C]
    pub dw: Tensor<T>,
    /// [4C]
    pub db: Tensor<T>,
    /// [4C, C]
    pub w2: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn unit(c: usize) -> LayerNormParams<T> {
        LayerNormParams {
            gain: Tensor::full(&[c], T::ONE),
            bias: Tensor::zeros(&[c]),
        }
    }
}

/// All trainable state of one block.
#[derive(Clone, Debug)]
pub struct LsttBlockParams<T: Scalar> {
    pub self_attn: SelfAttnParams<T>,
    /// Key projection shared by long-term and short-term attention.
    pub wk_lt: Tensor<T>,
    /// Value projection shared by long-term and short-term attention.
    pub wv_lt: Tensor<T>,
    pub wo_long: Tensor<T>,
    pub wo_short: Tensor<T>,
    pub ffn: FfnParams<T>,
    /// Norms for the four sublayers in order: self, long, short, ffn.
    pub ln: [LayerNormParams<T>; 4],
    pub rel: RelPosBias<T>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> LsttBlockParams<T> {
    /// Cold-start wiring: the shared key map and the long/short output
    /// projections begin as identity matrices, so matching starts out as the
    /// plain cosine structure of the normalized features and the propagated
    /// identification embeddings land in the residual stream unrotated. The
    /// value projection and the competing residual branches (self-attention
    /// output, second feed-forward layer) start small, leaving the
    /// identification signal dominant until training reshapes the balance.
    pub fn init(c: usize, heads: usize, lambda: usize, rng: &mut Rng) -> Result<Self> {
        AttentionHeadsConfig::new(heads, c)?;
        let proj = |rng: &mut Rng| Tensor::randn(&[c, c], 1.0 / (c as f64).sqrt(), rng);
        let eye = {
            let mut d = vec![T::ZERO; c * c];
            for i in 0..c {
                d[i * c + i] = T::ONE;
            }
            Tensor::with_node(vec![c, c], d, None)
        };
        Ok(LsttBlockParams {
            self_attn: SelfAttnParams {
                wq: proj(rng),
                wk: proj(rng),
                wv: proj(rng),
                wo: Tensor::randn(&[c, c], 0.1 / (c as f64).sqrt(), rng),
            },
            wk_lt: eye.clone(),
            wv_lt: Tensor::randn(&[c, c], 0.2 / (c as f64).sqrt(), rng),
            wo_long: eye.clone(),
            wo_short: eye,
            ffn: FfnParams {
                w1: Tensor::randn(&[c, 4 * c], 1.0 / (c as f64).sqrt(), rng),
                dw: Tensor::randn(&[5, 5, 4 * c], 0.2, rng),
                db: Tensor::zeros(&[4 * c]),
                w2: Tensor::randn(&[4 * c, c], 0.1 / (4.0 * c as f64).sqrt(), rng),
            },
            ln: [
                LayerNormParams::unit(c),
                LayerNormParams::unit(c),
                LayerNormParams::unit(c),
                LayerNormParams::unit(c),
            ],
            rel: RelPosBias::zeros(heads, lambda)?,
        })
    }

    /// All weights zero, norms at (1, 0): the block becomes the identity map.
    pub fn zeroed(c: usize, heads: usize, lambda: usize) -> Result<Self> {
        AttentionHeadsConfig::new(heads, c)?;
        Ok(LsttBlockParams {
            self_attn: SelfAttnParams {
                wq: Tensor::zeros(&[c, c]),
                wk: Tensor::zeros(&[c, c]),
                wv: Tensor::zeros(&[c, c]),
                wo: Tensor::zeros(&[c, c]),
            },
            wk_lt: Tensor::zeros(&[c, c]),
            wv_lt: Tensor::zeros(&[c, c]),
            wo_long: Tensor::zeros(&[c, c]),
            wo_short: Tensor::zeros(&[c, c]),
            ffn: FfnParams {
                w1: Tensor::zeros(&[c, 4 * c]),
                dw: Tensor::zeros(&[5, 5, 4 * c]),
                db: Tensor::zeros(&[4 * c]),
                w2: Tensor::zeros(&[4 * c, c]),
            },
            ln: [
                LayerNormParams::unit(c),
                LayerNormParams::unit(c),
                LayerNormParams::unit(c),
                LayerNormParams::unit(c),
            ],
            rel: RelPosBias::zeros(heads, lambda)?,
        })
    }

    /// Apply `f` to every parameter tensor, producing a new block. Visit
    /// order is fixed and matches [`Self::zip_tensors`].
    pub fn map(&self, f: &mut impl FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        LsttBlockParams {
            self_attn: SelfAttnParams {
                wq: f(&self.self_attn.wq),
                wk: f(&self.self_attn.wk),
                wv: f(&self.self_attn.wv),
                wo: f(&self.self_attn.wo),
            },
            wk_lt: f(&self.wk_lt),
            wv_lt: f(&self.wv_lt),
            wo_long: f(&self.wo_long),
            wo_short: f(&self.wo_short),
            ffn: FfnParams {
                w1: f(&self.ffn.w1),
                dw: f(&self.ffn.dw),
                db: f(&self.ffn.db),
                w2: f(&self.ffn.w2),
            },
            ln: [
                LayerNormParams {
                    gain: f(&self.ln[0].gain),
                    bias: f(&self.ln[0].bias),
                },
                LayerNormParams {
                    gain: f(&self.ln[1].gain),
                    bias: f(&self.ln[1].bias),
                },
                LayerNormParams {
                    gain: f(&self.ln[2].gain),
                    bias: f(&self.ln[2].bias),
                },
                LayerNormParams {
                    gain: f(&self.ln[3].gain),
                    bias: f(&self.ln[3].bias),
                },
            ],
            rel: RelPosBias {
                table: f(&self.rel.table),
            },
        }
    }

    /// Walk this block's tensors and `other`'s in lockstep, in the same order
    /// as [`Self::map`]. Names are relative; callers add a layer prefix.
    pub fn zip_tensors<'a>(
        &'a mut self,
        other: &'a Self,
        f: &mut impl FnMut(&str, &mut Tensor<T>, &'a Tensor<T>),
    ) {
        f("self.wq", &mut self.self_attn.wq, &other.self_attn.wq);
        f("self.wk", &mut self.self_attn.wk, &other.self_attn.wk);
        f("self.wv", &mut self.self_attn.wv, &other.self_attn.wv);
        f("self.wo", &mut self.self_attn.wo, &other.self_attn.wo);
        f("wk_lt", &mut self.wk_lt, &other.wk_lt);
        f("wv_lt", &mut self.wv_lt, &other.wv_lt);
        f("wo_long", &mut self.wo_long, &other.wo_long);
        f("wo_short", &mut self.wo_short, &other.wo_short);
        f("ffn.w1", &mut self.ffn.w1, &other.ffn.w1);
        f("ffn.dw", &mut self.ffn.dw, &other.ffn.dw);
        f("ffn.db", &mut self.ffn.db, &other.ffn.db);
        f("ffn.w2", &mut self.ffn.w2, &other.ffn.w2);
        for (i, (ln, oln)) in self.ln.iter_mut().zip(other.ln.iter()).enumerate() {
            f(&format!("ln{i}.gain"), &mut ln.gain, &oln.gain);
            f(&format!("ln{i}.bias"), &mut ln.bias, &oln.bias);
        }
        f("rel", &mut self.rel.table, &other.rel.table);
    }

    /// Named copies of every tensor, for checkpointing.
    pub fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        let mut clone = self.clone();
        clone.zip_tensors(&self.clone(), &mut |name, _, t| {
            out.push((format!("{prefix}.{name}"), t.clone()));
        });
    }

    /// Rebuild a block from a tensor lookup.
    pub fn from_fetch(
        prefix: &str,
        c: usize,
        heads: usize,
        lambda: usize,
        fetch: &mut impl FnMut(&str) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let mut block = LsttBlockParams::zeroed(c, heads, lambda)?;
        let reference = block.clone();
        let mut err = None;
        block.zip_tensors(&reference, &mut |name, slot, want| {
            if err.is_some() {
                return;
            }
            match fetch(&format!("{prefix}.{name}")) {
                Ok(t) => {
                    if t.shape() != want.shape() {
                        err = Some(Error::Shape(format!(
                            "checkpoint tensor {prefix}.{name}: shape {:?}, expected {:?}",
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
            None => Ok(block),
        }
    }
}

/// Per-layer memory as one block's attention consumes it: projected keys and
/// identification-augmented values for the long-term entries (concatenated
/// over memory frames) and per-frame entries for the short-term ring.
#[derive(Clone, Debug)]
pub struct LayerMemoryView<T: Scalar> {
    pub long_keys: Tensor<T>,
    pub long_values: Tensor<T>,
    pub short_keys: Vec<Tensor<T>>,
    pub short_values: Vec<Tensor<T>>,
}

/// What a block attends over.
pub enum BlockMemory<'a, T: Scalar> {
    /// Normal propagation over cached memory.
    Normal(&'a LayerMemoryView<T>),
    /// First-frame mode: both attentions read the current frame itself with
    /// the given identification embedding at feature resolution.
    FirstFrame { embed: &'a Tensor<T> },
}

/// The two feature tensors a memory write for this layer needs: the
/// normalized inputs the long-term and short-term attention saw.
#[derive(Clone, Debug)]
pub struct BlockCachePoints<T: Scalar> {
    pub long_input: Tensor<T>,
    pub short_input: Tensor<T>,
}

/// Head-averaged attention weight maps of one block, collected on request.
/// `long` is [h*w, T_mem*h*w]; `short` is dense [h*w, n*h*w] with zeros
/// outside each window.
#[derive(Clone, Debug)]
pub struct BlockAttentionMaps<T: Scalar> {
    pub long: Tensor<T>,
    pub short: Tensor<T>,
}

/// Plain average of per-head weight matrices, kept off the tape.
fn average_heads<T: Scalar>(maps: &[Tensor<T>]) -> Tensor<T> {
    let inv = T::from_f64(1.0 / maps.len() as f64);
    let mut data = vec![T::ZERO; maps[0].numel()];
    for m in maps {
        for (d, &v) in data.iter_mut().zip(m.data()) {
            *d += v;
        }
    }
    for d in data.iter_mut() {
        *d *= inv;
    }
    Tensor::with_node(maps[0].shape().to_vec(), data, None)
}

/// Feed-forward module: w2 . dwconv5x5(gelu(w1 . x)); the caller adds the
/// residual.
pub fn ffn_forward<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    params: &FfnParams<T>,
) -> Result<Tensor<T>> {
    if x.rows() != h * w {
        return Err(Error::Shape(format!(
            "ffn_forward: input {:?} does not match grid {h}x{w}",
            x.shape()
        )));
    }
    let hidden = ops::gelu(&ops::matmul(x, &params.w1)?)?;
    let mixed = conv::depthwise_conv2d_5x5(&hidden, h, w, &params.dw, &params.db)?;
    ops::matmul(&mixed, &params.w2)
}

/// One block: x + Sub(LN(x)) four times, in the order self-attention,
/// long-term, short-term, feed-forward. Also returns the cache points a
/// memory write for this frame would store. When `collect` is given, the
/// long-term and short-term attention weight maps (head-averaged) land there.
#[allow(clippy::too_many_arguments)]
pub fn lstt_block_forward<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    memory: BlockMemory<'_, T>,
    params: &LsttBlockParams<T>,
    cfg: AttentionHeadsConfig,
    lambda: usize,
    pos: Option<&Tensor<T>>,
    mut collect: Option<&mut Option<BlockAttentionMaps<T>>>,
) -> Result<(Tensor<T>, BlockCachePoints<T>)> {
    let c = cfg.channels;
    if x.shape() != [h * w, c] {
        return Err(Error::Shape(format!(
            "lstt block: input {:?}, expected [{}, {c}]",
            x.shape(),
            h * w
        )));
    }
    if let BlockMemory::Normal(view) = &memory {
        if view.long_keys.rows() == 0 || view.short_keys.is_empty() {
            return Err(Error::State(
                "lstt block: normal mode requires at least one long-term entry and one short-term frame".into(),
            ));
        }
        if view.short_keys.len() != view.short_values.len() {
            return Err(Error::State(
                "lstt block: short-term keys and values out of step".into(),
            ));
        }
    }

    // Self-attention; positional codes go into queries and keys only.
    let u1 = ops::layer_norm(x, &params.ln[0].gain, &params.ln[0].bias, T::from_f64(LN_EPS))?;
    let qk_src = match pos {
        Some(table) => ops::add(&u1, table)?,
        None => u1.clone(),
    };
    let q = ops::matmul(&qk_src, &params.self_attn.wq)?;
    let k = ops::matmul(&qk_src, &params.self_attn.wk)?;
    let v = ops::matmul(&u1, &params.self_attn.wv)?;
    let self_out = multi_head(&q, &k, &v, &params.self_attn.wo, cfg, None)?;
    let x = ops::add(x, &self_out)?;

    // Long-term attention.
    let u2 = ops::layer_norm(&x, &params.ln[1].gain, &params.ln[1].bias, T::from_f64(LN_EPS))?;
    let q2 = ops::matmul(&u2, &params.wk_lt)?;
    let (long_out, long_map) = match &memory {
        BlockMemory::Normal(view) => {
            let (out, weights) = multi_head_with_weights(
                &q2,
                &view.long_keys,
                &view.long_values,
                &params.wo_long,
                cfg,
                None,
            )?;
            let map = collect.is_some().then(|| average_heads(&weights));
            (out, map)
        }
        BlockMemory::FirstFrame { embed } => {
            let k2 = q2.clone();
            let v2 = ops::add(&ops::matmul(&u2, &params.wv_lt)?, embed)?;
            let (out, weights) =
                multi_head_with_weights(&q2, &k2, &v2, &params.wo_long, cfg, None)?;
            let map = collect.is_some().then(|| average_heads(&weights));
            (out, map)
        }
    };
    let x = ops::add(&x, &long_out)?;

    // Short-term windowed attention.
    let u3 = ops::layer_norm(&x, &params.ln[2].gain, &params.ln[2].bias, T::from_f64(LN_EPS))?;
    let q3 = ops::matmul(&u3, &params.wk_lt)?;
    let (short_out, short_map) = match &memory {
        BlockMemory::Normal(view) => {
            let k_refs: Vec<&Tensor<T>> = view.short_keys.iter().collect();
            let v_refs: Vec<&Tensor<T>> = view.short_values.iter().collect();
            let k_all = ops::concat_rows(&k_refs)?;
            let v_all = ops::concat_rows(&v_refs)?;
            let core = window_attention_core(
                &q3,
                &k_all,
                &v_all,
                &params.rel.table,
                h,
                w,
                view.short_keys.len(),
                lambda,
                cfg.heads,
            )?;
            let map = if collect.is_some() {
                let per_head = window_attention_weights(
                    &q3,
                    &k_all,
                    &params.rel,
                    h,
                    w,
                    view.short_keys.len(),
                    lambda,
                    cfg.heads,
                )?;
                Some(average_heads(&per_head))
            } else {
                None
            };
            (ops::matmul(&core, &params.wo_short)?, map)
        }
        BlockMemory::FirstFrame { embed } => {
            let k3 = q3.clone();
            let v3 = ops::add(&ops::matmul(&u3, &params.wv_lt)?, embed)?;
            let core = window_attention_core(
                &q3,
                &k3,
                &v3,
                &params.rel.table,
                h,
                w,
                1,
                lambda,
                cfg.heads,
            )?;
            let map = if collect.is_some() {
                let per_head = window_attention_weights(
                    &q3,
                    &k3,
                    &params.rel,
                    h,
                    w,
                    1,
                    lambda,
                    cfg.heads,
                )?;
                Some(average_heads(&per_head))
            } else {
                None
            };
            (ops::matmul(&core, &params.wo_short)?, map)
        }
    };
    let x = ops::add(&x, &short_out)?;
    if let Some(slot) = collect.as_deref_mut() {
        *slot = Some(BlockAttentionMaps {
            long: long_map.expect("long attention map collected"),
            short: short_map.expect("short attention map collected"),
        });
    }

    // Feed-forward.
    let u4 = ops::layer_norm(&x, &params.ln[3].gain, &params.ln[3].bias, T::from_f64(LN_EPS))?;
    let ffn_out = ffn_forward(&u4, h, w, &params.ffn)?;
    let y = ops::add(&x, &ffn_out)?;

    Ok((
        y,
        BlockCachePoints {
            long_input: u2,
            short_input: u3,
        },
    ))
}

/// Project a cache point into the memory entry a layer stores: keys from the
/// shared key map, values from the shared value map with the identification
/// embedding attached.
pub fn project_cache_entry<T: Scalar>(
    features: &Tensor<T>,
    embed: &Tensor<T>,
    params: &LsttBlockParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let keys = ops::matmul(features, &params.wk_lt)?;
    let values = ops::add(&ops::matmul(features, &params.wv_lt)?, embed)?;
    Ok((keys, values))
}

/// Ordered list of L blocks sharing one attention configuration.
#[derive(Clone, Debug)]
pub struct LsttStack<T: Scalar> {
    pub blocks: Vec<LsttBlockParams<T>>,
    pub cfg: AttentionHeadsConfig,
    pub lambda: usize,
}

impl<T: Scalar> LsttStack<T> {
    pub fn init(
        layers: usize,
        c: usize,
        heads: usize,
        lambda: usize,
        rng: &mut Rng,
    ) -> Result<LsttStack<T>> {
        if layers == 0 {
            return Err(Error::Config("lstt stack: zero layers".into()));
        }
        let blocks = (0..layers)
            .map(|_| LsttBlockParams::init(c, heads, lambda, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(LsttStack {
            blocks,
            cfg: AttentionHeadsConfig::new(heads, c)?,
            lambda,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }
}

/// What the stack attends over: one memory view per layer, or first-frame
/// mode with a shared embedding.
pub enum StackMemory<'a, T: Scalar> {
    Normal(&'a [LayerMemoryView<T>]),
    FirstFrame { embed: &'a Tensor<T> },
}

/// Run all blocks; layer l consumes layer l-1's output. Returns every block's
/// output (all of them feed the decoder) plus each layer's cache points.
/// With `collect`, per-layer attention maps are gathered as well.
#[allow(clippy::type_complexity)]
pub fn lstt_stack_forward<T: Scalar>(
    x0: &Tensor<T>,
    h: usize,
    w: usize,
    memory: &StackMemory<'_, T>,
    stack: &LsttStack<T>,
    pos: Option<&Tensor<T>>,
    mut collect: Option<&mut Vec<BlockAttentionMaps<T>>>,
) -> Result<(Vec<Tensor<T>>, Vec<BlockCachePoints<T>>)> {
    if stack.blocks.is_empty() {
        return Err(Error::Config("lstt stack: zero layers".into()));
    }
    if let StackMemory::Normal(views) = memory {
        if views.len() != stack.blocks.len() {
            return Err(Error::State(format!(
                "lstt stack: {} memory views for {} layers",
                views.len(),
                stack.blocks.len()
            )));
        }
    }
    let mut outputs = Vec::with_capacity(stack.blocks.len());
    let mut caches = Vec::with_capacity(stack.blocks.len());
    let mut x = x0.clone();
    for (l, block) in stack.blocks.iter().enumerate() {
        let mem = match memory {
            StackMemory::Normal(views) => BlockMemory::Normal(&views[l]),
            StackMemory::FirstFrame { embed } => BlockMemory::FirstFrame { embed },
        };
        let mut maps = None;
        let slot = collect.is_some().then_some(&mut maps);
        let (y, cache) =
            lstt_block_forward(&x, h, w, mem, block, stack.cfg, stack.lambda, pos, slot)?;
        if let Some(sink) = collect.as_deref_mut() {
            sink.push(maps.expect("block collected attention maps"));
        }
        outputs.push(y.clone());
        caches.push(cache);
        x = y;
    }
    Ok((outputs, caches))
}

/// Build the memory view a frame's cache points would produce, used by the
/// engine at memory-write time and by the self-consistency tests.
pub fn memory_view_from_cache<T: Scalar>(
    cache: &BlockCachePoints<T>,
    embed: &Tensor<T>,
    params: &LsttBlockParams<T>,
) -> Result<LayerMemoryView<T>> {
    let (lk, lv) = project_cache_entry(&cache.long_input, embed, params)?;
    let (sk, sv) = project_cache_entry(&cache.short_input, embed, params)?;
    Ok(LayerMemoryView {
        long_keys: lk,
        long_values: lv,
        short_keys: vec![sk],
        short_values: vec![sv],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg() -> AttentionHeadsConfig {
        AttentionHeadsConfig::new(2, 8).unwrap()
    }

    #[test]
    fn ffn_dead_weights_give_zero() {
        let p = LsttBlockParams::<f64>::zeroed(8, 2, 3).unwrap();
        let mut rng = Rng::seed_from(81);
        let x = Tensor::<f64>::randn(&[4 * 4, 8], 1.0, &mut rng);
        let y = ffn_forward(&x, 4, 4, &p.ffn).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_delta_kernel_reduces_to_mlp() {
        let mut rng = Rng::seed_from(82);
        let c = 8;
        let mut p = LsttBlockParams::<f64>::init(c, 2, 3, &mut rng).unwrap();
        // Depthwise kernel = centered delta, zero bias: plain 2-layer MLP.
        let mut k = vec![0.0; 5 * 5 * 4 * c];
        for ch in 0..4 * c {
            k[(2 * 5 + 2) * 4 * c + ch] = 1.0;
        }
        p.ffn.dw = Tensor::from_vec(&[5, 5, 4 * c], k).unwrap();
        p.ffn.db = Tensor::zeros(&[4 * c]);
        let x = Tensor::<f64>::randn(&[3 * 5, c], 1.0, &mut rng);
        let got = ffn_forward(&x, 3, 5, &p.ffn).unwrap();
        let want = ops::matmul(
            &ops::gelu(&ops::matmul(&x, &p.ffn.w1).unwrap()).unwrap(),
            &p.ffn.w2,
        )
        .unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn ffn_matches_primitive_composition() {
        let mut rng = Rng::seed_from(83);
        let c = 8;
        let p = LsttBlockParams::<f64>::init(c, 2, 3, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[4 * 4, c], 1.0, &mut rng);
        let got = ffn_forward(&x, 4, 4, &p.ffn).unwrap();
        let step1 = ops::matmul(&x, &p.ffn.w1).unwrap();
        let step2 = ops::gelu(&step1).unwrap();
        let step3 = conv::depthwise_conv2d_5x5(&step2, 4, 4, &p.ffn.dw, &p.ffn.db).unwrap();
        let want = ops::matmul(&step3, &p.ffn.w2).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let mut rng = Rng::seed_from(84);
        let p = LsttBlockParams::<f64>::zeroed(8, 2, 3).unwrap();
        let x = Tensor::<f64>::randn(&[4 * 4, 8], 1.0, &mut rng);
        let embed = Tensor::<f64>::randn(&[4 * 4, 8], 1.0, &mut rng);
        let (y, _) = lstt_block_forward(
            &x,
            4,
            4,
            BlockMemory::FirstFrame { embed: &embed },
            &p,
            micro_cfg(),
            3,
            None,
            None,
        )
        .unwrap();
        assert_eq!(y, x, "pure residual path is exactly the identity");
    }

    #[test]
    fn first_frame_mode_handles_all_background_mask() {
        let mut rng = Rng::seed_from(85);
        let p = LsttBlockParams::<f64>::init(8, 2, 3, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[16, 8], 1.0, &mut rng);
        // All-background: every pixel carries the same identity vector.
        let embed_row: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let mut e = Vec::new();
        for _ in 0..16 {
            e.extend_from_slice(&embed_row);
        }
        let embed = Tensor::from_vec(&[16, 8], e).unwrap();
        let (y, _) = lstt_block_forward(
            &x,
            4,
            4,
            BlockMemory::FirstFrame { embed: &embed },
            &p,
            micro_cfg(),
            3,
            None,
            None,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normal_mode_with_copied_memory_equals_first_frame() {
        // Run the first frame in self mode, store its cache points as memory,
        // rerun the same frame in normal mode: outputs must coincide.
        let mut rng = Rng::seed_from(86);
        for layers in [1usize, 2, 3] {
            let stack = LsttStack::<f64>::init(layers, 8, 2, 3, &mut rng).unwrap();
            let x0 = Tensor::<f64>::randn(&[16, 8], 1.0, &mut rng);
            let embed = Tensor::<f64>::randn(&[16, 8], 0.5, &mut rng);
            let pos = crate::attn::sine_pos_embed::<f64>(4, 4, 8).unwrap();

            let (first_out, caches) = lstt_stack_forward(
                &x0,
                4,
                4,
                &StackMemory::FirstFrame { embed: &embed },
                &stack,
                Some(&pos.table),
                None,
            )
            .unwrap();

            let views: Vec<LayerMemoryView<f64>> = caches
                .iter()
                .zip(&stack.blocks)
                .map(|(cache, block)| memory_view_from_cache(cache, &embed, block).unwrap())
                .collect();
            let (normal_out, _) = lstt_stack_forward(
                &x0,
                4,
                4,
                &StackMemory::Normal(&views),
                &stack,
                Some(&pos.table),
                None,
            )
            .unwrap();
            for (a, b) in first_out.iter().zip(&normal_out) {
                assert!(
                    a.max_abs_diff(b) <= 1e-5,
                    "layers={layers}: {}",
                    a.max_abs_diff(b)
                );
            }
        }
    }

    #[test]
    fn missing_memory_is_state_error() {
        let mut rng = Rng::seed_from(87);
        let p = LsttBlockParams::<f64>::init(8, 2, 3, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[16, 8], 1.0, &mut rng);
        let empty = LayerMemoryView {
            long_keys: Tensor::zeros(&[0, 8]),
            long_values: Tensor::zeros(&[0, 8]),
            short_keys: vec![],
            short_values: vec![],
        };
        let err = lstt_block_forward(
            &x,
            4,
            4,
            BlockMemory::Normal(&empty),
            &p,
            micro_cfg(),
            3,
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err}");
    }

    #[test]
    fn stack_of_one_equals_single_block() {
        let mut rng = Rng::seed_from(88);
        let stack = LsttStack::<f64>::init(1, 8, 2, 3, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[16, 8], 1.0, &mut rng);
        let embed = Tensor::<f64>::randn(&[16, 8], 0.5, &mut rng);
        let (outs, _) = lstt_stack_forward(
            &x,
            4,
            4,
            &StackMemory::FirstFrame { embed: &embed },
            &stack,
            None,
            None,
        )
        .unwrap();
        assert_eq!(outs.len(), 1);
        let (solo, _) = lstt_block_forward(
            &x,
            4,
            4,
            BlockMemory::FirstFrame { embed: &embed },
            &stack.blocks[0],
            micro_cfg(),
            3,
            None,
            None,
        )
        .unwrap();
        assert_eq!(outs[0], solo);
    }

    #[test]
    fn zeroed_tail_blocks_repeat_first_output() {
        let mut rng = Rng::seed_from(89);
        let mut stack = LsttStack::<f64>::init(3, 8, 2, 3, &mut rng).unwrap();
        stack.blocks[1] = LsttBlockParams::zeroed(8, 2, 3).unwrap();
        stack.blocks[2] = LsttBlockParams::zeroed(8, 2, 3).unwrap();
        let x = Tensor::<f64>::randn(&[16, 8], 1.0, &mut rng);
        let embed = Tensor::<f64>::randn(&[16, 8], 0.5, &mut rng);
        let (outs, _) = lstt_stack_forward(
            &x,
            4,
            4,
            &StackMemory::FirstFrame { embed: &embed },
            &stack,
            None,
            None,
        )
        .unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!(outs[1], outs[0]);
        assert_eq!(outs[2], outs[0]);
        for o in &outs {
            assert_eq!(o.shape(), &[16, 8], "shape contract");
        }
    }

    #[test]
    fn layer_memory_correspondence_sentinels() {
        // Perturbing layer-2 memory must not change layer-1 output, and
        // perturbing layer-1 memory must change it.
        let mut rng = Rng::seed_from(90);
        let stack = LsttStack::<f64>::init(2, 8, 2, 3, &mut rng).unwrap();
        let x0 = Tensor::<f64>::randn(&[16, 8], 1.0, &mut rng);
        let embed = Tensor::<f64>::randn(&[16, 8], 0.5, &mut rng);
        let (_, caches) = lstt_stack_forward(
            &x0,
            4,
            4,
            &StackMemory::FirstFrame { embed: &embed },
            &stack,
            None,
            None,
        )
        .unwrap();
        let views: Vec<LayerMemoryView<f64>> = caches
            .iter()
            .zip(&stack.blocks)
            .map(|(cache, block)| memory_view_from_cache(cache, &embed, block).unwrap())
            .collect();
        let (base, _) =
            lstt_stack_forward(&x0, 4, 4, &StackMemory::Normal(&views), &stack, None, None)
                .unwrap();

        let sentinel = Tensor::<f64>::randn(&[16, 8], 3.0, &mut rng);
        let mut poisoned = views.clone();
        poisoned[1].long_values = sentinel.clone();
        poisoned[1].short_values = vec![sentinel.clone()];
        let (poke2, _) =
            lstt_stack_forward(&x0, 4, 4, &StackMemory::Normal(&poisoned), &stack, None, None)
                .unwrap();
        assert_eq!(
            poke2[0], base[0],
            "layer 1 output must not read layer 2 memory"
        );
        assert!(
            poke2[1].max_abs_diff(&base[1]) > 1e-9,
            "layer 2 memory must matter for layer 2"
        );

        let mut poisoned1 = views.clone();
        poisoned1[0].long_values = sentinel.clone();
        let (poke1, _) =
            lstt_stack_forward(&x0, 4, 4, &StackMemory::Normal(&poisoned1), &stack, None, None)
                .unwrap();
        assert!(poke1[0].max_abs_diff(&base[0]) > 1e-9);
    }

    #[test]
    fn block_checkpoint_roundtrip_via_named_tensors() {
        let mut rng = Rng::seed_from(91);
        let block = LsttBlockParams::<f32>::init(8, 2, 3, &mut rng).unwrap();
        let mut named = Vec::new();
        block.named_tensors("block0", &mut named);
        assert_eq!(named.len(), 21);
        let mut lookup: std::collections::BTreeMap<String, Tensor<f32>> =
            named.into_iter().collect();
        let rebuilt = LsttBlockParams::<f32>::from_fetch("block0", 8, 2, 3, &mut |name| {
            lookup
                .remove(name)
                .ok_or_else(|| Error::Parse(format!("missing {name}")))
        })
        .unwrap();
        let mut pairs_checked = 0;
        let mut rebuilt_mut = rebuilt.clone();
        rebuilt_mut.zip_tensors(&block, &mut |_, a, b| {
            assert_eq!(&*a, b);
            pairs_checked += 1;
        });
        assert_eq!(pairs_checked, 21);
    }
}
