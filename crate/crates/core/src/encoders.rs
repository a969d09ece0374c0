//! Image and text transformer encoders with per-layer MoE adapter hooks.
//!
//! Base weights are random, seeded and frozen. Each block computes
//!
//! ```text
//! u       = h + Attn(LN1(h))
//! h_next  = u + FFN(LN2(u)) + MoE(LN2(u))
//! ```
//!
//! so the adapter sits parallel to the FFN on the same normalized input.
//! The image encoder pools the CLS position; the text encoder pools the
//! trailing end-of-text token.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ag::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{MoeAdapter, MoeConfig};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    /// Hidden width `d`.
    pub width: usize,
    pub heads: usize,
    /// Joint embedding width shared by both modalities.
    pub joint_width: usize,
    /// Patch tokens plus the CLS token.
    pub image_tokens: usize,
    /// Width of one raw patch token.
    pub patch_dim: usize,
    /// Learnable prompt prefix length (`"a photo of"` → 3).
    pub prefix_len: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            joint_width: 32,
            image_tokens: 17,
            patch_dim: 16,
            prefix_len: 3,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.joint_width == 0 || self.joint_width > self.width {
            return bad(format!("joint width {} must be in 1..={}", self.joint_width, self.width));
        }
        if self.prefix_len == 0 {
            return bad("prompt prefix length must be at least 1".into());
        }
        if self.image_tokens < 2 {
            return bad("image needs a CLS token and at least one patch".into());
        }
        if self.depth == 0 || self.patch_dim == 0 || self.ffn_mult == 0 {
            return bad("depth, patch_dim and ffn_mult must be positive".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.image_tokens - 1
    }

    /// Longest text sequence: prefix, state, object, end-of-text.
    pub fn max_text_len(&self) -> usize {
        self.prefix_len + 3
    }
}

/// Draws frozen base weights.
pub(crate) struct Init<'a, R> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid sigma");
        let vals: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
        Tensor::from_f64(shape, &vals).expect("shape matches")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(vec![width], T::one()), false)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![width]), false)?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::lit(LN_EPS));
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let s = g.mul(n, gamma)?;
        g.add(s, beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let mut lin = Self::init_no_bias(store, init, prefix, fan_in, fan_out)?;
        lin.b = Some(store.add(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]), false)?);
        Ok(lin)
    }

    /// Used where a bias is inert, e.g. attention keys under softmax shift invariance.
    fn init_no_bias<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{prefix}.w"), init.normal(vec![fan_in, fan_out], std), false)?;
        Ok(Self { w, b: None })
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: LayerNormParams,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNormParams,
    fc1: Linear,
    fc2: Linear,
    adapter: MoeAdapter,
}

/// Intermediate values of one block that variant extraction needs.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    /// `u + FFN(LN2(u))`: the block output without the adapter term.
    pub residual: Var,
    /// `LN2(u)`: the adapter input.
    pub normed: Var,
    pub out: Var,
    /// Router gate node, absent in shared-only mode or when adapters are bypassed.
    pub gates: Option<Var>,
}

impl Block {
    fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        cfg: &EncoderConfig,
        moe: &MoeConfig,
    ) -> Result<Self> {
        let d = cfg.width;
        let hidden = d * cfg.ffn_mult;
        let ln1 = LayerNormParams::init(store, &format!("{prefix}.ln1"), d)?;
        let q = Linear::init(store, init, &format!("{prefix}.attn.q"), d, d)?;
        let k = Linear::init_no_bias(store, init, &format!("{prefix}.attn.k"), d, d)?;
        let v = Linear::init(store, init, &format!("{prefix}.attn.v"), d, d)?;
        let o = Linear::init(store, init, &format!("{prefix}.attn.o"), d, d)?;
        let ln2 = LayerNormParams::init(store, &format!("{prefix}.ln2"), d)?;
        let fc1 = Linear::init(store, init, &format!("{prefix}.ffn.fc1"), d, hidden)?;
        let fc2 = Linear::init(store, init, &format!("{prefix}.ffn.fc2"), hidden, d)?;
        let adapter = MoeAdapter::init(store, &format!("{prefix}.moe"), d, moe, init.rng)?;
        Ok(Self {
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            fc1,
            fc2,
            adapter,
        })
    }

    fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    ) -> Result<Var> {
        let d = g.shape(x)[1];
        let dh = d / heads;
        let split = |g: &mut Graph<T>, lin: &Linear| -> Result<Var> {
            let y = lin.apply(g, store, x)?;
            let y = g.reshape(y, vec![batch, len, heads, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, vec![batch * heads, len, dh])
        };
        let q = split(g, &self.q)?;
        let k = split(g, &self.k)?;
        let v = split(g, &self.v)?;
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let p = g.softmax(scores);
        let ctx = g.matmul(p, v)?;
        let ctx = g.reshape(ctx, vec![batch, heads, len, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![batch * len, d])?;
        self.o.apply(g, store, ctx)
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        batch: usize,
        len: usize,
        heads: usize,
        use_adapter: bool,
    ) -> Result<BlockOutput> {
        let n1 = self.ln1.apply(g, store, h)?;
        let att = self.attention(g, store, n1, batch, len, heads)?;
        let u = g.add(h, att)?;
        let normed = self.ln2.apply(g, store, u)?;
        let f = self.fc1.apply(g, store, normed)?;
        let f = g.gelu(f);
        let f = self.fc2.apply(g, store, f)?;
        let residual = g.add(u, f)?;
        if !use_adapter {
            return Ok(BlockOutput {
                residual,
                normed,
                out: residual,
                gates: None,
            });
        }
        let (m, gates) = self.adapter.forward(g, store, normed)?;
        let out = g.add(residual, m)?;
        Ok(BlockOutput {
            residual,
            normed,
            out,
            gates,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    blocks: Vec<Block>,
    heads: usize,
}

/// Result of a stack pass over `batch` sequences of `len` tokens.
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// `[batch * len, d]`.
    pub hidden: Var,
    pub last: BlockOutput,
    /// Gate node per layer.
    pub gates: Vec<Option<Var>>,
}

impl Transformer {
    fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        prefix: &str,
        cfg: &EncoderConfig,
        moe: &MoeConfig,
    ) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|j| Block::init(store, init, &format!("{prefix}.blocks.{j}"), cfg, moe))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            heads: cfg.heads,
        })
    }

    pub fn adapters(&self) -> impl Iterator<Item = &MoeAdapter> {
        self.blocks.iter().map(|b| &b.adapter)
    }

    pub fn final_adapter(&self) -> &MoeAdapter {
        &self.blocks.last().expect("depth >= 1").adapter
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut h: Var,
        batch: usize,
        len: usize,
        use_adapters: bool,
    ) -> Result<StackOutput> {
        let mut gates = Vec::with_capacity(self.blocks.len());
        let mut last = None;
        for b in &self.blocks {
            let out = b.forward(g, store, h, batch, len, self.heads, use_adapters)?;
            h = out.out;
            gates.push(out.gates);
            last = Some(out);
        }
        Ok(StackOutput {
            hidden: h,
            last: last.expect("depth >= 1"),
            gates,
        })
    }
}

/// Rows `pos` of each sequence in a `[batch * len, d]` matrix, as `[batch, d]`.
fn take_position<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize, len: usize, pos: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let y = g.reshape(x, vec![batch, len, d])?;
    let y = g.slice(y, 1, pos, 1)?;
    g.reshape(y, vec![batch, d])
}

/// Joint-space image outputs for a batch.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    /// `[batch, joint]`, unit rows.
    pub global: Var,
    /// `[batch * n_experts, joint]`, unit rows; shared experts first.
    pub variants: Option<Var>,
    pub n_variants: usize,
    pub gates: Vec<Option<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    patch_proj: ParamId,
    cls: ParamId,
    pos: ParamId,
    ln_pre: LayerNormParams,
    ln_post: LayerNormParams,
    proj: ParamId,
    pub transformer: Transformer,
    cfg: EncoderConfig,
}

impl ImageEncoder {
    pub(crate) fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        cfg: &EncoderConfig,
        moe: &MoeConfig,
    ) -> Result<Self> {
        let d = cfg.width;
        let patch_proj = store.add(
            "image.patch_proj",
            init.normal(vec![cfg.patch_dim, d], 1.0 / (cfg.patch_dim as f64).sqrt()),
            false,
        )?;
        let cls = store.add("image.cls", init.normal(vec![1, d], 1.0), false)?;
        let pos = store.add("image.pos", init.normal(vec![cfg.image_tokens, d], 0.1), false)?;
        let ln_pre = LayerNormParams::init(store, "image.ln_pre", d)?;
        let transformer = Transformer::init(store, init, "image", cfg, moe)?;
        let ln_post = LayerNormParams::init(store, "image.ln_post", d)?;
        let proj = store.add(
            "image.proj",
            init.normal(vec![d, cfg.joint_width], 1.0 / (d as f64).sqrt()),
            false,
        )?;
        Ok(Self {
            patch_proj,
            cls,
            pos,
            ln_pre,
            ln_post,
            proj,
            transformer,
            cfg: cfg.clone(),
        })
    }

    fn to_joint<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = self.ln_post.apply(g, store, x)?;
        let p = g.param(store, self.proj);
        let y = g.matmul(n, p)?;
        Ok(g.l2_normalize(y))
    }

    /// Encodes `patches: [batch, patches, patch_dim]`.
    ///
    /// With `use_adapters = false` the frozen base runs alone and no variants
    /// are produced.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
        use_adapters: bool,
        want_variants: bool,
    ) -> Result<ImageFeatures> {
        let s = g.shape(patches).to_vec();
        if s.len() != 3 || s[1] != self.cfg.patches() || s[2] != self.cfg.patch_dim {
            return Err(Error::Shape {
                op: "encode_image",
                node: patches.index(),
                detail: format!(
                    "expected [batch, {}, {}], got {s:?}",
                    self.cfg.patches(),
                    self.cfg.patch_dim
                ),
            });
        }
        let (batch, len, d) = (s[0], self.cfg.image_tokens, self.cfg.width);
        let flat = g.reshape(patches, vec![batch * s[1], s[2]])?;
        let w = g.param(store, self.patch_proj);
        let e = g.matmul(flat, w)?;
        let e = g.reshape(e, vec![batch, s[1], d])?;
        let cls = g.param(store, self.cls);
        let cls = g.gather(cls, &vec![0; batch])?;
        let cls = g.reshape(cls, vec![batch, 1, d])?;
        let h = g.concat(&[cls, e], 1)?;
        let pos = g.param(store, self.pos);
        let h = g.add(h, pos)?;
        let h = g.reshape(h, vec![batch * len, d])?;
        let h = self.ln_pre.apply(g, store, h)?;
        let out = self.transformer.forward(g, store, h, batch, len, use_adapters)?;

        let cls_hidden = take_position(g, out.hidden, batch, len, 0)?;
        let global = self.to_joint(g, store, cls_hidden)?;
        if !use_adapters || !want_variants {
            return Ok(ImageFeatures {
                global,
                variants: None,
                n_variants: 0,
                gates: out.gates,
            });
        }
        let variants = self.variant_extract(g, store, &out.last, batch)?;
        Ok(ImageFeatures {
            global,
            variants: Some(variants),
            n_variants: self.transformer.final_adapter().num_experts(),
            gates: out.gates,
        })
    }

    /// One joint-space feature per expert of the final adapter: the CLS
    /// mixture term is replaced by that single expert's output.
    pub fn variant_extract<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        last: &BlockOutput,
        batch: usize,
    ) -> Result<Var> {
        let len = self.cfg.image_tokens;
        let d = self.cfg.width;
        let residual = take_position(g, last.residual, batch, len, 0)?;
        let normed = take_position(g, last.normed, batch, len, 0)?;
        let adapter = self.transformer.final_adapter();
        let mut parts = Vec::with_capacity(adapter.num_experts());
        for which in adapter.expert_refs() {
            let e = adapter.expert_output(g, store, normed, which)?;
            let v = g.add(residual, e)?;
            parts.push(g.reshape(v, vec![batch, 1, d])?);
        }
        let stacked = g.concat(&parts, 1)?;
        let flat = g.reshape(stacked, vec![batch * parts.len(), d])?;
        self.to_joint(g, store, flat)
    }
}

/// Learnable prompt tokens. Three prefix families share the primitive
/// embeddings: `P_c = [prefix_c, s, o]`, `P_s = [prefix_s, s]`, `P_o = [prefix_o, o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub comp_prefix: ParamId,
    pub state_prefix: ParamId,
    pub object_prefix: ParamId,
    pub states: ParamId,
    pub objects: ParamId,
    n_states: usize,
    n_objects: usize,
}

/// Which prompt family to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Composition,
    State,
    Object,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    token_embedding: ParamId,
    pos: ParamId,
    ln_final: LayerNormParams,
    proj: ParamId,
    pub transformer: Transformer,
    prefix_len: usize,
    n_states: usize,
    n_objects: usize,
}

impl TextEncoder {
    pub(crate) fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        cfg: &EncoderConfig,
        moe: &MoeConfig,
        n_states: usize,
        n_objects: usize,
    ) -> Result<(Self, PromptBank)> {
        let d = cfg.width;
        let a = cfg.prefix_len;
        // vocabulary rows: prefix words, end-of-text, states, objects
        let vocab = a + 1 + n_states + n_objects;
        let table: Tensor<T> = init.normal(vec![vocab, d], 1.0);
        let token_embedding = store.add("text.token_embedding", table.clone(), false)?;
        let pos = store.add("text.pos", init.normal(vec![cfg.max_text_len(), d], 0.1), false)?;
        let transformer = Transformer::init(store, init, "text", cfg, moe)?;
        let ln_final = LayerNormParams::init(store, "text.ln_final", d)?;
        let proj = store.add(
            "text.proj",
            init.normal(vec![d, cfg.joint_width], 1.0 / (d as f64).sqrt()),
            false,
        )?;

        // Prompts start from the vocabulary rows of their words.
        let rows = |from: usize, n: usize| -> Tensor<T> {
            Tensor::new(vec![n, d], table.data()[from * d..(from + n) * d].to_vec()).expect("slice of table")
        };
        let prompts = PromptBank {
            comp_prefix: store.add("prompt.comp_prefix", rows(0, a), true)?,
            state_prefix: store.add("prompt.state_prefix", rows(0, a), true)?,
            object_prefix: store.add("prompt.object_prefix", rows(0, a), true)?,
            states: store.add("prompt.states", rows(a + 1, n_states), true)?,
            objects: store.add("prompt.objects", rows(a + 1 + n_states, n_objects), true)?,
            n_states,
            n_objects,
        };
        Ok((
            Self {
                token_embedding,
                pos,
                ln_final,
                proj,
                transformer,
                prefix_len: a,
                n_states,
                n_objects,
            },
            prompts,
        ))
    }

    fn eot_id(&self) -> usize {
        self.prefix_len
    }

    /// Token embeddings for a batch of prompts, `[batch * len, d]`, plus `len`.
    /// Each item is `(state, object)`; the unused half is ignored for
    /// primitive prompts.
    pub fn build_prompts<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bank: &PromptBank,
        kind: PromptKind,
        items: &[(usize, usize)],
    ) -> Result<(Var, usize)> {
        for &(s, o) in items {
            let bad_state = kind != PromptKind::Object && s >= self.n_states;
            let bad_object = kind != PromptKind::State && o >= self.n_objects;
            if bad_state || bad_object {
                return Err(Error::Data(format!("unknown primitive in prompt ({s}, {o})")));
            }
        }
        let a = self.prefix_len;
        let prefix = match kind {
            PromptKind::Composition => bank.comp_prefix,
            PromptKind::State => bank.state_prefix,
            PromptKind::Object => bank.object_prefix,
        };
        let prefix = g.param(store, prefix);
        let states = g.param(store, bank.states);
        let objects = g.param(store, bank.objects);
        let vocab = g.param(store, self.token_embedding);
        let eot = g.slice(vocab, 0, self.eot_id(), 1)?;
        // [prefix rows | states | objects | eot]
        let table = g.concat(&[prefix, states, objects, eot], 0)?;
        let s_base = a;
        let o_base = a + self.n_states;
        let eot_row = a + self.n_states + self.n_objects;
        let mut idx = Vec::new();
        for &(s, o) in items {
            idx.extend(0..a);
            match kind {
                PromptKind::Composition => idx.extend([s_base + s, o_base + o]),
                PromptKind::State => idx.push(s_base + s),
                PromptKind::Object => idx.push(o_base + o),
            }
            idx.push(eot_row);
        }
        let len = if kind == PromptKind::Composition { a + 3 } else { a + 2 };
        Ok((g.gather(table, &idx)?, len))
    }

    /// Encodes `tokens: [batch * len, d]` to unit joint features `[batch, joint]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        batch: usize,
        len: usize,
        use_adapters: bool,
    ) -> Result<(Var, Vec<Option<Var>>)> {
        let d = g.shape(tokens)[1];
        let h = g.reshape(tokens, vec![batch, len, d])?;
        let pos = g.param(store, self.pos);
        let pos = g.slice(pos, 0, 0, len)?;
        let h = g.add(h, pos)?;
        let h = g.reshape(h, vec![batch * len, d])?;
        let out = self.transformer.forward(g, store, h, batch, len, use_adapters)?;
        let last = take_position(g, out.hidden, batch, len, len - 1)?;
        let n = self.ln_final.apply(g, store, last)?;
        let p = g.param(store, self.proj);
        let y = g.matmul(n, p)?;
        Ok((g.l2_normalize(y), out.gates))
    }
}

/// Parameter-name predicate for adapter weights.
pub fn is_adapter_param(name: &str) -> bool {
    name.contains(".moe.")
}

/// Parameter-name predicate for prompt tokens.
pub fn is_prompt_param(name: &str) -> bool {
    name.starts_with("prompt.")
}
