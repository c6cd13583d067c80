//! Desk-scale Vision Transformer with a modality-conditional patch tokenizer.
//!
//! Optical and SAR samples are projected into the token space by separate
//! linear heads; the class token, positional embeddings and every Transformer
//! block are shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::dfl::{FusionMode, HeadConfig};
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, ParamStore, Scalar, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub in_channels: usize,
    pub patch: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// 1-based index of the block whose output feeds the structural loss.
    pub struct_layer: usize,
    pub num_identities: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64x32 input, patch 8, 6 blocks of width 64, structure probe after block 3.
    pub fn desk() -> Self {
        Self {
            image_h: 64,
            image_w: 32,
            in_channels: 3,
            patch: 8,
            layers: 6,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            struct_layer: 3,
            num_identities: 20,
        }
    }

    /// ViT-B/16 geometry at 256x128.
    pub fn vit_base(num_identities: usize) -> Self {
        Self {
            image_h: 256,
            image_w: 128,
            in_channels: 3,
            patch: 16,
            layers: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4.0,
            struct_layer: 6,
            num_identities,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch == 0 || !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return bad(format!(
                "image {}x{} is not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.layers == 0 || self.struct_layer == 0 || self.struct_layer > self.layers {
            return bad(format!(
                "struct_layer {} must lie in [1, {}]",
                self.struct_layer, self.layers
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.in_channels == 0 || self.num_identities == 0 || self.mlp_hidden() == 0 {
            return bad("channels, identities and MLP width must be positive".into());
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    /// Channels of the terminal representation.
    pub fn embed_dim(&self) -> usize {
        self.dim
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch * self.patch
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Linear {
    /// `x` is `[rows, in]`.
    pub fn forward<'t, T: Scalar>(&self, p: &BoundParams<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(p.get(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    weight: usize,
    bias: usize,
}

impl Norm {
    fn forward<'t, T: Scalar>(&self, p: &BoundParams<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(
            Some(p.get(self.weight)),
            Some(p.get(self.bias)),
            T::from_f64_lossy(LAYER_NORM_EPS),
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Slots {
    embed_opt: Linear,
    embed_sar: Linear,
    cls_token: usize,
    pos_embed: usize,
    blocks: Vec<Block>,
    norm: Norm,
    decouple: Option<(Linear, Linear)>,
    bnneck: usize,
    classifier: usize,
}

/// Everything one forward pass produces.
pub struct ForwardOutput<'t, T: Scalar> {
    /// Output of block `struct_layer` as `[B, C, H', W']`.
    pub grid: Var<'t, T>,
    /// Class-token representation after the last block, `[B, d]`.
    pub terminal: Var<'t, T>,
    /// Shared and specific projections (absent when DFL is off).
    pub shared: Option<Var<'t, T>>,
    pub specific: Option<Var<'t, T>>,
    /// Retrieval / identity feature selected by the fusion mode.
    pub feature: Var<'t, T>,
}

/// Backbone plus disentanglement heads and the identity classifier.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub heads: HeadConfig,
    pub params: ParamStore<T>,
    slots: Slots,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn trunc_normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| loop {
                let v = self.normal.sample(&mut self.rng);
                if v.abs() <= 2.0 {
                    break v * std;
                }
            })
            .collect()
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, heads: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 1.0).expect("unit normal"),
        };
        let mut store = ParamStore::new();
        let add = |store: &mut ParamStore<T>, name: &str, shape: &[usize], values: Vec<f64>| {
            store.add(name, Tensor::from_f64(shape, &values)?)
        };
        let c = config.dim;
        let hidden = config.mlp_hidden();
        let linear = |store: &mut ParamStore<T>,
                          init: &mut Init,
                          name: &str,
                          fan_in: usize,
                          fan_out: usize,
                          bias: bool|
         -> Result<Linear> {
            let weight = add(
                store,
                &format!("{name}.weight"),
                &[fan_in, fan_out],
                init.trunc_normal(fan_in * fan_out, INIT_STD),
            )?;
            let bias = if bias {
                Some(add(store, &format!("{name}.bias"), &[fan_out], vec![0.0; fan_out])?)
            } else {
                None
            };
            Ok(Linear { weight, bias })
        };
        let norm = |store: &mut ParamStore<T>, name: &str, width: usize| -> Result<Norm> {
            Ok(Norm {
                weight: store.add(&format!("{name}.weight"), Tensor::full(&[width], T::one()))?,
                bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[width]))?,
            })
        };

        let embed_opt = linear(&mut store, &mut init, "patch_embed.optical", config.patch_dim(), c, true)?;
        let embed_sar = linear(&mut store, &mut init, "patch_embed.sar", config.patch_dim(), c, true)?;
        let cls_token = store.add(
            "cls_token",
            Tensor::from_f64(&[1, 1, c], &init.trunc_normal(c, INIT_STD))?,
        )?;
        let pos_embed = store.add(
            "pos_embed",
            Tensor::from_f64(
                &[1, config.seq_len(), c],
                &init.trunc_normal(config.seq_len() * c, INIT_STD),
            )?,
        )?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let pre = format!("blocks.{i}");
            blocks.push(Block {
                norm1: norm(&mut store, &format!("{pre}.norm1"), c)?,
                qkv: linear(&mut store, &mut init, &format!("{pre}.attn.qkv"), c, 3 * c, true)?,
                proj: linear(&mut store, &mut init, &format!("{pre}.attn.proj"), c, c, true)?,
                norm2: norm(&mut store, &format!("{pre}.norm2"), c)?,
                fc1: linear(&mut store, &mut init, &format!("{pre}.mlp.fc1"), c, hidden, true)?,
                fc2: linear(&mut store, &mut init, &format!("{pre}.mlp.fc2"), hidden, c, true)?,
            });
        }
        let final_norm = norm(&mut store, "norm", c)?;
        let d = config.embed_dim();
        let decouple = if heads.dfl_on {
            let mut shared_w = init.trunc_normal(d * d, INIT_STD);
            for i in 0..d {
                shared_w[i * d + i] += 1.0;
            }
            let shared = Linear {
                weight: add(&mut store, "dfl.shared.weight", &[d, d], shared_w)?,
                bias: Some(add(&mut store, "dfl.shared.bias", &[d], vec![0.0; d])?),
            };
            let specific = linear(&mut store, &mut init, "dfl.specific", d, d, true)?;
            Some((shared, specific))
        } else {
            None
        };
        let feat = heads.feature_dim(d);
        let bnneck = store.add("bnneck.weight", Tensor::full(&[feat], T::one()))?;
        let classifier = add(
            &mut store,
            "classifier.weight",
            &[feat, config.num_identities],
            init.trunc_normal(feat * config.num_identities, INIT_STD),
        )?;
        Ok(Self {
            config,
            heads,
            params: store,
            slots: Slots {
                embed_opt,
                embed_sar,
                cls_token,
                pos_embed,
                blocks,
                norm: final_norm,
                decouple,
                bnneck,
                classifier,
            },
        })
    }

    /// Dimension of the retrieval feature.
    pub fn feature_dim(&self) -> usize {
        self.heads.feature_dim(self.config.embed_dim())
    }

    /// Copies parameters into a model of another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            heads: self.heads,
            params: self.params.cast(),
            slots: self.slots.clone(),
        }
    }

    /// Whether a parameter is subject to weight decay: projection and
    /// classifier matrices only (no biases, norms, class token or positions).
    pub fn decays(name: &str) -> bool {
        name.ends_with(".weight") && !name.contains("norm") && !name.starts_with("bnneck")
    }

    /// Splits `[B, C_in, H, W]` images into patches and projects each sample
    /// with the head selected by its modality; prepends the class token and
    /// adds positional embeddings. Returns `[B, 1 + N_p, C]`.
    pub fn tokenize<'t>(
        &self,
        p: &BoundParams<'t, T>,
        images: Var<'t, T>,
        modality: &[Modality],
    ) -> Result<Var<'t, T>> {
        let tokens = self.patch_tokens(p, images, modality)?;
        let b = modality.len();
        let cls = images
            .tape()
            .constant(&Tensor::zeros(&[b, 1, self.config.dim]))
            .add(p.get(self.slots.cls_token))?;
        Var::concat(&[cls, tokens], 1)?.add(p.get(self.slots.pos_embed))
    }

    /// Modality-routed patch embeddings `[B, N_p, C]`, without class token
    /// or positions.
    pub fn patch_tokens<'t>(
        &self,
        p: &BoundParams<'t, T>,
        images: Var<'t, T>,
        modality: &[Modality],
    ) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let shape = images.shape();
        let b = modality.len();
        if shape != [b, cfg.in_channels, cfg.image_h, cfg.image_w] {
            return Err(Error::Dimension(format!(
                "expected images of shape [{b}, {}, {}, {}], got {shape:?}",
                cfg.in_channels, cfg.image_h, cfg.image_w
            )));
        }
        let (gh, gw, ps, c) = (cfg.grid_h(), cfg.grid_w(), cfg.patch, cfg.dim);
        let np = cfg.num_patches();
        let patches = images
            .reshape(&[b, cfg.in_channels, gh, ps, gw, ps])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b * np, cfg.patch_dim()])?;
        let tape = images.tape();
        let optical = self.slots.embed_opt.forward(p, patches)?;
        let sar = self.slots.embed_sar.forward(p, patches)?;
        let sar_mask: Vec<T> = modality
            .iter()
            .flat_map(|m| {
                let v = if *m == Modality::Sar { T::one() } else { T::zero() };
                std::iter::repeat_n(v, np)
            })
            .collect();
        let opt_mask: Vec<T> = sar_mask.iter().map(|&v| T::one() - v).collect();
        let sar_mask = tape.constant_from(&[b * np, 1], sar_mask)?;
        let opt_mask = tape.constant_from(&[b * np, 1], opt_mask)?;
        optical.mul(opt_mask)?.add(sar.mul(sar_mask)?)?.reshape(&[b, np, c])
    }

    /// Applies blocks `from..=to` (1-based). An empty range (`from > to`) is the identity.
    pub fn forward_blocks<'t>(
        &self,
        p: &BoundParams<'t, T>,
        tokens: Var<'t, T>,
        from: usize,
        to: usize,
    ) -> Result<Var<'t, T>> {
        if from > to {
            return Ok(tokens);
        }
        if from == 0 || to > self.config.layers {
            return Err(Error::Usage(format!(
                "block range {from}..={to} outside 1..={}",
                self.config.layers
            )));
        }
        let mut x = tokens;
        for block in &self.slots.blocks[from - 1..to] {
            x = self.block_forward(p, block, x)?;
        }
        Ok(x)
    }

    fn block_forward<'t>(&self, p: &BoundParams<'t, T>, blk: &Block, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let heads = self.config.heads;
        let dh = c / heads;
        let h = blk.norm1.forward(p, x)?.reshape(&[b * n, c])?;
        let qkv = blk
            .qkv
            .forward(p, h)?
            .reshape(&[b, n, 3, heads, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Var<'t, T>> { qkv.narrow(0, i, 1)?.reshape(&[b * heads, n, dh]) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scale = T::one() / T::from_usize(dh).expect("size").sqrt();
        let attn = q.bmm(k.transpose_last()?)?.scale(scale).softmax(2)?;
        let ctx = attn
            .bmm(v)?
            .reshape(&[b, heads, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * n, c])?;
        let x = x.add(blk.proj.forward(p, ctx)?.reshape(&[b, n, c])?)?;
        let h = blk.norm2.forward(p, x)?.reshape(&[b * n, c])?;
        let h = blk.fc2.forward(p, blk.fc1.forward(p, h)?.gelu())?;
        x.add(h.reshape(&[b, n, c])?)
    }

    /// Drops the class token and lays patch tokens out as `[B, C, H', W']`.
    pub fn tokens_to_grid<'t>(&self, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = tokens.shape();
        let (gh, gw) = (self.config.grid_h(), self.config.grid_w());
        if shape.len() != 3 || shape[1] != 1 + gh * gw {
            return Err(Error::Dimension(format!(
                "token sequence {shape:?} does not match a {gh}x{gw} grid plus class token"
            )));
        }
        let (b, c) = (shape[0], shape[2]);
        tokens
            .narrow(1, 1, gh * gw)?
            .reshape(&[b, gh, gw, c])?
            .permute(&[0, 3, 1, 2])
    }

    /// Final layer norm followed by class-token extraction, `[B, d]`.
    pub fn terminal_feature<'t>(&self, p: &BoundParams<'t, T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = tokens.shape();
        let normed = self.slots.norm.forward(p, tokens)?;
        normed.narrow(1, 0, 1)?.reshape(&[shape[0], shape[2]])
    }

    /// Shared / specific projections of the terminal representation.
    pub fn decouple<'t>(
        &self,
        p: &BoundParams<'t, T>,
        terminal: Var<'t, T>,
    ) -> Result<Option<(Var<'t, T>, Var<'t, T>)>> {
        match &self.slots.decouple {
            Some((shared, specific)) => Ok(Some((
                shared.forward(p, terminal)?,
                specific.forward(p, terminal)?,
            ))),
            None => Ok(None),
        }
    }

    /// Full forward pass: tokenizer, blocks split at the structure probe,
    /// terminal feature, disentanglement and fusion.
    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t, T>,
        images: Var<'t, T>,
        modality: &[Modality],
    ) -> Result<ForwardOutput<'t, T>> {
        let bs = self.config.struct_layer;
        let tokens = self.tokenize(p, images, modality)?;
        let mid = self.forward_blocks(p, tokens, 1, bs)?;
        let grid = self.tokens_to_grid(mid)?;
        let last = self.forward_blocks(p, mid, bs + 1, self.config.layers)?;
        let terminal = self.terminal_feature(p, last)?;
        let (shared, specific, feature) = match self.decouple(p, terminal)? {
            Some((sh, sp)) => {
                let feature = match self.heads.fusion {
                    FusionMode::Additive => crate::dfl::fuse(sh, sp)?,
                    FusionMode::Concat => Var::concat(&[sh, sp], 1)?,
                    FusionMode::SharedOnly => sh,
                    FusionMode::SpecificOnly => sp,
                };
                (Some(sh), Some(sp), feature)
            }
            None => (None, None, terminal),
        };
        Ok(ForwardOutput {
            grid,
            terminal,
            shared,
            specific,
            feature,
        })
    }

    /// Identity logits: batch-normalised feature (batch statistics, scale
    /// only) through a bias-free linear classifier.
    pub fn logits<'t>(&self, p: &BoundParams<'t, T>, feature: Var<'t, T>) -> Result<Var<'t, T>> {
        let normed = feature
            .transpose_last()?
            .layer_norm(None, None, T::from_f64_lossy(1e-5))?
            .transpose_last()?
            .mul(p.get(self.slots.bnneck))?;
        normed.matmul(p.get(self.slots.classifier))
    }

    /// Patch-token grids `[B, C, H', W']` after each requested block, for
    /// inspection. Layer 0 is the patch embedding before positions are added.
    pub fn layer_grids(&self, images: &Tensor<T>, modality: &[Modality], layers: &[usize]) -> Result<Vec<Tensor<T>>> {
        if let Some(&bad) = layers.iter().find(|&&l| l > self.config.layers) {
            return Err(Error::Usage(format!(
                "layer {bad} outside 0..={}",
                self.config.layers
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(images);
        let (b, c) = (modality.len(), self.config.dim);
        let (gh, gw) = (self.config.grid_h(), self.config.grid_w());
        let mut grids = vec![None; self.config.layers + 1];
        let patches = self.patch_tokens(&p, x, modality)?;
        grids[0] = Some(patches.reshape(&[b, gh, gw, c])?.permute(&[0, 3, 1, 2])?.to_tensor());
        let mut tokens = self.tokenize(&p, x, modality)?;
        let deepest = layers.iter().copied().max().unwrap_or(0);
        for (l, slot) in grids.iter_mut().enumerate().take(deepest + 1).skip(1) {
            tokens = self.forward_blocks(&p, tokens, l, l)?;
            *slot = Some(self.tokens_to_grid(tokens)?.to_tensor());
        }
        Ok(layers.iter().map(|&l| grids[l].clone().expect("computed")).collect())
    }

    /// Inference: fused features for a batch, without recording gradients
    /// for later use.
    pub fn embed(&self, images: &Tensor<T>, modality: &[Modality]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let out = self.forward(&p, tape.constant(images), modality)?;
        Ok(out.feature.to_tensor())
    }
}
