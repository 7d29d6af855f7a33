use std::sync::Arc;

use crate::error::{Error, Result};
use crate::losses::{masked_cross_entropy, masked_l1, masked_mse, text_cross_entropy, total_loss, LossWeights, MaskedLoss};
use crate::masking::{MaskPlan, Modality};
use crate::nn::{
    sincos_1d, sincos_2d, CrossAttention, Ctx, LayerNorm, Linear, MambaBlock, ParamId, ParamStore, TransformerLayer,
};
use crate::tensor::{Real, Rng, Tensor, Var};

use super::data::{patch_order, patchify, unpatchify, Sample, PAD_ID};
use super::{LayerKind, ModelConfig};

#[derive(Debug, Clone)]
enum Block {
    Transformer(TransformerLayer),
    Mamba(MambaBlock),
}

impl Block {
    fn new<T: Real>(
        kind: LayerKind,
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match kind {
            LayerKind::Transformer => {
                Block::Transformer(TransformerLayer::new(store, name, d, heads, cfg.mlp_ratio, cfg.dropout, rng)?)
            }
            LayerKind::Mamba => {
                let state = cfg.mamba_inner_ssm.then_some(cfg.ssm_state);
                Block::Mamba(MambaBlock::new(store, name, d, cfg.mamba_inner, cfg.dropout, state, rng)?)
            }
        })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Transformer(b) => b.forward(ctx, x),
            Block::Mamba(b) => b.forward(ctx, x),
        }
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    target: Modality,
    proj_in: Linear,
    mask_token: Option<ParamId>,
    layers: Vec<Block>,
    norm: LayerNorm,
    heads: Vec<(Modality, Linear)>,
}

/// Contiguous rows of one modality inside the encoder stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub modality: Modality,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[tokens, d_encoder]`.
    pub latents: Var,
    pub segments: Vec<Segment>,
}

impl Encoded {
    pub fn segment(&self, m: Modality) -> Option<Segment> {
        self.segments.iter().copied().find(|s| s.modality == m)
    }

    pub fn tokens(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }
}

/// One head's predictions.
///
/// rgb `[P, p²·3]`, depth `[P, p²]`, semseg `[P·p², C]` (patch-major pixels), text `[text_len, vocab]`.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub modality: Modality,
    pub pred: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub encoded: Encoded,
    pub outputs: Vec<DecoderOutput>,
}

impl Forward {
    pub fn output(&self, m: Modality) -> Option<Var> {
        self.outputs.iter().find(|o| o.modality == m).map(|o| o.pred)
    }
}

/// Batch-mean training loss.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    /// Unweighted batch means, one per computed component.
    pub components: Vec<(Modality, f64)>,
    /// Components that had nothing to score, summed over the batch.
    pub empty: usize,
}

impl LossParts {
    pub fn component(&self, m: Modality) -> Option<f64> {
        self.components.iter().find(|c| c.0 == m).map(|c| c.1)
    }
}

/// Row-stochastic `[n_out, n_in]` linear interpolation along token order.
pub fn interpolation_matrix(n_out: usize, n_in: usize) -> Result<Tensor<f64>> {
    if n_out == 0 || n_in == 0 {
        return Err(Error::InvalidArgument("interpolation needs non-empty sides".into()));
    }
    let mut m = vec![0.0; n_out * n_in];
    for j in 0..n_out {
        let u = if n_out == 1 {
            0.0
        } else {
            j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let i = (u.floor() as usize).min(n_in - 1);
        let f = u - i as f64;
        m[j * n_in + i] += 1.0 - f;
        if f > 0.0 {
            m[j * n_in + i + 1] += f;
        }
    }
    Tensor::new([n_out, n_in], m)
}

/// The assembled multimodal encoder-decoder. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct M3et {
    pub cfg: ModelConfig,
    rgb_adapter: Linear,
    depth_adapter: Linear,
    class_embed: ParamId,
    semseg_adapter: Linear,
    text_embed: Option<ParamId>,
    modality_embed: Vec<(Modality, ParamId)>,
    modality_lift: Linear,
    encoder: Vec<Block>,
    fusion: Option<(CrossAttention, Linear)>,
    encoder_norm: LayerNorm,
    shared_xattn: Option<(LayerNorm, CrossAttention)>,
    decoders: Vec<Decoder>,
    pos_enc_2d: Tensor<f64>,
    pos_enc_1d: Tensor<f64>,
    pos_dec_2d: Tensor<f64>,
    pos_dec_1d: Tensor<f64>,
}

impl M3et {
    /// Register every parameter in `store` and return the model skeleton.
    pub fn new<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, dd, pp) = (cfg.d_encoder, cfg.d_decoder, cfg.patch_pixels());
        let rgb_adapter = Linear::new(store, "adapter.rgb", pp * 3, d, true, rng)?;
        let depth_adapter = Linear::new(store, "adapter.depth", pp, d, true, rng)?;
        let class_embed = store.add_weight("adapter.semseg.class_embed", &[cfg.num_classes, cfg.semseg_embed_dim], rng)?;
        let semseg_adapter = Linear::new(store, "adapter.semseg.proj", pp * cfg.semseg_embed_dim, d, true, rng)?;
        let text_embed = if cfg.use_text {
            Some(store.add_weight("adapter.text.embed", &[cfg.vocab + 1, d], rng)?)
        } else {
            None
        };
        let mut modality_embed = Vec::new();
        for m in cfg.active_modalities() {
            modality_embed.push((m, store.add_weight(format!("modality.embed.{m}"), &[1, cfg.d_modality], rng)?));
        }
        let modality_lift = Linear::new(store, "modality.lift", cfg.d_modality, d, true, rng)?;

        let mut encoder = Vec::new();
        for (i, kind) in cfg.encoder_kinds().into_iter().enumerate() {
            encoder.push(Block::new(kind, store, &format!("encoder.layer{i:02}"), d, cfg.encoder_heads, cfg, rng)?);
        }
        let fusion = if cfg.fusion_enabled() {
            Some((
                CrossAttention::new(store, "fusion.xattn", [d, d, d], cfg.d_fusion, rng)?,
                Linear::new(store, "fusion.lift", cfg.d_fusion, d, true, rng)?,
            ))
        } else {
            None
        };
        let encoder_norm = LayerNorm::new(store, "encoder.norm", d)?;

        let shared_xattn = if cfg.use_cross_attention {
            Some((
                LayerNorm::new(store, "decoder.shared_xattn.norm", dd)?,
                CrossAttention::new(store, "decoder.shared_xattn", [dd, dd, dd], dd, rng)?,
            ))
        } else {
            None
        };
        let mut decoders = Vec::new();
        for target in cfg.decoder_targets() {
            let base = format!("decoder.{target}");
            let proj_in = Linear::new(store, &format!("{base}.proj_in"), d, dd, true, rng)?;
            let mask_token = if target == Modality::Text {
                None
            } else {
                Some(store.add_weight(format!("{base}.mask_token"), &[1, dd], rng)?)
            };
            let mut layers = Vec::new();
            for (i, kind) in cfg.decoder_kinds().into_iter().enumerate() {
                layers.push(Block::new(kind, store, &format!("{base}.layer{i:02}"), dd, cfg.decoder_heads, cfg, rng)?);
            }
            let norm = LayerNorm::new(store, &format!("{base}.norm"), dd)?;
            let outs: Vec<(Modality, usize)> = match target {
                Modality::Rgb => vec![(Modality::Rgb, pp * 3)],
                Modality::Depth => vec![(Modality::Depth, pp), (Modality::Semseg, pp * cfg.num_classes)],
                Modality::Text => vec![(Modality::Text, cfg.vocab)],
                Modality::Semseg => return Err(Error::Config("semseg is predicted by the depth decoder".into())),
            };
            let mut heads = Vec::new();
            for (m, width) in outs {
                heads.push((m, Linear::new(store, &format!("{base}.head.{m}"), dd, width, true, rng)?));
            }
            decoders.push(Decoder {
                target,
                proj_in,
                mask_token,
                layers,
                norm,
                heads,
            });
        }

        let g = cfg.grid();
        Ok(Self {
            cfg: cfg.clone(),
            rgb_adapter,
            depth_adapter,
            class_embed,
            semseg_adapter,
            text_embed,
            modality_embed,
            modality_lift,
            encoder,
            fusion,
            encoder_norm,
            shared_xattn,
            decoders,
            pos_enc_2d: sincos_2d(g, g, d)?,
            pos_enc_1d: sincos_1d(cfg.text_len, d)?,
            pos_dec_2d: sincos_2d(g, g, dd)?,
            pos_dec_1d: sincos_1d(cfg.text_len, dd)?,
        })
    }

    /// Fresh store plus model from a seed.
    pub fn init<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let model = Self::new(cfg, &mut store, &mut rng)?;
        Ok((model, store))
    }

    fn modality_param(&self, m: Modality) -> Result<ParamId> {
        self.modality_embed
            .iter()
            .find(|e| e.0 == m)
            .map(|e| e.1)
            .ok_or_else(|| Error::InvalidArgument(format!("modality {m} is not active")))
    }

    /// `rows` copies of a `[1, w]` row.
    fn broadcast_row<T: Real>(ctx: &mut Ctx<'_, T>, row: Var, rows: usize) -> Result<Var> {
        ctx.g.gather_rows(row, &vec![0; rows])
    }

    fn visual_tokens<T: Real>(&self, ctx: &mut Ctx<'_, T>, sample: &Sample<T>, m: Modality, idx: &[usize]) -> Result<Var> {
        let p = self.cfg.patch;
        match m {
            Modality::Rgb | Modality::Depth => {
                let img = if m == Modality::Rgb { &sample.rgb } else { &sample.depth };
                let x = ctx.g.constant(patchify(img, p)?.select_rows(idx)?)?;
                let adapter = if m == Modality::Rgb { &self.rgb_adapter } else { &self.depth_adapter };
                adapter.forward(ctx, x)
            }
            Modality::Semseg => {
                let pp = self.cfg.patch_pixels();
                let ordered = patch_order(&sample.semseg, self.cfg.image_size, p);
                let ids: Vec<usize> = idx.iter().flat_map(|&t| ordered[t * pp..(t + 1) * pp].iter().copied()).collect();
                let table = ctx.p(self.class_embed)?;
                let e = ctx.g.gather_rows(table, &ids)?;
                let e = ctx.g.reshape(e, [idx.len(), pp * self.cfg.semseg_embed_dim])?;
                self.semseg_adapter.forward(ctx, e)
            }
            Modality::Text => Err(Error::InvalidArgument("text is not a visual modality".into())),
        }
    }

    /// Visible tokens of every modality plus the full text row through the encoder stack.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<'_, T>, sample: &Sample<T>, plan: &MaskPlan) -> Result<Encoded> {
        let p_count = self.cfg.tokens_per_modality();
        let mut visible: [Vec<usize>; 3] = Default::default();
        for (slot, m) in visible.iter_mut().zip(Modality::VISUAL) {
            let vis = plan.visible_of(m).unwrap_or(&[]);
            if !vis.is_empty() && vis.len() != p_count {
                return Err(Error::InvalidArgument(format!(
                    "plan has {} {m} tokens, model expects {p_count}",
                    vis.len()
                )));
            }
            *slot = plan.visible_indices(m);
        }
        self.encode_visible(ctx, sample, &visible, plan.text.as_deref())
    }

    /// Encoder over explicit token lists for rgb, depth and semseg, in the given order.
    ///
    /// `text_visible` marks caption positions fed as-is; hidden ones become the mask id.
    /// `None` feeds the whole caption.
    pub fn encode_visible<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        sample: &Sample<T>,
        visible: &[Vec<usize>; 3],
        text_visible: Option<&[bool]>,
    ) -> Result<Encoded> {
        sample.check(&self.cfg)?;
        let p_count = self.cfg.tokens_per_modality();
        let mut parts = Vec::new();
        let mut segments = Vec::new();
        let mut row = 0;
        for (m, idx) in Modality::VISUAL.into_iter().zip(visible) {
            if idx.is_empty() {
                continue;
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= p_count) {
                return Err(Error::InvalidArgument(format!("{m} token {bad} outside 0..{p_count}")));
            }
            let tok = self.visual_tokens(ctx, sample, m, idx)?;
            let pos = ctx.g.constant(self.pos_enc_2d.select_rows(idx)?.cast())?;
            parts.push(self.decorate(ctx, tok, pos, m, idx.len())?);
            segments.push(Segment {
                modality: m,
                start: row,
                len: idx.len(),
            });
            row += idx.len();
        }
        if let Some(table) = self.text_embed {
            let len = self.cfg.text_len;
            if text_visible.is_some_and(|v| v.len() != len) {
                return Err(Error::InvalidArgument(format!("text plan length differs from {len}")));
            }
            let mask_id = self.cfg.vocab;
            let ids: Vec<usize> = sample
                .text
                .iter()
                .enumerate()
                .map(|(i, &t)| match text_visible {
                    _ if t == PAD_ID => PAD_ID,
                    Some(v) if !v[i] => mask_id,
                    _ => t,
                })
                .collect();
            let table = ctx.p(table)?;
            let tok = ctx.g.gather_rows(table, &ids)?;
            let pos = ctx.g.constant(self.pos_enc_1d.cast())?;
            parts.push(self.decorate(ctx, tok, pos, Modality::Text, len)?);
            segments.push(Segment {
                modality: Modality::Text,
                start: row,
                len,
            });
        }
        if parts.is_empty() {
            return Err(Error::InvalidArgument("mask plan leaves no visible tokens".into()));
        }
        let mut x = ctx.g.concat_rows(&parts)?;
        for (i, layer) in self.encoder.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i + 1 == self.cfg.fusion_after {
                x = self.fuse(ctx, x, &segments)?;
            }
        }
        let latents = self.encoder_norm.forward(ctx, x)?;
        Ok(Encoded { latents, segments })
    }

    /// Add positions and the lifted modality embedding.
    fn decorate<T: Real>(&self, ctx: &mut Ctx<'_, T>, tok: Var, pos: Var, m: Modality, rows: usize) -> Result<Var> {
        let e = ctx.p(self.modality_param(m)?)?;
        let e = self.modality_lift.forward(ctx, e)?;
        let e = Self::broadcast_row(ctx, e, rows)?;
        let x = ctx.g.add(tok, pos)?;
        ctx.g.add(x, e)
    }

    /// Cross-attention from the query group to the key and value groups, added to the query rows.
    ///
    /// Keys are resampled along token order to the value count. Values fall back to the
    /// key group when the value group is absent. Skipped without queries or keys.
    fn fuse<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, segments: &[Segment]) -> Result<Var> {
        let Some((xattn, lift)) = &self.fusion else {
            return Ok(x);
        };
        let find = |m: Modality| segments.iter().copied().find(|s| s.modality == m && s.len > 0);
        let [qm, km, vm] = self.cfg.fusion_qkv;
        let (Some(q), Some(k)) = (find(qm), find(km)) else {
            return Ok(x);
        };
        let v = find(vm).unwrap_or(k);
        let qv = ctx.g.slice_rows(x, q.start, q.len)?;
        let mut kv = ctx.g.slice_rows(x, k.start, k.len)?;
        let vv = ctx.g.slice_rows(x, v.start, v.len)?;
        if k.len != v.len {
            let r = ctx.g.constant(interpolation_matrix(v.len, k.len)?.cast())?;
            kv = ctx.g.matmul(r, kv)?;
        }
        let f = xattn.forward(ctx, qv, kv, vv)?;
        let f = lift.forward(ctx, f)?;
        let (total, d) = (ctx.g.shape(x)[0], self.cfg.d_encoder);
        let mut rows = Vec::new();
        if q.start > 0 {
            rows.push(ctx.g.constant(Tensor::zeros([q.start, d]))?);
        }
        rows.push(f);
        let after = total - q.start - q.len;
        if after > 0 {
            rows.push(ctx.g.constant(Tensor::zeros([after, d]))?);
        }
        let f = if rows.len() == 1 { f } else { ctx.g.concat_rows(&rows)? };
        ctx.g.add(x, f)
    }

    fn decode<T: Real>(&self, ctx: &mut Ctx<'_, T>, dec: &Decoder, enc: &Encoded, plan: &MaskPlan) -> Result<Vec<DecoderOutput>> {
        let z = dec.proj_in.forward(ctx, enc.latents)?;
        let (q, pos) = if dec.target == Modality::Text {
            let s = enc
                .segment(Modality::Text)
                .ok_or_else(|| Error::InvalidArgument("text decoder without text tokens".into()))?;
            (ctx.g.slice_rows(z, s.start, s.len)?, &self.pos_dec_1d)
        } else {
            let n = self.cfg.tokens_per_modality();
            let mask = ctx.p(dec.mask_token.expect("visual decoders own a mask token"))?;
            let (table, vis_rows) = match enc.segment(dec.target) {
                Some(s) => {
                    let own = ctx.g.slice_rows(z, s.start, s.len)?;
                    (ctx.g.concat_rows(&[own, mask])?, s.len)
                }
                None => (mask, 0),
            };
            let visible = plan.visible_of(dec.target).unwrap_or(&[]);
            let mut next = 0;
            let map: Vec<usize> = (0..n)
                .map(|i| {
                    if visible.get(i).copied().unwrap_or(false) {
                        next += 1;
                        next - 1
                    } else {
                        vis_rows
                    }
                })
                .collect();
            (ctx.g.gather_rows(table, &map)?, &self.pos_dec_2d)
        };
        let rows = ctx.g.shape(q)[0];
        let pos = ctx.g.constant(pos.cast())?;
        let e = ctx.p(self.modality_param(dec.target)?)?;
        let e = Self::broadcast_row(ctx, e, rows)?;
        let mut x = ctx.g.add(q, pos)?;
        x = ctx.g.add(x, e)?;
        if let Some((norm, xattn)) = &self.shared_xattn {
            let h = norm.forward(ctx, x)?;
            let a = xattn.forward(ctx, h, z, z)?;
            x = ctx.g.add(x, a)?;
        }
        for layer in &dec.layers {
            x = layer.forward(ctx, x)?;
        }
        let x = dec.norm.forward(ctx, x)?;
        let mut out = Vec::new();
        for (m, head) in &dec.heads {
            let mut pred = head.forward(ctx, x)?;
            if *m == Modality::Semseg {
                pred = ctx.g.reshape(pred, [rows * self.cfg.patch_pixels(), self.cfg.num_classes])?;
            }
            out.push(DecoderOutput { modality: *m, pred });
        }
        Ok(out)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, sample: &Sample<T>, plan: &MaskPlan) -> Result<Forward> {
        let encoded = self.encode(ctx, sample, plan)?;
        let mut outputs = Vec::new();
        for dec in &self.decoders {
            outputs.extend(self.decode(ctx, dec, &encoded, plan)?);
        }
        Ok(Forward { encoded, outputs })
    }

    /// Unweighted component losses of one sample. Masks score the hidden tokens.
    pub fn sample_losses<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        sample: &Sample<T>,
        plan: &MaskPlan,
        fwd: &Forward,
    ) -> Result<Vec<(Modality, MaskedLoss)>> {
        let cfg = &self.cfg;
        let hidden = |m: Modality| -> Vec<bool> {
            let n = cfg.tokens_per_modality();
            match plan.visible_of(m) {
                Some(v) => v.iter().map(|&b| !b).collect(),
                None => vec![true; n],
            }
        };
        let mut out = Vec::new();
        for o in &fwd.outputs {
            let loss = match o.modality {
                Modality::Rgb => {
                    let t = Arc::new(patchify(&sample.rgb, cfg.patch)?);
                    masked_mse(ctx.g, o.pred, t, &hidden(Modality::Rgb), cfg.loss_norm)?
                }
                Modality::Depth => {
                    let t = Arc::new(patchify(&sample.depth, cfg.patch)?);
                    masked_l1(ctx.g, o.pred, t, &hidden(Modality::Depth), cfg.loss_norm)?
                }
                Modality::Semseg => {
                    let targets = patch_order(&sample.semseg, cfg.image_size, cfg.patch);
                    let pp = cfg.patch_pixels();
                    let mask: Vec<bool> = hidden(Modality::Semseg)
                        .into_iter()
                        .flat_map(|h| std::iter::repeat(h).take(pp))
                        .collect();
                    masked_cross_entropy(ctx.g, o.pred, &targets, &mask, cfg.loss_norm)?
                }
                Modality::Text => text_cross_entropy(ctx.g, o.pred, &sample.text, PAD_ID)?,
            };
            out.push((o.modality, loss));
        }
        Ok(out)
    }

    /// Mean over the batch of `Σ λ_m L_m`, one forward per sample on a shared graph.
    pub fn forward_train<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        samples: &[Sample<T>],
        plans: &[MaskPlan],
        weights: &LossWeights,
    ) -> Result<LossParts> {
        if samples.is_empty() || samples.len() != plans.len() {
            return Err(Error::InvalidArgument(format!(
                "{} samples with {} mask plans",
                samples.len(),
                plans.len()
            )));
        }
        let mut w = *weights;
        if !self.cfg.use_text {
            w.text = 0.0;
        }
        let mut acc: Option<Var> = None;
        let mut sums = [0.0f64; 4];
        let mut seen = [false; 4];
        let mut empty = 0;
        for (s, plan) in samples.iter().zip(plans) {
            let fwd = self.forward(ctx, s, plan)?;
            let comps = self.sample_losses(ctx, s, plan, &fwd)?;
            empty += comps.iter().filter(|c| c.1.empty).count();
            let vars: Vec<(Modality, Var)> = comps.iter().map(|(m, l)| (*m, l.value)).collect();
            let tl = total_loss(ctx.g, &vars, &w)?;
            for (m, v) in tl.components {
                sums[m.index()] += v;
                seen[m.index()] = true;
            }
            acc = Some(match acc {
                Some(a) => ctx.g.add(a, tl.value)?,
                None => tl.value,
            });
        }
        let b = samples.len() as f64;
        let total = ctx.g.scale(acc.expect("non-empty batch"), T::lit(1.0 / b))?;
        let components = Modality::ALL
            .into_iter()
            .filter(|m| seen[m.index()])
            .map(|m| (m, sums[m.index()] / b))
            .collect();
        Ok(LossParts { total, components, empty })
    }

    /// RGB prediction as an `[H, W, 3]` image clamped to `[0, 1]`.
    pub fn rgb_image<T: Real>(&self, ctx: &Ctx<'_, T>, fwd: &Forward) -> Result<Tensor<T>> {
        let pred = fwd
            .output(Modality::Rgb)
            .ok_or_else(|| Error::InvalidArgument("forward has no rgb output".into()))?;
        let s = self.cfg.image_size;
        let img = unpatchify(ctx.g.value(pred), s, s, 3, self.cfg.patch)?;
        Ok(img.map(|v| v.max(T::zero()).min(T::one())))
    }

    /// Depth prediction `[H, W]` in normalised units.
    pub fn depth_image<T: Real>(&self, ctx: &Ctx<'_, T>, fwd: &Forward) -> Result<Tensor<T>> {
        let pred = fwd
            .output(Modality::Depth)
            .ok_or_else(|| Error::InvalidArgument("forward has no depth output".into()))?;
        let s = self.cfg.image_size;
        unpatchify(ctx.g.value(pred), s, s, 1, self.cfg.patch)?.reshape([s, s])
    }
}
