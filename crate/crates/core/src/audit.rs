//! Exact parameter counts and forward FLOPs, block by block, straight from a config.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{allocate, Modality};
use crate::model::{LayerKind, ModelConfig};
use crate::nn::{CrossAttention, LayerNorm, Linear, MambaBlock, ParamStore, TransformerLayer};
use crate::ssm::SelectiveSsm;
use crate::tensor::Real;

pub const CONVENTION_VERSION: u32 = 1;

/// Printed in every report header.
pub const CONVENTION: &str = "multiply-accumulate = 2 FLOPs; linear on T tokens = 2*T*in*out; \
attention = 2*Tq*Tk*d for scores plus 2*Tq*Tk*d for values, plus projections; \
softmax, normalization and activation = 5 FLOPs per element; adds, gathers and losses not counted";

const ELEMENTWISE: u64 = 5;

/// Token counts the forward pass sees, batch of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    /// Visible rgb, depth and semseg tokens.
    pub visible: [usize; 3],
    pub text_len: usize,
    pub tokens_per_modality: usize,
}

impl Geometry {
    /// Budget split evenly across the three visual modalities.
    pub fn expected(cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.tokens_per_modality();
        let a = allocate(&[1.0 / 3.0; 3], cfg.mask.budget, &[n; 3])?;
        Ok(Self {
            visible: [a[0], a[1], a[2]],
            text_len: if cfg.use_text { cfg.text_len } else { 0 },
            tokens_per_modality: n,
        })
    }

    pub fn encoder_tokens(&self) -> usize {
        self.visible.iter().sum::<usize>() + self.text_len
    }

    fn visible_of(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text_len,
            m => self.visible[m.index()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAudit {
    /// Parameter-name prefix of the block.
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub label: String,
    pub convention_version: u32,
    pub geometry: Geometry,
    pub blocks: Vec<BlockAudit>,
}

fn lin(t: usize, i: usize, o: usize) -> u64 {
    2 * (t * i * o) as u64
}

fn elem(n: usize) -> u64 {
    ELEMENTWISE * n as u64
}

fn transformer_flops(t: usize, d: usize, heads: usize, ratio: usize) -> u64 {
    let h = d * ratio;
    2 * elem(t * d)
        + lin(t, d, 3 * d)
        + 2 * (t * t * d) as u64 * 2
        + elem(heads * t * t)
        + lin(t, d, d)
        + lin(t, d, h)
        + elem(t * h)
        + lin(t, h, d)
}

fn mamba_flops(t: usize, d: usize, r: usize, state: Option<usize>) -> u64 {
    let base = elem(t * d) + lin(t, d, r) + elem(t * r) + lin(t, r, d);
    let ssm = state.map_or(0, |n| {
        // B, C and step-size maps, softplus, discretisation, state update and readout
        2 * lin(t, r, n) + lin(t, r, 1) + elem(t) + elem(t * r * n) + 2 * lin(t, r, n)
    });
    base + ssm
}

fn cross_flops(tq: usize, tk: usize, d_in: [usize; 3], dk: usize) -> u64 {
    lin(tq, d_in[0], dk)
        + lin(tk, d_in[1], dk)
        + lin(tk, d_in[2], dk)
        + 2 * (tq * tk * dk) as u64 * 2
        + elem(tq * tk)
}

fn block_kind_counts(kind: LayerKind, cfg: &ModelConfig, t: usize, d: usize, heads: usize) -> (&'static str, u64, u64) {
    let state = cfg.mamba_inner_ssm.then_some(cfg.ssm_state);
    match kind {
        LayerKind::Transformer => (
            "transformer",
            TransformerLayer::param_count(d, cfg.mlp_ratio) as u64,
            transformer_flops(t, d, heads, cfg.mlp_ratio),
        ),
        LayerKind::Mamba => (
            "mamba",
            MambaBlock::param_count(d, cfg.mamba_inner, state) as u64,
            mamba_flops(t, d, cfg.mamba_inner, state),
        ),
    }
}

/// Parameter counts and FLOPs of every block for the given geometry.
pub fn audit(cfg: &ModelConfig, geo: &Geometry, label: &str) -> Result<AuditReport> {
    cfg.validate()?;
    let (d, dd, pp, dm) = (cfg.d_encoder, cfg.d_decoder, cfg.patch_pixels(), cfg.d_modality);
    let t_enc = geo.encoder_tokens();
    let mut blocks = Vec::new();
    let mut push = |name: String, kind: &str, params: usize, flops: u64| {
        blocks.push(BlockAudit {
            name,
            kind: kind.to_string(),
            params: params as u64,
            flops,
        })
    };

    let [vr, vd, vs] = geo.visible;
    push("adapter.rgb".into(), "linear", Linear::param_count(pp * 3, d, true), lin(vr, pp * 3, d));
    push("adapter.depth".into(), "linear", Linear::param_count(pp, d, true), lin(vd, pp, d));
    let e = cfg.semseg_embed_dim;
    push(
        "adapter.semseg".into(),
        "embedding+linear",
        cfg.num_classes * e + Linear::param_count(pp * e, d, true),
        lin(vs, pp * e, d),
    );
    if cfg.use_text {
        push("adapter.text".into(), "embedding", (cfg.vocab + 1) * d, 0);
    }
    let active = cfg.active_modalities().len();
    push(
        "modality".into(),
        "embedding+linear",
        active * dm + Linear::param_count(dm, d, true),
        active as u64 * lin(1, dm, d),
    );

    for (i, kind) in cfg.encoder_kinds().into_iter().enumerate() {
        let (k, p, f) = block_kind_counts(kind, cfg, t_enc, d, cfg.encoder_heads);
        push(format!("encoder.layer{i:02}"), k, p as usize, f);
    }
    if cfg.fusion_enabled() {
        let tq = geo.visible_of(cfg.fusion_qkv[0]);
        let tk = geo.visible_of(cfg.fusion_qkv[1]);
        let mut tv = geo.visible_of(cfg.fusion_qkv[2]);
        if tv == 0 {
            tv = tk;
        }
        let params = CrossAttention::param_count([d, d, d], cfg.d_fusion) + Linear::param_count(cfg.d_fusion, d, true);
        let flops = if tq == 0 || tk == 0 {
            0
        } else {
            let resample = if tv != tk { lin(tv, tk, d) } else { 0 };
            resample + cross_flops(tq, tv, [d, d, d], cfg.d_fusion) + lin(tq, cfg.d_fusion, d)
        };
        push("fusion".into(), "cross_attention", params, flops);
    }
    push("encoder.norm".into(), "layernorm", LayerNorm::param_count(d), elem(t_enc * d));

    let rows_of = |m: Modality| if m == Modality::Text { cfg.text_len } else { geo.tokens_per_modality };
    if cfg.use_cross_attention {
        let uses: u64 = cfg
            .decoder_targets()
            .into_iter()
            .map(|m| {
                let tq = rows_of(m);
                elem(tq * dd) + cross_flops(tq, t_enc, [dd, dd, dd], dd)
            })
            .sum();
        push(
            "decoder.shared_xattn".into(),
            "cross_attention",
            LayerNorm::param_count(dd) + CrossAttention::param_count([dd, dd, dd], dd),
            uses,
        );
    }
    for target in cfg.decoder_targets() {
        let base = format!("decoder.{target}");
        let tq = rows_of(target);
        push(format!("{base}.proj_in"), "linear", Linear::param_count(d, dd, true), lin(t_enc, d, dd));
        if target != Modality::Text {
            push(format!("{base}.mask_token"), "token", dd, 0);
        }
        for (i, kind) in cfg.decoder_kinds().into_iter().enumerate() {
            let (k, p, f) = block_kind_counts(kind, cfg, tq, dd, cfg.decoder_heads);
            push(format!("{base}.layer{i:02}"), k, p as usize, f);
        }
        push(format!("{base}.norm"), "layernorm", LayerNorm::param_count(dd), elem(tq * dd));
        let outs: Vec<usize> = match target {
            Modality::Rgb => vec![pp * 3],
            Modality::Depth => vec![pp, pp * cfg.num_classes],
            _ => vec![cfg.vocab],
        };
        let params = outs.iter().map(|&o| Linear::param_count(dd, o, true)).sum();
        let flops = outs.iter().map(|&o| lin(tq, dd, o)).sum();
        push(format!("{base}.head"), "linear", params, flops);
    }
    Ok(AuditReport {
        label: label.to_string(),
        convention_version: CONVENTION_VERSION,
        geometry: *geo,
        blocks,
    })
}

/// [`audit`] at the expected geometry of `cfg`.
pub fn audit_config(cfg: &ModelConfig, label: &str) -> Result<AuditReport> {
    audit(cfg, &Geometry::expected(cfg)?, label)
}

/// Reference figures quoted for the standalone blocks.
pub fn reference_blocks() -> Vec<BlockAudit> {
    let t = 196;
    vec![
        BlockAudit {
            name: "transformer_layer(d=768)".into(),
            kind: "transformer".into(),
            params: TransformerLayer::param_count(768, 4) as u64,
            flops: transformer_flops(t, 768, 12, 4),
        },
        BlockAudit {
            name: "mamba_block(768->64->768)".into(),
            kind: "mamba".into(),
            params: MambaBlock::param_count(768, 64, None) as u64,
            flops: mamba_flops(t, 768, 64, None),
        },
        BlockAudit {
            name: "linear(768->256)".into(),
            kind: "linear".into(),
            params: Linear::param_count(768, 256, true) as u64,
            flops: lin(t, 768, 256),
        },
        BlockAudit {
            name: "selective_ssm(64,16)".into(),
            kind: "ssm".into(),
            params: SelectiveSsm::param_count(64, 16) as u64,
            flops: 0,
        },
    ]
}

impl AuditReport {
    pub fn total_params(&self) -> u64 {
        self.blocks.iter().map(|b| b.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.blocks.iter().map(|b| b.flops).sum()
    }

    pub fn block(&self, name: &str) -> Option<&BlockAudit> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Sum over blocks of one kind.
    pub fn kind_totals(&self) -> BTreeMap<String, (u64, u64)> {
        let mut m = BTreeMap::new();
        for b in &self.blocks {
            let e = m.entry(b.kind.clone()).or_insert((0, 0));
            e.0 += b.params;
            e.1 += b.flops;
        }
        m
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# audit: {}", self.label);
        let _ = writeln!(s, "# flops convention v{}: {CONVENTION}", self.convention_version);
        let g = &self.geometry;
        let _ = writeln!(
            s,
            "# geometry: visible rgb/depth/semseg = {}/{}/{}, text = {}, tokens per modality = {}",
            g.visible[0], g.visible[1], g.visible[2], g.text_len, g.tokens_per_modality
        );
        let _ = writeln!(s, "{:<28} {:<18} {:>14} {:>18}", "block", "kind", "params", "flops");
        for b in &self.blocks {
            let _ = writeln!(s, "{:<28} {:<18} {:>14} {:>18}", b.name, b.kind, b.params, b.flops);
        }
        let _ = writeln!(s, "{:<28} {:<18} {:>14} {:>18}", "total", "", self.total_params(), self.total_flops());
        let _ = writeln!(
            s,
            "# total params {:.2}M, flops {:.3}e9",
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9
        );
        s
    }

    /// One `key=value` record per block, then a total record.
    pub fn records(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            let _ = writeln!(s, "block={} kind={} params={} flops={}", b.name, b.kind, b.params, b.flops);
        }
        let _ = writeln!(
            s,
            "total label={} convention=v{} params={} flops={}",
            self.label,
            self.convention_version,
            self.total_params(),
            self.total_flops()
        );
        s
    }
}

/// Parameters of a built store grouped by the block names of `report`.
///
/// Fails if a stored tensor belongs to no block.
pub fn count_built<T: Real>(store: &ParamStore<T>, report: &AuditReport) -> Result<Vec<(String, u64)>> {
    let mut counts: Vec<(String, u64)> = report.blocks.iter().map(|b| (b.name.clone(), 0)).collect();
    for (_, name, t) in store.iter() {
        let slot = counts
            .iter_mut()
            .filter(|(b, _)| name == b || name.starts_with(&format!("{b}.")))
            .max_by_key(|(b, _)| b.len())
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` belongs to no audited block")))?;
        slot.1 += t.numel() as u64;
    }
    Ok(counts)
}

/// `(a − b) / a` in percent.
pub fn reduction_pct(a: u64, b: u64) -> f64 {
    if a == 0 {
        return 0.0;
    }
    (a as f64 - b as f64) / a as f64 * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDelta {
    pub name: String,
    pub params: i64,
    pub flops: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    /// `b − a` per block; blocks missing on one side count as zero.
    pub blocks: Vec<BlockDelta>,
    pub params_delta: i64,
    pub flops_delta: i64,
    /// `(a − b) / a` in percent.
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
}

pub fn compare(a: &AuditReport, b: &AuditReport) -> Result<Comparison> {
    if a.convention_version != b.convention_version {
        return Err(Error::InvalidArgument(format!(
            "cannot compare convention v{} with v{}",
            a.convention_version, b.convention_version
        )));
    }
    let mut names: Vec<&str> = a.blocks.iter().map(|x| x.name.as_str()).collect();
    for x in &b.blocks {
        if !names.contains(&x.name.as_str()) {
            names.push(&x.name);
        }
    }
    let get = |r: &AuditReport, n: &str| r.block(n).map_or((0i64, 0i64), |x| (x.params as i64, x.flops as i64));
    let blocks = names
        .into_iter()
        .map(|n| {
            let (pa, fa) = get(a, n);
            let (pb, fb) = get(b, n);
            BlockDelta {
                name: n.to_string(),
                params: pb - pa,
                flops: fb - fa,
            }
        })
        .collect();
    Ok(Comparison {
        a: a.label.clone(),
        b: b.label.clone(),
        blocks,
        params_delta: b.total_params() as i64 - a.total_params() as i64,
        flops_delta: b.total_flops() as i64 - a.total_flops() as i64,
        params_reduction_pct: reduction_pct(a.total_params(), b.total_params()),
        flops_reduction_pct: reduction_pct(a.total_flops(), b.total_flops()),
    })
}

impl Comparison {
    pub fn summary(&self) -> String {
        format!(
            "{} -> {}: params {:+} ({:.2}% reduction), flops {:+} ({:.2}% reduction)",
            self.a, self.b, self.params_delta, self.params_reduction_pct, self.flops_delta, self.flops_reduction_pct
        )
    }
}

/// Semseg class-embedding width whose total lands closest to `target`.
pub fn calibrate_semseg_embed(cfg: &ModelConfig, target: u64, max_width: usize) -> Result<(usize, u64)> {
    let mut best: Option<(usize, u64)> = None;
    for e in 1..=max_width {
        let c = ModelConfig {
            semseg_embed_dim: e,
            ..cfg.clone()
        };
        let total = audit_config(&c, "calibration")?.total_params();
        if best.map_or(true, |(_, t)| total.abs_diff(target) < t.abs_diff(target)) {
            best = Some((e, total));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("calibration needs a positive width bound".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convention_arithmetic() {
        assert_eq!(lin(196, 768, 768), 231_211_008);
        assert_eq!(reference_blocks()[0].params, 7_087_872);
        assert_eq!(reference_blocks()[1].params, 100_672);
        assert_eq!(reference_blocks()[2].params, 196_864);
    }

    #[test]
    fn totals_are_sums_and_order_free() {
        let r = audit_config(&ModelConfig::desk(), "desk").unwrap();
        let mut rev = r.clone();
        rev.blocks.reverse();
        assert_eq!(r.total_params(), rev.total_params());
        assert_eq!(r.total_flops(), rev.total_flops());
        assert_eq!(r.kind_totals().values().map(|v| v.0).sum::<u64>(), r.total_params());
    }

    #[test]
    fn compare_identity_and_antisymmetry() {
        let a = audit_config(&ModelConfig::desk(), "a").unwrap();
        let b = audit_config(&ModelConfig::desk().ablate(crate::model::Ablation::NoMamba), "b").unwrap();
        let same = compare(&a, &a).unwrap();
        assert!(same.blocks.iter().all(|d| d.params == 0 && d.flops == 0));
        assert_eq!(same.params_reduction_pct, 0.0);
        let ab = compare(&a, &b).unwrap();
        let ba = compare(&b, &a).unwrap();
        assert_eq!(ab.params_delta, -ba.params_delta);
        assert_eq!(ab.flops_delta, -ba.flops_delta);
        let mut other = a.clone();
        other.convention_version += 1;
        assert!(compare(&a, &other).is_err());
    }

    #[test]
    fn quoted_reduction() {
        assert!((reduction_pct(195_970_000, 65_390_000) - 66.63).abs() < 0.005);
    }
}
