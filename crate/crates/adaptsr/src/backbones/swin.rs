//! Windowed-attention transformer backbone.
//!
//! Pipeline: shallow conv → residual transformer blocks (pre-norm window
//! attention + GELU MLP layers, one conv per block) → deep-feature conv with
//! a global skip → conv → pixel-shuffle → conv. Plain non-overlapping
//! windows; inputs are reflect-padded to window multiples for eval and must
//! already be aligned for training.

use ndarray::{Array2, Array3, s};

use crate::config::BackboneSection;
use crate::error::{Error, Result};
use crate::nn::functional::{
    clamp01, crop, gelu, gelu_backward, map_to_tokens, pixel_shuffle, pixel_unshuffle,
    reflect_pad_to_multiple, softmax_rows, softmax_rows_backward, tokens_to_map, window_indices,
    gather_rows, scatter_rows_add,
};
use crate::nn::layers::{ConvCtx, LinearBwd, LinearCtx, LnCtx};
use crate::nn::{Conv2d, Grads, LayerNorm, Linear, ParamInfo};

use super::{
    add_conv_grads, add_linear_grads, init_conv, init_linear, wants_conv, wants_linear, Backbone,
    Cache, LayerGroup, LayerKind, LayerRegistry, RelPosBias, SlotMut, SlotRef,
};

/// Feature width of the upsampling tail, capped SwinIR-style at 64.
fn tail_width(embed_dim: usize) -> usize {
    embed_dim.min(64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TinySwinConfig {
    pub embed_dim: usize,
    pub n_rtlb: usize,
    pub tll_per_rtlb: usize,
    pub n_heads: usize,
    pub window: usize,
    pub mlp_ratio: f64,
    pub upscale: usize,
    pub img_range: f64,
}

impl Default for TinySwinConfig {
    fn default() -> Self {
        TinySwinConfig {
            embed_dim: 32,
            n_rtlb: 2,
            tll_per_rtlb: 2,
            n_heads: 4,
            window: 8,
            mlp_ratio: 2.0,
            upscale: 4,
            img_range: 1.0,
        }
    }
}

impl TinySwinConfig {
    /// The classical-SR configuration of the full-size reference model,
    /// used by parameter-count calibration checks.
    pub fn swinir_scale() -> Self {
        TinySwinConfig {
            embed_dim: 180,
            n_rtlb: 6,
            tll_per_rtlb: 6,
            n_heads: 6,
            window: 8,
            mlp_ratio: 2.0,
            upscale: 4,
            img_range: 1.0,
        }
    }

    pub fn from_section(sec: &BackboneSection) -> Result<Self> {
        Ok(TinySwinConfig {
            embed_dim: sec.embed_dim,
            n_rtlb: sec.n_rtlb,
            tll_per_rtlb: sec.tll_per_rtlb,
            n_heads: sec.n_heads,
            window: sec.window,
            mlp_ratio: sec.mlp_ratio,
            upscale: sec.upscale,
            img_range: sec.img_range,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_rtlb == 0 || self.tll_per_rtlb == 0 || self.n_heads == 0 {
            return Err(Error::invalid_config("swin dims/counts must be >= 1"));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::invalid_config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.window < 1 {
            return Err(Error::invalid_config("window must be >= 1"));
        }
        if !(2..=4).contains(&self.upscale) {
            return Err(Error::invalid_config("upscale must be in 2..=4"));
        }
        if self.hidden_dim() == 0 {
            return Err(Error::invalid_config("mlp_ratio too small"));
        }
        if !(self.img_range > 0.0) {
            return Err(Error::invalid_config("img_range must be > 0"));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

struct Attn {
    qkv: Linear,
    proj: Linear,
    relpos: RelPosBias,
}

struct Tll {
    norm1: LayerNorm,
    attn: Attn,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct Rtlb {
    tlls: Vec<Tll>,
    conv: Conv2d,
}

pub struct TinySwin {
    cfg: TinySwinConfig,
    first_conv: Conv2d,
    rtlbs: Vec<Rtlb>,
    dfe_conv: Conv2d,
    bu_conv: Conv2d,
    au_conv: Conv2d,
    registry: LayerRegistry,
    params: Vec<ParamInfo>,
}

struct AttnWinCtx {
    qkv_ctx: LinearCtx,
    qkv_out: Array2<f32>,
    probs: Vec<Array2<f32>>,
    proj_ctx: LinearCtx,
}

struct TllCtx {
    ln1: LnCtx,
    attn_wins: Vec<AttnWinCtx>,
    ln2: LnCtx,
    fc1: LinearCtx,
    gelu_x: Array2<f32>,
    gelu_phi: Array2<f32>,
    fc2: LinearCtx,
}

struct RtlbCtx {
    tlls: Vec<TllCtx>,
    conv: ConvCtx,
}

struct SwinCtx {
    hw: (usize, usize),
    win_idx: Vec<Vec<usize>>,
    first: ConvCtx,
    rtlbs: Vec<RtlbCtx>,
    dfe: ConvCtx,
    bu: ConvCtx,
    au: ConvCtx,
}

impl Attn {
    fn forward_t(&self, xw: &Array2<f32>, heads: usize) -> Result<(Array2<f32>, AttnWinCtx)> {
        let (n, d) = xw.dim();
        let dk = d / heads;
        let inv_sqrt_dk = 1.0 / (dk as f32).sqrt();
        let (qkv_out, qkv_ctx) = self.qkv.forward_t(xw)?;
        let mut concat = Array2::<f32>::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv_out.slice(s![.., h * dk..(h + 1) * dk]);
            let k = qkv_out.slice(s![.., d + h * dk..d + (h + 1) * dk]);
            let v = qkv_out.slice(s![.., 2 * d + h * dk..2 * d + (h + 1) * dk]);
            let mut logits = q.dot(&k.t());
            logits *= inv_sqrt_dk;
            logits += &self.relpos.bias_matrix(h);
            let p = softmax_rows(&logits);
            let o = p.dot(&v);
            concat.slice_mut(s![.., h * dk..(h + 1) * dk]).assign(&o);
            probs.push(p);
        }
        let (y, proj_ctx) = self.proj.forward_t(&concat)?;
        Ok((y, AttnWinCtx { qkv_ctx, qkv_out, probs, proj_ctx }))
    }

    /// Returns dx for the window; parameter grads go straight into `grads`
    /// except the bias-table grad which the caller accumulates across
    /// windows.
    fn backward(
        &self,
        dy: &Array2<f32>,
        ctx: &AttnWinCtx,
        heads: usize,
        grads: &mut Grads,
        dtable: &mut Option<Array2<f32>>,
    ) -> Array2<f32> {
        let (n, d) = (dy.nrows(), dy.ncols());
        let dk = d / heads;
        let inv_sqrt_dk = 1.0 / (dk as f32).sqrt();

        let (pw_base, pw_lora) = wants_linear(grads, &self.proj);
        let proj_bwd: LinearBwd = self.proj.backward(dy, &ctx.proj_ctx, pw_base, pw_lora);
        add_linear_grads(grads, &self.proj, &proj_bwd);
        let d_concat = proj_bwd.dx;

        let mut dqkv_out = Array2::<f32>::zeros((n, 3 * d));
        for h in 0..heads {
            let do_h = d_concat.slice(s![.., h * dk..(h + 1) * dk]);
            let q = ctx.qkv_out.slice(s![.., h * dk..(h + 1) * dk]);
            let k = ctx.qkv_out.slice(s![.., d + h * dk..d + (h + 1) * dk]);
            let v = ctx.qkv_out.slice(s![.., 2 * d + h * dk..2 * d + (h + 1) * dk]);
            let p = &ctx.probs[h];

            let dp = do_h.dot(&v.t());
            let dv = p.t().dot(&do_h);
            let ds = softmax_rows_backward(&dp, p);
            if let Some(dt) = dtable.as_mut() {
                for i in 0..n {
                    for j in 0..n {
                        dt[[self.relpos.index[[i, j]], h]] += ds[[i, j]];
                    }
                }
            }
            let mut dq = ds.dot(&k);
            dq *= inv_sqrt_dk;
            let mut dkk = ds.t().dot(&q);
            dkk *= inv_sqrt_dk;

            dqkv_out.slice_mut(s![.., h * dk..(h + 1) * dk]).assign(&dq);
            dqkv_out.slice_mut(s![.., d + h * dk..d + (h + 1) * dk]).assign(&dkk);
            dqkv_out
                .slice_mut(s![.., 2 * d + h * dk..2 * d + (h + 1) * dk])
                .assign(&dv);
        }
        let (qw_base, qw_lora) = wants_linear(grads, &self.qkv);
        let qkv_bwd = self.qkv.backward(&dqkv_out, &ctx.qkv_ctx, qw_base, qw_lora);
        add_linear_grads(grads, &self.qkv, &qkv_bwd);
        qkv_bwd.dx
    }
}

impl TinySwin {
    pub fn build(cfg: TinySwinConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let nf = tail_width(d);

        let first_conv = init_conv(3, d, 3, seed, "first_conv");
        let mut rtlbs = Vec::with_capacity(cfg.n_rtlb);
        for bi in 0..cfg.n_rtlb {
            let mut tlls = Vec::with_capacity(cfg.tll_per_rtlb);
            for li in 0..cfg.tll_per_rtlb {
                let base = format!("rtlb{bi}.tll{li}");
                let qkv = init_linear(d, 3 * d, seed, &format!("{base}.attn.qkv"));
                let proj = init_linear(d, d, seed, &format!("{base}.attn.proj"));
                let mut relpos = RelPosBias::new(cfg.window, cfg.n_heads);
                let mut rng = crate::rng::stream_rng(
                    seed,
                    crate::rng::label_stream(&format!("{base}.attn.relpos.init")),
                );
                crate::rng::fill_normal(&mut relpos.table.view_mut(), 0.02, &mut rng);
                tlls.push(Tll {
                    norm1: LayerNorm::new(d),
                    attn: Attn { qkv, proj, relpos },
                    norm2: LayerNorm::new(d),
                    fc1: init_linear(d, hidden, seed, &format!("{base}.mlp.fc1")),
                    fc2: init_linear(hidden, d, seed, &format!("{base}.mlp.fc2")),
                });
            }
            let conv = init_conv(d, d, 3, seed, &format!("rtlb{bi}.conv"));
            rtlbs.push(Rtlb { tlls, conv });
        }
        let dfe_conv = init_conv(d, d, 3, seed, "dfe_conv");
        let bu_conv = init_conv(d, nf * cfg.upscale * cfg.upscale, 3, seed, "bu_conv");
        let au_conv = init_conv(nf, 3, 3, seed, "au_conv");

        let mut registry = LayerRegistry::default();
        registry.push("first_conv", LayerKind::Conv, LayerGroup::FirstConv);
        for bi in 0..cfg.n_rtlb {
            for li in 0..cfg.tll_per_rtlb {
                let base = format!("rtlb{bi}.tll{li}");
                registry.push(format!("{base}.attn.qkv"), LayerKind::LinearQkv, LayerGroup::Msa);
                registry.push(format!("{base}.attn.proj"), LayerKind::LinearProj, LayerGroup::Msa);
                registry.push(format!("{base}.mlp.fc1"), LayerKind::LinearMlpFc1, LayerGroup::Mlp);
                registry.push(format!("{base}.mlp.fc2"), LayerKind::LinearMlpFc2, LayerGroup::Mlp);
            }
            registry.push(format!("rtlb{bi}.conv"), LayerKind::Conv, LayerGroup::RstlbConvs);
        }
        registry.push("dfe_conv", LayerKind::Conv, LayerGroup::DfeConvs);
        registry.push("bu_conv", LayerKind::Conv, LayerGroup::BuConv);
        registry.push("au_conv", LayerKind::Conv, LayerGroup::AuConv);

        let mut model = TinySwin {
            cfg,
            first_conv,
            rtlbs,
            dfe_conv,
            bu_conv,
            au_conv,
            registry,
            params: Vec::new(),
        };
        model.rebuild_param_table();
        Ok(model)
    }

    pub fn config(&self) -> &TinySwinConfig {
        &self.cfg
    }

    fn forward_inner(&self, x: &Array3<f32>) -> Result<(Array3<f32>, SwinCtx)> {
        let (c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::dimension(format!("expected 3 input channels, got {c}")));
        }
        let win = self.cfg.window;
        if h % win != 0 || w % win != 0 {
            return Err(Error::dimension(format!(
                "spatial dims ({h},{w}) must be multiples of window {win}"
            )));
        }
        let range = self.cfg.img_range as f32;
        let z = x.mapv(|v| (v - 0.5) * range);

        let (f0, first_ctx) = self.first_conv.forward_t(&z)?;
        let win_idx = window_indices(h, w, win);
        let mut t = map_to_tokens(&f0);
        let mut rtlb_ctxs = Vec::with_capacity(self.rtlbs.len());
        for rtlb in &self.rtlbs {
            let t_block_in = t.clone();
            let mut tll_ctxs = Vec::with_capacity(rtlb.tlls.len());
            for tll in &rtlb.tlls {
                let (h1, ln1) = tll.norm1.forward_t(&t);
                let mut attn_out = Array2::<f32>::zeros(t.raw_dim());
                let mut attn_wins = Vec::with_capacity(win_idx.len());
                for idx in &win_idx {
                    let xw = gather_rows(&h1, idx);
                    let (yw, wctx) = tll.attn.forward_t(&xw, self.cfg.n_heads)?;
                    scatter_rows_add(&mut attn_out, idx, &yw);
                    attn_wins.push(wctx);
                }
                t += &attn_out;
                let (h2, ln2) = tll.norm2.forward_t(&t);
                let (m1, fc1_ctx) = tll.fc1.forward_t(&h2)?;
                let (g, phi) = gelu(&m1);
                let (m2, fc2_ctx) = tll.fc2.forward_t(&g)?;
                t += &m2;
                tll_ctxs.push(TllCtx {
                    ln1,
                    attn_wins,
                    ln2,
                    fc1: fc1_ctx,
                    gelu_x: m1,
                    gelu_phi: phi,
                    fc2: fc2_ctx,
                });
            }
            let body = tokens_to_map(&t, h, w);
            let (cv, conv_ctx) = rtlb.conv.forward_t(&body)?;
            t = t_block_in + map_to_tokens(&cv);
            rtlb_ctxs.push(RtlbCtx { tlls: tll_ctxs, conv: conv_ctx });
        }
        let f = tokens_to_map(&t, h, w);
        let (mut fd, dfe_ctx) = self.dfe_conv.forward_t(&f)?;
        fd += &f0;
        let (fb, bu_ctx) = self.bu_conv.forward_t(&fd)?;
        let ps = pixel_shuffle(&fb, self.cfg.upscale);
        let (y, au_ctx) = self.au_conv.forward_t(&ps)?;
        let out = y.mapv(|v| v / range + 0.5);
        Ok((
            out,
            SwinCtx {
                hw: (h, w),
                win_idx,
                first: first_ctx,
                rtlbs: rtlb_ctxs,
                dfe: dfe_ctx,
                bu: bu_ctx,
                au: au_ctx,
            },
        ))
    }
}

impl Backbone for TinySwin {
    fn id(&self) -> &'static str {
        "tiny-swin"
    }

    fn upscale(&self) -> usize {
        self.cfg.upscale
    }

    fn alignment(&self) -> usize {
        self.cfg.window
    }

    fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    fn config_table(&self) -> toml::Table {
        let mut t = toml::Table::try_from(self.cfg).expect("config serializes");
        t.insert("kind".into(), toml::Value::String("tiny-swin".into()));
        t
    }

    fn forward(&self, lr: &Array3<f32>) -> Result<Array3<f32>> {
        let (_, h, w) = lr.dim();
        let padded = reflect_pad_to_multiple(lr, self.cfg.window);
        let (out, _) = self.forward_inner(&padded)?;
        let s = self.cfg.upscale;
        Ok(clamp01(&crop(&out, h * s, w * s)))
    }

    fn forward_train(&self, lr: &Array3<f32>) -> Result<(Array3<f32>, Cache)> {
        let (out, ctx) = self.forward_inner(lr)?;
        Ok((out, Cache(Box::new(ctx))))
    }

    fn backward(&self, dy: &Array3<f32>, cache: &Cache, grads: &mut Grads) -> Result<()> {
        let ctx = cache
            .0
            .downcast_ref::<SwinCtx>()
            .ok_or_else(|| Error::state("cache does not belong to this backbone"))?;
        let (h, w) = ctx.hw;
        let range = self.cfg.img_range as f32;
        let dy = dy.mapv(|v| v / range);

        let (au_b, au_l) = wants_conv(grads, &self.au_conv);
        let au_bwd = self.au_conv.backward(&dy, &ctx.au, au_b, au_l);
        add_conv_grads(grads, &self.au_conv, &au_bwd);
        let dfb = pixel_unshuffle(&au_bwd.dx, self.cfg.upscale);

        let (bu_b, bu_l) = wants_conv(grads, &self.bu_conv);
        let bu_bwd = self.bu_conv.backward(&dfb, &ctx.bu, bu_b, bu_l);
        add_conv_grads(grads, &self.bu_conv, &bu_bwd);
        let dfd = bu_bwd.dx;

        let (dfe_b, dfe_l) = wants_conv(grads, &self.dfe_conv);
        let dfe_bwd = self.dfe_conv.backward(&dfd, &ctx.dfe, dfe_b, dfe_l);
        add_conv_grads(grads, &self.dfe_conv, &dfe_bwd);
        let df0_skip = dfd; // identity branch of the global skip
        let mut dt = map_to_tokens(&dfe_bwd.dx);

        for (rtlb, rctx) in self.rtlbs.iter().zip(&ctx.rtlbs).rev() {
            let dcv_map = tokens_to_map(&dt, h, w);
            let (cw_b, cw_l) = wants_conv(grads, &rtlb.conv);
            let conv_bwd = rtlb.conv.backward(&dcv_map, &rctx.conv, cw_b, cw_l);
            add_conv_grads(grads, &rtlb.conv, &conv_bwd);
            let mut dt_body = map_to_tokens(&conv_bwd.dx);

            for (tll, tctx) in rtlb.tlls.iter().zip(&rctx.tlls).rev() {
                // t_after = t_mid + fc2(gelu(fc1(ln2(t_mid))))
                let (f2_b, f2_l) = wants_linear(grads, &tll.fc2);
                let fc2_bwd = tll.fc2.backward(&dt_body, &tctx.fc2, f2_b, f2_l);
                add_linear_grads(grads, &tll.fc2, &fc2_bwd);
                let dm1 = gelu_backward(&fc2_bwd.dx, &tctx.gelu_x, &tctx.gelu_phi);
                let (f1_b, f1_l) = wants_linear(grads, &tll.fc1);
                let fc1_bwd = tll.fc1.backward(&dm1, &tctx.fc1, f1_b, f1_l);
                add_linear_grads(grads, &tll.fc1, &fc1_bwd);
                let ln2_want = grads.wants(tll.norm2.pid_g);
                let ln2_bwd = tll.norm2.backward(&fc1_bwd.dx, &tctx.ln2, ln2_want);
                if let (Some(dg), Some(db)) = (&ln2_bwd.dgamma, &ln2_bwd.dbeta) {
                    grads.add(tll.norm2.pid_g, dg.as_slice().unwrap());
                    grads.add(tll.norm2.pid_beta, db.as_slice().unwrap());
                }
                let d_mid = &dt_body + &ln2_bwd.dx;

                // t_mid = t_pre + attn(ln1(t_pre)), attention per window
                let mut d_h1 = Array2::<f32>::zeros(d_mid.raw_dim());
                let mut dtable = grads
                    .wants(tll.attn.relpos.pid)
                    .then(|| Array2::<f32>::zeros(tll.attn.relpos.table.raw_dim()));
                for (idx, wctx) in ctx.win_idx.iter().zip(&tctx.attn_wins) {
                    let dyw = gather_rows(&d_mid, idx);
                    let dxw = tll.attn.backward(&dyw, wctx, self.cfg.n_heads, grads, &mut dtable);
                    scatter_rows_add(&mut d_h1, idx, &dxw);
                }
                if let Some(dtab) = dtable {
                    grads.add(tll.attn.relpos.pid, dtab.as_slice().unwrap());
                }
                let ln1_want = grads.wants(tll.norm1.pid_g);
                let ln1_bwd = tll.norm1.backward(&d_h1, &tctx.ln1, ln1_want);
                if let (Some(dg), Some(db)) = (&ln1_bwd.dgamma, &ln1_bwd.dbeta) {
                    grads.add(tll.norm1.pid_g, dg.as_slice().unwrap());
                    grads.add(tll.norm1.pid_beta, db.as_slice().unwrap());
                }
                dt_body = d_mid + &ln1_bwd.dx;
            }
            dt += &dt_body;
        }

        let df0 = tokens_to_map(&dt, h, w) + &df0_skip;
        let (fc_b, fc_l) = wants_conv(grads, &self.first_conv);
        let first_bwd = self.first_conv.backward(&df0, &ctx.first, fc_b, fc_l);
        add_conv_grads(grads, &self.first_conv, &first_bwd);
        Ok(())
    }

    fn named_slots(&self) -> Vec<(String, SlotRef<'_>)> {
        let mut out: Vec<(String, SlotRef)> = Vec::new();
        out.push(("first_conv".into(), SlotRef::Conv(&self.first_conv)));
        for (bi, rtlb) in self.rtlbs.iter().enumerate() {
            for (li, tll) in rtlb.tlls.iter().enumerate() {
                let base = format!("rtlb{bi}.tll{li}");
                out.push((format!("{base}.norm1"), SlotRef::Norm(&tll.norm1)));
                out.push((format!("{base}.attn.qkv"), SlotRef::Linear(&tll.attn.qkv)));
                out.push((format!("{base}.attn.proj"), SlotRef::Linear(&tll.attn.proj)));
                out.push((format!("{base}.attn.relpos"), SlotRef::RelPos(&tll.attn.relpos)));
                out.push((format!("{base}.norm2"), SlotRef::Norm(&tll.norm2)));
                out.push((format!("{base}.mlp.fc1"), SlotRef::Linear(&tll.fc1)));
                out.push((format!("{base}.mlp.fc2"), SlotRef::Linear(&tll.fc2)));
            }
            out.push((format!("rtlb{bi}.conv"), SlotRef::Conv(&rtlb.conv)));
        }
        out.push(("dfe_conv".into(), SlotRef::Conv(&self.dfe_conv)));
        out.push(("bu_conv".into(), SlotRef::Conv(&self.bu_conv)));
        out.push(("au_conv".into(), SlotRef::Conv(&self.au_conv)));
        out
    }

    fn named_slots_mut(&mut self) -> Vec<(String, SlotMut<'_>)> {
        let mut out: Vec<(String, SlotMut)> = Vec::new();
        out.push(("first_conv".into(), SlotMut::Conv(&mut self.first_conv)));
        for (bi, rtlb) in self.rtlbs.iter_mut().enumerate() {
            for (li, tll) in rtlb.tlls.iter_mut().enumerate() {
                let base = format!("rtlb{bi}.tll{li}");
                let Tll { norm1, attn, norm2, fc1, fc2 } = tll;
                out.push((format!("{base}.norm1"), SlotMut::Norm(norm1)));
                out.push((format!("{base}.attn.qkv"), SlotMut::Linear(&mut attn.qkv)));
                out.push((format!("{base}.attn.proj"), SlotMut::Linear(&mut attn.proj)));
                out.push((format!("{base}.attn.relpos"), SlotMut::RelPos(&mut attn.relpos)));
                out.push((format!("{base}.norm2"), SlotMut::Norm(norm2)));
                out.push((format!("{base}.mlp.fc1"), SlotMut::Linear(fc1)));
                out.push((format!("{base}.mlp.fc2"), SlotMut::Linear(fc2)));
            }
            out.push((format!("rtlb{bi}.conv"), SlotMut::Conv(&mut rtlb.conv)));
        }
        out.push(("dfe_conv".into(), SlotMut::Conv(&mut self.dfe_conv)));
        out.push(("bu_conv".into(), SlotMut::Conv(&mut self.bu_conv)));
        out.push(("au_conv".into(), SlotMut::Conv(&mut self.au_conv)));
        out
    }

    fn param_table(&self) -> &[ParamInfo] {
        &self.params
    }

    fn set_param_table(&mut self, table: Vec<ParamInfo>) {
        self.params = table;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::Backbone;

    #[test]
    fn toy_registry_matches_declared_graph() {
        let m = TinySwin::build(TinySwinConfig::default(), 0).unwrap();
        let reg = m.registry();
        let count = |k: LayerKind| reg.entries().iter().filter(|e| e.kind == k).count();
        assert_eq!(count(LayerKind::LinearQkv), 4);
        assert_eq!(count(LayerKind::LinearProj), 4);
        assert_eq!(count(LayerKind::LinearMlpFc1), 4);
        assert_eq!(count(LayerKind::LinearMlpFc2), 4);
        let by_group = |g: LayerGroup| reg.entries().iter().filter(|e| e.group == g).count();
        assert_eq!(by_group(LayerGroup::FirstConv), 1);
        assert_eq!(by_group(LayerGroup::RstlbConvs), 2);
        assert_eq!(by_group(LayerGroup::DfeConvs), 1);
        assert_eq!(by_group(LayerGroup::BuConv), 1);
        assert_eq!(by_group(LayerGroup::AuConv), 1);
        assert_eq!(reg.len(), 22);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = TinySwinConfig { embed_dim: 30, n_heads: 4, ..Default::default() };
        assert!(TinySwin::build(cfg, 0).is_err());
    }

    #[test]
    fn forward_shape_determinism_and_range() {
        let m = TinySwin::build(TinySwinConfig::default(), 3).unwrap();
        let mut x = Array3::<f32>::zeros((3, 16, 16));
        crate::rng::fill_normal(&mut x.view_mut(), 0.2, &mut crate::rng::stream_rng(1, 0));
        let x = x.mapv(|v| (v + 0.5).clamp(0.0, 1.0));
        let y1 = m.forward(&x).unwrap();
        let y2 = m.forward(&x).unwrap();
        assert_eq!(y1.dim(), (3, 64, 64));
        assert_eq!(y1, y2);
        assert!(y1.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn non_aligned_input_is_padded_and_cropped() {
        let m = TinySwin::build(TinySwinConfig::default(), 3).unwrap();
        let x = Array3::<f32>::from_elem((3, 20, 12), 0.5);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.dim(), (3, 80, 48));
    }

    #[test]
    fn registry_completeness_leaves_only_norms_bias_relpos() {
        let m = TinySwin::build(TinySwinConfig::default(), 0).unwrap();
        let reg_names: std::collections::BTreeSet<String> =
            m.registry().entries().iter().map(|e| format!("{}.weight", e.name)).collect();
        for info in m.param_table() {
            if info.name.ends_with(".weight") {
                assert!(
                    reg_names.contains(&info.name),
                    "weight {} missing from registry",
                    info.name
                );
            } else {
                assert!(
                    info.name.ends_with(".bias")
                        || info.name.ends_with(".gamma")
                        || info.name.ends_with(".beta")
                        || info.name.ends_with(".table"),
                    "unexpected non-registry param {}",
                    info.name
                );
            }
        }
    }

    #[test]
    fn swinir_scale_param_count_near_12m() {
        let m = TinySwin::build(TinySwinConfig::swinir_scale(), 0).unwrap();
        let total = m.num_params() as f64;
        let target = 12_000_000.0;
        assert!(
            (total - target).abs() / target < 0.15,
            "base params {total} outside 15% of 12M"
        );
    }
}
