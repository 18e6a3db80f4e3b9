//! Residual CNN backbone: conv → residual blocks (conv-ReLU-conv, scaled
//! residual) → conv → pixel-shuffle → conv.

use ndarray::Array3;

use crate::config::BackboneSection;
use crate::error::{Error, Result};
use crate::nn::functional::{clamp01, pixel_shuffle, pixel_unshuffle, relu, relu_backward};
use crate::nn::layers::ConvCtx;
use crate::nn::{Conv2d, Grads, ParamInfo};

use super::{
    add_conv_grads, init_conv, wants_conv, Backbone, Cache, LayerGroup, LayerKind, LayerRegistry,
    SlotMut, SlotRef,
};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TinyEdsrConfig {
    pub n_feats: usize,
    pub n_resblocks: usize,
    pub upscale: usize,
    pub res_scale: f64,
}

impl Default for TinyEdsrConfig {
    fn default() -> Self {
        TinyEdsrConfig { n_feats: 32, n_resblocks: 4, upscale: 4, res_scale: 1.0 }
    }
}

impl TinyEdsrConfig {
    pub fn from_section(sec: &BackboneSection) -> Result<Self> {
        Ok(TinyEdsrConfig {
            n_feats: sec.n_feats,
            n_resblocks: sec.n_resblocks,
            upscale: sec.upscale,
            res_scale: sec.res_scale,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_feats == 0 {
            return Err(Error::invalid_config("n_feats must be >= 1"));
        }
        if self.n_resblocks == 0 {
            return Err(Error::invalid_config("n_resblocks must be >= 1"));
        }
        if !(2..=4).contains(&self.upscale) {
            return Err(Error::invalid_config("upscale must be in 2..=4"));
        }
        if !(self.res_scale > 0.0) {
            return Err(Error::invalid_config("res_scale must be > 0"));
        }
        Ok(())
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

pub struct TinyEdsr {
    cfg: TinyEdsrConfig,
    first_conv: Conv2d,
    blocks: Vec<ResBlock>,
    bu_conv: Conv2d,
    au_conv: Conv2d,
    registry: LayerRegistry,
    params: Vec<ParamInfo>,
}

struct BlockCtx {
    conv1: ConvCtx,
    pre_relu: Array3<f32>,
    conv2: ConvCtx,
}

struct EdsrCtx {
    first: ConvCtx,
    blocks: Vec<BlockCtx>,
    bu: ConvCtx,
    au: ConvCtx,
}

impl TinyEdsr {
    pub fn build(cfg: TinyEdsrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.n_feats;
        let first_conv = init_conv(3, f, 3, seed, "first_conv");
        let mut blocks = Vec::with_capacity(cfg.n_resblocks);
        for bi in 0..cfg.n_resblocks {
            blocks.push(ResBlock {
                conv1: init_conv(f, f, 3, seed, &format!("rlb{bi}.conv1")),
                conv2: init_conv(f, f, 3, seed, &format!("rlb{bi}.conv2")),
            });
        }
        let bu_conv = init_conv(f, f * cfg.upscale * cfg.upscale, 3, seed, "bu_conv");
        let au_conv = init_conv(f, 3, 3, seed, "au_conv");

        let mut registry = LayerRegistry::default();
        registry.push("first_conv", LayerKind::Conv, LayerGroup::FirstConv);
        for bi in 0..cfg.n_resblocks {
            registry.push(format!("rlb{bi}.conv1"), LayerKind::Conv, LayerGroup::RlbConvs);
            registry.push(format!("rlb{bi}.conv2"), LayerKind::Conv, LayerGroup::RlbConvs);
        }
        registry.push("bu_conv", LayerKind::Conv, LayerGroup::BuConv);
        registry.push("au_conv", LayerKind::Conv, LayerGroup::AuConv);

        let mut model = TinyEdsr {
            cfg,
            first_conv,
            blocks,
            bu_conv,
            au_conv,
            registry,
            params: Vec::new(),
        };
        model.rebuild_param_table();
        Ok(model)
    }

    pub fn config(&self) -> &TinyEdsrConfig {
        &self.cfg
    }

    fn forward_inner(&self, x: &Array3<f32>) -> Result<(Array3<f32>, EdsrCtx)> {
        let (c, _, _) = x.dim();
        if c != 3 {
            return Err(Error::dimension(format!("expected 3 input channels, got {c}")));
        }
        let rs = self.cfg.res_scale as f32;
        let (f0, first_ctx) = self.first_conv.forward_t(x)?;
        let mut f = f0;
        let mut block_ctxs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (a1, c1) = b.conv1.forward_t(&f)?;
            let r = relu(&a1);
            let (a2, c2) = b.conv2.forward_t(&r)?;
            f = f + a2.mapv(|v| v * rs);
            block_ctxs.push(BlockCtx { conv1: c1, pre_relu: a1, conv2: c2 });
        }
        let (fb, bu_ctx) = self.bu_conv.forward_t(&f)?;
        let ps = pixel_shuffle(&fb, self.cfg.upscale);
        let (y, au_ctx) = self.au_conv.forward_t(&ps)?;
        Ok((y, EdsrCtx { first: first_ctx, blocks: block_ctxs, bu: bu_ctx, au: au_ctx }))
    }
}

impl Backbone for TinyEdsr {
    fn id(&self) -> &'static str {
        "tiny-edsr"
    }

    fn upscale(&self) -> usize {
        self.cfg.upscale
    }

    fn alignment(&self) -> usize {
        1
    }

    fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    fn config_table(&self) -> toml::Table {
        let mut t = toml::Table::try_from(self.cfg).expect("config serializes");
        t.insert("kind".into(), toml::Value::String("tiny-edsr".into()));
        t
    }

    fn forward(&self, lr: &Array3<f32>) -> Result<Array3<f32>> {
        let (out, _) = self.forward_inner(lr)?;
        Ok(clamp01(&out))
    }

    fn forward_train(&self, lr: &Array3<f32>) -> Result<(Array3<f32>, Cache)> {
        let (out, ctx) = self.forward_inner(lr)?;
        Ok((out, Cache(Box::new(ctx))))
    }

    fn backward(&self, dy: &Array3<f32>, cache: &Cache, grads: &mut Grads) -> Result<()> {
        let ctx = cache
            .0
            .downcast_ref::<EdsrCtx>()
            .ok_or_else(|| Error::state("cache does not belong to this backbone"))?;
        let rs = self.cfg.res_scale as f32;

        let (au_b, au_l) = wants_conv(grads, &self.au_conv);
        let au_bwd = self.au_conv.backward(dy, &ctx.au, au_b, au_l);
        add_conv_grads(grads, &self.au_conv, &au_bwd);
        let dfb = pixel_unshuffle(&au_bwd.dx, self.cfg.upscale);

        let (bu_b, bu_l) = wants_conv(grads, &self.bu_conv);
        let bu_bwd = self.bu_conv.backward(&dfb, &ctx.bu, bu_b, bu_l);
        add_conv_grads(grads, &self.bu_conv, &bu_bwd);
        let mut df = bu_bwd.dx;

        for (b, bctx) in self.blocks.iter().zip(&ctx.blocks).rev() {
            // f_out = f_in + rs * conv2(relu(conv1(f_in)))
            let da2 = df.mapv(|v| v * rs);
            let (c2_b, c2_l) = wants_conv(grads, &b.conv2);
            let c2_bwd = b.conv2.backward(&da2, &bctx.conv2, c2_b, c2_l);
            add_conv_grads(grads, &b.conv2, &c2_bwd);
            let da1 = relu_backward(&c2_bwd.dx, &bctx.pre_relu);
            let (c1_b, c1_l) = wants_conv(grads, &b.conv1);
            let c1_bwd = b.conv1.backward(&da1, &bctx.conv1, c1_b, c1_l);
            add_conv_grads(grads, &b.conv1, &c1_bwd);
            df += &c1_bwd.dx;
        }

        let (fc_b, fc_l) = wants_conv(grads, &self.first_conv);
        let first_bwd = self.first_conv.backward(&df, &ctx.first, fc_b, fc_l);
        add_conv_grads(grads, &self.first_conv, &first_bwd);
        Ok(())
    }

    fn named_slots(&self) -> Vec<(String, SlotRef<'_>)> {
        let mut out: Vec<(String, SlotRef)> = Vec::new();
        out.push(("first_conv".into(), SlotRef::Conv(&self.first_conv)));
        for (bi, b) in self.blocks.iter().enumerate() {
            out.push((format!("rlb{bi}.conv1"), SlotRef::Conv(&b.conv1)));
            out.push((format!("rlb{bi}.conv2"), SlotRef::Conv(&b.conv2)));
        }
        out.push(("bu_conv".into(), SlotRef::Conv(&self.bu_conv)));
        out.push(("au_conv".into(), SlotRef::Conv(&self.au_conv)));
        out
    }

    fn named_slots_mut(&mut self) -> Vec<(String, SlotMut<'_>)> {
        let mut out: Vec<(String, SlotMut)> = Vec::new();
        out.push(("first_conv".into(), SlotMut::Conv(&mut self.first_conv)));
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            let ResBlock { conv1, conv2 } = b;
            out.push((format!("rlb{bi}.conv1"), SlotMut::Conv(conv1)));
            out.push((format!("rlb{bi}.conv2"), SlotMut::Conv(conv2)));
        }
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
    fn registry_conv_counts() {
        let m = TinyEdsr::build(TinyEdsrConfig::default(), 0).unwrap();
        assert_eq!(m.registry().len(), 11); // 1 + 4*2 + 1 + 1

        let supp = TinyEdsr::build(
            TinyEdsrConfig { n_resblocks: 16, n_feats: 64, ..Default::default() },
            0,
        )
        .unwrap();
        assert_eq!(supp.registry().len(), 35); // 1 + 32 + 1 + 1
    }

    #[test]
    fn zero_blocks_rejected() {
        let cfg = TinyEdsrConfig { n_resblocks: 0, ..Default::default() };
        assert!(TinyEdsr::build(cfg, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = TinyEdsr::build(TinyEdsrConfig::default(), 1).unwrap();
        let x = Array3::<f32>::from_elem((3, 12, 10), 0.4);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.dim(), (3, 48, 40));
        assert_eq!(y, m.forward(&x).unwrap());
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
