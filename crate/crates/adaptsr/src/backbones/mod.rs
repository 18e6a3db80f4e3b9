//! Super-resolution backbones and the layer registry that names every
//! adaptable weight inside them.
//!
//! Two toy networks mirror the injection topologies of the paper-scale
//! models: [`swin::TinySwin`], a windowed-attention transformer with
//! pre-norm transformer layers grouped into residual blocks, and
//! [`edsr::TinyEdsr`], a residual CNN. Both end in a conv → pixel-shuffle →
//! conv upsampling tail. Backbones implement the [`Backbone`] trait and are
//! constructed by name through [`build`].

pub mod edsr;
pub mod swin;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};

use crate::config::BackboneSection;
use crate::error::{Error, Result};
use crate::nn::functional::{gelu, softmax_rows};
use crate::nn::{Conv2d, LayerNorm, Linear, ParamId, ParamInfo, ParamKind, UNSET};

pub use edsr::{TinyEdsr, TinyEdsrConfig};
pub use swin::{TinySwin, TinySwinConfig};

/// What kind of weight a registry entry points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    LinearQkv,
    LinearProj,
    LinearMlpFc1,
    LinearMlpFc2,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::LinearQkv => "linear_qkv",
            LayerKind::LinearProj => "linear_proj",
            LayerKind::LinearMlpFc1 => "linear_mlp_fc1",
            LayerKind::LinearMlpFc2 => "linear_mlp_fc2",
        }
    }
}

/// Taxonomy group of a registry entry; presets select by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerGroup {
    FirstConv,
    RstlbConvs,
    DfeConvs,
    BuConv,
    AuConv,
    Msa,
    Mlp,
    RlbConvs,
}

impl LayerGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerGroup::FirstConv => "first_conv",
            LayerGroup::RstlbConvs => "rstlb_convs",
            LayerGroup::DfeConvs => "dfe_convs",
            LayerGroup::BuConv => "bu_conv",
            LayerGroup::AuConv => "au_conv",
            LayerGroup::Msa => "msa",
            LayerGroup::Mlp => "mlp",
            LayerGroup::RlbConvs => "rlb_convs",
        }
    }
}

/// One adaptable weight: its dotted path, kind, and taxonomy group.
#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub name: String,
    pub kind: LayerKind,
    pub group: LayerGroup,
}

/// Ordered map of every adaptable weight in a backbone — the injection
/// engine's address space.
#[derive(Debug, Clone, Default)]
pub struct LayerRegistry {
    entries: Vec<RegistryEntry>,
}

impl LayerRegistry {
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, group: LayerGroup) {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "registry names must be unique"
        );
        self.entries.push(RegistryEntry { name, kind, group });
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn groups(&self) -> Vec<LayerGroup> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.group) {
                seen.push(e.group);
            }
        }
        seen
    }
}

/// Learned relative position bias for one attention layer.
///
/// `table` has one row per 2-D offset between tokens of a window and one
/// column per head; `index` maps each (query, key) token pair to its offset
/// row.
#[derive(Debug, Clone)]
pub struct RelPosBias {
    pub table: Array2<f32>,
    pub index: Array2<usize>,
    pub window: usize,
    pub heads: usize,
    pub pid: ParamId,
}

impl RelPosBias {
    pub fn new(window: usize, heads: usize) -> Self {
        let n = window * window;
        let span = 2 * window - 1;
        let mut index = Array2::<usize>::zeros((n, n));
        for qi in 0..n {
            let (qy, qx) = (qi / window, qi % window);
            for ki in 0..n {
                let (ky, kx) = (ki / window, ki % window);
                let dy = qy as isize - ky as isize + (window as isize - 1);
                let dx = qx as isize - kx as isize + (window as isize - 1);
                index[[qi, ki]] = dy as usize * span + dx as usize;
            }
        }
        RelPosBias {
            table: Array2::zeros((span * span, heads)),
            index,
            window,
            heads,
            pid: UNSET,
        }
    }

    /// Gathered N×N bias matrix for one head.
    pub fn bias_matrix(&self, head: usize) -> Array2<f32> {
        let n = self.index.nrows();
        Array2::from_shape_fn((n, n), |(i, j)| self.table[[self.index[[i, j]], head]])
    }
}

/// Cache slot kinds exposed by a backbone's canonical parameter walk.
pub enum SlotRef<'a> {
    Linear(&'a Linear),
    Conv(&'a Conv2d),
    Norm(&'a LayerNorm),
    RelPos(&'a RelPosBias),
}

pub enum SlotMut<'a> {
    Linear(&'a mut Linear),
    Conv(&'a mut Conv2d),
    Norm(&'a mut LayerNorm),
    RelPos(&'a mut RelPosBias),
}

/// Opaque forward cache handed back to [`Backbone::backward`].
pub struct Cache(pub Box<dyn std::any::Any + Send>);

/// A super-resolution network with named, injectable weights.
pub trait Backbone: Send + Sync {
    fn id(&self) -> &'static str;
    fn upscale(&self) -> usize;
    /// Spatial alignment required of training inputs (window size for the
    /// transformer, 1 for CNNs). Eval inputs are padded internally instead.
    fn alignment(&self) -> usize;
    fn registry(&self) -> &LayerRegistry;
    /// Backbone config as a TOML table, embedded in checkpoint headers.
    fn config_table(&self) -> toml::Table;

    /// Eval forward: reflect-pads to alignment, runs the trunk, crops to
    /// `input × upscale`, clamps to [0,1].
    fn forward(&self, lr: &Array3<f32>) -> Result<Array3<f32>>;
    /// Training forward: requires aligned input, returns the unclamped
    /// output plus the cache for [`Backbone::backward`].
    fn forward_train(&self, lr: &Array3<f32>) -> Result<(Array3<f32>, Cache)>;
    fn backward(&self, dy: &Array3<f32>, cache: &Cache, grads: &mut crate::nn::Grads) -> Result<()>;

    /// Canonical graph-ordered walk over every parameter-bearing slot.
    fn named_slots(&self) -> Vec<(String, SlotRef<'_>)>;
    fn named_slots_mut(&mut self) -> Vec<(String, SlotMut<'_>)>;

    fn param_table(&self) -> &[ParamInfo];
    fn set_param_table(&mut self, table: Vec<ParamInfo>);

    /// Re-enumerate all parameters (call after injection or merging).
    fn rebuild_param_table(&mut self) {
        let mut table = Vec::new();
        for (name, slot) in self.named_slots_mut() {
            match slot {
                SlotMut::Linear(l) => {
                    l.pid_w = push_param(&mut table, &name, "weight", ParamKind::BaseWeight, l.weight.len());
                    if let Some(b) = &l.bias {
                        l.pid_b = push_param(&mut table, &name, "bias", ParamKind::BaseBias, b.len());
                    }
                    if let Some(f) = &mut l.lora {
                        f.pid_a = push_param(&mut table, &name, "A", ParamKind::LoraA, f.a.len());
                        f.pid_b = push_param(&mut table, &name, "B", ParamKind::LoraB, f.b.len());
                    }
                }
                SlotMut::Conv(c) => {
                    c.pid_w = push_param(&mut table, &name, "weight", ParamKind::BaseWeight, c.weight.len());
                    if let Some(b) = &c.bias {
                        c.pid_b = push_param(&mut table, &name, "bias", ParamKind::BaseBias, b.len());
                    }
                    if let Some(f) = &mut c.lora {
                        f.pid_a = push_param(&mut table, &name, "A", ParamKind::LoraA, f.a.len());
                        f.pid_b = push_param(&mut table, &name, "B", ParamKind::LoraB, f.b.len());
                    }
                }
                SlotMut::Norm(n) => {
                    n.pid_g = push_param(&mut table, &name, "gamma", ParamKind::Norm, n.gamma.len());
                    n.pid_beta = push_param(&mut table, &name, "beta", ParamKind::Norm, n.beta.len());
                }
                SlotMut::RelPos(r) => {
                    r.pid = push_param(&mut table, &name, "table", ParamKind::RelPos, r.table.len());
                }
            }
        }
        self.set_param_table(table);
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamId, ArrayViewD<f32>)) {
        for (_, slot) in self.named_slots() {
            match slot {
                SlotRef::Linear(l) => {
                    f(l.pid_w, l.weight.view().into_dyn());
                    if let Some(b) = &l.bias {
                        f(l.pid_b, b.view().into_dyn());
                    }
                    if let Some(fa) = &l.lora {
                        f(fa.pid_a, fa.a.view().into_dyn());
                        f(fa.pid_b, fa.b.view().into_dyn());
                    }
                }
                SlotRef::Conv(c) => {
                    f(c.pid_w, c.weight.view().into_dyn());
                    if let Some(b) = &c.bias {
                        f(c.pid_b, b.view().into_dyn());
                    }
                    if let Some(fa) = &c.lora {
                        f(fa.pid_a, fa.a.view().into_dyn());
                        f(fa.pid_b, fa.b.view().into_dyn());
                    }
                }
                SlotRef::Norm(n) => {
                    f(n.pid_g, n.gamma.view().into_dyn());
                    f(n.pid_beta, n.beta.view().into_dyn());
                }
                SlotRef::RelPos(r) => f(r.pid, r.table.view().into_dyn()),
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamId, ArrayViewMutD<f32>)) {
        for (_, slot) in self.named_slots_mut() {
            match slot {
                SlotMut::Linear(l) => {
                    f(l.pid_w, l.weight.view_mut().into_dyn());
                    if let Some(b) = &mut l.bias {
                        f(l.pid_b, b.view_mut().into_dyn());
                    }
                    if let Some(fa) = &mut l.lora {
                        f(fa.pid_a, fa.a.view_mut().into_dyn());
                        f(fa.pid_b, fa.b.view_mut().into_dyn());
                    }
                }
                SlotMut::Conv(c) => {
                    f(c.pid_w, c.weight.view_mut().into_dyn());
                    if let Some(b) = &mut c.bias {
                        f(c.pid_b, b.view_mut().into_dyn());
                    }
                    if let Some(fa) = &mut c.lora {
                        f(fa.pid_a, fa.a.view_mut().into_dyn());
                        f(fa.pid_b, fa.b.view_mut().into_dyn());
                    }
                }
                SlotMut::Norm(n) => {
                    f(n.pid_g, n.gamma.view_mut().into_dyn());
                    f(n.pid_beta, n.beta.view_mut().into_dyn());
                }
                SlotMut::RelPos(r) => f(r.pid, r.table.view_mut().into_dyn()),
            }
        }
    }

    /// Visit only registry-addressable layers, in registry order.
    fn visit_adaptable_mut(&mut self, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        let adaptable: std::collections::BTreeSet<String> =
            self.registry().entries().iter().map(|e| e.name.clone()).collect();
        for (name, slot) in self.named_slots_mut() {
            if adaptable.contains(&name) {
                f(&name, slot);
            }
        }
    }

    fn visit_adaptable(&self, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        let adaptable: std::collections::BTreeSet<String> =
            self.registry().entries().iter().map(|e| e.name.clone()).collect();
        for (name, slot) in self.named_slots() {
            if adaptable.contains(&name) {
                f(&name, slot);
            }
        }
    }

    fn num_params(&self) -> usize {
        self.param_table().iter().map(|p| p.len).sum()
    }
}

fn push_param(table: &mut Vec<ParamInfo>, layer: &str, field: &str, kind: ParamKind, len: usize) -> ParamId {
    let pid = table.len();
    table.push(ParamInfo { pid, name: format!("{layer}.{field}"), kind, len });
    pid
}

/// Builder registry: backbone kind string → constructor.
pub type BuildFn = fn(&BackboneSection, u64) -> Result<Box<dyn Backbone>>;

pub fn builders() -> &'static BTreeMap<&'static str, BuildFn> {
    static REG: OnceLock<BTreeMap<&'static str, BuildFn>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut m: BTreeMap<&'static str, BuildFn> = BTreeMap::new();
        m.insert("tiny-swin", |sec, seed| {
            Ok(Box::new(TinySwin::build(TinySwinConfig::from_section(sec)?, seed)?))
        });
        m.insert("tiny-edsr", |sec, seed| {
            Ok(Box::new(TinyEdsr::build(TinyEdsrConfig::from_section(sec)?, seed)?))
        });
        m
    })
}

/// Construct a backbone by kind name.
pub fn build(kind: &str, section: &BackboneSection, seed: u64) -> Result<Box<dyn Backbone>> {
    let f = builders().get(kind).ok_or_else(|| {
        Error::invalid_config(format!(
            "unknown backbone '{kind}' (available: {})",
            builders().keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    f(section, seed)
}

/// Multi-head window attention with relative position bias:
/// per head, `softmax(QKᵀ/√d_k + bias) · V`, heads concatenated, projected.
///
/// `x` is the N×d token matrix of one window (N = window²); `qkv` is the
/// fused d→3d projection and may carry a LoRA adapter, as may `proj`.
pub fn window_attention(
    x: &Array2<f32>,
    qkv: &Linear,
    proj: &Linear,
    bias: &RelPosBias,
    heads: usize,
) -> Result<Array2<f32>> {
    let (n, d) = x.dim();
    if d % heads != 0 {
        return Err(Error::dimension(format!("embed dim {d} not divisible by {heads} heads")));
    }
    if qkv.d_out() != 3 * d || qkv.d_in() != d {
        return Err(Error::dimension("qkv must map d -> 3d".into()));
    }
    if proj.d_in() != d || proj.d_out() != d {
        return Err(Error::dimension("proj must map d -> d".into()));
    }
    if bias.index.nrows() != n {
        return Err(Error::dimension(format!(
            "bias built for {} tokens, window holds {n}",
            bias.index.nrows()
        )));
    }
    let (out, _) = window_attention_probs(x, qkv, proj, bias, heads)?;
    Ok(out)
}

/// Like [`window_attention`] but also returns the per-head attention
/// probability matrices (rows sum to 1).
pub fn window_attention_probs(
    x: &Array2<f32>,
    qkv: &Linear,
    proj: &Linear,
    bias: &RelPosBias,
    heads: usize,
) -> Result<(Array2<f32>, Vec<Array2<f32>>)> {
    let (n, d) = x.dim();
    let dk = d / heads;
    let inv_sqrt_dk = 1.0 / (dk as f32).sqrt();
    let qkv_out = qkv.forward(x)?;
    let mut concat = Array2::<f32>::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv_out.slice(ndarray::s![.., h * dk..(h + 1) * dk]);
        let k = qkv_out.slice(ndarray::s![.., d + h * dk..d + (h + 1) * dk]);
        let v = qkv_out.slice(ndarray::s![.., 2 * d + h * dk..2 * d + (h + 1) * dk]);
        let mut logits = q.dot(&k.t());
        logits *= inv_sqrt_dk;
        logits += &bias.bias_matrix(h);
        let p = softmax_rows(&logits);
        let o = p.dot(&v);
        concat.slice_mut(ndarray::s![.., h * dk..(h + 1) * dk]).assign(&o);
        probs.push(p);
    }
    let out = proj.forward(&concat)?;
    Ok((out, probs))
}

/// Transformer feed-forward: `fc2(GELU(fc1(x)))`.
pub fn mlp_forward(x: &Array2<f32>, fc1: &Linear, fc2: &Linear) -> Result<Array2<f32>> {
    let h = fc1.forward(x)?;
    let (g, _) = gelu(&h);
    fc2.forward(&g)
}

/// He-normal conv init (std = sqrt(2 / fan_in)), biases zero.
pub(crate) fn init_conv(c_in: usize, c_out: usize, k: usize, seed: u64, label: &str) -> Conv2d {
    let mut w = ndarray::Array4::<f32>::zeros((c_out, c_in, k, k));
    let std = (2.0 / (c_in * k * k) as f32).sqrt();
    let mut rng = crate::rng::stream_rng(seed, crate::rng::label_stream(&format!("{label}.init")));
    crate::rng::fill_normal(&mut w.view_mut(), std, &mut rng);
    Conv2d::new(w, Some(ndarray::Array1::zeros(c_out)), 1, k / 2)
}

/// Gaussian(0, 0.02) linear init, biases zero.
pub(crate) fn init_linear(d_in: usize, d_out: usize, seed: u64, label: &str) -> Linear {
    let mut w = Array2::<f32>::zeros((d_out, d_in));
    let mut rng = crate::rng::stream_rng(seed, crate::rng::label_stream(&format!("{label}.init")));
    crate::rng::fill_normal(&mut w.view_mut(), 0.02, &mut rng);
    Linear::new(w, Some(ndarray::Array1::zeros(d_out)))
}

/// Gradient contribution hook shared by both backbones' backward passes.
pub(crate) fn add_linear_grads(
    grads: &mut crate::nn::Grads,
    layer: &Linear,
    bwd: &crate::nn::layers::LinearBwd,
) {
    if let Some(dw) = &bwd.dw {
        grads.add(layer.pid_w, dw.as_slice().expect("contiguous"));
    }
    if let Some(db) = &bwd.db {
        grads.add(layer.pid_b, db.as_slice().expect("contiguous"));
    }
    if let Some(l) = &layer.lora {
        if let Some(da) = &bwd.da {
            grads.add(l.pid_a, da.as_slice().expect("contiguous"));
        }
        if let Some(dbf) = &bwd.dbf {
            grads.add(l.pid_b, dbf.as_slice().expect("contiguous"));
        }
    }
}

pub(crate) fn add_conv_grads(
    grads: &mut crate::nn::Grads,
    layer: &Conv2d,
    bwd: &crate::nn::layers::ConvBwd,
) {
    if let Some(dw) = &bwd.dw {
        grads.add(layer.pid_w, dw.as_slice().expect("contiguous"));
    }
    if let Some(db) = &bwd.db {
        grads.add(layer.pid_b, db.as_slice().expect("contiguous"));
    }
    if let Some(l) = &layer.lora {
        if let Some(da) = &bwd.da {
            grads.add(l.pid_a, da.as_slice().expect("contiguous"));
        }
        if let Some(dbf) = &bwd.dbf {
            grads.add(l.pid_b, dbf.as_slice().expect("contiguous"));
        }
    }
}

/// Whether base/lora gradients are wanted for a layer, given the active set.
pub(crate) fn wants_linear(grads: &crate::nn::Grads, layer: &Linear) -> (bool, bool) {
    let base = grads.wants(layer.pid_w) || grads.wants(layer.pid_b);
    let lora = layer
        .lora
        .as_ref()
        .map(|l| grads.wants(l.pid_a) || grads.wants(l.pid_b))
        .unwrap_or(false);
    (base, lora)
}

pub(crate) fn wants_conv(grads: &crate::nn::Grads, layer: &Conv2d) -> (bool, bool) {
    let base = grads.wants(layer.pid_w) || grads.wants(layer.pid_b);
    let lora = layer
        .lora
        .as_ref()
        .map(|l| grads.wants(l.pid_a) || grads.wants(l.pid_b))
        .unwrap_or(false);
    (base, lora)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relpos_index_reflects_under_coordinate_swap() {
        let w = 4;
        let span = 2 * w - 1;
        let b = RelPosBias::new(w, 2);
        let n = w * w;
        for i in 0..n {
            for j in 0..n {
                let r = b.index[[j, i]];
                let (dy, dx) = (r / span, r % span);
                let reflected = (span - 1 - dy) * span + (span - 1 - dx);
                assert_eq!(b.index[[i, j]], reflected);
            }
        }
        assert_eq!(b.table.dim(), (span * span, 2));
    }

    #[test]
    fn builder_registry_knows_both_backbones() {
        let names: Vec<_> = builders().keys().cloned().collect();
        assert_eq!(names, vec!["tiny-edsr", "tiny-swin"]);
    }
}
