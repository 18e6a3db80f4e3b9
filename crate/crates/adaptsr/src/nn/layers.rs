//! Adaptable layers: `Linear`, `Conv2d`, `LayerNorm`.
//!
//! `Linear` and `Conv2d` optionally carry [`LoraFactors`]; their forward
//! adds the scaled low-rank delta path next to the frozen base path, and
//! `merge`/`unmerge` fold that delta exactly into the base weight and back.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraFactors, MergeState};
use crate::nn::functional::{col2im, conv_out_len, im2col};
use crate::nn::{ParamId, UNSET};

/// Fully-connected layer over token rows: `y = x·Wᵀ (+ s·(x·Aᵀ)·Bᵀ) + bias`.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `d_out × d_in`.
    pub weight: Array2<f32>,
    pub bias: Option<Array1<f32>>,
    pub lora: Option<LoraFactors>,
    pub pid_w: ParamId,
    pub pid_b: ParamId,
}

/// Forward cache for [`Linear::forward_t`].
pub struct LinearCtx {
    pub x: Array2<f32>,
    /// `x·Aᵀ`, present when a wrapped adapter is attached.
    pub u: Option<Array2<f32>>,
}

/// Gradients produced by [`Linear::backward`].
pub struct LinearBwd {
    pub dx: Array2<f32>,
    pub dw: Option<Array2<f32>>,
    pub db: Option<Array1<f32>>,
    pub da: Option<Array2<f32>>,
    pub dbf: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(weight: Array2<f32>, bias: Option<Array1<f32>>) -> Self {
        if let Some(b) = &bias {
            assert_eq!(b.len(), weight.nrows(), "bias length must match d_out");
        }
        Linear { weight, bias, lora: None, pid_w: UNSET, pid_b: UNSET }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    fn delta_active(&self) -> Option<&LoraFactors> {
        self.lora.as_ref().filter(|l| l.state == MergeState::Wrapped)
    }

    pub fn forward(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        Ok(self.forward_t(x)?.0)
    }

    pub fn forward_t(&self, x: &Array2<f32>) -> Result<(Array2<f32>, LinearCtx)> {
        if x.ncols() != self.d_in() {
            return Err(Error::dimension(format!(
                "linear expects {} input features, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.weight.t());
        let mut u = None;
        if let Some(l) = self.delta_active() {
            let xu = x.dot(&l.a.t());
            let mut dy = xu.dot(&l.b.t());
            dy *= l.scale;
            y += &dy;
            u = Some(xu);
        }
        if let Some(b) = &self.bias {
            y += &b.view().insert_axis(Axis(0));
        }
        Ok((y, LinearCtx { x: x.clone(), u }))
    }

    pub fn backward(&self, dy: &Array2<f32>, ctx: &LinearCtx, want_base: bool, want_lora: bool) -> LinearBwd {
        let mut dx = dy.dot(&self.weight);
        let dw = want_base.then(|| dy.t().dot(&ctx.x));
        let db = (want_base && self.bias.is_some()).then(|| dy.sum_axis(Axis(0)));
        let mut da = None;
        let mut dbf = None;
        if let Some(l) = self.delta_active() {
            let u = ctx.u.as_ref().expect("cached u for wrapped adapter");
            let mut du = dy.dot(&l.b);
            du *= l.scale;
            dx += &du.dot(&l.a);
            if want_lora {
                let mut g_b = dy.t().dot(u);
                g_b *= l.scale;
                dbf = Some(g_b);
                da = Some(du.t().dot(&ctx.x));
            }
        }
        LinearBwd { dx, dw, db, da, dbf }
    }

    /// Attach zero-initialized low-rank factors. Fails if already wrapped.
    pub fn wrap_lora(&mut self, cfg: &LoraConfig, label: &str) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::state(format!("layer '{label}' is already injected")));
        }
        self.lora = Some(LoraFactors::new(self.d_in(), self.d_out(), cfg, label)?);
        Ok(())
    }

    /// Fold `s·B·A` into the weight; returns the merged weight.
    pub fn merge_lora(&mut self) -> Result<Array2<f32>> {
        let l = self.lora.as_mut().ok_or_else(|| Error::state("no adapter to merge"))?;
        if l.state != MergeState::Wrapped {
            return Err(Error::state("adapter already merged"));
        }
        let delta = l.delta();
        self.weight += &delta;
        l.cached_delta = Some(delta);
        l.state = MergeState::Merged;
        Ok(self.weight.clone())
    }

    /// Exact inverse of [`Linear::merge_lora`].
    pub fn unmerge_lora(&mut self) -> Result<()> {
        let l = self.lora.as_mut().ok_or_else(|| Error::state("no adapter to unmerge"))?;
        if l.state != MergeState::Merged {
            return Err(Error::state("adapter is not merged"));
        }
        let delta = l.cached_delta.take().expect("merged adapter retains its delta");
        self.weight -= &delta;
        l.state = MergeState::Wrapped;
        Ok(())
    }

    /// Drop the factor objects after a merge, leaving a plain layer.
    pub fn strip_lora(&mut self) -> Result<()> {
        match &self.lora {
            Some(l) if l.state == MergeState::Merged => {
                self.lora = None;
                Ok(())
            }
            Some(_) => Err(Error::state("cannot strip an unmerged adapter")),
            None => Ok(()),
        }
    }
}

/// 2-D convolution (stride/padding per layer, square kernel):
/// `y = W*x (+ s·B·(A*x)) + bias`, where `A*x` runs the reshaped A as an
/// r-channel conv over the same receptive field and B applies pointwise.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `C_out × C_in × k × k`.
    pub weight: Array4<f32>,
    pub bias: Option<Array1<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub lora: Option<LoraFactors>,
    pub pid_w: ParamId,
    pub pid_b: ParamId,
}

/// Forward cache for [`Conv2d::forward_t`].
pub struct ConvCtx {
    /// im2col of the input, shared by the base and adapter paths.
    pub xcol: Array2<f32>,
    /// `A · xcol` (r × L), present when a wrapped adapter is attached.
    pub uc: Option<Array2<f32>>,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

/// Gradients produced by [`Conv2d::backward`].
pub struct ConvBwd {
    pub dx: Array3<f32>,
    pub dw: Option<Array4<f32>>,
    pub db: Option<Array1<f32>>,
    pub da: Option<Array2<f32>>,
    pub dbf: Option<Array2<f32>>,
}

impl Conv2d {
    pub fn new(weight: Array4<f32>, bias: Option<Array1<f32>>, stride: usize, padding: usize) -> Self {
        assert!(stride >= 1);
        if let Some(b) = &bias {
            assert_eq!(b.len(), weight.dim().0, "bias length must match C_out");
        }
        Conv2d { weight, bias, stride, padding, lora: None, pid_w: UNSET, pid_b: UNSET }
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn fan_in(&self) -> usize {
        let (_, c_in, k, _) = self.weight.dim();
        c_in * k * k
    }

    fn delta_active(&self) -> Option<&LoraFactors> {
        self.lora.as_ref().filter(|l| l.state == MergeState::Wrapped)
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        Ok(self.forward_t(x)?.0)
    }

    pub fn forward_t(&self, x: &Array3<f32>) -> Result<(Array3<f32>, ConvCtx)> {
        let (c, h, w) = x.dim();
        if c != self.c_in() {
            return Err(Error::dimension(format!(
                "conv expects {} input channels, got {c}",
                self.c_in()
            )));
        }
        let k = self.kernel();
        let oh = conv_out_len(h, k, self.stride, self.padding);
        let ow = conv_out_len(w, k, self.stride, self.padding);
        let xcol = im2col(x, k, self.stride, self.padding);
        let wm = self
            .weight
            .to_shape((self.c_out(), self.fan_in()))
            .expect("kernel is contiguous");
        let mut ymat = wm.dot(&xcol);
        let mut uc = None;
        if let Some(l) = self.delta_active() {
            let u = l.a.dot(&xcol);
            let mut dy = l.b.dot(&u);
            dy *= l.scale;
            ymat += &dy;
            uc = Some(u);
        }
        if let Some(b) = &self.bias {
            ymat += &b.view().insert_axis(Axis(1));
        }
        let y = ymat
            .into_shape_with_order((self.c_out(), oh, ow))
            .expect("output is contiguous");
        Ok((y, ConvCtx { xcol, uc, in_hw: (h, w), out_hw: (oh, ow) }))
    }

    pub fn backward(&self, dy: &Array3<f32>, ctx: &ConvCtx, want_base: bool, want_lora: bool) -> ConvBwd {
        let (c_out, oh, ow) = dy.dim();
        debug_assert_eq!(c_out, self.c_out());
        let l_cols = oh * ow;
        let dym = dy.to_shape((c_out, l_cols)).expect("contiguous grad");
        let wm = self
            .weight
            .to_shape((self.c_out(), self.fan_in()))
            .expect("kernel is contiguous");

        let db = (want_base && self.bias.is_some()).then(|| dym.sum_axis(Axis(1)));
        let dw = want_base.then(|| {
            dym.dot(&ctx.xcol.t())
                .into_shape_with_order(self.weight.raw_dim())
                .expect("kernel shape")
        });

        let mut dxcol = wm.t().dot(&dym);
        let mut da = None;
        let mut dbf = None;
        if let Some(l) = self.delta_active() {
            let uc = ctx.uc.as_ref().expect("cached uc for wrapped adapter");
            let mut duc = l.b.t().dot(&dym);
            duc *= l.scale;
            dxcol += &l.a.t().dot(&duc);
            if want_lora {
                let mut g_b = dym.dot(&uc.t());
                g_b *= l.scale;
                dbf = Some(g_b);
                da = Some(duc.dot(&ctx.xcol.t()));
            }
        }
        let (h, w) = ctx.in_hw;
        let dx = col2im(&dxcol, self.c_in(), h, w, self.kernel(), self.stride, self.padding);
        ConvBwd { dx, dw, db, da, dbf }
    }

    pub fn wrap_lora(&mut self, cfg: &LoraConfig, label: &str) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::state(format!("layer '{label}' is already injected")));
        }
        self.lora = Some(LoraFactors::new(self.fan_in(), self.c_out(), cfg, label)?);
        Ok(())
    }

    /// Fold `s·reshape(B·A)` into the kernel; returns the merged kernel.
    pub fn merge_lora(&mut self) -> Result<Array4<f32>> {
        let fan_in = self.fan_in();
        let c_out = self.c_out();
        let l = self.lora.as_mut().ok_or_else(|| Error::state("no adapter to merge"))?;
        if l.state != MergeState::Wrapped {
            return Err(Error::state("adapter already merged"));
        }
        let delta = l.delta();
        {
            let mut wm = self
                .weight
                .view_mut()
                .into_shape_with_order((c_out, fan_in))
                .expect("kernel is contiguous");
            wm += &delta;
        }
        l.cached_delta = Some(delta);
        l.state = MergeState::Merged;
        Ok(self.weight.clone())
    }

    pub fn unmerge_lora(&mut self) -> Result<()> {
        let fan_in = self.fan_in();
        let c_out = self.c_out();
        let l = self.lora.as_mut().ok_or_else(|| Error::state("no adapter to unmerge"))?;
        if l.state != MergeState::Merged {
            return Err(Error::state("adapter is not merged"));
        }
        let delta = l.cached_delta.take().expect("merged adapter retains its delta");
        let mut wm = self
            .weight
            .view_mut()
            .into_shape_with_order((c_out, fan_in))
            .expect("kernel is contiguous");
        wm -= &delta;
        l.state = MergeState::Wrapped;
        Ok(())
    }

    pub fn strip_lora(&mut self) -> Result<()> {
        match &self.lora {
            Some(l) if l.state == MergeState::Merged => {
                self.lora = None;
                Ok(())
            }
            Some(_) => Err(Error::state("cannot strip an unmerged adapter")),
            None => Ok(()),
        }
    }
}

/// Per-token LayerNorm over the channel axis of `tokens × dim`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
    pub pid_g: ParamId,
    pub pid_beta: ParamId,
}

pub struct LnCtx {
    pub xhat: Array2<f32>,
    pub inv_std: Array1<f32>,
}

pub struct LnBwd {
    pub dx: Array2<f32>,
    pub dgamma: Option<Array1<f32>>,
    pub dbeta: Option<Array1<f32>>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-5,
            pid_g: UNSET,
            pid_beta: UNSET,
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        self.forward_t(x).0
    }

    pub fn forward_t(&self, x: &Array2<f32>) -> (Array2<f32>, LnCtx) {
        let d = x.ncols() as f32;
        let mut xhat = x.clone();
        let mut inv_std = Array1::<f32>::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f32>() / d;
            *inv = 1.0 / (var + self.eps).sqrt();
            row *= *inv;
        }
        let mut y = xhat.clone();
        y *= &self.gamma.view().insert_axis(Axis(0));
        y += &self.beta.view().insert_axis(Axis(0));
        (y, LnCtx { xhat, inv_std })
    }

    pub fn backward(&self, dy: &Array2<f32>, ctx: &LnCtx, want_params: bool) -> LnBwd {
        let d = dy.ncols() as f32;
        let dxhat = dy * &self.gamma.view().insert_axis(Axis(0));
        let mut dx = Array2::<f32>::zeros(dy.raw_dim());
        for ((mut dxrow, dxhat_row), (xhat_row, inv)) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(ctx.xhat.rows().into_iter().zip(ctx.inv_std.iter()))
        {
            let m1 = dxhat_row.sum() / d;
            let m2 = dxhat_row
                .iter()
                .zip(xhat_row.iter())
                .map(|(a, b)| a * b)
                .sum::<f32>()
                / d;
            for ((dxv, &dxh), &xh) in dxrow.iter_mut().zip(dxhat_row.iter()).zip(xhat_row.iter()) {
                *dxv = inv * (dxh - m1 - xh * m2);
            }
        }
        let dgamma = want_params.then(|| (dy * &ctx.xhat).sum_axis(Axis(0)));
        let dbeta = want_params.then(|| dy.sum_axis(Axis(0)));
        LnBwd { dx, dgamma, dbeta }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, stream_rng};

    fn randn2(shape: (usize, usize), seed: u64) -> Array2<f32> {
        let mut a = Array2::zeros(shape);
        fill_normal(&mut a.view_mut(), 1.0, &mut stream_rng(seed, 0));
        a
    }

    fn randn3(shape: (usize, usize, usize), seed: u64) -> Array3<f32> {
        let mut a = Array3::zeros(shape);
        fill_normal(&mut a.view_mut(), 1.0, &mut stream_rng(seed, 0));
        a
    }

    /// loss = 0.5 * sum(y^2), so dloss/dy = y.
    fn sq_loss2(y: &Array2<f32>) -> f32 {
        0.5 * y.iter().map(|v| v * v).sum::<f32>()
    }

    fn sq_loss3(y: &Array3<f32>) -> f32 {
        0.5 * y.iter().map(|v| v * v).sum::<f32>()
    }

    fn assert_close(analytic: &[f32], numeric: &[f32], tol: f32, what: &str) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            // gradients below the f32 central-difference resolution are
            // auto-passed; comparing noise to noise says nothing
            if a.abs() < 5e-3 && n.abs() < 5e-3 {
                continue;
            }
            let denom = a.abs().max(n.abs());
            assert!(
                (a - n).abs() / denom < tol,
                "{what}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut layer = Linear::new(randn2((3, 4), 1), Some(Array1::from_vec(vec![0.1, -0.2, 0.3])));
        layer.wrap_lora(&LoraConfig { rank: 2, seed: 5, ..Default::default() }, "t").unwrap();
        // give B nonzero values so its gradient path is generic
        if let Some(l) = layer.lora.as_mut() {
            fill_normal(&mut l.b.view_mut(), 0.5, &mut stream_rng(9, 0));
        }
        let x = randn2((5, 4), 2);
        let (y, ctx) = layer.forward_t(&x).unwrap();
        let bwd = layer.backward(&y.clone(), &ctx, true, true);

        let eps = 1e-2f32;
        // dW
        let mut fd_w = vec![];
        for idx in 0..layer.weight.len() {
            let mut plus = layer.clone();
            plus.weight.as_slice_mut().unwrap()[idx] += eps;
            let mut minus = layer.clone();
            minus.weight.as_slice_mut().unwrap()[idx] -= eps;
            fd_w.push(
                (sq_loss2(&plus.forward(&x).unwrap()) - sq_loss2(&minus.forward(&x).unwrap()))
                    / (2.0 * eps),
            );
        }
        assert_close(bwd.dw.as_ref().unwrap().as_slice().unwrap(), &fd_w, 2e-2, "dw");

        // dA, dB
        let mut fd_a = vec![];
        for idx in 0..layer.lora.as_ref().unwrap().a.len() {
            let mut plus = layer.clone();
            plus.lora.as_mut().unwrap().a.as_slice_mut().unwrap()[idx] += eps;
            let mut minus = layer.clone();
            minus.lora.as_mut().unwrap().a.as_slice_mut().unwrap()[idx] -= eps;
            fd_a.push(
                (sq_loss2(&plus.forward(&x).unwrap()) - sq_loss2(&minus.forward(&x).unwrap()))
                    / (2.0 * eps),
            );
        }
        assert_close(bwd.da.as_ref().unwrap().as_slice().unwrap(), &fd_a, 2e-2, "da");

        let mut fd_b = vec![];
        for idx in 0..layer.lora.as_ref().unwrap().b.len() {
            let mut plus = layer.clone();
            plus.lora.as_mut().unwrap().b.as_slice_mut().unwrap()[idx] += eps;
            let mut minus = layer.clone();
            minus.lora.as_mut().unwrap().b.as_slice_mut().unwrap()[idx] -= eps;
            fd_b.push(
                (sq_loss2(&plus.forward(&x).unwrap()) - sq_loss2(&minus.forward(&x).unwrap()))
                    / (2.0 * eps),
            );
        }
        assert_close(bwd.dbf.as_ref().unwrap().as_slice().unwrap(), &fd_b, 2e-2, "dbf");

        // dx
        let mut fd_x = vec![];
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            fd_x.push(
                (sq_loss2(&layer.forward(&xp).unwrap()) - sq_loss2(&layer.forward(&xm).unwrap()))
                    / (2.0 * eps),
            );
        }
        assert_close(bwd.dx.as_slice().unwrap(), &fd_x, 2e-2, "dx");
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut layer = Conv2d::new(
            (randn2((2 * 2 * 9, 1), 3) * 0.25)
                .into_shape_with_order((2, 2, 3, 3))
                .unwrap(),
            Some(Array1::from_vec(vec![0.05, -0.05])),
            1,
            1,
        );
        layer.wrap_lora(&LoraConfig { rank: 2, seed: 7, ..Default::default() }, "c").unwrap();
        if let Some(l) = layer.lora.as_mut() {
            fill_normal(&mut l.b.view_mut(), 0.5, &mut stream_rng(13, 0));
        }
        let x = randn3((2, 5, 5), 4);
        let (y, ctx) = layer.forward_t(&x).unwrap();
        let bwd = layer.backward(&y.clone(), &ctx, true, true);

        let eps = 1e-2f32;
        let mut fd_w = vec![];
        for idx in 0..layer.weight.len() {
            let mut plus = layer.clone();
            plus.weight.as_slice_mut().unwrap()[idx] += eps;
            let mut minus = layer.clone();
            minus.weight.as_slice_mut().unwrap()[idx] -= eps;
            fd_w.push(
                (sq_loss3(&plus.forward(&x).unwrap()) - sq_loss3(&minus.forward(&x).unwrap()))
                    / (2.0 * eps),
            );
        }
        assert_close(bwd.dw.as_ref().unwrap().as_slice().unwrap(), &fd_w, 2e-2, "conv dw");

        let mut fd_a = vec![];
        for idx in 0..layer.lora.as_ref().unwrap().a.len() {
            let mut plus = layer.clone();
            plus.lora.as_mut().unwrap().a.as_slice_mut().unwrap()[idx] += eps;
            let mut minus = layer.clone();
            minus.lora.as_mut().unwrap().a.as_slice_mut().unwrap()[idx] -= eps;
            fd_a.push(
                (sq_loss3(&plus.forward(&x).unwrap()) - sq_loss3(&minus.forward(&x).unwrap()))
                    / (2.0 * eps),
            );
        }
        assert_close(bwd.da.as_ref().unwrap().as_slice().unwrap(), &fd_a, 2e-2, "conv da");

        let mut fd_x = vec![];
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            fd_x.push(
                (sq_loss3(&layer.forward(&xp).unwrap()) - sq_loss3(&layer.forward(&xm).unwrap()))
                    / (2.0 * eps),
            );
        }
        assert_close(bwd.dx.as_slice().unwrap(), &fd_x, 2e-2, "conv dx");
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut ln = LayerNorm::new(6);
        fill_normal(&mut ln.gamma.view_mut(), 0.3, &mut stream_rng(21, 0));
        ln.gamma += 1.0;
        let x = randn2((4, 6), 22);
        let (y, ctx) = ln.forward_t(&x);
        let bwd = ln.backward(&y.clone(), &ctx, true);

        let eps = 1e-2f32;
        let mut fd_x = vec![];
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            fd_x.push((sq_loss2(&ln.forward(&xp)) - sq_loss2(&ln.forward(&xm))) / (2.0 * eps));
        }
        assert_close(bwd.dx.as_slice().unwrap(), &fd_x, 3e-2, "ln dx");

        let mut fd_g = vec![];
        for idx in 0..ln.gamma.len() {
            let mut lp = ln.clone();
            lp.gamma[idx] += eps;
            let mut lm = ln.clone();
            lm.gamma[idx] -= eps;
            fd_g.push((sq_loss2(&lp.forward(&x)) - sq_loss2(&lm.forward(&x))) / (2.0 * eps));
        }
        assert_close(bwd.dgamma.as_ref().unwrap().as_slice().unwrap(), &fd_g, 2e-2, "ln dgamma");
    }

    #[test]
    fn zero_b_keeps_linear_forward_identical() {
        let base = Linear::new(randn2((4, 4), 31), Some(Array1::from_elem(4, 0.25)));
        let mut adapted = base.clone();
        adapted.wrap_lora(&LoraConfig::default(), "id").unwrap();
        let x = randn2((7, 4), 32);
        let yb = base.forward(&x).unwrap();
        let ya = adapted.forward(&x).unwrap();
        assert_eq!(yb, ya);
    }

    #[test]
    fn zero_b_keeps_conv_forward_identical() {
        let w = randn2((3 * 3 * 9, 1), 41).into_shape_with_order((3, 3, 3, 3)).unwrap();
        let base = Conv2d::new(w, Some(Array1::from_elem(3, -0.1)), 1, 1);
        let mut adapted = base.clone();
        adapted.wrap_lora(&LoraConfig::default(), "id").unwrap();
        let x = randn3((3, 6, 6), 42);
        assert_eq!(base.forward(&x).unwrap(), adapted.forward(&x).unwrap());
    }

    #[test]
    fn merge_unmerge_round_trip_is_exact() {
        let mut layer = Linear::new(randn2((3, 5), 51), None);
        layer.wrap_lora(&LoraConfig { rank: 2, ..Default::default() }, "m").unwrap();
        fill_normal(&mut layer.lora.as_mut().unwrap().b.view_mut(), 0.7, &mut stream_rng(52, 0));
        let w0 = layer.weight.clone();
        let x = randn2((4, 5), 53);
        let y_wrapped = layer.forward(&x).unwrap();

        let merged = layer.merge_lora().unwrap();
        assert_ne!(merged, w0);
        let y_merged = layer.forward(&x).unwrap();
        for (a, b) in y_wrapped.iter().zip(y_merged.iter()) {
            assert!((a - b).abs() / (a.abs() + 1e-6) < 1e-5);
        }
        assert!(layer.merge_lora().is_err(), "double merge must fail");

        layer.unmerge_lora().unwrap();
        assert_eq!(layer.weight, w0, "cached-delta unmerge restores bits");
        assert!(layer.unmerge_lora().is_err(), "double unmerge must fail");

        // re-merge reproduces the same merged weight
        let merged2 = layer.merge_lora().unwrap();
        assert_eq!(merged, merged2);
    }
}
