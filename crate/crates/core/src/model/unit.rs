//! One PS-RNN unit: a horizontal and a vertical GRU sweep over the planes of
//! a square feature tensor, merged by a fusion convolution.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::layers::{
    gru_backward, gru_sequence, ConvCache, ConvLayer, ConvLayerGrads, GateActivation, GruGrads,
    GruParams, GruStep,
};
use crate::tensor::{
    concat_channels, plane_into, scatter_plane, split_channels, Axis, ConvSpec, Real, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct PsRnnUnit<T = f32> {
    /// Spatial extent `n` of the square feature tensor the unit consumes.
    pub extent: usize,
    pub in_channels: usize,
    /// Hidden channels per spatial position; the GRU state has `extent * cells` entries.
    pub cells: usize,
    pub gru_h: GruParams<T>,
    pub gru_v: GruParams<T>,
    pub fusion: ConvLayer<T>,
}

#[derive(Clone, Debug)]
pub struct UnitCache<T = f32> {
    pub steps_h: Vec<GruStep<T>>,
    pub steps_v: Vec<GruStep<T>>,
    pub fusion: ConvCache<T>,
}

#[derive(Clone, Debug)]
pub struct UnitGrads {
    pub gru_h: GruGrads,
    pub gru_v: GruGrads,
    pub fusion: ConvLayerGrads,
}

impl UnitGrads {
    pub fn into_tensors(self) -> Vec<Tensor<f64>> {
        let mut v: Vec<Tensor<f64>> = Vec::with_capacity(17);
        for g in [self.gru_h, self.gru_v] {
            v.extend([g.wz, g.uz, g.wr, g.ur, g.w, g.u, g.b]);
        }
        v.extend(self.fusion.into_tensors());
        v
    }
}

impl<T: Real> PsRnnUnit<T> {
    pub fn zeros(extent: usize, in_channels: usize, cells: usize, fusion_kernel: usize) -> Result<Self> {
        let (i, h) = (extent * in_channels, extent * cells);
        Ok(Self {
            extent,
            in_channels,
            cells,
            gru_h: GruParams::zeros(i, h)?,
            gru_v: GruParams::zeros(i, h)?,
            fusion: ConvLayer::zeros(ConvSpec::same(fusion_kernel, 2 * cells, cells), false, true)?,
        })
    }

    pub fn init(
        extent: usize,
        in_channels: usize,
        cells: usize,
        fusion_kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (i, h) = (extent * in_channels, extent * cells);
        Ok(Self {
            extent,
            in_channels,
            cells,
            gru_h: GruParams::init(i, h, rng)?,
            gru_v: GruParams::init(i, h, rng)?,
            fusion: ConvLayer::init(ConvSpec::same(fusion_kernel, 2 * cells, cells), false, true, rng)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.fusion.out_channels()
    }

    fn check_input(&self, feat: &Tensor<T>) -> Result<()> {
        let (h, w, c) = feat.hwc()?;
        if h != w || h != self.extent || c != self.in_channels {
            return shape_err(format!(
                "unit expects ({0}, {0}, {1}), got {2:?}",
                self.extent,
                self.in_channels,
                feat.shape()
            ));
        }
        Ok(())
    }

    fn sweep(&self, params: &GruParams<T>, feat: &Tensor<T>, axis: Axis, act: GateActivation) -> Result<Vec<GruStep<T>>> {
        let (n, c) = (self.extent, self.in_channels);
        let h0 = vec![T::default(); n * self.cells];
        let planes = (0..n).map(|t| {
            let mut x = vec![T::default(); n * c];
            plane_into(feat.data(), n, c, axis, t, &mut x);
            x
        });
        gru_sequence(params, planes, &h0, act)
    }

    fn stack(&self, steps: &[GruStep<T>], axis: Axis) -> Result<Tensor<T>> {
        let (n, k) = (self.extent, self.cells);
        let mut data = vec![T::default(); n * n * k];
        for (t, s) in steps.iter().enumerate() {
            scatter_plane(&mut data, n, k, axis, t, &s.h);
        }
        Tensor::new(&[n, n, k], data)
    }

    /// Hidden sequence of the horizontal sweep, stacked to `(n, n, cells)`.
    pub fn horizontal_states(&self, feat: &Tensor<T>, act: GateActivation) -> Result<Tensor<T>> {
        self.check_input(feat)?;
        let steps = self.sweep(&self.gru_h, feat, Axis::Horizontal, act)?;
        self.stack(&steps, Axis::Horizontal)
    }

    /// Hidden sequence of the vertical sweep, stacked to `(n, n, cells)`.
    pub fn vertical_states(&self, feat: &Tensor<T>, act: GateActivation) -> Result<Tensor<T>> {
        self.check_input(feat)?;
        let steps = self.sweep(&self.gru_v, feat, Axis::Vertical, act)?;
        self.stack(&steps, Axis::Vertical)
    }

    pub fn forward(&self, feat: &Tensor<T>, act: GateActivation) -> Result<(Tensor<T>, UnitCache<T>)> {
        self.check_input(feat)?;
        let steps_h = self.sweep(&self.gru_h, feat, Axis::Horizontal, act)?;
        let steps_v = self.sweep(&self.gru_v, feat, Axis::Vertical, act)?;
        let merged = concat_channels(
            &self.stack(&steps_h, Axis::Horizontal)?,
            &self.stack(&steps_v, Axis::Vertical)?,
        )?;
        let (out, fusion) = self.fusion.forward(&merged)?;
        Ok((out, UnitCache { steps_h, steps_v, fusion }))
    }

    pub fn backward(
        &self,
        cache: &UnitCache<T>,
        grad_out: &Tensor<T>,
        act: GateActivation,
    ) -> Result<(Tensor<T>, UnitGrads)> {
        let (n, c, k) = (self.extent, self.in_channels, self.cells);
        if cache.steps_h.len() != n || cache.steps_v.len() != n {
            return shape_err("unit cache does not match the unit extent");
        }
        let (grad_merged, fusion) = self.fusion.backward(&cache.fusion, grad_out)?;
        let (gh, gv) = split_channels(&grad_merged, k)?;
        let mut grad_in = vec![0.0f64; n * n * c];
        let mut run = |params: &GruParams<T>, steps: &[GruStep<T>], g: &Tensor<T>, axis: Axis| -> Result<GruGrads> {
            let per_step: Vec<Vec<T>> = (0..n)
                .map(|t| {
                    let mut p = vec![T::default(); n * k];
                    plane_into(g.data(), n, k, axis, t, &mut p);
                    p
                })
                .collect();
            let back = gru_backward(steps, params, act, None, Some(&per_step))?;
            let mut plane = vec![0.0f64; n * c];
            for (t, gx) in back.x.iter().enumerate() {
                for (p, v) in plane.iter_mut().zip(gx) {
                    *p = v.to_f64();
                }
                match axis {
                    Axis::Horizontal => {
                        for (d, s) in grad_in[t * n * c..(t + 1) * n * c].iter_mut().zip(&plane) {
                            *d += s;
                        }
                    }
                    Axis::Vertical => {
                        for y in 0..n {
                            let o = (y * n + t) * c;
                            for (d, s) in grad_in[o..o + c].iter_mut().zip(&plane[y * c..(y + 1) * c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Ok(back.params)
        };
        let gru_h = run(&self.gru_h, &cache.steps_h, &gh, Axis::Horizontal)?;
        let gru_v = run(&self.gru_v, &cache.steps_v, &gv, Axis::Vertical)?;
        let grad_in = Tensor::new(&[n, n, c], grad_in.into_iter().map(T::from_f64).collect())?;
        Ok((grad_in, UnitGrads { gru_h, gru_v, fusion }))
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (dir, g) in [("gru_h", &self.gru_h), ("gru_v", &self.gru_v)] {
            v.extend(g.tensors().into_iter().map(|(n, t)| (format!("{dir}.{n}"), t)));
        }
        v.extend(self.fusion.tensors().into_iter().map(|(n, t)| (format!("fusion.{n}"), t)));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        for (dir, g) in [("gru_h", &mut self.gru_h), ("gru_v", &mut self.gru_v)] {
            v.extend(g.tensors_mut().into_iter().map(|(n, t)| (format!("{dir}.{n}"), t)));
        }
        v.extend(self.fusion.tensors_mut().into_iter().map(|(n, t)| (format!("fusion.{n}"), t)));
        v
    }
}
