//! Gated recurrent unit with explicit backpropagation through time.
//!
//! ```text
//! z_t = g(Wz x_t + Uz h_{t-1})
//! r_t = g(Wr x_t + Ur h_{t-1})
//! h_t = z_t * h_{t-1} + (1 - z_t) * tanh(W x_t + U (r_t * h_{t-1}) + b)
//! ```
//!
//! `g` is the gate activation (sigmoid by default). Gates carry no bias.

use rand::Rng;

use super::glorot;
use crate::error::{shape_err, Error, Result};
use crate::kernels::{gemm, matvec, transpose};
use crate::tensor::{axpy, sigmoid, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateActivation {
    #[default]
    Sigmoid,
    Tanh,
}

impl GateActivation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn slope(self, y: f64) -> f64 {
        match self {
            Self::Sigmoid => y * (1.0 - y),
            Self::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            _ => Err(Error::Config(format!("unknown gate activation {s:?}"))),
        }
    }
}

/// Weights of one GRU. Input matrices are `(hidden, input)`, recurrent
/// matrices `(hidden, hidden)`, `b` is `(hidden)`.
///
/// The same struct instantiated with `f64` holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T = f32> {
    pub wz: Tensor<T>,
    pub uz: Tensor<T>,
    pub wr: Tensor<T>,
    pub ur: Tensor<T>,
    pub w: Tensor<T>,
    pub u: Tensor<T>,
    pub b: Tensor<T>,
}

pub type GruGrads = GruParams<f64>;

impl<T: Real> GruParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Result<Self> {
        let wi = || Tensor::zeros(&[hidden, input]);
        let wh = || Tensor::zeros(&[hidden, hidden]);
        Ok(Self {
            wz: wi()?,
            uz: wh()?,
            wr: wi()?,
            ur: wh()?,
            w: wi()?,
            u: wh()?,
            b: Tensor::zeros(&[hidden])?,
        })
    }

    /// Glorot-uniform matrices, zero bias.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(input, hidden)?;
        for t in [&mut p.wz, &mut p.uz, &mut p.wr, &mut p.ur, &mut p.w, &mut p.u] {
            let (fan_out, fan_in) = (t.shape()[0], t.shape()[1]);
            glorot(t, fan_in, fan_out, rng);
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.wz.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.wz.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden_dim(), self.input_dim());
        for (name, t, want) in [
            ("wz", &self.wz, [h, i]),
            ("wr", &self.wr, [h, i]),
            ("w", &self.w, [h, i]),
            ("uz", &self.uz, [h, h]),
            ("ur", &self.ur, [h, h]),
            ("u", &self.u, [h, h]),
        ] {
            if t.shape() != want {
                return shape_err(format!("gru {name} is {:?}, expected {want:?}", t.shape()));
            }
        }
        if self.b.shape() != [h] {
            return shape_err(format!("gru bias is {:?}, expected [{h}]", self.b.shape()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 7] {
        [
            ("wz", &self.wz),
            ("uz", &self.uz),
            ("wr", &self.wr),
            ("ur", &self.ur),
            ("w", &self.w),
            ("u", &self.u),
            ("b", &self.b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 7] {
        [
            ("wz", &mut self.wz),
            ("uz", &mut self.uz),
            ("wr", &mut self.wr),
            ("ur", &mut self.ur),
            ("w", &mut self.w),
            ("u", &mut self.u),
            ("b", &mut self.b),
        ]
    }
}

/// One recorded recurrence step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GruStep<T = f32> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub z: Vec<T>,
    pub r: Vec<T>,
    /// `tanh(W x + U (r * h_prev) + b)`.
    pub candidate: Vec<T>,
    pub h: Vec<T>,
}

fn check_dims<T: Real>(params: &GruParams<T>, x: &[T], h_prev: &[T]) -> Result<()> {
    let (hd, id) = (params.hidden_dim(), params.input_dim());
    if x.len() != id || h_prev.len() != hd {
        return shape_err(format!(
            "gru step got x[{}], h[{}]; expects x[{id}], h[{hd}]",
            x.len(),
            h_prev.len()
        ));
    }
    Ok(())
}

pub fn gru_forward<T: Real>(
    params: &GruParams<T>,
    x: &[T],
    h_prev: &[T],
    act: GateActivation,
) -> Result<GruStep<T>> {
    check_dims(params, x, h_prev)?;
    let mut steps = run_sequence(params, vec![x.to_vec()], h_prev, act);
    Ok(steps.pop().expect("one step"))
}

fn run_sequence<T: Real>(params: &GruParams<T>, xs: Vec<Vec<T>>, h0: &[T], act: GateActivation) -> Vec<GruStep<T>> {
    let (hd, id, n) = (params.hidden_dim(), params.input_dim(), xs.len());
    // Input projections for all steps at once: (3 hd, n).
    let xt = transpose(&xs.concat(), n, id);
    let mut proj = vec![T::default(); 3 * hd * n];
    for (m, out) in [&params.wz, &params.wr, &params.w].into_iter().zip(proj.chunks_exact_mut(hd * n)) {
        gemm(hd, n, id, m.data(), &xt, out);
    }
    let bias = params.b.data();

    let mut steps: Vec<GruStep<T>> = Vec::with_capacity(n);
    let mut zr = vec![T::default(); 2 * hd];
    let (uz, ur, u) = (params.uz.data(), params.ur.data(), params.u.data());
    let mut ac = vec![T::default(); hd];
    let mut rh = vec![T::default(); hd];
    for (t, x) in xs.into_iter().enumerate() {
        let h_prev: Vec<T> = steps.last().map_or_else(|| h0.to_vec(), |s| s.h.clone());
        zr.fill(T::default());
        matvec(hd, hd, uz, &h_prev, &mut zr[..hd]);
        matvec(hd, hd, ur, &h_prev, &mut zr[hd..]);
        let gate = |k: usize, row: usize| T::from_f64(act.apply((zr[k] + proj[row * n + t]).to_f64()));
        let z: Vec<T> = (0..hd).map(|k| gate(k, k)).collect();
        let r: Vec<T> = (0..hd).map(|k| gate(hd + k, hd + k)).collect();
        for k in 0..hd {
            rh[k] = r[k] * h_prev[k];
            ac[k] = bias[k] + proj[(2 * hd + k) * n + t];
        }
        matvec(hd, hd, u, &rh, &mut ac);
        let candidate: Vec<T> = ac.iter().map(|a| T::from_f64(a.to_f64().tanh())).collect();
        let h: Vec<T> = (0..hd)
            .map(|k| {
                let z = z[k].to_f64();
                T::from_f64(z * h_prev[k].to_f64() + (1.0 - z) * candidate[k].to_f64())
            })
            .collect();
        steps.push(GruStep {
            x,
            h_prev,
            z,
            r,
            candidate,
            h,
        });
    }
    steps
}

/// Runs the recurrence over `xs` starting from `h0`.
pub fn gru_sequence<T: Real>(
    params: &GruParams<T>,
    xs: impl IntoIterator<Item = Vec<T>>,
    h0: &[T],
    act: GateActivation,
) -> Result<Vec<GruStep<T>>> {
    let xs: Vec<Vec<T>> = xs.into_iter().collect();
    for x in &xs {
        check_dims(params, x, h0)?;
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    Ok(run_sequence(params, xs, h0, act))
}

#[derive(Clone, Debug)]
pub struct GruBackward<T = f32> {
    pub params: GruGrads,
    pub h0: Vec<T>,
    pub x: Vec<Vec<T>>,
}

/// Backpropagation through an unrolled sequence.
///
/// `grad_h_final` is added to the gradient of the last hidden state;
/// `grads_h_per_step`, when given, holds one upstream gradient per step.
pub fn gru_backward<T: Real>(
    steps: &[GruStep<T>],
    params: &GruParams<T>,
    act: GateActivation,
    grad_h_final: Option<&[T]>,
    grads_h_per_step: Option<&[Vec<T>]>,
) -> Result<GruBackward<T>> {
    if steps.is_empty() {
        return Err(Error::Usage("gru_backward needs at least one step".into()));
    }
    let (hd, id) = (params.hidden_dim(), params.input_dim());
    if let Some(per) = grads_h_per_step {
        if per.len() != steps.len() || per.iter().any(|g| g.len() != hd) {
            return shape_err("per-step hidden gradients do not match the sequence");
        }
    }
    if grad_h_final.is_some_and(|g| g.len() != hd) {
        return shape_err("final hidden gradient has the wrong length");
    }

    let n = steps.len();
    let zero = T::default();
    // Step-major gate gradients, consumed after the recurrence.
    let mut dz = vec![zero; n * hd];
    let mut dr = vec![zero; n * hd];
    let mut dc = vec![zero; n * hd];
    let mut carry = grad_h_final.map_or_else(|| vec![zero; hd], <[T]>::to_vec);
    let mut drh = vec![zero; hd];
    for (t, st) in steps.iter().enumerate().rev() {
        if let Some(per) = grads_h_per_step {
            for (c, &g) in carry.iter_mut().zip(&per[t]) {
                *c = *c + g;
            }
        }
        let dh = std::mem::replace(&mut carry, vec![zero; hd]);
        let span = t * hd..(t + 1) * hd;
        let (dzt, drt, dct) = (&mut dz[span.clone()], &mut dr[span.clone()], &mut dc[span]);
        for k in 0..hd {
            let (dhk, z) = (dh[k].to_f64(), st.z[k].to_f64());
            let c = st.candidate[k].to_f64();
            let hp = st.h_prev[k].to_f64();
            dzt[k] = T::from_f64(dhk * (hp - c) * act.slope(z));
            dct[k] = T::from_f64(dhk * (1.0 - z) * (1.0 - c * c));
            carry[k] = T::from_f64(dhk * z);
        }
        drh.fill(zero);
        gemm(1, hd, hd, dct, params.u.data(), &mut drh);
        for k in 0..hd {
            let (r, d) = (st.r[k].to_f64(), drh[k].to_f64());
            drt[k] = T::from_f64(d * st.h_prev[k].to_f64() * act.slope(r));
            carry[k] = T::from_f64(carry[k].to_f64() + d * r);
        }
        gemm(1, hd, hd, dzt, params.uz.data(), &mut carry);
        gemm(1, hd, hd, drt, params.ur.data(), &mut carry);
    }

    let xs: Vec<T> = steps.iter().flat_map(|s| s.x.iter().copied()).collect();
    let hs: Vec<T> = steps.iter().flat_map(|s| s.h_prev.iter().copied()).collect();
    let rhs: Vec<T> = steps
        .iter()
        .flat_map(|s| s.r.iter().zip(&s.h_prev).map(|(&r, &h)| r * h))
        .collect();
    let (dz_t, dr_t, dc_t) = (transpose(&dz, n, hd), transpose(&dr, n, hd), transpose(&dc, n, hd));
    let product = |g: &[T], src: &[T], cols: usize| -> Result<Tensor<f64>> {
        let mut out = vec![zero; hd * cols];
        gemm(hd, cols, n, g, src, &mut out);
        Tensor::new(&[hd, cols], out.into_iter().map(|v| v.to_f64()).collect())
    };
    let mut b = vec![0.0f64; hd];
    for t in 0..n {
        axpy(&mut b, 1.0, &dc[t * hd..(t + 1) * hd]);
    }
    let grads = GruGrads {
        wz: product(&dz_t, &xs, id)?,
        uz: product(&dz_t, &hs, hd)?,
        wr: product(&dr_t, &xs, id)?,
        ur: product(&dr_t, &hs, hd)?,
        w: product(&dc_t, &xs, id)?,
        u: product(&dc_t, &rhs, hd)?,
        b: Tensor::new(&[hd], b)?,
    };
    let mut gx = vec![zero; n * id];
    gemm(n, id, hd, &dz, params.wz.data(), &mut gx);
    gemm(n, id, hd, &dr, params.wr.data(), &mut gx);
    gemm(n, id, hd, &dc, params.w.data(), &mut gx);
    Ok(GruBackward {
        params: grads,
        h0: carry,
        x: gx.chunks_exact(id).map(<[T]>::to_vec).collect(),
    })
}
