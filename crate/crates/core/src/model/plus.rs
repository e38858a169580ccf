//! Unified variable-block-size predictor: a pre-net resamples the `2N x 2N`
//! context to the base network's `16 x 16` input, the shared 8x8 base runs up
//! to its last PS-RNN unit, and a post-net resamples the features to `N x N`.

use rand::Rng;

use super::network::FeatureCache;
use super::{Model, NetworkConfig, PsRnnNetwork};
use crate::error::{shape_err, Error, Result};
use crate::layers::{ConvCache, ConvLayer};
use crate::tensor::{ConvSpec, Real, Tensor};

pub const PLUS_BASE_SIZE: usize = 8;

/// Hidden width of the pre/post nets. With the default base network this puts
/// the added parameters at roughly 6.4% (N=16) and 6.8% (N=32) of the base.
pub const PLUS_WIDTH: usize = 155;

#[derive(Clone, Debug, PartialEq)]
pub struct PsRnnPlus<T = f32> {
    pub base: PsRnnNetwork<T>,
    pub target: usize,
    pub width: usize,
    pub pre: Vec<ConvLayer<T>>,
    pub post: Vec<ConvLayer<T>>,
    /// When set, only the pre/post nets are trainable.
    pub freeze_base: bool,
}

#[derive(Clone, Debug)]
pub struct PlusCache<T = f32> {
    pre: Vec<ConvCache<T>>,
    base: FeatureCache<T>,
    post: Vec<ConvCache<T>>,
    raw: Tensor<T>,
}

fn deconv(k: usize, stride: usize, padding: usize, in_c: usize, out_c: usize) -> ConvSpec {
    // Adjoint orientation: the transposed layer maps out_channels -> in_channels.
    ConvSpec {
        kernel_h: k,
        kernel_w: k,
        stride,
        padding,
        in_channels: out_c,
        out_channels: in_c,
    }
}

/// `(spec, transposed, activation)` for the pre- and post-nets.
type LayerPlan = Vec<(ConvSpec, bool, bool)>;

fn layer_specs(target: usize, width: usize, feat_c: usize) -> Result<(LayerPlan, LayerPlan)> {
    if target == 4 {
        // Upsample the 8x8 context to 16x16, then shrink the 8x8 features to 4x4.
        let pre = vec![(deconv(4, 2, 1, 1, width), true, true), (ConvSpec::same(3, width, 1), false, false)];
        let post = vec![
            (ConvSpec::strided(3, 2, feat_c, width), false, true),
            (ConvSpec::same(3, width, 1), false, false),
        ];
        return Ok((pre, post));
    }
    let (s1, s2) = match target {
        16 => (2, 1),
        32 => (2, 2),
        other => return Err(Error::Config(format!("unsupported PS-RNN+ target size {other}"))),
    };
    let pre = vec![
        (ConvSpec::strided(3, s1, 1, width), false, true),
        (ConvSpec::strided(3, s2, width, 1), false, false),
    ];
    let up = |s: usize, i: usize, o: usize| if s == 2 { deconv(4, 2, 1, i, o) } else { deconv(3, 1, 1, i, o) };
    let post = vec![(up(s1, feat_c, width), true, true), (up(s2, width, 1), true, false)];
    Ok((pre, post))
}

impl<T: Real> PsRnnPlus<T> {
    fn assemble(
        base: PsRnnNetwork<T>,
        target: usize,
        width: usize,
        mut make: impl FnMut(ConvSpec, bool, bool) -> Result<ConvLayer<T>>,
    ) -> Result<Self> {
        if base.config.pu_size != PLUS_BASE_SIZE {
            return Err(Error::Config(format!(
                "PS-RNN+ needs an {PLUS_BASE_SIZE}x{PLUS_BASE_SIZE} base, got {}",
                base.config.pu_size
            )));
        }
        let feat_c = base.units.last().expect("at least one unit").out_channels();
        let (pre_specs, post_specs) = layer_specs(target, width, feat_c)?;
        let pre = pre_specs
            .into_iter()
            .map(|(s, t, a)| make(s, t, a))
            .collect::<Result<Vec<_>>>()?;
        let post = post_specs
            .into_iter()
            .map(|(s, t, a)| make(s, t, a))
            .collect::<Result<Vec<_>>>()?;
        let plus = Self {
            base,
            target,
            width,
            pre,
            post,
            freeze_base: true,
        };
        plus.check_flow()?;
        Ok(plus)
    }

    pub fn zeros(base: PsRnnNetwork<T>, target: usize, width: usize) -> Result<Self> {
        Self::assemble(base, target, width, |s, t, a| ConvLayer::zeros(s, t, a))
    }

    /// Wraps a trained 8x8 base for `target` in {4, 16, 32}.
    pub fn build(base: PsRnnNetwork<T>, target: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut plus = Self::assemble(base, target, PLUS_WIDTH, |s, t, a| ConvLayer::init(s, t, a, &mut *rng))?;
        plus.post.last_mut().expect("two post layers").bias.data_mut().fill(T::from_f64(0.5));
        Ok(plus)
    }

    fn check_flow(&self) -> Result<()> {
        let s = 2 * self.target;
        let mut hw = (s, s);
        for l in &self.pre {
            hw = l.output_hw(hw.0, hw.1)?;
        }
        let b = 2 * PLUS_BASE_SIZE;
        if hw != (b, b) {
            return Err(Error::Config(format!("pre-net yields {hw:?}, base needs {b}x{b}")));
        }
        hw = (PLUS_BASE_SIZE, PLUS_BASE_SIZE);
        for l in &self.post {
            hw = l.output_hw(hw.0, hw.1)?;
        }
        if hw != (self.target, self.target) {
            return Err(Error::Config(format!("post-net yields {hw:?}, expected {0}x{0}", self.target)));
        }
        Ok(())
    }

    /// Parameters added on top of the base network.
    pub fn overhead_params(&self) -> usize {
        self.pre
            .iter()
            .chain(&self.post)
            .flat_map(|l| l.tensors())
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn overhead_ratio(&self) -> f64 {
        self.overhead_params() as f64 / self.base.param_count() as f64
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.base.config
    }

    fn named<'a, L: 'a>(prefix: &str, layers: impl Iterator<Item = (usize, L)>, f: impl Fn(L) -> Vec<(&'static str, &'a Tensor<T>)>) -> Vec<(String, &'a Tensor<T>)> {
        layers
            .flat_map(|(i, l)| f(l).into_iter().map(move |(n, t)| (format!("{prefix}.{i}.{n}"), t)).collect::<Vec<_>>())
            .collect()
    }

    /// Every parameter, including the base's unused reconstruction layers.
    pub fn all_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Self::named("pre", self.pre.iter().enumerate(), |l| l.tensors());
        v.extend(self.base.trainable().into_iter().map(|(n, t)| (format!("base.{n}"), t)));
        v.extend(Self::named("post", self.post.iter().enumerate(), |l| l.tensors()));
        v
    }

    pub fn all_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        for (i, l) in self.pre.iter_mut().enumerate() {
            v.extend(l.tensors_mut().into_iter().map(|(n, t)| (format!("pre.{i}.{n}"), t)));
        }
        v.extend(self.base.trainable_mut().into_iter().map(|(n, t)| (format!("base.{n}"), t)));
        for (i, l) in self.post.iter_mut().enumerate() {
            v.extend(l.tensors_mut().into_iter().map(|(n, t)| (format!("post.{i}.{n}"), t)));
        }
        v
    }

    fn is_trainable(&self, name: &str) -> bool {
        match name.strip_prefix("base.") {
            Some(rest) => !self.freeze_base && !rest.starts_with("recon."),
            None => true,
        }
    }
}

impl<T: Real> Model<T> for PsRnnPlus<T> {
    type Cache = PlusCache<T>;

    fn pu_size(&self) -> usize {
        self.target
    }

    fn forward(&self, context: &Tensor<T>) -> Result<(Tensor<T>, PlusCache<T>)> {
        let s = 2 * self.target;
        let mut x = match context.shape() {
            [h, w] if *h == s && *w == s => context.reshape(&[s, s, 1])?,
            other => return shape_err(format!("context {other:?}, PS-RNN+ expects {s}x{s}")),
        };
        let mut pre = Vec::with_capacity(2);
        for l in &self.pre {
            let (y, c) = l.forward(&x)?;
            pre.push(c);
            x = y;
        }
        let (mut x, base) = self.base.forward_features(&x)?;
        let mut post = Vec::with_capacity(2);
        for l in &self.post {
            let (y, c) = l.forward(&x)?;
            post.push(c);
            x = y;
        }
        let n = self.target;
        let pred = Tensor::new(
            &[n, n],
            x.data().iter().map(|v| T::from_f64(v.to_f64().clamp(0.0, 1.0))).collect(),
        )?;
        Ok((pred, PlusCache { pre, base, post, raw: x }))
    }

    fn backward(&self, cache: &PlusCache<T>, grad_prediction: &Tensor<T>) -> Result<Vec<Tensor<f64>>> {
        let n = self.target;
        if grad_prediction.shape() != [n, n] {
            return shape_err(format!("prediction gradient {:?}, expected {n}x{n}", grad_prediction.shape()));
        }
        let mut g = grad_prediction.reshape(&[n, n, 1])?;
        for (gv, rv) in g.data_mut().iter_mut().zip(cache.raw.data()) {
            if !(0.0..=1.0).contains(&rv.to_f64()) {
                *gv = T::default();
            }
        }
        let mut post_grads = vec![Vec::new(); self.post.len()];
        for i in (0..self.post.len()).rev() {
            let (gi, lg) = self.post[i].backward(&cache.post[i], &g)?;
            post_grads[i] = lg.into_tensors();
            g = gi;
        }
        let (mut g, base_grads) = self.base.backward_features(&cache.base, &g)?;
        let mut pre_grads = vec![Vec::new(); self.pre.len()];
        for i in (0..self.pre.len()).rev() {
            let (gi, lg) = self.pre[i].backward(&cache.pre[i], &g)?;
            pre_grads[i] = lg.into_tensors();
            g = gi;
        }
        let mut out: Vec<Tensor<f64>> = pre_grads.into_iter().flatten().collect();
        if !self.freeze_base {
            out.extend(base_grads);
        }
        out.extend(post_grads.into_iter().flatten());
        Ok(out)
    }

    fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        self.all_tensors()
            .into_iter()
            .filter(|(n, _)| self.is_trainable(n))
            .collect()
    }

    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let freeze = self.freeze_base;
        self.all_tensors_mut()
            .into_iter()
            .filter(|(n, _)| match n.strip_prefix("base.") {
                Some(rest) => !freeze && !rest.starts_with("recon."),
                None => true,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_overhead() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = PsRnnNetwork::<f32>::init(NetworkConfig::default(), &mut rng).unwrap();
        for target in [4, 16, 32] {
            let plus = PsRnnPlus::build(base.clone(), target, &mut rng).unwrap();
            let ctx = Tensor::full(&[2 * target, 2 * target], 0.4).unwrap();
            let pred = plus.predict(&ctx).unwrap();
            assert_eq!(pred.shape(), &[target, target]);
            assert!(pred.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(plus.overhead_ratio() <= 0.10);
        }
        assert!(matches!(PsRnnPlus::build(base.clone(), 8, &mut rng), Err(Error::Config(_))));
        let small = PsRnnNetwork::<f32>::init(NetworkConfig::with_pu_size(4), &mut rng).unwrap();
        assert!(PsRnnPlus::build(small, 16, &mut rng).is_err());
    }

    #[test]
    fn frozen_base_exposes_only_pre_and_post() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = PsRnnNetwork::<f64>::init(NetworkConfig::default(), &mut rng).unwrap();
        let mut plus = PsRnnPlus::build(base, 16, &mut rng).unwrap();
        assert_eq!(plus.trainable_count(), plus.overhead_params());
        let ctx = Tensor::full(&[32, 32], 0.4).unwrap();
        let (_, cache) = plus.forward(&ctx).unwrap();
        let g = plus.backward(&cache, &Tensor::full(&[16, 16], 1.0).unwrap()).unwrap();
        assert_eq!(g.len(), plus.trainable().len());
        plus.freeze_base = false;
        let g = plus.backward(&cache, &Tensor::full(&[16, 16], 1.0).unwrap()).unwrap();
        let names = plus.trainable();
        assert_eq!(g.len(), names.len());
        for (g, (n, t)) in g.iter().zip(&names) {
            assert_eq!(g.shape(), t.shape(), "{n}");
        }
    }
}
