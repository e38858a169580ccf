use rand::Rng;

use super::unit::{PsRnnUnit, UnitCache};
use super::{Model, NetworkConfig};
use crate::error::{shape_err, Error, Result};
use crate::layers::{ConvCache, ConvLayer};
use crate::tensor::{ConvSpec, Real, Tensor};

/// Initial bias of the last reconstruction layer, centring fresh outputs
/// inside the clip range.
const RECON_BIAS_INIT: f64 = 0.5;

/// Preprocessing convs, cascaded PS-RNN units with a stride-2 downsample after
/// the first, and reconstruction convs whose output is clipped to `[0, 1]`.
///
/// Spatial flow for block size `N`: `2N` through preprocessing and unit 1,
/// `N` from the downsample on.
#[derive(Clone, Debug, PartialEq)]
pub struct PsRnnNetwork<T = f32> {
    pub config: NetworkConfig,
    pub preproc: Vec<ConvLayer<T>>,
    pub units: Vec<PsRnnUnit<T>>,
    pub downsample: ConvLayer<T>,
    pub recon: Vec<ConvLayer<T>>,
}

#[derive(Clone, Debug)]
pub struct FeatureCache<T = f32> {
    preproc: Vec<ConvCache<T>>,
    units: Vec<UnitCache<T>>,
    downsample: ConvCache<T>,
}

#[derive(Clone, Debug)]
pub struct NetworkCache<T = f32> {
    features: FeatureCache<T>,
    recon: Vec<ConvCache<T>>,
    /// Reconstruction output before clipping, `(N, N, 1)`.
    raw: Tensor<T>,
}

impl<T: Real> PsRnnNetwork<T> {
    fn build(config: NetworkConfig, mut make: impl FnMut(ConvSpec, bool) -> Result<ConvLayer<T>>, mut unit: impl FnMut(usize, usize, usize, usize) -> Result<PsRnnUnit<T>>) -> Result<Self> {
        config.validate()?;
        let n = config.pu_size;
        let ctx = config.context_size();
        let mut preproc = Vec::new();
        let mut c = 1;
        for &out in &config.preproc_channels {
            preproc.push(make(ConvSpec::same(3, c, out), true)?);
            c = out;
        }
        let mut units = Vec::new();
        let first = unit(ctx, c, config.unit_cells[0], config.fusion_kernel)?;
        c = first.out_channels();
        units.push(first);
        let downsample = make(ConvSpec::strided(3, 2, c, c), true)?;
        for &cells in &config.unit_cells[1..] {
            let u = unit(n, c, cells, config.fusion_kernel)?;
            c = u.out_channels();
            units.push(u);
        }
        let recon = vec![
            make(ConvSpec::same(3, c, config.recon_channels), true)?,
            make(ConvSpec::same(3, config.recon_channels, 1), false)?,
        ];
        let net = Self {
            config,
            preproc,
            units,
            downsample,
            recon,
        };
        net.check_spatial_flow()?;
        Ok(net)
    }

    /// All-zero parameters (PReLU slopes at their initial value).
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        Self::build(
            config,
            |spec, act| ConvLayer::zeros(spec, false, act),
            |e, c, k, f| PsRnnUnit::zeros(e, c, k, f),
        )
    }

    pub fn init(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        let rng = std::cell::RefCell::new(rng);
        let mut net = Self::build(
            config,
            |spec, act| ConvLayer::init(spec, false, act, &mut *rng.borrow_mut()),
            |e, c, k, f| PsRnnUnit::init(e, c, k, f, &mut *rng.borrow_mut()),
        )?;
        let last = net.recon.last_mut().expect("two recon layers");
        last.bias.data_mut().fill(T::from_f64(RECON_BIAS_INIT));
        Ok(net)
    }

    fn check_spatial_flow(&self) -> Result<()> {
        let n = self.config.pu_size;
        let mut hw = (2 * n, 2 * n);
        for l in &self.preproc {
            hw = l.output_hw(hw.0, hw.1)?;
        }
        if hw != (2 * n, 2 * n) || self.units[0].extent != 2 * n {
            return Err(Error::Config(format!("preprocessing breaks the {0}x{0} flow", 2 * n)));
        }
        hw = self.downsample.output_hw(hw.0, hw.1)?;
        if hw != (n, n) || self.units[1..].iter().any(|u| u.extent != n) {
            return Err(Error::Config(format!("downsample must yield {n}x{n}, got {hw:?}")));
        }
        for l in &self.recon {
            hw = l.output_hw(hw.0, hw.1)?;
        }
        if hw != (n, n) {
            return Err(Error::Config(format!("reconstruction yields {hw:?}, expected {n}x{n}")));
        }
        Ok(())
    }

    pub fn expect_pu_size(&self, n: usize) -> Result<()> {
        if self.config.pu_size != n {
            return Err(Error::Config(format!(
                "model predicts {0}x{0} blocks, pipeline needs {n}x{n}",
                self.config.pu_size
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    fn context_3d(&self, context: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.config.context_size();
        match context.shape() {
            [h, w] if *h == s && *w == s => context.reshape(&[s, s, 1]),
            [h, w, 1] if *h == s && *w == s => Ok(context.clone()),
            other => shape_err(format!("context {other:?}, model expects {s}x{s}")),
        }
    }

    /// Output of the last PS-RNN unit, `(N, N, c)`.
    pub fn forward_features(&self, context: &Tensor<T>) -> Result<(Tensor<T>, FeatureCache<T>)> {
        let act = self.config.gate_activation;
        let mut x = self.context_3d(context)?;
        let mut preproc = Vec::with_capacity(self.preproc.len());
        for l in &self.preproc {
            let (y, c) = l.forward(&x)?;
            preproc.push(c);
            x = y;
        }
        let mut units = Vec::with_capacity(self.units.len());
        let (y, c) = self.units[0].forward(&x, act)?;
        units.push(c);
        let (mut x, downsample) = self.downsample.forward(&y)?;
        for u in &self.units[1..] {
            let (y, c) = u.forward(&x, act)?;
            units.push(c);
            x = y;
        }
        Ok((x, FeatureCache { preproc, units, downsample }))
    }

    /// Gradients of preprocessing, units and downsample (in `trainable`
    /// order) plus the gradient with respect to the `(2N, 2N, 1)` context.
    pub fn backward_features(
        &self,
        cache: &FeatureCache<T>,
        grad_features: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<f64>>)> {
        if cache.units.len() != self.units.len() || cache.preproc.len() != self.preproc.len() {
            return Err(Error::Usage("forward cache belongs to a different network".into()));
        }
        let act = self.config.gate_activation;
        let mut unit_grads = vec![Vec::new(); self.units.len()];
        let mut g = grad_features.clone();
        for i in (1..self.units.len()).rev() {
            let (gi, ug) = self.units[i].backward(&cache.units[i], &g, act)?;
            unit_grads[i] = ug.into_tensors();
            g = gi;
        }
        let (gd, down) = self.downsample.backward(&cache.downsample, &g)?;
        let (mut g, ug) = self.units[0].backward(&cache.units[0], &gd, act)?;
        unit_grads[0] = ug.into_tensors();
        let mut pre_grads = vec![Vec::new(); self.preproc.len()];
        for i in (0..self.preproc.len()).rev() {
            let (gi, lg) = self.preproc[i].backward(&cache.preproc[i], &g)?;
            pre_grads[i] = lg.into_tensors();
            g = gi;
        }
        let mut all: Vec<Tensor<f64>> = pre_grads.into_iter().flatten().collect();
        all.extend(unit_grads.into_iter().flatten());
        all.extend(down.into_tensors());
        Ok((g, all))
    }

    /// Full backward pass; also returns the context gradient.
    pub fn backward_with_input(
        &self,
        cache: &NetworkCache<T>,
        grad_prediction: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<f64>>)> {
        let n = self.config.pu_size;
        let g = match grad_prediction.shape() {
            [h, w] | [h, w, 1] if *h == n && *w == n => grad_prediction.reshape(&[n, n, 1])?,
            other => return shape_err(format!("prediction gradient {other:?}, expected {n}x{n}")),
        };
        if cache.raw.shape() != [n, n, 1] || cache.recon.len() != self.recon.len() {
            return Err(Error::Usage("forward cache belongs to a different network".into()));
        }
        // Clipping passes gradient only where the raw output was inside [0, 1].
        let mut g = g;
        for (gv, rv) in g.data_mut().iter_mut().zip(cache.raw.data()) {
            let r = rv.to_f64();
            if !(0.0..=1.0).contains(&r) {
                *gv = T::default();
            }
        }
        let mut recon_grads = vec![Vec::new(); self.recon.len()];
        for i in (0..self.recon.len()).rev() {
            let (gi, lg) = self.recon[i].backward(&cache.recon[i], &g)?;
            recon_grads[i] = lg.into_tensors();
            g = gi;
        }
        let (gin, mut all) = self.backward_features(&cache.features, &g)?;
        all.extend(recon_grads.into_iter().flatten());
        Ok((gin, all))
    }
}

impl<T: Real> Model<T> for PsRnnNetwork<T> {
    type Cache = NetworkCache<T>;

    fn pu_size(&self) -> usize {
        self.config.pu_size
    }

    fn forward(&self, context: &Tensor<T>) -> Result<(Tensor<T>, NetworkCache<T>)> {
        let (mut x, features) = self.forward_features(context)?;
        let mut recon = Vec::with_capacity(self.recon.len());
        for l in &self.recon {
            let (y, c) = l.forward(&x)?;
            recon.push(c);
            x = y;
        }
        let n = self.config.pu_size;
        let pred = Tensor::new(
            &[n, n],
            x.data().iter().map(|v| T::from_f64(v.to_f64().clamp(0.0, 1.0))).collect(),
        )?;
        Ok((pred, NetworkCache { features, recon, raw: x }))
    }

    fn backward(&self, cache: &NetworkCache<T>, grad_prediction: &Tensor<T>) -> Result<Vec<Tensor<f64>>> {
        Ok(self.backward_with_input(cache, grad_prediction)?.1)
    }

    fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (i, l) in self.preproc.iter().enumerate() {
            v.extend(l.tensors().into_iter().map(|(n, t)| (format!("preproc.{i}.{n}"), t)));
        }
        for (i, u) in self.units.iter().enumerate() {
            v.extend(u.tensors().into_iter().map(|(n, t)| (format!("units.{i}.{n}"), t)));
        }
        v.extend(self.downsample.tensors().into_iter().map(|(n, t)| (format!("downsample.{n}"), t)));
        for (i, l) in self.recon.iter().enumerate() {
            v.extend(l.tensors().into_iter().map(|(n, t)| (format!("recon.{i}.{n}"), t)));
        }
        v
    }

    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        for (i, l) in self.preproc.iter_mut().enumerate() {
            v.extend(l.tensors_mut().into_iter().map(|(n, t)| (format!("preproc.{i}.{n}"), t)));
        }
        for (i, u) in self.units.iter_mut().enumerate() {
            v.extend(u.tensors_mut().into_iter().map(|(n, t)| (format!("units.{i}.{n}"), t)));
        }
        v.extend(self.downsample.tensors_mut().into_iter().map(|(n, t)| (format!("downsample.{n}"), t)));
        for (i, l) in self.recon.iter_mut().enumerate() {
            v.extend(l.tensors_mut().into_iter().map(|(n, t)| (format!("recon.{i}.{n}"), t)));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spatial_flow_for_every_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [4, 8] {
            let net = PsRnnNetwork::<f32>::init(NetworkConfig::with_pu_size(n), &mut rng).unwrap();
            let ctx = Tensor::full(&[2 * n, 2 * n], 0.5).unwrap();
            let (pred, _) = net.forward(&ctx).unwrap();
            assert_eq!(pred.shape(), &[n, n]);
            assert!(pred.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(net.forward(&Tensor::full(&[n, n], 0.5).unwrap()).is_err());
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::with_pu_size(6);
        assert!(PsRnnNetwork::<f32>::zeros(cfg.clone()).is_err());
        cfg.pu_size = 8;
        cfg.unit_cells.clear();
        assert!(matches!(PsRnnNetwork::<f32>::zeros(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn names_and_grads_align() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = PsRnnNetwork::<f64>::init(NetworkConfig::with_pu_size(4), &mut rng).unwrap();
        let ctx = Tensor::full(&[8, 8], 0.3).unwrap();
        let (_, cache) = net.forward(&ctx).unwrap();
        let grads = net.backward(&cache, &Tensor::full(&[4, 4], 1.0).unwrap()).unwrap();
        let params = net.trainable();
        assert_eq!(grads.len(), params.len());
        for (g, (name, p)) in grads.iter().zip(&params) {
            assert_eq!(g.shape(), p.shape(), "{name}");
        }
        let zero = net.backward(&cache, &Tensor::zeros(&[4, 4]).unwrap()).unwrap();
        assert!(zero.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn default_n8_parameter_budget() {
        let net = PsRnnNetwork::<f32>::zeros(NetworkConfig::default()).unwrap();
        // Unit 1 runs two 128-wide GRUs over 16 planes; it dominates the count.
        let unit0: usize = net.units[0].tensors().iter().map(|(_, t)| t.len()).sum();
        assert!(unit0 * 10 > net.param_count() * 8);
    }
}
