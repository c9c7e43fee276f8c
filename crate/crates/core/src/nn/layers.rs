use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, ParamId, ParamStore};
use crate::error::Result;
use crate::ops::ConvSpec;
use crate::tensor::{Scalar, Tensor};

/// Weight initialisation state shared while a network is being built.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
    /// Multiplier applied after Kaiming fan-in initialisation.
    pub weight_scale: f64,
}

impl<'r, R: Rng> Init<'r, R> {
    pub fn new(rng: &'r mut R, weight_scale: f64) -> Self {
        Init { rng, weight_scale }
    }

    /// Kaiming fan-in normal: `N(0, 2 / fan_in)`, then scaled.
    fn kaiming<T: Scalar>(&mut self, c_out: usize, c_in: usize, kh: usize, kw: usize) -> Tensor<T> {
        let std = (2.0 / (c_in * kh * kw) as f64).sqrt() * self.weight_scale;
        Tensor::from_fn([c_out, c_in, kh, kw], |_, _, _, _| {
            let z: f64 = self.rng.sample(StandardNormal);
            T::of_f64(z * std)
        })
    }
}

/// A convolution with bias. Parameters are registered as `<name>.weight`
/// and `<name>.bias`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub spec: ConvSpec,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        spec: ConvSpec,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let w = init.kaiming::<T>(c_out, c_in, kh, kw);
        let weight = store.add(format!("{name}.weight"), &[c_out, c_in, kh, kw], w)?;
        let bias = store.add(format!("{name}.bias"), &[c_out], Tensor::zeros([c_out, 1, 1, 1]))?;
        Ok(ConvLayer {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            spec,
        })
    }

    /// Stride-1 convolution with spatial-size-preserving zero padding.
    #[allow(clippy::too_many_arguments)]
    pub fn same<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        dilation: usize,
    ) -> Result<Self> {
        let spec = ConvSpec::same(kernel.0, kernel.1, (dilation, dilation));
        Self::new(store, init, name, c_in, c_out, kernel, spec)
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, &w, Some(&b), &self.spec)
    }

    /// Same as [`forward`](Self::forward) but with the weights entering the
    /// graph as constants.
    pub fn forward_frozen<T: Scalar, G: Graph<T>>(
        &self,
        g: &G,
        store: &ParamStore<T>,
        x: &G::Value,
    ) -> Result<G::Value> {
        let w = g.constant(store.value(self.weight).clone());
        let b = g.constant(store.value(self.bias).clone());
        g.conv2d(x, &w, Some(&b), &self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.kernel.0 * self.kernel.1 + self.c_out
    }
}
