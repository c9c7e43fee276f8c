use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::nn::blocks::LEAKY_SLOPE;
use crate::nn::layers::{ConvLayer, Init};
use crate::ops::ConvSpec;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Channels of the first conv. Doubles every second conv.
    pub base_channels: usize,
    pub n_convs: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 64,
            n_convs: 8,
        }
    }
}

/// Strided conv critic producing one raw logit per image.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub convs: Vec<ConvLayer>,
    pub classifier: ConvLayer,
}

impl Discriminator {
    pub fn build<T: Scalar>(config: &DiscriminatorConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        if config.base_channels == 0 || config.n_convs == 0 {
            return Err(Error::Config(
                "discriminator needs at least one conv and one channel".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng, 1.0);
        let mut store = ParamStore::new();
        let mut convs = Vec::with_capacity(config.n_convs);
        let mut c_in = 3;
        for i in 0..config.n_convs {
            let c_out = config.base_channels << (i / 2);
            let stride = if i % 2 == 0 { 1 } else { 2 };
            let spec = ConvSpec::same(3, 3, (1, 1)).with_stride(stride);
            convs.push(ConvLayer::new(
                &mut store,
                &mut init,
                &format!("body.conv{i}"),
                c_in,
                c_out,
                (3, 3),
                spec,
            )?);
            c_in = c_out;
        }
        let classifier = ConvLayer::same(&mut store, &mut init, "classifier", c_in, 1, (1, 1), 1)?;
        Ok((
            Discriminator {
                config: config.clone(),
                convs,
                classifier,
            },
            store,
        ))
    }

    /// Logits of shape `(n, 1, 1, 1)`. No sigmoid is applied.
    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &G, store: &ParamStore<T>, img: &G::Value) -> Result<G::Value> {
        let shape = g.shape(img);
        if shape.c != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                got: shape.c,
            });
        }
        let mut x = img.clone();
        for conv in &self.convs {
            x = conv.forward(g, store, &x)?;
            x = g.leaky_relu(&x, LEAKY_SLOPE);
        }
        let pooled = g.mean_spatial(&x);
        self.classifier.forward(g, store, &pooled)
    }
}
