use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::nn::blocks::{Rfb, RfbLayout, Rrdb, Rrfdb, UpsampleKind, UpsampleStage, LEAKY_SLOPE};
use crate::nn::layers::{ConvLayer, Init};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_rrdb: usize,
    pub n_rrfdb: usize,
    pub rfb_per_rrfdb: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub scale: usize,
    pub upsample_plan: Vec<UpsampleKind>,
    /// Residual scale of dense blocks, RRDBs and RRFDBs.
    pub residual_scale: f64,
    /// Residual scale inside each RFB.
    pub rfb_scale: f64,
    /// Multiplier applied to conv weights after Kaiming init.
    pub init_scale: f64,
    /// Each upsample stage ends with an RFB.
    pub stage_rfb: bool,
    /// An RFB sits between the RFB trunk and the first upsample stage.
    pub pre_upsample_rfb: bool,
    pub rfb_branches: RfbLayout,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        use UpsampleKind::*;
        GeneratorConfig {
            n_rrdb: 16,
            n_rrfdb: 8,
            rfb_per_rrfdb: 5,
            base_channels: 64,
            growth: 32,
            scale: 16,
            upsample_plan: vec![Nni, Spc, Nni, Spc],
            residual_scale: 0.2,
            rfb_scale: 1.0,
            init_scale: 0.1,
            stage_rfb: true,
            pre_upsample_rfb: true,
            rfb_branches: RfbLayout::default(),
        }
    }
}

impl GeneratorConfig {
    /// Small configuration used for desk-scale runs and tests.
    pub fn tiny(scale: usize) -> Self {
        let plan = match scale {
            2 => vec![UpsampleKind::Nni],
            4 => vec![UpsampleKind::Nni, UpsampleKind::Spc],
            8 => vec![UpsampleKind::Nni, UpsampleKind::Spc, UpsampleKind::Nni],
            _ => GeneratorConfig::default().upsample_plan,
        };
        GeneratorConfig {
            n_rrdb: 1,
            n_rrfdb: 1,
            rfb_per_rrfdb: 2,
            base_channels: 8,
            growth: 4,
            scale: 1 << plan.len(),
            upsample_plan: plan,
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rrdb == 0 || self.n_rrfdb == 0 || self.rfb_per_rrfdb == 0 {
            return Err(Error::Config(
                "n_rrdb, n_rrfdb and rfb_per_rrfdb must be at least 1".into(),
            ));
        }
        if self.base_channels == 0 || self.growth == 0 {
            return Err(Error::Config("base_channels and growth must be positive".into()));
        }
        let product = 1usize
            .checked_shl(self.upsample_plan.len() as u32)
            .filter(|_| self.upsample_plan.len() < usize::BITS as usize)
            .unwrap_or(0);
        if product != self.scale {
            return Err(Error::Config(format!(
                "scale {} does not match the upsample plan ({} stages give x{})",
                self.scale,
                self.upsample_plan.len(),
                product
            )));
        }
        if !(self.residual_scale.is_finite() && self.rfb_scale.is_finite() && self.init_scale.is_finite()) {
            return Err(Error::Config("residual and init scales must be finite".into()));
        }
        self.rfb_branches.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding. Two configs share a
    /// fingerprint exactly when they describe the same architecture.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub first_conv: ConvLayer,
    pub trunk_a: Vec<Rrdb>,
    pub trunk_rfb: Vec<Rrfdb>,
    pub pre_upsample_rfb: Option<Rfb>,
    pub stages: Vec<UpsampleStage>,
    pub final_conv1: ConvLayer,
    pub final_conv2: ConvLayer,
}

impl Generator {
    /// Builds the generator and its freshly initialised parameters.
    /// Identical `(config, seed)` pairs give bitwise-identical parameters.
    pub fn build<T: Scalar>(config: &GeneratorConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng, config.init_scale);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let layout = &config.rfb_branches;

        let first_conv = ConvLayer::same(&mut store, &mut init, "first_conv", 3, c, (3, 3), 1)?;
        let trunk_a = (0..config.n_rrdb)
            .map(|i| {
                Rrdb::new(
                    &mut store,
                    &mut init,
                    &format!("trunk_a.rrdb{i:02}"),
                    c,
                    config.growth,
                    config.residual_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let trunk_rfb = (0..config.n_rrfdb)
            .map(|i| {
                Rrfdb::new(
                    &mut store,
                    &mut init,
                    &format!("trunk_rfb.rrfdb{i:02}"),
                    c,
                    config.growth,
                    config.rfb_per_rrfdb,
                    layout,
                    config.rfb_scale,
                    config.residual_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pre_upsample_rfb = if config.pre_upsample_rfb {
            Some(Rfb::new(
                &mut store,
                &mut init,
                "pre_upsample_rfb",
                c,
                c,
                layout,
                config.rfb_scale,
            )?)
        } else {
            None
        };
        let stages = config
            .upsample_plan
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                UpsampleStage::new(
                    &mut store,
                    &mut init,
                    &format!("upsample.stage{i}"),
                    kind,
                    c,
                    config.stage_rfb,
                    layout,
                    config.rfb_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_conv1 = ConvLayer::same(&mut store, &mut init, "final_conv1", c, c, (3, 3), 1)?;
        let final_conv2 = ConvLayer::same(&mut store, &mut init, "final_conv2", c, 3, (3, 3), 1)?;

        let generator = Generator {
            config: config.clone(),
            first_conv,
            trunk_a,
            trunk_rfb,
            pre_upsample_rfb,
            stages,
            final_conv1,
            final_conv2,
        };
        Ok((generator, store))
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &G, store: &ParamStore<T>, lr: &G::Value) -> Result<G::Value> {
        let shape = g.shape(lr);
        if shape.c != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                got: shape.c,
            });
        }
        let mut x = self.first_conv.forward(g, store, lr)?;
        for block in &self.trunk_a {
            x = block.forward(g, store, &x)?;
        }
        for block in &self.trunk_rfb {
            x = block.forward(g, store, &x)?;
        }
        if let Some(rfb) = &self.pre_upsample_rfb {
            x = rfb.forward(g, store, &x)?;
        }
        for stage in &self.stages {
            x = stage.forward(g, store, &x)?;
        }
        let x = self.final_conv1.forward(g, store, &x)?;
        let x = g.leaky_relu(&x, LEAKY_SLOPE);
        self.final_conv2.forward(g, store, &x)
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }
}

/// Exact number of scalar parameters held by a store.
pub fn count_parameters<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.num_scalars()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Eval, Tape};
    use crate::tensor::Tensor;

    #[test]
    fn tiny_generator_shapes() {
        let cfg = GeneratorConfig::tiny(4);
        let (g, store) = Generator::build::<f32>(&cfg, 1).unwrap();
        let lr = Tensor::<f32>::full([1, 3, 24, 24], 0.5);
        let sr = g.forward(&Eval, &store, &lr).unwrap();
        assert_eq!(sr.shape().dims(), [1, 3, 96, 96]);
    }

    #[test]
    fn scale_must_match_plan() {
        let cfg = GeneratorConfig {
            scale: 8,
            ..GeneratorConfig::tiny(4)
        };
        assert!(matches!(Generator::build::<f32>(&cfg, 0), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            n_rrdb: 0,
            ..GeneratorConfig::tiny(4)
        };
        assert!(Generator::build::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = GeneratorConfig::tiny(4);
        let (_, a) = Generator::build::<f32>(&cfg, 9).unwrap();
        let (_, b) = Generator::build::<f32>(&cfg, 9).unwrap();
        let (_, c) = Generator::build::<f32>(&cfg, 10).unwrap();
        let names: Vec<_> = a.iter().map(|(_, p)| p.name().to_string()).collect();
        let names_b: Vec<_> = b.iter().map(|(_, p)| p.name().to_string()).collect();
        assert_eq!(names, names_b);
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|((_, p), (_, q))| p.value().bitwise_eq(q.value())));
        assert!(a
            .iter()
            .zip(c.iter())
            .any(|((_, p), (_, q))| !p.value().bitwise_eq(q.value())));
    }

    #[test]
    fn single_conv_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ConvLayer::same(&mut store, &mut Init::new(&mut rng, 1.0), "c", 3, 64, (3, 3), 1).unwrap();
        assert_eq!(count_parameters(&store), 1792);
    }

    #[test]
    fn wider_base_has_more_parameters() {
        let cfg = GeneratorConfig::tiny(4);
        let wide = GeneratorConfig {
            base_channels: 16,
            ..cfg.clone()
        };
        let (_, a) = Generator::build::<f32>(&cfg, 0).unwrap();
        let (_, b) = Generator::build::<f32>(&wide, 0).unwrap();
        assert!(count_parameters(&b) > count_parameters(&a));
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = GeneratorConfig::default();
        let b = GeneratorConfig {
            growth: 16,
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), GeneratorConfig::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn biases_start_at_zero_and_weights_are_scaled() {
        let cfg = GeneratorConfig::tiny(2);
        let (_, store) = Generator::build::<f64>(&cfg, 3).unwrap();
        for (_, p) in store.iter() {
            if p.name().ends_with(".bias") {
                assert!(p.value().data().iter().all(|&v| v == 0.0));
            }
        }
        let first = store.value(store.id_of("first_conv.weight").unwrap());
        let rms = (first.data().iter().map(|v| v * v).sum::<f64>() / first.numel() as f64).sqrt();
        let expected = (2.0f64 / 27.0).sqrt() * 0.1;
        assert!((rms / expected - 1.0).abs() < 0.35, "rms {rms} expected {expected}");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = GeneratorConfig::tiny(2);
        let (g, store) = Generator::build::<f64>(&cfg, 5).unwrap();
        let lr = Tensor::<f64>::from_fn([1, 3, 6, 6], |_, c, h, w| ((c * 7 + h * 3 + w) % 5) as f64 / 5.0);
        let target = Tensor::<f64>::from_fn([1, 3, 12, 12], |_, c, h, w| ((c + h * w) % 3) as f64 / 3.0);
        let tape = Tape::new();
        let x = tape.constant(lr);
        let y = tape.constant(target);
        let sr = g.forward(&tape, &store, &x).unwrap();
        let loss = tape.l1(&sr, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (id, p) in store.iter() {
            let grad = grads.get(&store, id).expect("gradient present");
            assert!(grad.data().iter().any(|&v| v != 0.0), "dead parameter {}", p.name());
        }
    }
}
