use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::layers::{ConvLayer, Init};
use crate::tensor::{Scalar, Tensor};

/// VGG19 convolutional stack up to and including conv5_4, whose
/// pre-activation output is the tap (layer index 34 in the usual
/// `features.N` numbering).
pub const VGG19_PLAN: &str = "64,64,M,128,128,M,256,256,256,256,M,512,512,512,512,M,512,512,512,512";

/// Small seeded plan for desk-scale runs.
pub const DESK_PLAN: &str = "16,16,M,32,32,M,64";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLayer {
    Conv(usize),
    MaxPool,
}

/// Ordered layer plan. The final entry is the tap conv, read before its
/// activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePlan(pub Vec<FeatureLayer>);

impl FromStr for FeaturePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let layers = s
            .split(',')
            .map(str::trim)
            .map(|tok| match tok {
                "M" | "m" => Ok(FeatureLayer::MaxPool),
                n => n
                    .parse::<usize>()
                    .ok()
                    .filter(|&c| c > 0)
                    .map(FeatureLayer::Conv)
                    .ok_or_else(|| Error::Config(format!("bad feature plan entry `{tok}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let plan = FeaturePlan(layers);
        plan.validate()?;
        Ok(plan)
    }
}

impl fmt::Display for FeaturePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|l| match l {
                FeatureLayer::Conv(c) => c.to_string(),
                FeatureLayer::MaxPool => "M".to_string(),
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FeaturePlan {
    fn validate(&self) -> Result<()> {
        if !matches!(self.0.last(), Some(FeatureLayer::Conv(_))) {
            return Err(Error::Config("feature plan must end with a conv (the tap)".into()));
        }
        if !self.0.contains(&FeatureLayer::MaxPool) {
            return Err(Error::Config("feature plan needs at least one pooling layer".into()));
        }
        Ok(())
    }

    /// Total spatial reduction factor of the plan.
    pub fn downsample(&self) -> usize {
        1 << self.0.iter().filter(|l| **l == FeatureLayer::MaxPool).count()
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Conv(ConvLayer),
    Pool,
}

/// Frozen conv stack used by the feature loss. Its parameters always enter
/// graphs as constants, so no optimizer ever sees them.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T: Scalar> {
    plan: FeaturePlan,
    stages: Vec<Stage>,
    store: ParamStore<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Kaiming-initialised extractor. Deterministic in `seed`.
    pub fn random(plan: &FeaturePlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng, 1.0);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(plan.0.len());
        let mut c_in = 3;
        let mut index = 0;
        for layer in &plan.0 {
            match *layer {
                FeatureLayer::Conv(c_out) => {
                    let conv = ConvLayer::same(
                        &mut store,
                        &mut init,
                        &format!("features.{index}"),
                        c_in,
                        c_out,
                        (3, 3),
                        1,
                    )?;
                    stages.push(Stage::Conv(conv));
                    c_in = c_out;
                    // conv and its activation
                    index += 2;
                }
                FeatureLayer::MaxPool => {
                    stages.push(Stage::Pool);
                    index += 1;
                }
            }
        }
        Ok(FeatureExtractor {
            plan: plan.clone(),
            stages,
            store,
        })
    }

    /// Extractor whose weights come from `weights`, keyed `features.N.weight`
    /// and `features.N.bias`. Every parameter must be present with the right
    /// shape. Unrelated keys are ignored.
    pub fn from_weights(plan: &FeaturePlan, weights: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut fx = Self::random(plan, 0)?;
        let ids: Vec<_> = fx.store.iter().map(|(id, p)| (id, p.name().to_string())).collect();
        for (id, name) in ids {
            let value = weights
                .get(&name)
                .ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
            let expected = fx.store.value(id).shape();
            if value.shape() != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: expected.dims().to_vec(),
                    found: value.shape().dims().to_vec(),
                }
                .into());
            }
            fx.store.set_value(id, value.clone())?;
        }
        Ok(fx)
    }

    pub fn plan(&self) -> &FeaturePlan {
        &self.plan
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn forward<G: Graph<T>>(&self, g: &G, img: &G::Value) -> Result<G::Value> {
        let shape = g.shape(img);
        let factor = self.plan.downsample();
        if shape.c != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                got: shape.c,
            });
        }
        if shape.h % factor != 0 || shape.w % factor != 0 {
            return Err(Error::shape(format!(
                "feature extractor needs spatial dims divisible by {factor}, got {}x{}",
                shape.h, shape.w
            )));
        }
        let mut x = img.clone();
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            x = match stage {
                Stage::Conv(conv) => {
                    let y = conv.forward_frozen(g, &self.store, &x)?;
                    if i == last {
                        y
                    } else {
                        g.relu(&y)
                    }
                }
                Stage::Pool => g.max_pool2(&x)?,
            };
        }
        Ok(x)
    }
}
