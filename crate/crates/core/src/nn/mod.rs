//! Network building blocks and the assembled generator, discriminator and
//! feature extractor.

pub mod blocks;
pub mod discriminator;
pub mod features;
pub mod generator;
pub mod layers;

pub use blocks::{BranchConv, DenseBlock, Rfb, RfbLayout, Rrdb, Rrfdb, UpsampleKind, UpsampleStage, LEAKY_SLOPE};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use features::{FeatureExtractor, FeatureLayer, FeaturePlan, DESK_PLAN, VGG19_PLAN};
pub use generator::{count_parameters, Generator, GeneratorConfig};
pub use layers::{ConvLayer, Init};
