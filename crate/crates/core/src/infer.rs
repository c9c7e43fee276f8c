//! Checkpoint-backed super-resolution of images and directories.

use std::path::Path;

use crate::autograd::{Eval, ParamStore};
use crate::checkpoint::{Checkpoint, LoadSummary};
use crate::data::{list_images, load_image, save_image};
use crate::error::{Error, Result};
use crate::nn::{Generator, GeneratorConfig};
use crate::tensor::{Scalar, Tensor};

/// A generator with loaded weights.
#[derive(Debug)]
pub struct Upscaler<T: Scalar> {
    pub generator: Generator,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Upscaler<T> {
    /// Builds the generator for `config` and loads `checkpoint` into it. With
    /// `force` the architecture check is skipped and the name/shape
    /// intersection is loaded.
    pub fn new(config: &GeneratorConfig, checkpoint: &Checkpoint, force: bool) -> Result<(Self, LoadSummary)> {
        let (generator, mut store) = Generator::build::<T>(config, 0)?;
        let summary = checkpoint.load_into(&mut store, &config.fingerprint(), force)?;
        Ok((Upscaler { generator, store }, summary))
    }

    pub fn from_file(config: &GeneratorConfig, path: impl AsRef<Path>, force: bool) -> Result<(Self, LoadSummary)> {
        Self::new(config, &Checkpoint::read(path)?, force)
    }

    pub fn scale(&self) -> usize {
        self.generator.scale()
    }

    /// Super-resolves an `(n, 3, h, w)` batch and clamps the result to `[0, 1]`.
    pub fn upscale(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let sr = self.generator.forward(&Eval, &self.store, lr)?;
        if !sr.all_finite() {
            return Err(Error::Diverged {
                step: 0,
                what: "generator produced non-finite output".into(),
            });
        }
        Ok(sr.map(|v| v.max(T::zero()).min(T::one())))
    }

    /// Upscales every PNG under `input` into the same relative path under
    /// `output`. Returns the number of images written.
    pub fn upscale_dir(&self, input: &Path, output: &Path) -> Result<usize> {
        let files = list_images(input)?;
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no PNG images under {}",
                input.display()
            )));
        }
        for rel in &files {
            let lr = load_image::<T>(input.join(rel))?;
            save_image(&self.upscale(&lr)?, output.join(rel))?;
            log::info!("upscaled {}", rel.display());
        }
        Ok(files.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Meta;

    #[test]
    fn upscales_and_clamps() {
        let cfg = GeneratorConfig::tiny(2);
        let (_, store) = Generator::build::<f32>(&cfg, 4).unwrap();
        let ck = Checkpoint::from_store(&store, cfg.fingerprint(), Meta::default());
        let (up, summary) = Upscaler::<f32>::new(&cfg, &ck, false).unwrap();
        assert_eq!(summary.loaded, store.len());
        let out = up.upscale(&Tensor::full([1, 3, 5, 6], 0.5)).unwrap();
        assert_eq!(out.shape().dims(), [1, 3, 10, 12]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_other_architecture() {
        let cfg = GeneratorConfig::tiny(2);
        let (_, store) = Generator::build::<f32>(&cfg, 4).unwrap();
        let ck = Checkpoint::from_store(&store, cfg.fingerprint(), Meta::default());
        assert!(Upscaler::<f32>::new(&GeneratorConfig::tiny(4), &ck, false).is_err());
    }
}
