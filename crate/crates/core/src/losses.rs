//! Pixel, feature and relativistic adversarial losses.
//!
//! Every function is generic over [`Graph`], so the same code evaluates
//! eagerly or records onto a tape. All reductions are batch means.

use serde::{Deserialize, Serialize};

use crate::autograd::{Eval, Graph};
use crate::error::{Error, Result};
use crate::nn::FeatureExtractor;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the pixel loss in the generator objective.
    pub lambda: f64,
    /// Weight of the adversarial loss in the generator objective.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 10.0,
            eta: 5e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.eta >= 0.0 && self.lambda.is_finite() && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative (lambda {}, eta {})",
                self.lambda, self.eta
            )));
        }
        Ok(())
    }
}

/// Form of the discriminator's fake-sample term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeLossForm {
    /// `-mean(log(1 - delta_fake))`
    #[default]
    Standard,
    /// `mean(log(delta_fake)) - 1`, unbounded below.
    Literal,
}

/// Scalar breakdown of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_pix: f64,
    pub l_feat: f64,
    pub l_adv: f64,
    pub l_g: f64,
    pub l_real: f64,
    pub l_fake: f64,
    pub l_d: f64,
    pub delta_real_mean: f64,
    pub delta_fake_mean: f64,
}

impl LossReport {
    /// Checks `l_g = lambda*l_pix + l_feat + eta*l_adv` and
    /// `l_d = l_real + l_fake`, both to `rel_tol` relative error.
    pub fn check_identities(&self, weights: &LossWeights, rel_tol: f64) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(1e-12);
        let g = generator_loss(weights, self.l_pix, self.l_feat, self.l_adv);
        if !close(self.l_g, g) {
            return Err(Error::InvalidArgument(format!(
                "l_g {} != weighted sum {}",
                self.l_g, g
            )));
        }
        if !close(self.l_d, self.l_real + self.l_fake) {
            return Err(Error::InvalidArgument(format!(
                "l_d {} != l_real + l_fake {}",
                self.l_d,
                self.l_real + self.l_fake
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        [
            self.l_pix,
            self.l_feat,
            self.l_adv,
            self.l_g,
            self.l_real,
            self.l_fake,
            self.l_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean absolute difference.
pub fn pixel_loss<T: Scalar, G: Graph<T>>(g: &G, sr: &G::Value, hr: &G::Value) -> Result<G::Value> {
    g.l1(sr, hr)
}

/// Mean absolute difference between extractor features. The hr features are
/// computed eagerly and enter the graph as a constant, so only `sr` receives
/// gradient.
pub fn feature_loss<T: Scalar, G: Graph<T>>(
    g: &G,
    fx: &FeatureExtractor<T>,
    sr: &G::Value,
    hr: &Tensor<T>,
) -> Result<G::Value> {
    let target = g.constant(fx.forward(&Eval, hr)?);
    let feat = fx.forward(g, sr)?;
    g.l1(&feat, &target)
}

/// `delta_real = sigmoid(d_hr - mean(d_sr))`,
/// `delta_fake = sigmoid(d_sr - mean(d_hr))`.
pub fn relativistic_deltas<T: Scalar, G: Graph<T>>(
    g: &G,
    d_hr: &G::Value,
    d_sr: &G::Value,
) -> Result<(G::Value, G::Value)> {
    let (a, b) = (g.shape(d_hr), g.shape(d_sr));
    if a != b {
        return Err(Error::shape(format!("logit shapes differ: {a} vs {b}")));
    }
    let real = g.sigmoid(&g.sub_scalar(d_hr, &g.mean_all(d_sr))?);
    let fake = g.sigmoid(&g.sub_scalar(d_sr, &g.mean_all(d_hr))?);
    Ok((real, fake))
}

fn neg_mean_log<T: Scalar, G: Graph<T>>(g: &G, x: &G::Value) -> G::Value {
    g.scale(&g.mean_all(&g.log(x)), -1.0)
}

fn one_minus<T: Scalar, G: Graph<T>>(g: &G, x: &G::Value) -> G::Value {
    g.affine(x, -1.0, 1.0)
}

/// Generator adversarial term `-mean(log(1 - delta_real)) - mean(log(delta_fake))`.
pub fn adversarial_loss_g<T: Scalar, G: Graph<T>>(
    g: &G,
    delta_real: &G::Value,
    delta_fake: &G::Value,
) -> Result<G::Value> {
    let a = neg_mean_log(g, &one_minus(g, delta_real));
    let b = neg_mean_log(g, delta_fake);
    g.add(&a, &b)
}

/// Discriminator terms `(l_real, l_fake, l_d)`.
pub fn discriminator_loss<T: Scalar, G: Graph<T>>(
    g: &G,
    delta_real: &G::Value,
    delta_fake: &G::Value,
    form: FakeLossForm,
) -> Result<(G::Value, G::Value, G::Value)> {
    let real = neg_mean_log(g, delta_real);
    let fake = match form {
        FakeLossForm::Standard => neg_mean_log(g, &one_minus(g, delta_fake)),
        FakeLossForm::Literal => g.affine(&g.mean_all(&g.log(delta_fake)), 1.0, -1.0),
    };
    let total = g.add(&real, &fake)?;
    Ok((real, fake, total))
}

/// `lambda*l_pix + l_feat + eta*l_adv`.
pub fn generator_loss(weights: &LossWeights, l_pix: f64, l_feat: f64, l_adv: f64) -> f64 {
    weights.lambda * l_pix + l_feat + weights.eta * l_adv
}

/// Graph version of [`generator_loss`]. `l_feat` and `l_adv` may be absent.
pub fn generator_loss_graph<T: Scalar, G: Graph<T>>(
    g: &G,
    weights: &LossWeights,
    l_pix: &G::Value,
    l_feat: Option<&G::Value>,
    l_adv: Option<&G::Value>,
) -> Result<G::Value> {
    let mut total = g.scale(l_pix, weights.lambda);
    if let Some(f) = l_feat {
        total = g.add(&total, f)?;
    }
    if let Some(a) = l_adv {
        total = g.add(&total, &g.scale(a, weights.eta))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn logits(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([v.len(), 1, 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn pixel_loss_examples() {
        let hr = Tensor::<f64>::from_fn([1, 3, 4, 4], |_, c, h, w| (c + h + w) as f64 / 10.0);
        assert_eq!(pixel_loss(&Eval, &hr, &hr).unwrap().item(), 0.0);
        let sr = hr.map(|v| v + 0.5);
        assert!((pixel_loss(&Eval, &sr, &hr).unwrap().item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn symmetric_logits_give_half() {
        let d = logits(&[0.3, 0.3, 0.3]);
        let (r, f) = relativistic_deltas(&Eval, &d, &d).unwrap();
        assert!(r.data().iter().chain(f.data()).all(|&v| v == 0.5));
        let adv = adversarial_loss_g(&Eval, &r, &f).unwrap().item();
        assert!((adv - 2.0 * LN2).abs() < 1e-12);
        let (lr, lf, ld) = discriminator_loss(&Eval, &r, &f, FakeLossForm::Standard).unwrap();
        assert!((lr.item() - LN2).abs() < 1e-12);
        assert!((lf.item() - LN2).abs() < 1e-12);
        assert!((ld.item() - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn single_item_deltas() {
        let (r, f) = relativistic_deltas(&Eval, &logits(&[1.0]), &logits(&[0.0])).unwrap();
        let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((r.item() - sigma(1.0)).abs() < 1e-15);
        assert!((f.item() - sigma(-1.0)).abs() < 1e-15);
        assert!((r.item() - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn saturation_limits() {
        let (r, f) = relativistic_deltas(&Eval, &logits(&[10.0, 10.0]), &logits(&[-10.0, -10.0])).unwrap();
        assert!(r.data().iter().all(|&v| v > 0.999_999));
        assert!(f.data().iter().all(|&v| v < 1e-6));
        let (_, _, ld) = discriminator_loss(&Eval, &r, &f, FakeLossForm::Standard).unwrap();
        assert!(ld.item() < 1e-6);
        let huge = logits(&[100.0]);
        let (r, f) = relativistic_deltas(&Eval, &huge, &logits(&[-100.0])).unwrap();
        let adv = adversarial_loss_g(&Eval, &r, &f).unwrap().item();
        assert!(adv.is_finite());
        assert!((adv - 2.0 * -(1e-12f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn discriminator_loss_at_point_nine() {
        let r = logits(&[0.9]);
        let f = logits(&[0.1]);
        let (_, _, ld) = discriminator_loss(&Eval, &r, &f, FakeLossForm::Standard).unwrap();
        assert!((ld.item() - (-2.0 * 0.9f64.ln())).abs() < 1e-12);
        assert!((ld.item() - 0.21072).abs() < 1e-5);
        let (_, lf, _) = discriminator_loss(&Eval, &r, &f, FakeLossForm::Literal).unwrap();
        assert!((lf.item() - (0.1f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_arithmetic() {
        let w = LossWeights::default();
        let v = generator_loss(&w, 0.1, 0.2, 1.38629);
        assert!((v - 1.2069315).abs() < 1e-7);
        assert_eq!(generator_loss(&w, 0.0, 0.0, 0.0), 0.0);
        let no_adv = LossWeights { eta: 0.0, ..w };
        assert_eq!(generator_loss(&no_adv, 0.1, 0.2, 1e9), 10.0 * 0.1 + 0.2);
    }

    #[test]
    fn report_identities() {
        let w = LossWeights::default();
        let mut rep = LossReport {
            l_pix: 0.1,
            l_feat: 0.2,
            l_adv: 1.38629,
            l_real: 0.3,
            l_fake: 0.4,
            ..Default::default()
        };
        rep.l_g = generator_loss(&w, rep.l_pix, rep.l_feat, rep.l_adv);
        rep.l_d = 0.7;
        rep.check_identities(&w, 1e-6).unwrap();
        rep.l_d = 0.8;
        assert!(rep.check_identities(&w, 1e-6).is_err());
    }

    #[test]
    fn invalid_weights() {
        assert!(LossWeights { lambda: -1.0, eta: 0.0 }.validate().is_err());
        assert!(LossWeights {
            lambda: 1.0,
            eta: f64::NAN
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mismatched_logits_rejected() {
        assert!(relativistic_deltas(&Eval, &logits(&[1.0, 2.0]), &logits(&[1.0])).is_err());
    }
}
