//! PSNR-stage and GAN-stage training loops.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Eval, Graph, ParamStore, Tape};
use crate::checkpoint::{Checkpoint, Meta, Stage};
use crate::data::PairSource;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss_g, discriminator_loss, feature_loss, generator_loss_graph, pixel_loss, relativistic_deltas,
    FakeLossForm, LossReport, LossWeights,
};
use crate::nn::{Discriminator, FeatureExtractor, Generator};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Psnr,
    Gan,
}

impl TrainStage {
    pub fn default_schedule(self) -> LrSchedule {
        match self {
            TrainStage::Psnr => LrSchedule::psnr_stage(),
            TrainStage::Gan => LrSchedule::gan_stage(),
        }
    }

    fn checkpoint_stage(self) -> Stage {
        match self {
            TrainStage::Psnr => Stage::Psnr,
            TrainStage::Gan => Stage::Gan,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            TrainStage::Psnr => "psnr",
            TrainStage::Gan => "gan",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub stage: TrainStage,
    pub steps: u64,
    pub batch_size: usize,
    /// A generator checkpoint is written after every this many steps.
    /// Zero disables checkpointing.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Discriminator updates per generator update in the GAN stage.
    pub d_updates: usize,
    /// Verify after every GAN-stage update that the other network's
    /// parameters and optimizer moments are bitwise unchanged.
    pub audit: bool,
}

impl TrainRun {
    pub fn new(stage: TrainStage, steps: u64, out_dir: impl Into<PathBuf>) -> Self {
        TrainRun {
            stage,
            steps,
            batch_size: 16,
            checkpoint_every: 5000,
            seed: 0,
            out_dir: out_dir.into(),
            schedule: stage.default_schedule(),
            adam: AdamConfig::default(),
            d_updates: 1,
            audit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.d_updates == 0 {
            return Err(Error::Config("d_updates must be at least 1".into()));
        }
        self.schedule.validate()
    }

    /// Path of the checkpoint written after `step` completed steps.
    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.out_dir.join(format!("{}_{step:08}.ckpt", self.stage.prefix()))
    }
}

/// Loss settings shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub fake_form: FakeLossForm,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    /// `(completed steps, path)` of every checkpoint written.
    pub checkpoints: Vec<(u64, PathBuf)>,
    /// Disjoint-update audits performed (all passed, or the run errored).
    pub audits: u64,
}

/// Bitwise image of a store's values and its optimizer's moments.
#[derive(PartialEq)]
struct Snapshot(Vec<Vec<u64>>);

impl Snapshot {
    fn take<T: Scalar>(store: &ParamStore<T>, adam: &Adam<T>) -> Self {
        let bits = |v: &[T]| v.iter().map(|x| x.as_f64().to_bits()).collect::<Vec<u64>>();
        let mut out = Vec::with_capacity(store.len() * 3);
        for (id, p) in store.iter() {
            out.push(bits(p.value().data()));
            out.push(bits(adam.first_moment(id)));
            out.push(bits(adam.second_moment(id)));
        }
        Snapshot(out)
    }
}

fn audit_unchanged<T: Scalar>(
    before: Option<Snapshot>,
    store: &ParamStore<T>,
    adam: &Adam<T>,
    what: &str,
    step: u64,
    outcome: &mut TrainOutcome,
) -> Result<()> {
    if let Some(before) = before {
        if before != Snapshot::take(store, adam) {
            return Err(Error::Audit(format!("step {step}: {what}")));
        }
        outcome.audits += 1;
    }
    Ok(())
}

/// Progress line for one step.
pub fn format_step_line(step: u64, lr: f64, r: &LossReport) -> String {
    format!(
        "step {step} lr {lr:e} l_pix {:.6e} l_feat {:.6e} l_adv {:.6e} l_g {:.6e} l_d {:.6e}",
        r.l_pix, r.l_feat, r.l_adv, r.l_g, r.l_d
    )
}

fn scalar_value<T: Scalar>(tape: &Tape<T>, v: crate::autograd::Var) -> f64 {
    tape.value(v).item().as_f64()
}

fn finite_or_diverged(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            what: format!("{what} = {v}"),
        })
    }
}

fn write_checkpoint<T: Scalar>(
    run: &TrainRun,
    generator: &Generator,
    store: &ParamStore<T>,
    step: u64,
    outcome: &mut TrainOutcome,
) -> Result<()> {
    std::fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
    let path = run.checkpoint_path(step);
    let meta = Meta {
        step,
        stage: run.stage.checkpoint_stage(),
        seed: run.seed,
        source_steps: Vec::new(),
    };
    Checkpoint::from_store(store, generator.config.fingerprint(), meta).write(&path)?;
    log::info!("wrote {}", path.display());
    outcome.checkpoints.push((step, path));
    Ok(())
}

fn due(run: &TrainRun, completed: u64) -> bool {
    run.checkpoint_every > 0 && completed.is_multiple_of(run.checkpoint_every)
}

/// Optimizes pixel L1 only. The report's `l_g` equals `l_pix`.
pub fn train_psnr_stage<T: Scalar, S: PairSource<T>>(
    run: &TrainRun,
    generator: &Generator,
    store: &mut ParamStore<T>,
    data: &mut S,
    on_step: &mut dyn FnMut(u64, f64, &LossReport),
) -> Result<TrainOutcome> {
    run.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut adam = Adam::new(store, run.adam);
    let mut outcome = TrainOutcome::default();
    for step in 0..run.steps {
        let lr = run.schedule.lr_at(step);
        let (lr_img, hr_img) = data.next_batch(&mut rng, run.batch_size)?;
        let tape = Tape::new();
        let x = tape.constant(lr_img);
        let y = tape.constant(hr_img);
        let sr = generator.forward(&tape, store, &x)?;
        let loss = pixel_loss(&tape, &sr, &y)?;
        let l_pix = scalar_value(&tape, loss);
        finite_or_diverged(step, "l_pix", l_pix)?;
        store.accumulate(&tape.backward(loss)?);
        adam.step(store, lr).map_err(|e| diverged_from(step, e))?;
        let report = LossReport {
            l_pix,
            l_g: l_pix,
            ..LossReport::default()
        };
        on_step(step, lr, &report);
        outcome.reports.push(report);
        if due(run, step + 1) {
            write_checkpoint(run, generator, store, step + 1, &mut outcome)?;
        }
    }
    Ok(outcome)
}

fn diverged_from(step: u64, e: Error) -> Error {
    match e {
        Error::NonFiniteGradient(name) => Error::Diverged {
            step,
            what: format!("non-finite gradient in `{name}`"),
        },
        other => other,
    }
}

/// Networks and parameters taking part in the GAN stage.
pub struct GanModels<'a, T: Scalar> {
    pub generator: &'a Generator,
    pub g_store: &'a mut ParamStore<T>,
    pub discriminator: &'a Discriminator,
    pub d_store: &'a mut ParamStore<T>,
    pub features: Option<&'a FeatureExtractor<T>>,
}

/// Alternating updates: each iteration runs the discriminator update(s) on
/// the current generator output, then one generator update against the
/// updated discriminator. `init`, when given, is loaded into the generator
/// first and must match its architecture.
pub fn train_gan_stage<T: Scalar, S: PairSource<T>>(
    run: &TrainRun,
    models: GanModels<'_, T>,
    losses: &LossConfig,
    data: &mut S,
    init: Option<&Checkpoint>,
    on_step: &mut dyn FnMut(u64, f64, &LossReport),
) -> Result<TrainOutcome> {
    run.validate()?;
    losses.weights.validate()?;
    let GanModels {
        generator,
        g_store,
        discriminator,
        d_store,
        features,
    } = models;
    if let Some(ck) = init {
        ck.load_into(g_store, &generator.config.fingerprint(), false)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut adam_g = Adam::new(g_store, run.adam);
    let mut adam_d = Adam::new(d_store, run.adam);
    let weights = losses.weights;
    let mut outcome = TrainOutcome::default();

    for step in 0..run.steps {
        let lr = run.schedule.lr_at(step);
        let (lr_img, hr_img) = data.next_batch(&mut rng, run.batch_size)?;

        let tape_g = Tape::new();
        tape_g.freeze(d_store);
        let x = tape_g.constant(lr_img);
        let sr = generator.forward(&tape_g, g_store, &x)?;
        let sr_value = tape_g.value(sr);

        let mut report = LossReport::default();
        for _ in 0..run.d_updates {
            let g_before = run.audit.then(|| Snapshot::take(g_store, &adam_g));
            let tape_d = Tape::new();
            let hr = tape_d.constant(hr_img.clone());
            let fake = tape_d.constant(sr_value.clone());
            let d_hr = discriminator.forward(&tape_d, d_store, &hr)?;
            let d_sr = discriminator.forward(&tape_d, d_store, &fake)?;
            let (dr, df) = relativistic_deltas(&tape_d, &d_hr, &d_sr)?;
            let (l_real, l_fake, l_d) = discriminator_loss(&tape_d, &dr, &df, losses.fake_form)?;
            report.l_real = scalar_value(&tape_d, l_real);
            report.l_fake = scalar_value(&tape_d, l_fake);
            report.l_d = scalar_value(&tape_d, l_d);
            finite_or_diverged(step, "l_d", report.l_d)?;
            d_store.accumulate(&tape_d.backward(l_d)?);
            adam_d.step(d_store, lr).map_err(|e| diverged_from(step, e))?;
            audit_unchanged(
                g_before,
                g_store,
                &adam_g,
                "discriminator update touched the generator",
                step,
                &mut outcome,
            )?;
        }

        let hr = tape_g.constant(hr_img.clone());
        let l_pix = pixel_loss(&tape_g, &sr, &hr)?;
        let l_feat = features.map(|fx| feature_loss(&tape_g, fx, &sr, &hr_img)).transpose()?;
        let l_adv = if weights.eta != 0.0 {
            let d_hr = discriminator.forward(&tape_g, d_store, &hr)?;
            let d_sr = discriminator.forward(&tape_g, d_store, &sr)?;
            let (dr, df) = relativistic_deltas(&tape_g, &d_hr, &d_sr)?;
            let (dr_m, df_m) = (tape_g.mean_all(&dr), tape_g.mean_all(&df));
            report.delta_real_mean = scalar_value(&tape_g, dr_m);
            report.delta_fake_mean = scalar_value(&tape_g, df_m);
            Some(adversarial_loss_g(&tape_g, &dr, &df)?)
        } else {
            None
        };
        let l_g = generator_loss_graph(&tape_g, &weights, &l_pix, l_feat.as_ref(), l_adv.as_ref())?;

        report.l_pix = scalar_value(&tape_g, l_pix);
        report.l_feat = l_feat.map_or(0.0, |v| scalar_value(&tape_g, v));
        report.l_adv = match l_adv {
            Some(v) => scalar_value(&tape_g, v),
            None => eval_adversarial(discriminator, d_store, &hr_img, &sr_value, &mut report)?,
        };
        report.l_g = scalar_value(&tape_g, l_g);
        finite_or_diverged(step, "l_g", report.l_g)?;
        let d_before = run.audit.then(|| Snapshot::take(d_store, &adam_d));
        let grads = tape_g.backward(l_g)?;
        if run.audit {
            d_store.accumulate(&grads);
            if d_store
                .iter()
                .any(|(_, p)| p.grad_slice().iter().any(|g| *g != T::zero()))
            {
                return Err(Error::Audit(format!(
                    "step {step}: generator loss produced discriminator gradients"
                )));
            }
        }
        g_store.accumulate(&grads);
        adam_g.step(g_store, lr).map_err(|e| diverged_from(step, e))?;
        audit_unchanged(
            d_before,
            d_store,
            &adam_d,
            "generator update touched the discriminator",
            step,
            &mut outcome,
        )?;

        on_step(step, lr, &report);
        outcome.reports.push(report);
        if due(run, step + 1) {
            write_checkpoint(run, generator, g_store, step + 1, &mut outcome)?;
        }
    }
    Ok(outcome)
}

/// Adversarial term for reporting when it does not enter the objective.
fn eval_adversarial<T: Scalar>(
    discriminator: &Discriminator,
    d_store: &ParamStore<T>,
    hr: &Tensor<T>,
    sr: &Tensor<T>,
    report: &mut LossReport,
) -> Result<f64> {
    let d_hr = discriminator.forward(&Eval, d_store, hr)?;
    let d_sr = discriminator.forward(&Eval, d_store, sr)?;
    let (dr, df) = relativistic_deltas(&Eval, &d_hr, &d_sr)?;
    report.delta_real_mean = Eval.mean_all(&dr).item().as_f64();
    report.delta_fake_mean = Eval.mean_all(&df).item().as_f64();
    Ok(adversarial_loss_g(&Eval, &dr, &df)?.item().as_f64())
}

/// Checkpoints written by a run, in step order.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FixedPair;
    use crate::nn::{DiscriminatorConfig, GeneratorConfig};

    fn pair(scale: usize) -> FixedPair<f32> {
        let lr = Tensor::<f32>::from_fn([1, 3, 4, 4], |_, c, h, w| ((c + 2 * h + 3 * w) % 7) as f32 / 7.0);
        let hr = Tensor::<f32>::from_fn([1, 3, 4 * scale, 4 * scale], |_, c, h, w| {
            ((c + h / scale * 2 + w / scale * 3) % 7) as f32 / 7.0
        });
        FixedPair { lr, hr }
    }

    fn quick_run(stage: TrainStage, steps: u64, dir: &Path) -> TrainRun {
        TrainRun {
            batch_size: 1,
            checkpoint_every: 5,
            seed: 3,
            schedule: LrSchedule::Constant { lr: 1e-3 },
            ..TrainRun::new(stage, steps, dir)
        }
    }

    #[test]
    fn psnr_cadence_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::tiny(2);
        let run = quick_run(TrainStage::Psnr, 12, dir.path());
        let go = || {
            let (g, mut store) = Generator::build::<f32>(&cfg, 1).unwrap();
            let out = train_psnr_stage(&run, &g, &mut store, &mut pair(2), &mut |_, _, _| {}).unwrap();
            (out, store)
        };
        let (a, sa) = go();
        let (b, sb) = go();
        assert_eq!(a.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![5, 10]);
        assert_eq!(list_checkpoints(dir.path()).unwrap().len(), 2);
        let la: Vec<u32> = a.reports.iter().map(|r| (r.l_pix as f32).to_bits()).collect();
        let lb: Vec<u32> = b.reports.iter().map(|r| (r.l_pix as f32).to_bits()).collect();
        assert_eq!(la, lb);
        assert_eq!(sa.named_values(), sb.named_values());
        assert!(a.reports.last().unwrap().l_pix < a.reports[0].l_pix);
    }

    #[test]
    fn gan_stage_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::tiny(2);
        let (g, mut gs) = Generator::build::<f32>(&cfg, 1).unwrap();
        let dcfg = DiscriminatorConfig {
            base_channels: 4,
            n_convs: 4,
        };
        let (d, mut ds) = Discriminator::build::<f32>(&dcfg, 2).unwrap();
        let plan = "4,M,8".parse().unwrap();
        let fx = FeatureExtractor::random(&plan, 5).unwrap();
        let run = TrainRun {
            audit: true,
            ..quick_run(TrainStage::Gan, 6, dir.path())
        };
        let losses = LossConfig::default();
        let out = train_gan_stage(
            &run,
            GanModels {
                generator: &g,
                g_store: &mut gs,
                discriminator: &d,
                d_store: &mut ds,
                features: Some(&fx),
            },
            &losses,
            &mut pair(2),
            None,
            &mut |_, _, _| {},
        )
        .unwrap();
        assert_eq!(out.reports.len(), 6);
        for r in &out.reports {
            assert!(r.all_finite());
            r.check_identities(&losses.weights, 1e-6).unwrap();
            assert!(r.l_feat > 0.0);
        }
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.audits, 12);
    }

    #[test]
    fn step_line_format() {
        let r = LossReport {
            l_pix: 0.5,
            ..Default::default()
        };
        let line = format_step_line(3, 2e-4, &r);
        assert!(line.starts_with("step 3 lr 2e-4 l_pix 5.000000e-1 l_feat"), "{line}");
        let keys: Vec<_> = line.split(' ').step_by(2).collect();
        assert_eq!(keys, vec!["step", "lr", "l_pix", "l_feat", "l_adv", "l_g", "l_d"]);
    }

    #[test]
    fn divergence_aborts_and_keeps_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::tiny(2);
        let (g, mut store) = Generator::build::<f32>(&cfg, 1).unwrap();
        let mut run = quick_run(TrainStage::Psnr, 20, dir.path());
        run.schedule = LrSchedule::Constant { lr: 1e-3 };
        struct Poison {
            inner: FixedPair<f32>,
            calls: usize,
        }
        impl PairSource<f32> for Poison {
            fn next_batch<R: rand::Rng>(&mut self, rng: &mut R, batch: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
                self.calls += 1;
                let (lr, hr) = self.inner.next_batch(rng, batch)?;
                if self.calls > 7 {
                    return Ok((lr, hr.map(|_| f32::NAN)));
                }
                Ok((lr, hr))
            }
        }
        let mut data = Poison {
            inner: pair(2),
            calls: 0,
        };
        let err = train_psnr_stage(&run, &g, &mut store, &mut data, &mut |_, _, _| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 7, .. }), "{err}");
        assert_eq!(list_checkpoints(dir.path()).unwrap().len(), 1);
    }
}
