//! Analytic gradients checked against central finite differences in f64.
//!
//! Each case builds random instances of an op or block whose inputs are
//! stored as parameters, reduces the output to a scalar with a fixed random
//! linear functional, and compares [`Tape::backward`] with
//! [`finite_diff_grad`]. Finite-difference samples whose `±h` evaluations
//! land on different sides of a kink (ReLU, L1, max-pool) are skipped.

use std::cell::RefCell;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{finite_diff_grad, Graph, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{self, FakeLossForm};
use crate::nn::{
    DenseBlock, Discriminator, DiscriminatorConfig, FeatureExtractor, FeaturePlan, Generator, GeneratorConfig, Init,
    Rfb, RfbLayout, Rrdb, Rrfdb, UpsampleKind, UpsampleStage,
};
use crate::ops::ConvSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Random instances per case.
    pub instances: usize,
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Oracle values below this magnitude are compared absolutely against it.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 20,
            h: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    /// Gradient elements compared.
    pub elements: usize,
    /// Elements skipped because the difference stencil straddled a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Objective = Box<dyn Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var>>;

struct Instance {
    store: ParamStore<f64>,
    objective: Objective,
    /// Elements sampled per parameter tensor; `None` checks all of them.
    per_param: Option<usize>,
    /// Parameter tensors sampled per instance; `None` checks all of them.
    params: Option<usize>,
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Instance>;

const CASES: &[(&str, Builder)] = &[
    ("conv2d", conv2d_case),
    ("leaky_relu", leaky_relu_case),
    ("relu", relu_case),
    ("sigmoid", sigmoid_case),
    ("add", add_case),
    ("sub_scalar", sub_scalar_case),
    ("affine", affine_case),
    ("concat_channels", concat_case),
    ("mean_all", mean_all_case),
    ("mean_spatial", mean_spatial_case),
    ("l1", l1_case),
    ("log", log_case),
    ("nearest_upsample", nearest_case),
    ("pixel_shuffle", pixel_shuffle_case),
    ("pixel_unshuffle", pixel_unshuffle_case),
    ("max_pool2", max_pool_case),
    ("dense_block", dense_block_case),
    ("rrdb", rrdb_case),
    ("rfb", rfb_case),
    ("rrfdb", rrfdb_case),
    ("upsample_nni", upsample_nni_case),
    ("upsample_spc", upsample_spc_case),
    ("generator", generator_case),
    ("discriminator", discriminator_case),
    ("feature_extractor", feature_extractor_case),
    ("pixel_loss", pixel_loss_case),
    ("feature_loss", feature_loss_case),
    ("adversarial_loss", adversarial_loss_case),
    ("discriminator_loss_standard", d_loss_standard_case),
    ("discriminator_loss_literal", d_loss_literal_case),
];

/// Names of every case, in run order.
pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _)| *n).collect()
}

/// Runs every case whose name contains `filter` (all cases when `None`).
pub fn run_suite(config: &GradCheckConfig, filter: Option<&str>) -> Result<Vec<CaseReport>> {
    let selected: Vec<_> = CASES
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| filter.is_none_or(|f| name.contains(f)))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no gradient-check case matches `{}`",
            filter.unwrap_or_default()
        )));
    }
    selected
        .into_iter()
        .map(|(i, (name, build))| run_case(name, *build, config, config.seed.wrapping_add(i as u64)))
        .collect()
}

fn run_case(name: &'static str, build: Builder, config: &GradCheckConfig, seed: u64) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CaseReport {
        name,
        instances: 0,
        elements: 0,
        skipped: 0,
        max_rel_err: 0.0,
        passed: true,
    };
    let mut attempts = 0;
    while report.instances < config.instances {
        attempts += 1;
        if attempts > config.instances * 5 {
            return Err(Error::GradCheck(format!(
                "{name}: could not draw {} instances away from kinks",
                config.instances
            )));
        }
        let inst = build(&mut rng)?;
        if let Some((checked, skipped, err)) = check_instance(inst, config, &mut rng)? {
            report.instances += 1;
            report.elements += checked;
            report.skipped += skipped;
            report.max_rel_err = report.max_rel_err.max(err);
        }
    }
    report.passed = report.max_rel_err <= config.tolerance;
    Ok(report)
}

/// Relative error, or absolute error when the oracle is below `floor`.
pub fn gradient_error(analytic: f64, oracle: f64, floor: f64) -> f64 {
    let diff = (analytic - oracle).abs();
    if oracle.abs() < floor {
        // Scaled so that an absolute error of `floor` maps to tolerance 1.
        return if diff <= floor { 0.0 } else { diff / floor };
    }
    diff / analytic.abs().max(oracle.abs())
}

/// Returns `None` when too many samples straddle kinks to be informative.
fn check_instance(
    mut inst: Instance,
    config: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(usize, usize, f64)>> {
    let tape = Tape::new();
    let loss = (inst.objective)(&tape, &inst.store)?;
    let base_pattern = tape.kink_pattern();
    let grads = tape.backward(loss)?;

    let mut ids: Vec<ParamId> = inst.store.iter().map(|(id, _)| id).collect();
    if let Some(k) = inst.params {
        if k < ids.len() {
            let mut picked: Vec<ParamId> = sample(rng, ids.len(), k).into_iter().map(|i| ids[i]).collect();
            picked.sort_unstable();
            ids = picked;
        }
    }

    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for id in ids {
        let numel = inst.store.get(id).numel();
        let elements: Vec<usize> = match inst.per_param {
            Some(k) if k < numel => sample(rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        let analytic = grads.get(&inst.store, id).map(|t| t.data().to_vec());
        for k in elements {
            let patterns = RefCell::new(Vec::with_capacity(2));
            let objective = &inst.objective;
            let fd = finite_diff_grad(
                |s| {
                    let t = Tape::new();
                    let v = objective(&t, s)?;
                    patterns.borrow_mut().push(t.kink_pattern());
                    Ok(t.value(v).item())
                },
                &mut inst.store,
                id,
                config.h,
                Some(&[k]),
            )?[0];
            if patterns.borrow().iter().any(|p| *p != base_pattern) {
                skipped += 1;
                continue;
            }
            let a = analytic.as_ref().map_or(0.0, |g| g[k]);
            worst = worst.max(gradient_error(a, fd, config.abs_floor));
            checked += 1;
        }
    }
    if checked == 0 || skipped > checked {
        return Ok(None);
    }
    Ok(Some((checked, skipped, worst)))
}

fn normal(rng: &mut impl Rng, dims: [usize; 4], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_, _, _, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn uniform(rng: &mut impl Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_, _, _, _| rng.random_range(lo..hi))
}

fn add_input(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) -> Result<ParamId> {
    let dims = t.shape().dims();
    store.add(name, &dims, t)
}

/// Per-item `sum(r * y)` averaged over the batch for a fixed random `r`,
/// built from a full-size
/// convolution so it only uses graph ops.
fn projection(rng: &mut impl Rng, dims: [usize; 4]) -> Tensor<f64> {
    let [_, c, h, w] = dims;
    normal(rng, [1, c, h, w], 1.0)
}

fn project(g: &Tape<f64>, y: &Var, r: &Tensor<f64>) -> Result<Var> {
    let proj = g.conv2d(y, &g.constant(r.clone()), None, &ConvSpec::default())?;
    Ok(g.mean_all(&proj))
}

fn single(
    rng: &mut ChaCha8Rng,
    out_dims: [usize; 4],
    store: ParamStore<f64>,
    per_param: Option<usize>,
    f: impl Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var> + 'static,
) -> Instance {
    let r = projection(rng, out_dims);
    Instance {
        store,
        objective: Box::new(move |g, s| {
            let y = f(g, s)?;
            project(g, &y, &r)
        }),
        per_param,
        params: None,
    }
}

fn unary(
    rng: &mut ChaCha8Rng,
    x: impl FnOnce(&mut ChaCha8Rng) -> Tensor<f64>,
    out_dims: [usize; 4],
    op: impl Fn(&Tape<f64>, &Var) -> Result<Var> + 'static,
) -> Result<Instance> {
    let mut store = ParamStore::new();
    let id = add_input(&mut store, "x", x(rng))?;
    Ok(single(rng, out_dims, store, None, move |g, s| op(g, &g.param(s, id))))
}

fn conv2d_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let kh = [1, 3, 5][rng.random_range(0..3)];
    let kw = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let dilation = (rng.random_range(1..=3), rng.random_range(1..=3));
    let pad = (
        rng.random_range(0..=dilation.0 * (kh - 1) / 2),
        rng.random_range(0..=dilation.1 * (kw - 1) / 2),
    );
    let spec = ConvSpec { stride, pad, dilation };
    let (n, ci, co) = (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    );
    let h = dilation.0 * (kh - 1) + 1 + rng.random_range(0..4);
    let w = dilation.1 * (kw - 1) + 1 + rng.random_range(0..4);
    let mut store = ParamStore::new();
    let x = add_input(&mut store, "x", normal(rng, [n, ci, h, w], 1.0))?;
    let wt = add_input(&mut store, "w", normal(rng, [co, ci, kh, kw], 0.5))?;
    let with_bias = rng.random_bool(0.5);
    let b = if with_bias {
        Some(store.add("b", &[co], normal(rng, [1, co, 1, 1], 0.5))?)
    } else {
        None
    };
    let out = crate::ops::conv2d_out_shape(store.value(x).shape(), store.value(wt).shape(), &spec)?;
    Ok(single(rng, out.dims(), store, Some(12), move |g, s| {
        let bias = b.map(|b| g.param(s, b));
        g.conv2d(&g.param(s, x), &g.param(s, wt), bias.as_ref(), &spec)
    }))
}

fn leaky_relu_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let alpha = rng.random_range(0.0..0.5);
    let d = [2, 2, 3, 3];
    unary(rng, |q| normal(q, d, 1.0), d, move |g, x| Ok(g.leaky_relu(x, alpha)))
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = [2, 2, 3, 3];
    unary(rng, |q| normal(q, d, 1.0), d, |g, x| Ok(g.relu(x)))
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = [2, 2, 3, 3];
    unary(rng, |q| normal(q, d, 2.0), d, |g, x| Ok(g.sigmoid(x)))
}

fn affine_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
    let d = [1, 3, 3, 2];
    unary(rng, |q| normal(q, d, 1.0), d, move |g, x| Ok(g.affine(x, a, b)))
}

fn mean_all_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    unary(
        rng,
        |q| normal(q, [2, 2, 3, 4], 1.0),
        [1, 1, 1, 1],
        |g, x| Ok(g.mean_all(x)),
    )
}

fn mean_spatial_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    unary(
        rng,
        |q| normal(q, [2, 3, 3, 4], 1.0),
        [2, 3, 1, 1],
        |g, x| Ok(g.mean_spatial(x)),
    )
}

fn log_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = [1, 2, 3, 3];
    unary(rng, |q| uniform(q, d, 0.05, 2.0), d, |g, x| Ok(g.log(x)))
}

fn nearest_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let r = rng.random_range(2..=3);
    unary(
        rng,
        |q| normal(q, [1, 2, 3, 2], 1.0),
        [1, 2, 3 * r, 2 * r],
        move |g, x| g.nearest_upsample(x, r),
    )
}

fn pixel_shuffle_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let r = rng.random_range(2..=3);
    unary(
        rng,
        |q| normal(q, [2, 2 * r * r, 2, 3], 1.0),
        [2, 2, 2 * r, 3 * r],
        move |g, x| g.pixel_shuffle(x, r),
    )
}

fn pixel_unshuffle_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let r = rng.random_range(2..=3);
    unary(
        rng,
        |q| normal(q, [1, 2, 2 * r, 3 * r], 1.0),
        [1, 2 * r * r, 2, 3],
        move |g, x| g.pixel_unshuffle(x, r),
    )
}

fn max_pool_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    unary(
        rng,
        |q| normal(q, [2, 2, 4, 6], 1.0),
        [2, 2, 2, 3],
        |g, x| g.max_pool2(x),
    )
}

fn add_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = [2, 2, 3, 3];
    let mut store = ParamStore::new();
    let a = add_input(&mut store, "a", normal(rng, d, 1.0))?;
    let b = add_input(&mut store, "b", normal(rng, d, 1.0))?;
    Ok(single(rng, d, store, None, move |g, s| {
        g.add(&g.param(s, a), &g.param(s, b))
    }))
}

fn sub_scalar_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = [2, 1, 3, 3];
    let mut store = ParamStore::new();
    let x = add_input(&mut store, "x", normal(rng, d, 1.0))?;
    let s0 = add_input(&mut store, "s", normal(rng, [1, 1, 1, 1], 1.0))?;
    Ok(single(rng, d, store, None, move |g, s| {
        g.sub_scalar(&g.param(s, x), &g.param(s, s0))
    }))
}

fn concat_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let widths: Vec<usize> = (0..rng.random_range(2..=4)).map(|_| rng.random_range(1..=3)).collect();
    let mut store = ParamStore::new();
    let ids = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| add_input(&mut store, &format!("x{i}"), normal(rng, [2, c, 2, 3], 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let total = widths.iter().sum();
    Ok(single(rng, [2, total, 2, 3], store, None, move |g, s| {
        let xs: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        g.concat_channels(&xs)
    }))
}

fn l1_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = [2, 2, 3, 3];
    let mut store = ParamStore::new();
    let a = add_input(&mut store, "a", normal(rng, d, 1.0))?;
    let b = add_input(&mut store, "b", normal(rng, d, 1.0))?;
    Ok(single(rng, [1, 1, 1, 1], store, None, move |g, s| {
        g.l1(&g.param(s, a), &g.param(s, b))
    }))
}

/// Block whose parameters share one store with its input.
fn block_instance(
    rng: &mut ChaCha8Rng,
    mut store: ParamStore<f64>,
    in_dims: [usize; 4],
    out_dims: [usize; 4],
    per_param: usize,
    params: Option<usize>,
    forward: impl Fn(&Tape<f64>, &ParamStore<f64>, &Var) -> Result<Var> + 'static,
) -> Result<Instance> {
    let x = add_input(&mut store, "input", normal(rng, in_dims, 1.0))?;
    let mut inst = single(rng, out_dims, store, Some(per_param), move |g, s| {
        forward(g, s, &g.param(s, x))
    });
    inst.params = params;
    Ok(inst)
}

fn block_seed(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(rng.random())
}

fn dense_block_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut r = block_seed(rng);
    let mut store = ParamStore::new();
    let block = DenseBlock::new(&mut store, &mut Init::new(&mut r, 1.0), "db", 4, 3, 0.2)?;
    let d = [1, 4, 5, 5];
    block_instance(rng, store, d, d, 3, None, move |g, s, x| block.forward(g, s, x))
}

fn rrdb_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut r = block_seed(rng);
    let mut store = ParamStore::new();
    let block = Rrdb::new(&mut store, &mut Init::new(&mut r, 1.0), "rrdb", 4, 2, 0.2)?;
    let d = [1, 4, 5, 5];
    block_instance(rng, store, d, d, 2, None, move |g, s, x| block.forward(g, s, x))
}

fn rfb_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut r = block_seed(rng);
    let mut store = ParamStore::new();
    let (ci, co) = (rng.random_range(4..=8), rng.random_range(3..=8));
    let block = Rfb::new(
        &mut store,
        &mut Init::new(&mut r, 1.0),
        "rfb",
        ci,
        co,
        &RfbLayout::default(),
        1.0,
    )?;
    block_instance(rng, store, [1, ci, 7, 7], [1, co, 7, 7], 3, None, move |g, s, x| {
        block.forward(g, s, x)
    })
}

fn rrfdb_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut r = block_seed(rng);
    let mut store = ParamStore::new();
    let block = Rrfdb::new(
        &mut store,
        &mut Init::new(&mut r, 1.0),
        "rrfdb",
        4,
        4,
        3,
        &RfbLayout::default(),
        1.0,
        0.2,
    )?;
    let d = [1, 4, 6, 6];
    block_instance(rng, store, d, d, 2, None, move |g, s, x| block.forward(g, s, x))
}

fn upsample_case(rng: &mut ChaCha8Rng, kind: UpsampleKind) -> Result<Instance> {
    let mut r = block_seed(rng);
    let mut store = ParamStore::new();
    let with_rfb = rng.random_bool(0.5);
    let stage = UpsampleStage::new(
        &mut store,
        &mut Init::new(&mut r, 1.0),
        "up",
        kind,
        4,
        with_rfb,
        &RfbLayout::default(),
        1.0,
    )?;
    block_instance(rng, store, [1, 4, 3, 4], [1, 4, 6, 8], 3, None, move |g, s, x| {
        stage.forward(g, s, x)
    })
}

fn upsample_nni_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    upsample_case(rng, UpsampleKind::Nni)
}

fn upsample_spc_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    upsample_case(rng, UpsampleKind::Spc)
}

fn generator_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = GeneratorConfig {
        init_scale: 1.0,
        residual_scale: 0.5,
        ..GeneratorConfig::tiny(4)
    };
    let (generator, store) = Generator::build::<f64>(&cfg, rng.random())?;
    block_instance(rng, store, [1, 3, 3, 3], [1, 3, 12, 12], 2, None, move |g, s, x| {
        generator.forward(g, s, x)
    })
}

fn discriminator_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = DiscriminatorConfig {
        base_channels: 4,
        n_convs: 4,
    };
    let (d, store) = Discriminator::build::<f64>(&cfg, rng.random())?;
    block_instance(rng, store, [2, 3, 8, 8], [2, 1, 1, 1], 2, None, move |g, s, x| {
        d.forward(g, s, x)
    })
}

fn small_extractor(rng: &mut ChaCha8Rng) -> Result<FeatureExtractor<f64>> {
    let plan: FeaturePlan = "4,M,6".parse()?;
    FeatureExtractor::random(&plan, rng.random())
}

fn feature_extractor_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let fx = small_extractor(rng)?;
    let mut store = ParamStore::new();
    let x = add_input(&mut store, "input", uniform(rng, [1, 3, 6, 6], 0.0, 1.0))?;
    Ok(single(rng, [1, 6, 3, 3], store, None, move |g, s| {
        fx.forward(g, &g.param(s, x))
    }))
}

fn pixel_loss_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = [2, 3, 4, 4];
    let hr = uniform(rng, d, 0.0, 1.0);
    let mut store = ParamStore::new();
    let sr = add_input(&mut store, "sr", uniform(rng, d, 0.0, 1.0))?;
    Ok(Instance {
        store,
        objective: Box::new(move |g, s| losses::pixel_loss(g, &g.param(s, sr), &g.constant(hr.clone()))),
        per_param: None,
        params: None,
    })
}

fn feature_loss_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let fx = small_extractor(rng)?;
    let d = [1, 3, 6, 6];
    let hr = uniform(rng, d, 0.0, 1.0);
    let mut store = ParamStore::new();
    let sr = add_input(&mut store, "sr", uniform(rng, d, 0.0, 1.0))?;
    Ok(Instance {
        store,
        objective: Box::new(move |g, s| losses::feature_loss(g, &fx, &g.param(s, sr), &hr)),
        per_param: None,
        params: None,
    })
}

fn logits_store(rng: &mut ChaCha8Rng) -> Result<(ParamStore<f64>, ParamId, ParamId)> {
    let n = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    let hr = add_input(&mut store, "d_hr", normal(rng, [n, 1, 1, 1], 1.5))?;
    let sr = add_input(&mut store, "d_sr", normal(rng, [n, 1, 1, 1], 1.5))?;
    Ok((store, hr, sr))
}

fn adversarial_loss_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (store, hr, sr) = logits_store(rng)?;
    Ok(Instance {
        store,
        objective: Box::new(move |g, s| {
            let (dr, df) = losses::relativistic_deltas(g, &g.param(s, hr), &g.param(s, sr))?;
            losses::adversarial_loss_g(g, &dr, &df)
        }),
        per_param: None,
        params: None,
    })
}

fn d_loss_case(rng: &mut ChaCha8Rng, form: FakeLossForm) -> Result<Instance> {
    let (store, hr, sr) = logits_store(rng)?;
    Ok(Instance {
        store,
        objective: Box::new(move |g, s| {
            let (dr, df) = losses::relativistic_deltas(g, &g.param(s, hr), &g.param(s, sr))?;
            Ok(losses::discriminator_loss(g, &dr, &df, form)?.2)
        }),
        per_param: None,
        params: None,
    })
}

fn d_loss_standard_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    d_loss_case(rng, FakeLossForm::Standard)
}

fn d_loss_literal_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    d_loss_case(rng, FakeLossForm::Literal)
}
