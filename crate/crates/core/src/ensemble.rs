//! Parameter-space averaging of checkpoints and top-k selection.

use std::path::Path;

use crate::autograd::Eval;
use crate::checkpoint::{Checkpoint, Entry, EntryData, Meta, Stage};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::{Generator, GeneratorConfig};
use crate::tensor::{Scalar, Tensor};

/// Elementwise mean of `checkpoints`, accumulated in f64 and stored at each
/// entry's source precision.
///
/// Each element's sum is correctly rounded, so the result does not depend on
/// the order of the inputs.
pub fn average_checkpoints(checkpoints: &[Checkpoint], n: usize) -> Result<Checkpoint> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    if checkpoints.len() != n {
        return Err(CheckpointError::TooFew {
            needed: n,
            got: checkpoints.len(),
        }
        .into());
    }
    let first = &checkpoints[0];
    for ck in &checkpoints[1..] {
        if ck.fingerprint != first.fingerprint {
            return Err(CheckpointError::FingerprintMismatch.into());
        }
        if let Some(name) = ck.entries.keys().find(|k| !first.entries.contains_key(*k)) {
            return Err(CheckpointError::UnexpectedParameter(name.clone()).into());
        }
        if let Some(name) = first.entries.keys().find(|k| !ck.entries.contains_key(*k)) {
            return Err(CheckpointError::MissingParameter(name.clone()).into());
        }
        for (name, e) in &ck.entries {
            let reference = &first.entries[name];
            if e.dims != reference.dims || e.data.dtype() != reference.data.dtype() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: reference.dims.clone(),
                    found: e.dims.clone(),
                }
                .into());
            }
        }
    }

    let mut entries = std::collections::BTreeMap::new();
    let mut column = vec![0.0f64; n];
    for (name, reference) in &first.entries {
        let sources: Vec<Vec<f64>> = checkpoints.iter().map(|ck| ck.entries[name].data.to_f64()).collect();
        let mean: Vec<f64> = (0..reference.data.len())
            .map(|i| {
                for (slot, src) in column.iter_mut().zip(&sources) {
                    *slot = src[i];
                }
                exact_sum(&column) / n as f64
            })
            .collect();
        entries.insert(
            name.clone(),
            Entry {
                dims: reference.dims.clone(),
                data: EntryData::from_f64(&mean, reference.data.dtype()),
            },
        );
    }

    let mut source_steps: Vec<u64> = checkpoints.iter().map(|c| c.meta.step).collect();
    source_steps.sort_unstable();
    Ok(Checkpoint {
        fingerprint: first.fingerprint,
        meta: Meta {
            step: *source_steps.last().unwrap(),
            stage: Stage::Ensemble,
            seed: first.meta.seed,
            source_steps,
        },
        entries,
    })
}

/// Correctly rounded sum of finite values (Shewchuk's non-overlapping
/// partials with a final half-way correction). Falls back to plain summation
/// when any value is non-finite.
pub fn exact_sum(values: &[f64]) -> f64 {
    if !values.iter().all(|v| v.is_finite()) {
        return values.iter().sum();
    }
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Round half-way cases correctly when more partials remain below.
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Reads `paths`, averages them, and writes the result to `out`.
pub fn average_files(paths: &[impl AsRef<Path>], n: usize, out: impl AsRef<Path>) -> Result<Checkpoint> {
    let cks = paths.iter().map(Checkpoint::read).collect::<Result<Vec<_>>>()?;
    let avg = average_checkpoints(&cks, n)?;
    avg.write(out)?;
    Ok(avg)
}

/// A candidate with its training step and score (higher is better).
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<C> {
    pub item: C,
    pub step: u64,
    pub score: f64,
}

/// The `n` best candidates by score; equal scores prefer the later step.
pub fn select_top<C>(mut candidates: Vec<Scored<C>>, n: usize) -> Result<Vec<Scored<C>>> {
    if candidates.len() < n {
        return Err(CheckpointError::TooFew {
            needed: n,
            got: candidates.len(),
        }
        .into());
    }
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(b.step.cmp(&a.step)));
    candidates.truncate(n);
    Ok(candidates)
}

/// Default scorer: negative mean pixel L1 of the checkpoint's generator over
/// held-out `(lr, hr)` pairs.
pub fn negative_l1_score<T: Scalar>(
    config: &GeneratorConfig,
    checkpoint: &Checkpoint,
    pairs: &[(Tensor<T>, Tensor<T>)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "scoring needs at least one held-out pair".into(),
        ));
    }
    let (generator, mut store) = Generator::build::<T>(config, 0)?;
    checkpoint.load_into(&mut store, &config.fingerprint(), false)?;
    let mut total = 0.0;
    for (lr, hr) in pairs {
        let sr = generator.forward(&Eval, &store, lr)?;
        total += crate::ops::l1(&sr, hr)?.item().as_f64();
    }
    Ok(-total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_is_correctly_rounded() {
        assert_eq!(exact_sum(&[1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum(&[0.1; 10]), 1.0);
        assert_eq!(exact_sum(&[1.0, 1e-16, 1e-16]), 1.0000000000000002);
        assert_eq!(exact_sum(&[]), 0.0);
        assert!(exact_sum(&[1.0, f64::NAN]).is_nan());
    }

    fn ck(values: &[f64], step: u64) -> Checkpoint {
        let mut entries = std::collections::BTreeMap::new();
        entries.insert(
            "p".to_string(),
            Entry {
                dims: vec![values.len()],
                data: EntryData::F64(values.to_vec()),
            },
        );
        Checkpoint {
            fingerprint: [7; 32],
            meta: Meta {
                step,
                ..Meta::default()
            },
            entries,
        }
    }

    fn values(c: &Checkpoint) -> Vec<f64> {
        c.entries["p"].data.to_f64()
    }

    #[test]
    fn midpoint() {
        let avg = average_checkpoints(&[ck(&[0.0], 1), ck(&[1.0], 2)], 2).unwrap();
        assert_eq!(values(&avg), vec![0.5]);
        assert_eq!(avg.meta.source_steps, vec![1, 2]);
        assert_eq!(avg.meta.stage, Stage::Ensemble);
    }

    #[test]
    fn size_and_compatibility_errors() {
        assert!(average_checkpoints(&[], 0).is_err());
        assert!(average_checkpoints(&[ck(&[0.0], 1)], 2).is_err());
        let mut other = ck(&[0.0], 1);
        other.fingerprint = [8; 32];
        assert!(matches!(
            average_checkpoints(&[ck(&[0.0], 1), other], 2),
            Err(Error::Checkpoint(CheckpointError::FingerprintMismatch))
        ));
        assert!(average_checkpoints(&[ck(&[0.0], 1), ck(&[0.0, 1.0], 1)], 2).is_err());
        let mut renamed = ck(&[0.0], 1);
        let e = renamed.entries.remove("p").unwrap();
        renamed.entries.insert("q".into(), e);
        assert!(average_checkpoints(&[ck(&[0.0], 1), renamed], 2).is_err());
    }

    #[test]
    fn top_k() {
        let cands = |scores: &[f64]| -> Vec<Scored<usize>> {
            scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Scored {
                    item: i,
                    step: i as u64 * 10,
                    score: s,
                })
                .collect()
        };
        let top = select_top(cands(&[3.0, 1.0, 2.0]), 2).unwrap();
        assert_eq!(top.iter().map(|c| c.item).collect::<Vec<_>>(), vec![0, 2]);
        let tied = select_top(cands(&[1.0; 5]), 2).unwrap();
        assert_eq!(tied.iter().map(|c| c.step).collect::<Vec<_>>(), vec![40, 30]);
        let mut all: Vec<_> = select_top(cands(&[5.0, 4.0, 9.0]), 3)
            .unwrap()
            .iter()
            .map(|c| c.item)
            .collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(select_top(cands(&[1.0]), 2).is_err());
    }

    #[test]
    fn scorer_prefers_better_model() {
        let cfg = GeneratorConfig::tiny(2);
        let (_, store) = Generator::build::<f64>(&cfg, 3).unwrap();
        let good = Checkpoint::from_store(&store, cfg.fingerprint(), Meta::default());
        let (g, s) = Generator::build::<f64>(&cfg, 3).unwrap();
        let lr = Tensor::<f64>::full([1, 3, 4, 4], 0.4);
        let hr = g.forward(&Eval, &s, &lr).unwrap();
        let mut bad = good.clone();
        for e in bad.entries.values_mut() {
            let shifted: Vec<f64> = e.data.to_f64().iter().map(|v| v + 0.05).collect();
            e.data = EntryData::F64(shifted);
        }
        let pairs = vec![(lr, hr)];
        let sg = negative_l1_score(&cfg, &good, &pairs).unwrap();
        let sb = negative_l1_score(&cfg, &bad, &pairs).unwrap();
        assert_eq!(sg, 0.0);
        assert!(sb < sg);
    }
}
