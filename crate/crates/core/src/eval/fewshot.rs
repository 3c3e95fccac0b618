//! K-way N-shot episodes with a linear probe per episode.

use crate::error::{Result, TammError};
use crate::numkit::Matrix;
use crate::rng::{hash_f64s, permutation, seeded, STREAM_EPISODE};

use super::probe::{linear_probe, ProbeConfig};

/// Query items drawn per class in every episode.
pub const QUERY_PER_CLASS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub trial_seed: u64,
    pub classes: Vec<u32>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Samples `ways` classes from the labels of `pool`, then `shots` support and
/// [`QUERY_PER_CLASS`] query items per class, all without replacement.
pub fn fewshot_episode(
    labels: &[u32],
    pool: &[usize],
    ways: usize,
    shots: usize,
    trial_seed: u64,
) -> Result<EpisodeSpec> {
    if ways < 2 || shots < 1 {
        return Err(TammError::config(format!(
            "episodes need ≥ 2 ways and ≥ 1 shot, got {ways}-way {shots}-shot"
        )));
    }
    let mut available: Vec<u32> = pool.iter().map(|&i| labels[i]).collect();
    available.sort_unstable();
    available.dedup();
    if ways > available.len() {
        return Err(TammError::config(format!(
            "{ways}-way episode but only {} classes available",
            available.len()
        )));
    }
    let mut rng = seeded(trial_seed, STREAM_EPISODE);
    let pick = permutation(&mut rng, available.len());
    let mut classes: Vec<u32> = pick[..ways].iter().map(|&p| available[p]).collect();
    classes.sort_unstable();

    let (mut support, mut query) = (Vec::new(), Vec::new());
    for &c in &classes {
        let members: Vec<usize> = pool.iter().copied().filter(|&i| labels[i] == c).collect();
        if members.len() < shots + QUERY_PER_CLASS {
            return Err(TammError::config(format!(
                "class {c} has {} samples, needs {}",
                members.len(),
                shots + QUERY_PER_CLASS
            )));
        }
        let perm = permutation(&mut rng, members.len());
        support.extend(perm[..shots].iter().map(|&p| members[p]));
        query.extend(perm[shots..shots + QUERY_PER_CLASS].iter().map(|&p| members[p]));
    }
    Ok(EpisodeSpec {
        ways,
        shots,
        trial_seed,
        classes,
        support,
        query,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
}

impl FewShotResult {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(TammError::config("few-shot evaluation needs at least one trial"));
        }
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() < 2 {
            0.0
        } else {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(FewShotResult { accuracies, mean, std })
    }
}

/// Seed of trial `t`.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    hash_f64s(&[t as f64], seed)
}

/// Mean and spread of probe accuracy over `trials` episodes.
#[allow(clippy::too_many_arguments)]
pub fn fewshot_eval(
    features: &Matrix,
    labels: &[u32],
    pool: &[usize],
    ways: usize,
    shots: usize,
    trials: usize,
    seed: u64,
    probe: &ProbeConfig,
) -> Result<FewShotResult> {
    let mut accs = Vec::with_capacity(trials);
    for t in 0..trials {
        let ep = fewshot_episode(labels, pool, ways, shots, trial_seed(seed, t))?;
        let ys: Vec<u32> = ep.support.iter().map(|&i| labels[i]).collect();
        let yq: Vec<u32> = ep.query.iter().map(|&i| labels[i]).collect();
        accs.push(linear_probe(
            &features.select_rows(&ep.support),
            &ys,
            &features.select_rows(&ep.query),
            &yq,
            probe,
        )?);
    }
    FewShotResult::from_accuracies(accs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<u32> {
        (0..300).map(|i| (i % 6) as u32).collect()
    }

    #[test]
    fn episode_sizes() {
        let l = labels();
        let pool: Vec<usize> = (0..l.len()).collect();
        let ep = fewshot_episode(&l, &pool, 5, 10, 3).unwrap();
        assert_eq!(ep.support.len(), 50);
        assert_eq!(ep.query.len(), 100);
        assert_eq!(ep, fewshot_episode(&l, &pool, 5, 10, 3).unwrap());
        for c in &ep.classes {
            assert_eq!(ep.query.iter().filter(|&&i| l[i] == *c).count(), QUERY_PER_CLASS);
        }
    }

    #[test]
    fn short_class_is_named() {
        let l = labels();
        let pool: Vec<usize> = (0..120).collect();
        match fewshot_episode(&l, &pool, 6, 10, 0) {
            Err(TammError::Config(m)) => assert!(m.starts_with("class "), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_trial_has_zero_std() {
        let r = FewShotResult::from_accuracies(vec![0.7]).unwrap();
        assert_eq!((r.mean, r.std), (0.7, 0.0));
        let r = FewShotResult::from_accuracies(vec![0.5, 0.7]).unwrap();
        assert!((r.std - 0.1414213562373095).abs() < 1e-12);
    }
}
