//! Hypothesis pools, scoring and the three selection rules.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{argmax, Real};
use crate::solvers::{Estimator, MinimalSet};

/// How the final hypothesis is chosen from the scored pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Highest score.
    Ransac,
    /// Probability-weighted average of all hypotheses.
    Softam,
    /// One hypothesis drawn from the score distribution.
    Dsac,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Ransac, Strategy::Softam, Strategy::Dsac];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ransac => "ransac",
            Strategy::Softam => "softam",
            Strategy::Dsac => "dsac",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ransac" => Ok(Strategy::Ransac),
            "softam" => Ok(Strategy::Softam),
            "dsac" => Ok(Strategy::Dsac),
            other => Err(Error::InvalidConfig(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Resampling attempts per pool slot before the slot is marked invalid.
pub const POOL_RETRY_CAP: usize = 16;

#[derive(Debug, Clone)]
pub struct PoolEntry<T, M> {
    /// `None` for slots whose minimal sets never produced a model.
    pub model: Option<M>,
    pub set: MinimalSet,
    pub score: T,
}

impl<T: Real, M> PoolEntry<T, M> {
    pub fn is_valid(&self) -> bool {
        self.model.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct HypothesisPool<T, M> {
    pub entries: Vec<PoolEntry<T, M>>,
}

impl<T: Real, M: Clone> HypothesisPool<T, M> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pool positions of the valid entries, ascending.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].is_valid()).collect()
    }

    pub fn model(&self, index: usize) -> Option<&M> {
        self.entries.get(index).and_then(|e| e.model.as_ref())
    }

    /// Softmax over the scores of the valid entries.
    pub fn distribution(&self) -> Result<ScoreDistribution<T>> {
        let support = self.valid_indices();
        if support.is_empty() {
            return Err(Error::AllInvalid);
        }
        let scores: Vec<T> = support.iter().map(|&i| self.entries[i].score).collect();
        let mut dist = softmax(&scores);
        dist.support = support;
        Ok(dist)
    }
}

/// Softmax probabilities over the valid entries of a pool. `probs[k]`
/// belongs to pool position `support[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution<T> {
    pub probs: Vec<T>,
    pub log_probs: Vec<T>,
    pub support: Vec<usize>,
}

impl<T: Real> ScoreDistribution<T> {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Position in `probs` of a pool index, if it is in the support.
    pub fn position(&self, pool_index: usize) -> Option<usize> {
        self.support.iter().position(|&i| i == pool_index)
    }

    /// Draws a position in `probs` by inverse CDF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += p.as_f64();
            if u < acc {
                return k;
            }
        }
        // rounding left the total a hair below one; fall back to the last
        // entry with mass
        self.probs.iter().rposition(|p| *p > T::zero()).unwrap_or(0)
    }
}

/// Max-subtracted softmax. Panics on an empty score vector.
pub fn softmax<T: Real>(scores: &[T]) -> ScoreDistribution<T> {
    assert!(!scores.is_empty(), "softmax of an empty score vector");
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let shifted: Vec<T> = scores.iter().map(|&s| s - m).collect();
    let z: T = shifted.iter().map(|&s| s.exp()).sum();
    let log_z = z.ln();
    let log_probs: Vec<T> = shifted.iter().map(|&s| s - log_z).collect();
    let probs = log_probs.iter().map(|l| l.exp()).collect();
    ScoreDistribution {
        probs,
        log_probs,
        support: (0..scores.len()).collect(),
    }
}

/// Shannon entropy in nats.
pub fn entropy<T: Real>(dist: &ScoreDistribution<T>) -> T {
    dist.probs
        .iter()
        .zip(&dist.log_probs)
        .filter(|(p, _)| **p > T::zero())
        .map(|(&p, &l)| -p * l)
        .sum()
}

/// Number of errors strictly below `tau`.
pub fn inlier_count_score<T: Real>(errors: &[T], tau: T) -> T {
    T::from_usize(errors.iter().filter(|&&e| e < tau).count()).unwrap()
}

/// `n` distinct indices drawn uniformly from `0..count`, in draw order.
pub fn sample_minimal_set<R: Rng + ?Sized>(count: usize, n: usize, rng: &mut R) -> Result<MinimalSet> {
    if count < n {
        return Err(Error::TooFewCorrespondences {
            needed: n,
            available: count,
        });
    }
    Ok(MinimalSet(sample(rng, count, n).into_vec()))
}

/// Samples `size` hypotheses. Every slot gets its own generator seeded from
/// `rng`, so a slot's outcome does not depend on how the others went.
pub fn build_pool<T, E, R>(
    estimator: &E,
    data: &[E::Datum],
    size: usize,
    rng: &mut R,
) -> Result<HypothesisPool<T, E::Model>>
where
    T: Real,
    E: Estimator<T>,
    R: Rng + ?Sized,
{
    let n = estimator.minimal_size();
    if data.len() < n {
        return Err(Error::TooFewCorrespondences {
            needed: n,
            available: data.len(),
        });
    }
    let seeds: Vec<u64> = (0..size).map(|_| rng.gen()).collect();
    let entries: Vec<_> = seeds
        .into_iter()
        .map(|seed| {
            let mut slot_rng = ChaCha8Rng::seed_from_u64(seed);
            let mut last = None;
            for _ in 0..POOL_RETRY_CAP {
                let set = sample_minimal_set(data.len(), n, &mut slot_rng).expect("size checked above");
                match estimator.solve_minimal(data, set.indices()) {
                    Ok(model) => {
                        return PoolEntry {
                            model: Some(model),
                            set,
                            score: T::zero(),
                        }
                    }
                    Err(_) => last = Some(set),
                }
            }
            PoolEntry {
                model: None,
                set: last.expect("retry cap is positive"),
                score: T::neg_infinity(),
            }
        })
        .collect();
    if size > 0 && entries.iter().all(|e| !e.is_valid()) {
        return Err(Error::AllDegenerate {
            attempts: size * POOL_RETRY_CAP,
        });
    }
    Ok(HypothesisPool { entries })
}

/// Every minimal set in lexicographic order, one hypothesis each. Sets whose
/// solve fails become invalid entries.
pub fn enumerate_pool<T, E>(estimator: &E, data: &[E::Datum], limit: usize) -> Result<HypothesisPool<T, E::Model>>
where
    T: Real,
    E: Estimator<T>,
{
    let n = estimator.minimal_size();
    let count = data.len();
    if count < n {
        return Err(Error::TooFewCorrespondences {
            needed: n,
            available: count,
        });
    }
    let total = binomial(count, n);
    if total > limit {
        return Err(Error::PoolTooLarge { size: total, limit });
    }
    let mut entries = Vec::with_capacity(total);
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let model = estimator.solve_minimal(data, &idx).ok();
        let score = if model.is_some() { T::zero() } else { T::neg_infinity() };
        entries.push(PoolEntry {
            model,
            set: MinimalSet(idx.clone()),
            score,
        });
        // next combination
        let mut k = n;
        while k > 0 && idx[k - 1] == count - n + k - 1 {
            k -= 1;
        }
        if k == 0 {
            break;
        }
        idx[k - 1] += 1;
        for j in k..n {
            idx[j] = idx[j - 1] + 1;
        }
    }
    if entries.iter().all(|e| !e.is_valid()) {
        return Err(Error::AllDegenerate { attempts: total });
    }
    Ok(HypothesisPool { entries })
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Sets `score = scorer(errors)` on every valid entry, with the errors in
/// data order.
pub fn score_pool<T, E, F>(estimator: &E, pool: &mut HypothesisPool<T, E::Model>, data: &[E::Datum], mut scorer: F)
where
    T: Real,
    E: Estimator<T>,
    F: FnMut(&[T]) -> T,
{
    for entry in &mut pool.entries {
        if let Some(model) = &entry.model {
            entry.score = scorer(&estimator.errors(model, data));
        }
    }
}

/// Highest-scoring valid entry, ties to the lowest pool position.
pub fn select_argmax<T: Real, M: Clone>(pool: &HypothesisPool<T, M>) -> Result<(&M, &MinimalSet, usize)> {
    let scores: Vec<T> = pool
        .entries
        .iter()
        .map(|e| if e.is_valid() { e.score } else { T::nan() })
        .collect();
    let i = argmax(&scores).ok_or(Error::AllInvalid)?;
    let e = &pool.entries[i];
    Ok((e.model.as_ref().ok_or(Error::AllInvalid)?, &e.set, i))
}

/// Probability-weighted average of the model parameter vectors.
pub fn select_soft_argmax<T, E>(
    estimator: &E,
    pool: &HypothesisPool<T, E::Model>,
    dist: &ScoreDistribution<T>,
) -> Result<E::Model>
where
    T: Real,
    E: Estimator<T>,
{
    if dist.is_empty() {
        return Err(Error::AllInvalid);
    }
    let mut avg = vec![T::zero(); estimator.model_dim()];
    for (&i, &p) in dist.support.iter().zip(&dist.probs) {
        let model = pool.model(i).ok_or(Error::AllInvalid)?;
        for (a, v) in avg.iter_mut().zip(estimator.to_params(model)) {
            *a += p * v;
        }
    }
    Ok(estimator.from_params(&avg))
}

/// Draws one hypothesis from `dist` and returns it unchanged.
pub fn select_probabilistic<'a, T: Real, M: Clone, R: Rng + ?Sized>(
    pool: &'a HypothesisPool<T, M>,
    dist: &ScoreDistribution<T>,
    rng: &mut R,
) -> Result<(&'a M, &'a MinimalSet, usize)> {
    if dist.is_empty() {
        return Err(Error::AllInvalid);
    }
    let i = dist.support[dist.sample(rng)];
    let e = &pool.entries[i];
    Ok((e.model.as_ref().ok_or(Error::AllInvalid)?, &e.set, i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{LineEstimator, LineModel, LinePoint};
    use super::Strategy;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn line_pool(models: &[(f64, f64)], scores: &[f64]) -> HypothesisPool<f64, LineModel<f64>> {
        HypothesisPool {
            entries: models
                .iter()
                .zip(scores)
                .enumerate()
                .map(|(i, (&(a, b), &score))| PoolEntry {
                    model: Some(LineModel { a, b }),
                    set: MinimalSet(vec![i, i + 1]),
                    score,
                })
                .collect(),
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("argmax".parse::<Strategy>().is_err());
    }

    #[test]
    fn softmax_examples() {
        let d = softmax(&[2.0, 2.0, 2.0, 2.0]);
        for p in &d.probs {
            assert_abs_diff_eq!(*p, 0.25, epsilon = 1e-15);
        }
        let d = softmax(&[0.0, 3f64.ln()]);
        assert_abs_diff_eq!(d.probs[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs[1], 0.75, epsilon = 1e-15);
        let shifted = softmax(&[17.0, 17.0 + 3f64.ln()]);
        assert_abs_diff_eq!(shifted.probs[1], d.probs[1], epsilon = 1e-15);
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(entropy(&softmax(&[0.0; 8])), 8f64.ln(), epsilon = 1e-12);
        assert_eq!(entropy(&softmax(&[0.0, -1e6])), 0.0);
        let two = softmax(&[0.0, 3f64.ln()]);
        assert_abs_diff_eq!(entropy(&two), -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(entropy(&two), 0.5623, epsilon = 1e-4);
    }

    #[test]
    fn inlier_count_examples() {
        assert_eq!(inlier_count_score(&[0.0; 7], 10.0), 7.0);
        assert_eq!(inlier_count_score(&[100.0; 7], 10.0), 0.0);
        let e = [1.0, 10.0, 9.999, 50.0, 0.0];
        let brute = e.iter().filter(|&&x| x < 10.0).count() as f64;
        assert_eq!(inlier_count_score(&e, 10.0), brute);
    }

    #[test]
    fn minimal_set_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut full = sample_minimal_set(4, 4, &mut rng).unwrap().0;
        full.sort_unstable();
        assert_eq!(full, vec![0, 1, 2, 3]);
        assert!(sample_minimal_set(3, 4, &mut rng).is_err());
    }

    #[test]
    fn minimal_set_sampling_is_uniform_over_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 1_000_000;
        let mut counts = [[0usize; 5]; 5];
        for _ in 0..draws {
            let s = sample_minimal_set(5, 2, &mut rng).unwrap().0;
            counts[s[0].min(s[1])][s[0].max(s[1])] += 1;
        }
        let mut chi2 = 0.0;
        for i in 0..5 {
            for j in i + 1..5 {
                let f = counts[i][j] as f64 / draws as f64;
                assert!((f - 0.1).abs() < 0.002, "pair ({i},{j}) at {f}");
                let expected = draws as f64 * 0.1;
                chi2 += (counts[i][j] as f64 - expected).powi(2) / expected;
            }
        }
        // 9 degrees of freedom, 99.9% quantile
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }

    #[test]
    fn argmax_ties_and_shift() {
        let pool = line_pool(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], &[1.0, 3.0, 3.0]);
        assert_eq!(select_argmax(&pool).unwrap().2, 1);
        let shifted = line_pool(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], &[-9.0, -7.0, -7.0]);
        assert_eq!(select_argmax(&shifted).unwrap().2, 1);
        let mut invalid = pool.clone();
        invalid.entries[1].model = None;
        invalid.entries[1].score = f64::NEG_INFINITY;
        assert_eq!(select_argmax(&invalid).unwrap().2, 2);
        for e in &mut invalid.entries {
            e.model = None;
        }
        assert_eq!(select_argmax(&invalid).unwrap_err(), Error::AllInvalid);
        assert_eq!(invalid.distribution().unwrap_err(), Error::AllInvalid);
    }

    #[test]
    fn soft_argmax_examples() {
        let est = LineEstimator { cap: 100.0 };
        let pool = line_pool(&[(1.0, 2.0), (3.0, -1.0), (-2.0, 4.0)], &[0.0, 0.0, 0.0]);
        let dist = ScoreDistribution {
            probs: vec![0.2, 0.3, 0.5],
            log_probs: vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()],
            support: vec![0, 1, 2],
        };
        let m = select_soft_argmax(&est, &pool, &dist).unwrap();
        assert_abs_diff_eq!(m.a, 0.2 * 1.0 + 0.3 * 3.0 + 0.5 * -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.b, 0.2 * 2.0 + 0.3 * -1.0 + 0.5 * 4.0, epsilon = 1e-15);
        let one_hot = ScoreDistribution {
            probs: vec![0.0, 1.0, 0.0],
            log_probs: vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY],
            support: vec![0, 1, 2],
        };
        assert_eq!(select_soft_argmax(&est, &pool, &one_hot).unwrap(), LineModel { a: 3.0, b: -1.0 });
    }

    #[test]
    fn probabilistic_selection_frequencies() {
        let pool = line_pool(&[(0.0, 0.0), (1.0, 0.0)], &[0.0, 3f64.ln()]);
        let dist = pool.distribution().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 1_000_000;
        let ones = (0..draws)
            .filter(|_| select_probabilistic(&pool, &dist, &mut rng).unwrap().2 == 1)
            .count();
        assert!((ones as f64 / draws as f64 - 0.75).abs() < 0.002);

        let single = line_pool(&[(0.0, 0.0)], &[4.0]);
        let d = single.distribution().unwrap();
        assert!((0..1000).all(|_| select_probabilistic(&single, &d, &mut rng).unwrap().2 == 0));

        let a = select_probabilistic(&pool, &dist, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().2;
        let b = select_probabilistic(&pool, &dist, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().2;
        assert_eq!(a, b);
    }

    #[test]
    fn pools_on_line_data() {
        let est = LineEstimator { cap: 100.0 };
        let data: Vec<_> = (0..10).map(|i| LinePoint::new(i as f64, 2.0 * i as f64 + 1.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pool = build_pool(&est, &data, 256, &mut rng).unwrap();
        assert_eq!(pool.len(), 256);
        for e in &pool.entries {
            let m = e.model.as_ref().unwrap();
            let errs = est.errors(m, &data);
            assert!(e.set.indices().iter().all(|&i| errs[i] < 1e-9));
        }
        score_pool(&est, &mut pool, &data, |_| 1.5);
        assert!(pool.entries.iter().all(|e| e.score == 1.5));
        score_pool(&est, &mut pool, &data, |e| inlier_count_score(e, 1.0));
        let (m, _, _) = select_argmax(&pool).unwrap();
        assert!((m.a - 2.0).abs() < 1e-9 && (m.b - 1.0).abs() < 1e-9);

        let all = enumerate_pool(&est, &data[..6], 100).unwrap();
        assert_eq!(all.len(), 15);
        assert_eq!(all.entries[0].set.0, vec![0, 1]);
        assert_eq!(all.entries[14].set.0, vec![4, 5]);
        assert_eq!(
            enumerate_pool(&est, &data, 10).unwrap_err(),
            Error::PoolTooLarge { size: 45, limit: 10 }
        );

        // identical x everywhere: every minimal set is vertical
        let vertical: Vec<_> = (0..5).map(|i| LinePoint::new(1.0, i as f64)).collect();
        assert_eq!(
            build_pool(&est, &vertical, 4, &mut rng).unwrap_err(),
            Error::AllDegenerate {
                attempts: 4 * POOL_RETRY_CAP
            }
        );
    }

    #[test]
    fn pool_is_reproducible() {
        let est = LineEstimator { cap: 100.0 };
        let data: Vec<_> = (0..20).map(|i| LinePoint::new(i as f64, (i * i) as f64)).collect();
        let a = build_pool(&est, &data, 32, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = build_pool(&est, &data, 32, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let sets = |p: &HypothesisPool<f64, LineModel<f64>>| p.entries.iter().map(|e| e.set.clone()).collect::<Vec<_>>();
        assert_eq!(sets(&a), sets(&b));
    }

    proptest! {
        #[test]
        fn softmax_invariants(scores in prop::collection::vec(-30.0..30.0f64, 1..40), shift in -100.0..100.0f64) {
            let d = softmax(&scores);
            let total: f64 = d.probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(d.probs.iter().all(|&p| p > 0.0));
            for (p, l) in d.probs.iter().zip(&d.log_probs) {
                prop_assert!((l.exp() - p).abs() < 1e-12);
            }
            let moved: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let e = softmax(&moved);
            for (p, q) in d.probs.iter().zip(&e.probs) {
                prop_assert!((p - q).abs() < 1e-12);
            }
            let h = entropy(&d);
            prop_assert!(h >= -1e-12 && h <= (scores.len() as f64).ln() + 1e-12);
            // argmax of scores and of probabilities agree
            prop_assert_eq!(argmax(&scores), argmax(&d.probs));
        }

        #[test]
        fn softmax_is_monotone(scores in prop::collection::vec(-10.0..10.0f64, 2..20), k in 0usize..20, bump in 0.01..5.0f64) {
            let k = k % scores.len();
            let mut up = scores.clone();
            up[k] += bump;
            prop_assert!(softmax(&up).probs[k] > softmax(&scores).probs[k]);
        }

        #[test]
        fn soft_argmax_in_convex_hull(models in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..12),
                                      raw in prop::collection::vec(-5.0..5.0f64, 12)) {
            let est = LineEstimator { cap: 100.0 };
            let pool = line_pool(&models, &raw[..models.len()]);
            let dist = pool.distribution().unwrap();
            let m = select_soft_argmax(&est, &pool, &dist).unwrap();
            let (amin, amax) = models.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &(a, _)| (lo.min(a), hi.max(a)));
            let (bmin, bmax) = models.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &(_, b)| (lo.min(b), hi.max(b)));
            prop_assert!(m.a >= amin - 1e-12 && m.a <= amax + 1e-12);
            prop_assert!(m.b >= bmin - 1e-12 && m.b <= bmax + 1e-12);
        }
    }
}
