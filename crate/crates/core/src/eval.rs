//! Hold-out evaluation: split users, transfer roles to unseen users through
//! their nearest training neighbour, and count mispredicted cells.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{bool_mat_prod, hamming, BinaryMatrix, BinaryMatrixBuilder};
use crate::rbac::FlatRbacConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub repetitions: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            repetitions: 5,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::out_of_range("train_fraction", self.train_fraction, "(0, 1)"));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("at least one repetition is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: BinaryMatrix,
    pub test: BinaryMatrix,
    /// Original row index of every training row, ascending.
    pub train_users: Vec<usize>,
    pub test_users: Vec<usize>,
}

/// Random user split for repetition `repetition`. Every repetition uses its
/// own stream of a generator seeded by `spec.seed`.
pub fn split_users(x: &BinaryMatrix, spec: &SplitSpec, repetition: usize) -> Result<Split> {
    spec.validate()?;
    let n = x.rows();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    if n < 2 || n_train == 0 || n_train == n {
        return Err(Error::InvalidConfig(format!(
            "a {n}-user matrix cannot be split with train fraction {}",
            spec.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(repetition as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut train_users = order[..n_train].to_vec();
    let mut test_users = order[n_train..].to_vec();
    train_users.sort_unstable();
    test_users.sort_unstable();
    Ok(Split {
        train: x.select_rows(&train_users)?,
        test: x.select_rows(&test_users)?,
        train_users,
        test_users,
    })
}

/// Index of the `x1` row nearest to row `j` of `x2` in Hamming distance,
/// lowest index on ties.
pub fn nearest_neighbor(x1: &BinaryMatrix, x2: &BinaryMatrix, j: usize) -> usize {
    let mut best = 0;
    let mut best_dist = usize::MAX;
    for i in 0..x1.rows() {
        let dist = x1.row_distance(i, x2, j);
        if dist < best_dist {
            best = i;
            best_dist = dist;
            if dist == 0 {
                break;
            }
        }
    }
    best
}

/// Copy to every hold-out user the role assignment of its nearest training user.
pub fn transfer_roles(x1: &BinaryMatrix, z_hat: &BinaryMatrix, x2: &BinaryMatrix) -> Result<BinaryMatrix> {
    if z_hat.rows() != x1.rows() {
        return Err(Error::ShapeMismatch {
            op: "transfer_roles (x1 vs z_hat)",
            left: x1.shape(),
            right: z_hat.shape(),
        });
    }
    if x1.cols() != x2.cols() {
        return Err(Error::ShapeMismatch {
            op: "transfer_roles (x1 vs x2)",
            left: x1.shape(),
            right: x2.shape(),
        });
    }
    let nn: Vec<usize> = (0..x2.rows()).into_par_iter().map(|j| nearest_neighbor(x1, x2, j)).collect();
    z_hat.select_rows(&nn)
}

/// Fraction of cells where `z_prime ∘ u_hat` differs from `x2`.
pub fn generalization_error(z_prime: &BinaryMatrix, u_hat: &BinaryMatrix, x2: &BinaryMatrix) -> Result<f64> {
    let recon = bool_mat_prod(z_prime, u_hat)?;
    let diff = hamming(&recon, x2)?;
    Ok(diff as f64 / (x2.rows() * x2.cols()) as f64)
}

/// Reconstruction errors against ground truth. "New" errors sit on cells the
/// noise left intact; "repeated" errors reproduce a noisy observation. Rates
/// are fractions of all cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub new_false_positive: f64,
    pub new_false_negative: f64,
    pub repeated_false_positive: f64,
    pub repeated_false_negative: f64,
    pub correct: f64,
}

impl ErrorBreakdown {
    pub fn total_error(&self) -> f64 {
        self.new_false_positive + self.new_false_negative + self.repeated_false_positive + self.repeated_false_negative
    }
}

pub fn error_breakdown(
    reconstruction: &BinaryMatrix,
    x_observed: &BinaryMatrix,
    x_clean: &BinaryMatrix,
) -> Result<ErrorBreakdown> {
    for (op, m) in [("error_breakdown (observed)", x_observed), ("error_breakdown (clean)", x_clean)] {
        if m.shape() != reconstruction.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: reconstruction.shape(),
                right: m.shape(),
            });
        }
    }
    let (n, d) = reconstruction.shape();
    let mut counts = [0usize; 5];
    for i in 0..n {
        for j in 0..d {
            let (r, o, c) = (reconstruction.get(i, j), x_observed.get(i, j), x_clean.get(i, j));
            let slot = if r == c {
                4
            } else {
                (o != c) as usize * 2 + (!r) as usize
            };
            counts[slot] += 1;
        }
    }
    let cells = (n * d) as f64;
    Ok(ErrorBreakdown {
        new_false_positive: counts[0] as f64 / cells,
        new_false_negative: counts[1] as f64 / cells,
        repeated_false_positive: counts[2] as f64 / cells,
        repeated_false_negative: counts[3] as f64 / cells,
        correct: counts[4] as f64 / cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub center: f64,
    pub count: usize,
    /// `None` for a bin without cells.
    pub error_rate: Option<f64>,
}

/// Bin cells by the model's confidence in its reconstruction and report the
/// fraction of reconstruction errors (against `x_clean`) per bin. Bins are
/// equal-width on `[0, 1]`; the last bin is closed.
pub fn calibration_curve(
    confidences: &[f64],
    reconstruction: &BinaryMatrix,
    x_clean: &BinaryMatrix,
    bins: usize,
) -> Result<Vec<CalibrationBin>> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!("calibration needs at least 2 bins, got {bins}")));
    }
    if reconstruction.shape() != x_clean.shape() {
        return Err(Error::ShapeMismatch {
            op: "calibration_curve",
            left: reconstruction.shape(),
            right: x_clean.shape(),
        });
    }
    let (n, d) = x_clean.shape();
    if confidences.len() != n * d {
        return Err(Error::ShapeMismatch {
            op: "calibration_curve (confidences)",
            left: (n, d),
            right: (confidences.len(), 1),
        });
    }
    let mut count = vec![0usize; bins];
    let mut wrong = vec![0usize; bins];
    for (c, &p) in confidences.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::out_of_range("confidence", p, "[0, 1]"));
        }
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        let (i, j) = (c / d, c % d);
        wrong[b] += (reconstruction.get(i, j) != x_clean.get(i, j)) as usize;
    }
    let width = 1.0 / bins as f64;
    Ok((0..bins)
        .map(|b| CalibrationBin {
            lower: b as f64 * width,
            upper: (b + 1) as f64 * width,
            center: (b as f64 + 0.5) * width,
            count: count[b],
            error_rate: (count[b] > 0).then(|| wrong[b] as f64 / count[b] as f64),
        })
        .collect())
}

/// Linearly interpolated percentile, `p` in `[0, 100]`. NaN for no values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && values[idx[end + 1]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            out[i] = avg;
        }
        start = end + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant or fewer than two pairs are given.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() != ys.len() || xs.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Fits a flat configuration with `k` roles; the `u64` is a seed.
pub type FitFn<'a> = dyn Fn(&BinaryMatrix, usize, u64) -> Result<FlatRbacConfig> + Sync + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub k: usize,
    pub train_error: f64,
    pub gen_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub repetitions: Vec<RepetitionResult>,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub breakdown: Option<ErrorBreakdown>,
    pub calibration: Option<Vec<CalibrationBin>>,
}

impl EvalReport {
    pub fn gen_errors(&self) -> Vec<f64> {
        self.repetitions.iter().map(|r| r.gen_error).collect()
    }
}

/// One repetition with the hold-out reconstruction kept for further analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct RepetitionDetail {
    pub result: RepetitionResult,
    pub test_users: Vec<usize>,
    /// `Z' ∘ Û` for the hold-out users, rows in `test_users` order.
    pub reconstruction: BinaryMatrix,
}

pub fn repetition_detail(
    x: &BinaryMatrix,
    k: usize,
    fit: &FitFn<'_>,
    spec: &SplitSpec,
    repetition: usize,
) -> Result<RepetitionDetail> {
    let split = split_users(x, spec, repetition)?;
    let config = fit(&split.train, k, spec.seed.wrapping_add(repetition as u64))?;
    let train_cells = (split.train.rows() * split.train.cols()) as f64;
    let train_error = hamming(&config.reconstruct(), &split.train)? as f64 / train_cells;
    let z_prime = transfer_roles(&split.train, config.z(), &split.test)?;
    let reconstruction = bool_mat_prod(&z_prime, config.u())?;
    let gen_error = hamming(&reconstruction, &split.test)? as f64 / (split.test.rows() * split.test.cols()) as f64;
    Ok(RepetitionDetail {
        result: RepetitionResult {
            repetition,
            k,
            train_error,
            gen_error,
        },
        test_users: split.test_users,
        reconstruction,
    })
}

/// Fit on the training users of one repetition and score the hold-out users.
pub fn run_repetition(x: &BinaryMatrix, k: usize, fit: &FitFn<'_>, spec: &SplitSpec, repetition: usize) -> Result<RepetitionResult> {
    repetition_detail(x, k, fit, spec, repetition).map(|d| d.result)
}

/// Repeated split / fit / transfer / score at a fixed `k`.
pub fn evaluate(x: &BinaryMatrix, k: usize, fit: &FitFn<'_>, spec: &SplitSpec) -> Result<EvalReport> {
    spec.validate()?;
    let repetitions: Vec<RepetitionResult> = (0..spec.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(x, k, fit, spec, r))
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = repetitions.iter().map(|r| r.gen_error).collect();
    Ok(EvalReport {
        median: median(&errors),
        p25: percentile(&errors, 25.0),
        p75: percentile(&errors, 75.0),
        repetitions,
        breakdown: None,
        calibration: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    /// Hold-out error per repetition; `None` where the fit failed.
    pub errors: Vec<Option<f64>>,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub disqualified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweep {
    pub scores: Vec<KScore>,
    pub selected: usize,
    /// The sweep stopped before the last candidate because the error rose
    /// by more than the best candidate's interquartile range.
    pub stopped_early: bool,
}

/// Model-order selection. Candidates are tried in the given order and the
/// sweep stops once a median exceeds the best median so far by more than the
/// best candidate's interquartile range. A candidate with more than half of
/// its folds failing is disqualified.
pub fn cross_validate_k(x: &BinaryMatrix, candidates: &[usize], fit: &FitFn<'_>, spec: &SplitSpec) -> Result<KSweep> {
    spec.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate role counts given".into()));
    }
    let mut scores: Vec<KScore> = Vec::new();
    let mut best: Option<usize> = None;
    let mut stopped_early = false;
    for (pos, &k) in candidates.iter().enumerate() {
        let errors: Vec<Option<f64>> = (0..spec.repetitions)
            .into_par_iter()
            .map(|r| run_repetition(x, k, fit, spec, r).ok().map(|res| res.gen_error))
            .collect();
        let ok: Vec<f64> = errors.iter().flatten().copied().collect();
        let failed = errors.len() - ok.len();
        let score = KScore {
            k,
            median: median(&ok),
            p25: percentile(&ok, 25.0),
            p75: percentile(&ok, 75.0),
            disqualified: failed * 2 > errors.len(),
            errors,
        };
        let idx = scores.len();
        scores.push(score);
        let s = &scores[idx];
        if s.disqualified {
            continue;
        }
        match best {
            None => best = Some(idx),
            Some(b) => {
                let bs = &scores[b];
                if s.median < bs.median {
                    best = Some(idx);
                } else if s.median > bs.median + (bs.p75 - bs.p25) && pos + 1 < candidates.len() {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let selected = match best {
        Some(b) => scores[b].k,
        None if candidates.len() == 1 => candidates[0],
        None => return Err(Error::Infeasible("every candidate role count was disqualified".into())),
    };
    Ok(KSweep {
        scores,
        selected,
        stopped_early,
    })
}

/// `z` rows assembled from explicit role lists; handy for crafted instances.
pub fn assignment_matrix(users: usize, roles: usize, lists: &[&[usize]]) -> Result<BinaryMatrix> {
    let mut b = BinaryMatrixBuilder::new(users, roles)?;
    for (i, l) in lists.iter().enumerate() {
        for &k in *l {
            b.set(i, k, true);
        }
    }
    Ok(b.build())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn split_sizes_and_partition() {
        let x = BinaryMatrix::from_fn(10, 3, |i, d| (i + d) % 2 == 0).unwrap();
        let spec = SplitSpec::default();
        let s = split_users(&x, &spec, 0).unwrap();
        assert_eq!((s.train.rows(), s.test.rows()), (8, 2));
        let mut all: Vec<usize> = s.train_users.iter().chain(&s.test_users).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_users(&x, &spec, 0).unwrap(), s);
        assert_ne!(split_users(&x, &spec, 1).unwrap().test_users, s.test_users);
        assert!(split_users(&BinaryMatrix::zeros(1, 2).unwrap(), &spec, 0).is_err());
    }

    #[test]
    fn transfer_picks_nearest_lowest_index() {
        let x1 = BinaryMatrix::from_rows(&[[1u8, 0, 0], [1, 1, 0], [1, 1, 0]]).unwrap();
        let z = BinaryMatrix::from_rows(&[[1u8, 0], [0, 1], [1, 1]]).unwrap();
        let x2 = BinaryMatrix::from_rows(&[[1u8, 1, 1], [0, 0, 0], [1, 0, 0]]).unwrap();
        // distances: row0 -> [2,1,1] => 1; row1 -> [1,2,2] => 0; row2 -> [0,1,1] => 0
        let zp = transfer_roles(&x1, &z, &x2).unwrap();
        assert_eq!(zp, BinaryMatrix::from_rows(&[[0u8, 1], [1, 0], [1, 0]]).unwrap());
        assert_eq!(transfer_roles(&x1, &z, &x1).unwrap(), BinaryMatrix::from_rows(&[[1u8, 0], [0, 1], [0, 1]]).unwrap());
    }

    #[test]
    fn generalization_error_limits() {
        let z = BinaryMatrix::identity(2).unwrap();
        let u = BinaryMatrix::zeros(2, 3).unwrap();
        let x2 = BinaryMatrix::ones(2, 3).unwrap();
        assert_eq!(generalization_error(&z, &u, &x2).unwrap(), 1.0);
        let u = BinaryMatrix::ones(2, 3).unwrap();
        assert_eq!(generalization_error(&z, &u, &x2).unwrap(), 0.0);
    }

    #[test]
    fn generalization_error_random_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let z = BinaryMatrix::from_fn(4, 3, |_, _| rng.random_bool(0.4)).unwrap();
            let u = BinaryMatrix::from_fn(3, 5, |_, _| rng.random_bool(0.4)).unwrap();
            let x = BinaryMatrix::from_fn(4, 5, |_, _| rng.random_bool(0.5)).unwrap();
            let mut wrong = 0;
            for i in 0..4 {
                for d in 0..5 {
                    let r = (0..3).any(|k| z.get(i, k) && u.get(k, d));
                    wrong += (r != x.get(i, d)) as usize;
                }
            }
            assert_eq!(generalization_error(&z, &u, &x).unwrap(), wrong as f64 / 20.0);
        }
    }

    #[test]
    fn breakdown_categories() {
        let clean = BinaryMatrix::from_rows(&[[1u8, 0, 1], [0, 0, 1], [1, 1, 0]]).unwrap();
        // (0,1) noisy 0->1, (2,2) noisy 0->1, (1,2) noisy 1->0
        let obs = BinaryMatrix::from_rows(&[[1u8, 1, 1], [0, 0, 0], [1, 1, 1]]).unwrap();
        // new FP at (1,0); new FN at (0,0); repeated FP at (0,1); repeated FN at (1,2)
        let rec = BinaryMatrix::from_rows(&[[0u8, 1, 1], [1, 0, 0], [1, 1, 0]]).unwrap();
        let b = error_breakdown(&rec, &obs, &clean).unwrap();
        let ninth = 1.0 / 9.0;
        assert_eq!(b.new_false_positive, ninth);
        assert_eq!(b.new_false_negative, ninth);
        assert_eq!(b.repeated_false_positive, ninth);
        assert_eq!(b.repeated_false_negative, ninth);
        assert_eq!(b.correct, 5.0 / 9.0);
        let same = error_breakdown(&clean, &obs, &clean).unwrap();
        assert_eq!(same.total_error(), 0.0);
        let rep = error_breakdown(&obs, &obs, &clean).unwrap();
        assert_eq!(rep.new_false_positive + rep.new_false_negative, 0.0);
        assert_eq!(rep.repeated_false_positive + rep.repeated_false_negative, 3.0 / 9.0);
    }

    #[test]
    fn calibration_basics() {
        let clean = BinaryMatrix::from_rows(&[[1u8, 0], [0, 1]]).unwrap();
        let table = calibration_curve(&[1.0; 4], &clean, &clean, 10).unwrap();
        assert_eq!(table.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(table[9].error_rate, Some(0.0));
        assert_eq!(table[0].error_rate, None);
        assert_eq!(table.iter().map(|b| b.count).sum::<usize>(), 4);
        assert!(calibration_curve(&[1.0; 4], &clean, &clean, 1).is_err());
    }

    #[test]
    fn calibration_of_a_coin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100;
        let clean = BinaryMatrix::from_fn(n, n, |_, _| rng.random_bool(0.5)).unwrap();
        let rec = BinaryMatrix::from_fn(n, n, |_, _| rng.random_bool(0.5)).unwrap();
        let table = calibration_curve(&vec![0.5; n * n], &rec, &clean, 4).unwrap();
        let bin = &table[2];
        assert_eq!(bin.count, n * n);
        let sigma = (0.25 / (n * n) as f64).sqrt();
        assert!((bin.error_rate.unwrap() - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn percentiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(percentile(&v, 25.0), 1.75);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn spearman_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    }

    fn all_ones_fit(x: &BinaryMatrix, k: usize, _seed: u64) -> Result<FlatRbacConfig> {
        FlatRbacConfig::new(BinaryMatrix::ones(x.rows(), k)?, BinaryMatrix::ones(k, x.cols())?)
    }

    #[test]
    fn single_candidate_is_returned() {
        let x = BinaryMatrix::ones(10, 4).unwrap();
        let sweep = cross_validate_k(&x, &[1], &all_ones_fit, &SplitSpec::default()).unwrap();
        assert_eq!(sweep.selected, 1);
        assert_eq!(sweep.scores[0].median, 0.0);
        let report = evaluate(&x, 1, &all_ones_fit, &SplitSpec::default()).unwrap();
        assert_eq!(report.median, 0.0);
        assert_eq!(report, evaluate(&x, 1, &all_ones_fit, &SplitSpec::default()).unwrap());
    }

    #[test]
    fn failing_folds_disqualify() {
        let x = BinaryMatrix::ones(10, 4).unwrap();
        let flaky = |x: &BinaryMatrix, k: usize, _s: u64| {
            if k == 2 {
                Err(Error::Infeasible("nope".into()))
            } else {
                all_ones_fit(x, k, 0)
            }
        };
        let sweep = cross_validate_k(&x, &[2, 3], &flaky, &SplitSpec::default()).unwrap();
        assert!(sweep.scores[0].disqualified);
        assert_eq!(sweep.selected, 3);
    }
}
