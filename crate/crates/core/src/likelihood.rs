//! Marginal likelihoods shared by all role models.
//!
//! A role `k` grants permission `d` with probability `1 - beta[k][d]`. A user
//! lacks `d` only if none of their roles grants it, so
//! `p(x_id = 0) = prod_k beta[k][d]^{z_ik}`.

use crate::error::{Error, Result};
use crate::matrix::BinaryMatrix;
use crate::scalar::Real;

/// Dense row-major matrix of probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> ProbMatrix<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "ProbMatrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        for (idx, &v) in data.iter().enumerate() {
            check_prob(v, || format!("entry ({},{})", idx / cols, idx % cols))?;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Result<Self> {
        let data = (0..rows * cols).map(|idx| f(idx / cols, idx % cols)).collect();
        Self::new(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    /// Callers must keep the value inside `[0, 1]`.
    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: F) {
        debug_assert!(v >= F::zero() && v <= F::one());
        self.data[i * self.cols + j] = v;
    }

    /// Same contract as [`Self::set`].
    pub(crate) fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G) -> ProbMatrix<G> {
        ProbMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn check_prob<F: Real>(v: F, what: impl FnOnce() -> String) -> Result<()> {
    if v.is_nan() || v < F::zero() || v > F::one() {
        return Err(Error::out_of_range(what(), v.to_f64_lossy(), "[0, 1]"));
    }
    Ok(())
}

/// `p(x_id = 0)` for a user whose roles are the ones in row `i` of `z`.
#[inline]
pub fn prob_absent_flat<F: Real>(z: &BinaryMatrix, i: usize, beta: &ProbMatrix<F>, d: usize) -> F {
    z.row_ones(i).fold(F::one(), |acc, k| acc * beta.get(k, d))
}

/// `(p(x=0), p(x=1))` for one cell under the flat model.
#[inline]
pub fn cell_probs_flat<F: Real>(z: &BinaryMatrix, i: usize, beta: &ProbMatrix<F>, d: usize) -> (F, F) {
    let p0 = prob_absent_flat(z, i, beta, d);
    (p0, F::one() - p0)
}

fn check_flat_shapes<F: Real>(x: &BinaryMatrix, z: &BinaryMatrix, beta: &ProbMatrix<F>) -> Result<()> {
    if x.rows() != z.rows() {
        return Err(Error::ShapeMismatch {
            op: "log_lik_flat (x vs z rows)",
            left: x.shape(),
            right: z.shape(),
        });
    }
    if z.cols() != beta.rows() || x.cols() != beta.cols() {
        return Err(Error::ShapeMismatch {
            op: "log_lik_flat (z/x vs beta)",
            left: (z.cols(), x.cols()),
            right: (beta.rows(), beta.cols()),
        });
    }
    Ok(())
}

/// Log-likelihood of `x` under the flat model with role assignment `z` and
/// role-permission absence probabilities `beta`, with `u` marginalized out.
///
/// Evaluated without clamping: a cell whose observed value has probability
/// exactly zero yields `-inf`.
pub fn log_lik_flat<F: Real>(x: &BinaryMatrix, z: &BinaryMatrix, beta: &ProbMatrix<F>) -> Result<F> {
    check_flat_shapes(x, z, beta)?;
    let mut total = F::zero();
    for i in 0..x.rows() {
        for d in 0..x.cols() {
            let (p0, p1) = cell_probs_flat(z, i, beta, d);
            total = total + if x.get(i, d) { p1.ln() } else { p0.ln() };
        }
    }
    Ok(total)
}

/// Probability that a user is *not* granted a permission in a two-level
/// hierarchy with independent Bernoulli assignments. The technical-role
/// indicators are drawn independently for each business role:
/// `prod_k (1 - z_k + z_k * prod_l (1 - y_l + y_l * (1 - v_kl)))`.
pub fn prob_absent_two_level<F: Real>(z_plus: &[F], y_plus: &[F], v_plus: &ProbMatrix<F>) -> Result<F> {
    if v_plus.rows() != z_plus.len() || v_plus.cols() != y_plus.len() {
        return Err(Error::ShapeMismatch {
            op: "prob_absent_two_level",
            left: (z_plus.len(), y_plus.len()),
            right: (v_plus.rows(), v_plus.cols()),
        });
    }
    for (k, &z) in z_plus.iter().enumerate() {
        check_prob(z, || format!("z_plus[{k}]"))?;
    }
    for (l, &y) in y_plus.iter().enumerate() {
        check_prob(y, || format!("y_plus[{l}]"))?;
    }
    let one = F::one();
    let mut p = one;
    for (k, &z) in z_plus.iter().enumerate() {
        let u_absent = y_plus
            .iter()
            .enumerate()
            .fold(one, |acc, (l, &y)| acc * (one - y + y * (one - v_plus.get(k, l))));
        p = p * (one - z + z * u_absent);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn beta1(v: f64) -> ProbMatrix<f64> {
        ProbMatrix::filled(1, 1, v).unwrap()
    }

    #[test]
    fn single_cell_substitution() {
        let x = BinaryMatrix::from_rows(&[[1u8]]).unwrap();
        let z = BinaryMatrix::from_rows(&[[1u8]]).unwrap();
        let ll = log_lik_flat(&x, &z, &beta1(0.2)).unwrap();
        assert!((ll - 0.8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn user_without_roles_and_no_permissions_costs_nothing() {
        let x = BinaryMatrix::from_rows(&[[0u8, 0, 0]]).unwrap();
        let z = BinaryMatrix::from_rows(&[[0u8, 0]]).unwrap();
        let beta = ProbMatrix::from_fn(2, 3, |k, d| 0.1 + 0.2 * (k + d) as f64).unwrap();
        assert_eq!(log_lik_flat(&x, &z, &beta).unwrap(), 0.0);
    }

    #[test]
    fn impossible_observation_is_negative_infinity() {
        let x = BinaryMatrix::from_rows(&[[1u8]]).unwrap();
        let z = BinaryMatrix::from_rows(&[[1u8]]).unwrap();
        assert_eq!(log_lik_flat(&x, &z, &beta1(1.0)).unwrap(), f64::NEG_INFINITY);
    }

    /// Each user draws their own u (K x D); sum p(x_i | u, z_i) p(u | beta)
    /// over every realization, then multiply over users.
    fn brute_marginal(x: &[Vec<u8>], z: &[Vec<u8>], beta: &[Vec<f64>]) -> f64 {
        x.iter()
            .zip(z)
            .map(|(xi, zi)| brute_user(std::slice::from_ref(xi), std::slice::from_ref(zi), beta))
            .product()
    }

    fn brute_user(x: &[Vec<u8>], z: &[Vec<u8>], beta: &[Vec<f64>]) -> f64 {
        let k = beta.len();
        let d = beta[0].len();
        let bits = k * d;
        let mut total = 0.0;
        for mask in 0u64..(1u64 << bits) {
            let u = |kk: usize, dd: usize| (mask >> (kk * d + dd)) & 1 == 1;
            let mut prior = 1.0;
            for kk in 0..k {
                for dd in 0..d {
                    prior *= if u(kk, dd) { 1.0 - beta[kk][dd] } else { beta[kk][dd] };
                }
            }
            let consistent = x.iter().enumerate().all(|(i, row)| {
                row.iter().enumerate().all(|(dd, &xv)| {
                    let gen = (0..k).any(|kk| z[i][kk] == 1 && u(kk, dd));
                    gen == (xv == 1)
                })
            });
            if consistent {
                total += prior;
            }
        }
        total
    }

    #[test]
    fn two_role_instance_matches_marginalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = vec![vec![1u8, 0], vec![0, 1], vec![1, 1]];
        let z = vec![vec![1u8, 0], vec![0, 1], vec![1, 1]];
        let beta: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.random_range(0.05..0.95)).collect()).collect();
        let oracle = brute_marginal(&x, &z, &beta);
        let bm = ProbMatrix::from_fn(2, 2, |k, d| beta[k][d]).unwrap();
        let got = log_lik_flat(&BinaryMatrix::from_rows(&x).unwrap(), &BinaryMatrix::from_rows(&z).unwrap(), &bm).unwrap();
        assert!(((got.exp() - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let x = BinaryMatrix::zeros(2, 3).unwrap();
        let z = BinaryMatrix::zeros(3, 2).unwrap();
        let beta = ProbMatrix::filled(2, 3, 0.5).unwrap();
        assert!(log_lik_flat(&x, &z, &beta).is_err());
        assert!(ProbMatrix::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(ProbMatrix::new(1, 2, vec![0.5]).is_err());
    }

    #[test]
    fn two_level_trivial_cases() {
        let v = ProbMatrix::from_fn(2, 2, |_, _| 0.4).unwrap();
        assert_eq!(prob_absent_two_level(&[0.0, 0.0], &[0.3, 0.9], &v).unwrap(), 1.0);
        let v1 = ProbMatrix::filled(1, 1, 0.3).unwrap();
        assert!((prob_absent_two_level::<f64>(&[1.0], &[1.0], &v1).unwrap() - 0.7).abs() < 1e-15);
        assert!(prob_absent_two_level(&[1.2], &[1.0], &v1).is_err());
        assert!(prob_absent_two_level(&[1.0, 0.0], &[1.0], &v1).is_err());
    }

    #[test]
    fn two_level_monte_carlo_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z: Vec<f64> = (0..2).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..2).map(|_| rng.random()).collect();
        let v = ProbMatrix::from_fn(2, 2, |_, _| rng.random::<f64>()).unwrap();
        let exact = prob_absent_two_level(&z, &y, &v).unwrap();
        let samples = 100_000;
        let mut absent = 0usize;
        for _ in 0..samples {
            let zs: Vec<bool> = z.iter().map(|&p| rng.random_bool(p)).collect();
            let mut granted = false;
            for k in 0..2 {
                let ys: Vec<bool> = y.iter().map(|&p| rng.random_bool(p)).collect();
                let hit = (0..2).any(|l| rng.random_bool(v.get(k, l)) && ys[l]);
                granted |= zs[k] && hit;
            }
            if !granted {
                absent += 1;
            }
        }
        let est = absent as f64 / samples as f64;
        let se = (exact * (1.0 - exact) / samples as f64).sqrt();
        assert!((est - exact).abs() < 3.0 * se + 1e-12, "est {est} exact {exact}");
    }

    #[test]
    fn flat_reduction_of_two_level_form() {
        // y = identity and binary z reduce to prod_k beta^z with beta = 1 - v.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let k = rng.random_range(1..4);
            let d = rng.random_range(1..4);
            let v = ProbMatrix::from_fn(k, d, |_, _| rng.random::<f64>()).unwrap();
            let beta = v.map(|p| 1.0 - p);
            let zrow: Vec<u8> = (0..k).map(|_| rng.random_range(0..2)).collect();
            let z = BinaryMatrix::from_rows(std::slice::from_ref(&zrow)).unwrap();
            let zp: Vec<f64> = zrow.iter().map(|&b| b as f64).collect();
            for dd in 0..d {
                let yp: Vec<f64> = (0..d).map(|l| (l == dd) as u8 as f64).collect();
                let two = prob_absent_two_level(&zp, &yp, &v).unwrap();
                let flat = prob_absent_flat(&z, 0, &beta, dd);
                assert_eq!(two, flat);
            }
        }
    }

    #[test]
    fn single_precision_evaluates() {
        let x = BinaryMatrix::from_rows(&[[1u8, 0]]).unwrap();
        let z = BinaryMatrix::from_rows(&[[1u8]]).unwrap();
        let beta = ProbMatrix::<f32>::new(1, 2, vec![0.25, 0.5]).unwrap();
        let ll = log_lik_flat(&x, &z, &beta).unwrap();
        assert!((ll - (0.75f32.ln() + 0.5f32.ln())).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn cell_probabilities_sum_to_one(b in prop::collection::vec(0.0f64..=1.0, 4), mask in 0u8..16) {
            let beta = ProbMatrix::new(4, 1, b).unwrap();
            let z = BinaryMatrix::from_fn(1, 4, |_, k| (mask >> k) & 1 == 1).unwrap();
            let (p0, p1) = cell_probs_flat(&z, 0, &beta, 0);
            prop_assert_eq!(p0 + p1, 1.0);
        }
    }
}
