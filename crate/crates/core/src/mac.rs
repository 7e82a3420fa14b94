//! Multi-assignment clustering (MAC) with mixture noise.
//!
//! Each user holds one *role set* drawn from a catalog of role subsets. A bit
//! is either structural (generated by the user's roles) or, with probability
//! `eps`, a noise bit that is 1 with probability `r`. Marginalizing the noise
//! indicator gives
//!
//! ```text
//! p(x_id = 1 | L) = q_Ld = eps * r + (1 - eps) * (1 - prod_{k in L} beta_kd)
//! ```
//!
//! Parameters are fit by EM in which the E-step is a Gibbs distribution at
//! temperature `T` over role sets and `T` is lowered geometrically until every
//! user is crisply assigned. The M-step solves each scalar first-order
//! condition of the free energy with a safeguarded Newton iteration.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::{check_prob, ProbMatrix};
use crate::matrix::{BinaryMatrix, BinaryMatrixBuilder};
use crate::rbac::FlatRbacConfig;
use crate::scalar::{log_sum_exp, Real};

/// A subset of roles, stored as a bit mask (at most 64 roles).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RoleSet(u64);

impl RoleSet {
    pub const EMPTY: RoleSet = RoleSet(0);

    pub fn from_roles(roles: &[usize]) -> Self {
        RoleSet(roles.iter().fold(0u64, |m, &k| m | (1u64 << k)))
    }

    #[inline]
    pub fn contains(self, k: usize) -> bool {
        (self.0 >> k) & 1 == 1
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn roles(self) -> impl Iterator<Item = usize> {
        let mut rest = self.0;
        std::iter::from_fn(move || {
            if rest == 0 {
                return None;
            }
            let k = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(k)
        })
    }

    pub fn mask(self) -> u64 {
        self.0
    }
}

/// Ordered list of admissible role sets: every subset of `{0..K}` with at most
/// `M` roles, the empty set first, then by size and lexicographically.
#[derive(Clone, Debug)]
pub struct RoleSetCatalog {
    num_roles: usize,
    max_set_size: usize,
    sets: Vec<RoleSet>,
    /// For each role, indices of the sets containing it.
    containing: Vec<Vec<usize>>,
}

impl RoleSetCatalog {
    pub fn new(num_roles: usize, max_set_size: usize) -> Result<Self> {
        if num_roles == 0 || num_roles > 64 {
            return Err(Error::InvalidConfig(format!("number of roles must be in 1..=64, got {num_roles}")));
        }
        if max_set_size == 0 || max_set_size > num_roles {
            return Err(Error::InvalidConfig(format!(
                "maximum role-set size must be in 1..={num_roles}, got {max_set_size}"
            )));
        }
        let mut sets = vec![RoleSet::EMPTY];
        for size in 1..=max_set_size {
            let mut combo: Vec<usize> = (0..size).collect();
            loop {
                sets.push(RoleSet::from_roles(&combo));
                // advance to the next combination in lexicographic order
                let mut pos = size;
                while pos > 0 && combo[pos - 1] == num_roles - size + pos - 1 {
                    pos -= 1;
                }
                if pos == 0 {
                    break;
                }
                combo[pos - 1] += 1;
                for j in pos..size {
                    combo[j] = combo[j - 1] + 1;
                }
            }
        }
        let mut containing = vec![Vec::new(); num_roles];
        for (idx, set) in sets.iter().enumerate() {
            for k in set.roles() {
                containing[k].push(idx);
            }
        }
        Ok(Self {
            num_roles,
            max_set_size,
            sets,
            containing,
        })
    }

    pub fn num_roles(&self) -> usize {
        self.num_roles
    }

    pub fn max_set_size(&self) -> usize {
        self.max_set_size
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn sets(&self) -> &[RoleSet] {
        &self.sets
    }

    pub fn get(&self, idx: usize) -> RoleSet {
        self.sets[idx]
    }

    pub fn index_of(&self, set: RoleSet) -> Option<usize> {
        self.sets.iter().position(|&s| s == set)
    }

    pub fn sets_containing(&self, role: usize) -> &[usize] {
        &self.containing[role]
    }
}

/// Role absence probabilities `beta` (K x D) plus the noise fraction `eps`
/// and the noise-bit bias `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct MacParams<F> {
    beta: ProbMatrix<F>,
    eps: F,
    r: F,
}

impl<F: Real> MacParams<F> {
    pub fn new(beta: ProbMatrix<F>, eps: F, r: F) -> Result<Self> {
        check_prob(eps, || "eps".to_string())?;
        check_prob(r, || "r".to_string())?;
        Ok(Self { beta, eps, r })
    }

    pub fn beta(&self) -> &ProbMatrix<F> {
        &self.beta
    }

    pub fn eps(&self) -> F {
        self.eps
    }

    pub fn r(&self) -> F {
        self.r
    }

    pub fn num_roles(&self) -> usize {
        self.beta.rows()
    }

    pub fn num_perms(&self) -> usize {
        self.beta.cols()
    }

    /// `prod_{k in set} beta_kd`; the empty product is 1.
    #[inline]
    pub fn set_absence(&self, set: RoleSet, d: usize) -> F {
        set.roles().fold(F::one(), |acc, k| acc * self.beta.get(k, d))
    }

    /// `p(x_id = 1 | set)`.
    #[inline]
    pub fn q(&self, set: RoleSet, d: usize) -> F {
        q_unchecked(self.set_absence(set, d), self.eps, self.r)
    }
}

#[inline]
fn q_unchecked<F: Real>(beta_set: F, eps: F, r: F) -> F {
    eps * r + (F::one() - eps) * (F::one() - beta_set)
}

/// Probability that a bit is 1 given the absence probability of its role set.
pub fn q_value<F: Real>(beta_set: F, eps: F, r: F) -> Result<F> {
    check_prob(beta_set, || "beta_set".to_string())?;
    check_prob(eps, || "eps".to_string())?;
    check_prob(r, || "r".to_string())?;
    Ok(q_unchecked(beta_set, eps, r))
}

/// Negative log-likelihood of row `i` of `x` under role set `set`.
pub fn per_item_risk<F: Real>(x: &BinaryMatrix, i: usize, set: RoleSet, params: &MacParams<F>) -> F {
    let mut risk = F::zero();
    for d in 0..x.cols() {
        let q = params.q(set, d);
        let p = if x.get(i, d) { q } else { F::one() - q };
        risk = risk - p.clamp_prob().ln();
    }
    risk
}

/// Per-set terms that make a row's risk a sparse sum over its ones:
/// `R_iL = zero_cost[L] + sum_{d: x_id = 1} flip_cost[L][d]`.
struct RiskTable<F> {
    zero_cost: Vec<F>,
    flip_cost: Vec<F>,
    perms: usize,
}

impl<F: Real> RiskTable<F> {
    fn new(params: &MacParams<F>, catalog: &RoleSetCatalog) -> Self {
        let perms = params.num_perms();
        let mut zero_cost = Vec::with_capacity(catalog.len());
        let mut flip_cost = Vec::with_capacity(catalog.len() * perms);
        for &set in catalog.sets() {
            let mut base = F::zero();
            for d in 0..perms {
                let q = params.q(set, d);
                let log_one = q.clamp_prob().ln();
                let log_zero = (F::one() - q).clamp_prob().ln();
                base = base - log_zero;
                flip_cost.push(log_zero - log_one);
            }
            zero_cost.push(base);
        }
        Self {
            zero_cost,
            flip_cost,
            perms,
        }
    }

    #[inline]
    fn risk(&self, x: &BinaryMatrix, i: usize, set_idx: usize) -> F {
        let row = &self.flip_cost[set_idx * self.perms..(set_idx + 1) * self.perms];
        x.row_ones(i).fold(self.zero_cost[set_idx], |acc, d| acc + row[d])
    }
}

fn check_x_params<F: Real>(x: &BinaryMatrix, params: &MacParams<F>, catalog: &RoleSetCatalog) -> Result<()> {
    if x.cols() != params.num_perms() {
        return Err(Error::ShapeMismatch {
            op: "mac (x vs beta)",
            left: x.shape(),
            right: (params.num_roles(), params.num_perms()),
        });
    }
    if catalog.num_roles() != params.num_roles() {
        return Err(Error::ShapeMismatch {
            op: "mac (catalog vs beta)",
            left: (catalog.num_roles(), catalog.len()),
            right: (params.num_roles(), params.num_perms()),
        });
    }
    Ok(())
}

/// Risk matrix `R` (N x |catalog|), row-major.
pub fn risk_matrix<F: Real>(x: &BinaryMatrix, params: &MacParams<F>, catalog: &RoleSetCatalog) -> Result<Vec<F>> {
    check_x_params(x, params, catalog)?;
    let table = RiskTable::new(params, catalog);
    let sets = catalog.len();
    let mut out = vec![F::zero(); x.rows() * sets];
    out.par_chunks_mut(sets).enumerate().for_each(|(i, row)| {
        for (l, slot) in row.iter_mut().enumerate() {
            *slot = table.risk(x, i, l);
        }
    });
    Ok(out)
}

/// Posterior over role sets for every user, at a given temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities<F> {
    users: usize,
    sets: usize,
    gamma: Vec<F>,
    temperature: F,
}

impl<F: Real> Responsibilities<F> {
    pub fn uniform(users: usize, sets: usize, temperature: F) -> Self {
        let p = F::one() / F::from_usize(sets).expect("set count");
        Self {
            users,
            sets,
            gamma: vec![p; users * sets],
            temperature,
        }
    }

    /// Wrap a row-stochastic matrix; rows must sum to 1 within `1e-9`.
    pub fn from_rows(users: usize, sets: usize, gamma: Vec<F>, temperature: F) -> Result<Self> {
        if gamma.len() != users * sets {
            return Err(Error::ShapeMismatch {
                op: "Responsibilities::from_rows",
                left: (users, sets),
                right: (gamma.len(), 1),
            });
        }
        for i in 0..users {
            let row = &gamma[i * sets..(i + 1) * sets];
            let s: F = row.iter().copied().sum();
            if row.iter().any(|&g| g < F::zero()) || (s - F::one()).abs() > F::lit(1e-9) {
                return Err(Error::InvalidConfig(format!("responsibility row {i} is not a distribution")));
            }
        }
        Ok(Self {
            users,
            sets,
            gamma,
            temperature,
        })
    }

    /// Rows are `softmax(-risk / T)`.
    pub fn from_risk(users: usize, sets: usize, risk: &[F], temperature: F) -> Result<Self> {
        if !(temperature > F::zero()) {
            return Err(Error::out_of_range("temperature", temperature.to_f64_lossy(), "(0, inf)"));
        }
        if let Some(pos) = risk.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("risk of user {} for role set {}", pos / sets, pos % sets)));
        }
        let mut gamma = vec![F::zero(); users * sets];
        gamma
            .par_chunks_mut(sets)
            .zip(risk.par_chunks(sets))
            .for_each(|(g, r)| {
                let logits: Vec<F> = r.iter().map(|&v| -v / temperature).collect();
                let norm = log_sum_exp(&logits);
                for (slot, &lg) in g.iter_mut().zip(&logits) {
                    *slot = (lg - norm).exp();
                }
            });
        Ok(Self {
            users,
            sets,
            gamma,
            temperature,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn num_sets(&self) -> usize {
        self.sets
    }

    pub fn temperature(&self) -> F {
        self.temperature
    }

    #[inline]
    pub fn get(&self, i: usize, l: usize) -> F {
        self.gamma[i * self.sets + l]
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.gamma[i * self.sets..(i + 1) * self.sets]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.gamma
    }

    /// Index of the most probable role set (first on ties).
    pub fn argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (l, &g) in row.iter().enumerate() {
            if g > row[best] {
                best = l;
            }
        }
        best
    }

    pub fn max_prob(&self, i: usize) -> F {
        self.row(i)[self.argmax(i)]
    }

    /// True when every user's largest responsibility exceeds `1 - threshold`.
    pub fn is_crisp(&self, threshold: F) -> bool {
        (0..self.users).all(|i| self.max_prob(i) > F::one() - threshold)
    }

    /// Binary user-role matrix from each user's most probable role set.
    pub fn hard_assignment(&self, catalog: &RoleSetCatalog) -> BinaryMatrix {
        let mut z = BinaryMatrixBuilder::new(self.users, catalog.num_roles()).expect("nonempty");
        for i in 0..self.users {
            for k in catalog.get(self.argmax(i)).roles() {
                z.set(i, k, true);
            }
        }
        z.build()
    }
}

/// One E-step: `gamma_iL ∝ exp(-(R_iL + extra_iL) / T)`.
pub fn e_step<F: Real>(
    x: &BinaryMatrix,
    params: &MacParams<F>,
    catalog: &RoleSetCatalog,
    temperature: F,
    extra_costs: Option<&[F]>,
) -> Result<Responsibilities<F>> {
    let mut risk = risk_matrix(x, params, catalog)?;
    if let Some(extra) = extra_costs {
        if extra.len() != risk.len() {
            return Err(Error::ShapeMismatch {
                op: "e_step (extra costs)",
                left: (x.rows(), catalog.len()),
                right: (extra.len(), 1),
            });
        }
        for (r, &e) in risk.iter_mut().zip(extra) {
            *r = *r + e;
        }
    }
    Responsibilities::from_risk(x.rows(), catalog.len(), &risk, temperature)
}

/// `F = -T sum_i log sum_L exp(-R_iL / T)`.
pub fn free_energy<F: Real>(x: &BinaryMatrix, params: &MacParams<F>, catalog: &RoleSetCatalog, temperature: F) -> Result<F> {
    if !(temperature > F::zero()) {
        return Err(Error::out_of_range("temperature", temperature.to_f64_lossy(), "(0, inf)"));
    }
    let risk = risk_matrix(x, params, catalog)?;
    let sets = catalog.len();
    let total: F = risk
        .chunks(sets)
        .map(|r| {
            let logits: Vec<F> = r.iter().map(|&v| -v / temperature).collect();
            log_sum_exp(&logits)
        })
        .sum();
    Ok(-temperature * total)
}

/// Responsibility mass per (role set, permission) split by the observed bit.
struct SetStats<F> {
    /// `sum_{i: x_id = 1} gamma_iL`, indexed `[L * D + d]`.
    ones: Vec<F>,
    /// `sum_i gamma_iL`.
    total: Vec<F>,
    perms: usize,
}

impl<F: Real> SetStats<F> {
    fn new(x: &BinaryMatrix, gamma: &Responsibilities<F>) -> Self {
        let sets = gamma.num_sets();
        let perms = x.cols();
        let mut ones = vec![F::zero(); sets * perms];
        let mut total = vec![F::zero(); sets];
        for i in 0..x.rows() {
            let row = gamma.row(i);
            let active: Vec<usize> = x.row_ones(i).collect();
            for (l, &g) in row.iter().enumerate() {
                total[l] = total[l] + g;
                let base = l * perms;
                for &d in &active {
                    ones[base + d] = ones[base + d] + g;
                }
            }
        }
        Self { ones, total, perms }
    }

    #[inline]
    fn ones(&self, l: usize, d: usize) -> F {
        self.ones[l * self.perms + d]
    }

    #[inline]
    fn zeros(&self, l: usize, d: usize) -> F {
        self.total[l] - self.ones(l, d)
    }
}

/// First and second derivative contributions of one cell block with
/// responsibility masses `a1` (x=1) and `a0` (x=0), where `dq` is the
/// derivative of `q` with respect to the parameter being solved.
#[inline]
fn cell_derivs<F: Real>(a1: F, a0: F, q: F, dq: F) -> (F, F) {
    let one_minus = F::one() - q;
    let g = (a0 / one_minus - a1 / q) * dq;
    let h = (a1 / (q * q) + a0 / (one_minus * one_minus)) * dq * dq;
    (g, h)
}

/// Identifies a scalar parameter in M-step reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamId {
    Beta { role: usize, perm: usize },
    Eps,
    R,
}

/// Gradient of the free energy with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<F> {
    /// Row-major K x D.
    pub beta: Vec<F>,
    pub eps: F,
    pub r: F,
}

struct Objective<'a, F> {
    stats: &'a SetStats<F>,
    catalog: &'a RoleSetCatalog,
}

impl<F: Real> Objective<'_, F> {
    fn beta_derivs(&self, params: &MacParams<F>, mu: usize, nu: usize, b: F) -> (F, F) {
        let (eps, r) = (params.eps, params.r);
        let mut g = F::zero();
        let mut h = F::zero();
        for &l in self.catalog.sets_containing(mu) {
            let set = self.catalog.get(l);
            let others = set
                .roles()
                .filter(|&k| k != mu)
                .fold(F::one(), |acc, k| acc * params.beta.get(k, nu));
            let q = q_unchecked(others * b, eps, r);
            let dq = -(F::one() - eps) * others;
            let (dg, dh) = cell_derivs(self.stats.ones(l, nu), self.stats.zeros(l, nu), q, dq);
            g = g + dg;
            h = h + dh;
        }
        (g, h)
    }

    /// Expected risk `sum_iL gamma_iL R_iL` up to the constant from the data.
    fn value(&self, params: &MacParams<F>) -> F {
        let table = set_absence_table(params, self.catalog);
        let perms = self.stats.perms;
        let floor = F::prob_floor();
        let mut v = F::zero();
        for l in 0..self.catalog.len() {
            for d in 0..perms {
                let q = q_unchecked(table[l * perms + d], params.eps, params.r);
                v = v - self.stats.ones(l, d) * q.max(floor).ln() - self.stats.zeros(l, d) * (F::one() - q).max(floor).ln();
            }
        }
        v
    }

    fn noise_derivs(&self, set_absence: &[F], eps: F, r: F, wrt_eps: bool) -> (F, F) {
        let perms = self.stats.perms;
        let mut g = F::zero();
        let mut h = F::zero();
        for l in 0..self.catalog.len() {
            for d in 0..perms {
                let bs = set_absence[l * perms + d];
                let q = q_unchecked(bs, eps, r);
                let dq = if wrt_eps { r - (F::one() - bs) } else { eps };
                let (dg, dh) = cell_derivs(self.stats.ones(l, d), self.stats.zeros(l, d), q, dq);
                g = g + dg;
                h = h + dh;
            }
        }
        (g, h)
    }
}

fn set_absence_table<F: Real>(params: &MacParams<F>, catalog: &RoleSetCatalog) -> Vec<F> {
    let perms = params.num_perms();
    let mut out = Vec::with_capacity(catalog.len() * perms);
    for &set in catalog.sets() {
        for d in 0..perms {
            out.push(params.set_absence(set, d));
        }
    }
    out
}

/// Analytic gradient of the free energy at the current parameters. The
/// responsibilities are the Gibbs distribution at `temperature`, so this is
/// the exact derivative of [`free_energy`].
pub fn free_energy_gradient<F: Real>(
    x: &BinaryMatrix,
    params: &MacParams<F>,
    catalog: &RoleSetCatalog,
    temperature: F,
) -> Result<Gradient<F>> {
    let gamma = e_step(x, params, catalog, temperature, None)?;
    Ok(expected_risk_gradient(x, &gamma, catalog, params))
}

/// Gradient of `sum_iL gamma_iL R_iL` for fixed responsibilities.
pub fn expected_risk_gradient<F: Real>(
    x: &BinaryMatrix,
    gamma: &Responsibilities<F>,
    catalog: &RoleSetCatalog,
    params: &MacParams<F>,
) -> Gradient<F> {
    let stats = SetStats::new(x, gamma);
    let obj = Objective { stats: &stats, catalog };
    let (k, d) = (params.num_roles(), params.num_perms());
    let mut beta = Vec::with_capacity(k * d);
    for mu in 0..k {
        for nu in 0..d {
            beta.push(obj.beta_derivs(params, mu, nu, params.beta.get(mu, nu)).0);
        }
    }
    let table = set_absence_table(params, catalog);
    Gradient {
        beta,
        eps: obj.noise_derivs(&table, params.eps, params.r, true).0,
        r: obj.noise_derivs(&table, params.eps, params.r, false).0,
    }
}

/// Controls for [`m_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct MStepOptions<F> {
    /// Stop once every projected first-order residual is below this.
    pub tolerance: F,
    pub max_newton_iterations: usize,
    /// Maximum passes of coordinate-wise solves over all parameters.
    pub max_sweeps: usize,
    /// Keep `eps` at its current value.
    pub fix_eps: bool,
    /// Keep `r` at its current value.
    pub fix_r: bool,
}

impl<F: Real> Default for MStepOptions<F> {
    fn default() -> Self {
        Self {
            tolerance: F::lit(1e-8),
            max_newton_iterations: 60,
            max_sweeps: 500,
            fix_eps: false,
            fix_r: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MStepOutcome<F> {
    pub params: MacParams<F>,
    /// Largest projected first-order residual after the final sweep.
    pub max_residual: F,
    pub sweeps: usize,
    /// Parameters whose Newton iteration left its bracket and was finished by bisection.
    pub fallbacks: Vec<ParamId>,
}

struct ScalarSolution<F> {
    value: F,
    fell_back: bool,
}

/// Minimize a convex scalar function on `[lo, hi]` given its first and second
/// derivative. Newton steps that leave the current bracket are replaced by
/// bisection.
fn solve_convex<F: Real>(
    derivs: impl Fn(F) -> (F, F),
    start: F,
    lo: F,
    hi: F,
    tol: F,
    max_iter: usize,
) -> ScalarSolution<F> {
    let (g_lo, _) = derivs(lo);
    if g_lo >= F::zero() {
        return ScalarSolution { value: lo, fell_back: false };
    }
    let (g_hi, _) = derivs(hi);
    if g_hi <= F::zero() {
        return ScalarSolution { value: hi, fell_back: false };
    }
    let (mut a, mut b) = (lo, hi);
    let mut x = start.max(lo).min(hi);
    let mut fell_back = false;
    for _ in 0..max_iter {
        let (g, h) = derivs(x);
        if g.abs() < tol {
            break;
        }
        if g < F::zero() {
            a = x;
        } else {
            b = x;
        }
        let newton = x - g / h;
        let next = if h > F::zero() && newton.is_finite() && newton > a && newton < b {
            newton
        } else {
            fell_back = true;
            (a + b) / F::lit(2.0)
        };
        if next == x {
            break;
        }
        x = next;
    }
    ScalarSolution { value: x, fell_back }
}

/// First-order residual with the box constraint accounted for: zero at a
/// bound when the gradient points out of the box.
#[inline]
fn projected_residual<F: Real>(value: F, grad: F) -> F {
    let lo = F::param_floor();
    let hi = F::one() - lo;
    if (value <= lo && grad >= F::zero()) || (value >= hi && grad <= F::zero()) {
        F::zero()
    } else {
        grad.abs()
    }
}

/// Max projected residual of all free parameters.
fn max_residual<F: Real>(obj: &Objective<'_, F>, params: &MacParams<F>, opts: &MStepOptions<F>) -> F {
    let mut worst = F::zero();
    for mu in 0..params.num_roles() {
        for nu in 0..params.num_perms() {
            let b = params.beta.get(mu, nu);
            let (g, _) = obj.beta_derivs(params, mu, nu, b);
            worst = worst.max(projected_residual(b, g));
        }
    }
    let table = set_absence_table(params, obj.catalog);
    if !opts.fix_eps {
        let (g, _) = obj.noise_derivs(&table, params.eps, params.r, true);
        worst = worst.max(projected_residual(params.eps, g));
    }
    if !opts.fix_r {
        let (g, _) = obj.noise_derivs(&table, params.eps, params.r, false);
        worst = worst.max(projected_residual(params.r, g));
    }
    worst
}

/// Gradient and Hessian of the expected risk in arrow form: the `beta_kd`
/// only couple within a permission, `eps` and `r` couple with everything.
struct ArrowHessian {
    /// Per permission: gradient over roles, K x K block, cross terms with eps and r.
    grad: Vec<Vec<f64>>,
    block: Vec<DMatrix<f64>>,
    cross: Vec<[Vec<f64>; 2]>,
    noise_grad: [f64; 2],
    noise: [[f64; 2]; 2],
}

fn arrow_hessian<F: Real>(obj: &Objective<'_, F>, p: &MacParams<F>) -> ArrowHessian {
    let k = p.num_roles();
    let perms = p.num_perms();
    let eps = p.eps.to_f64_lossy();
    let r = p.r.to_f64_lossy();
    let floor = F::prob_floor().to_f64_lossy();
    let mut out = ArrowHessian {
        grad: vec![vec![0.0; k]; perms],
        block: vec![DMatrix::zeros(k, k); perms],
        cross: vec![[vec![0.0; k], vec![0.0; k]]; perms],
        noise_grad: [0.0; 2],
        noise: [[0.0; 2]; 2],
    };
    let mut roles = Vec::with_capacity(k);
    let mut beta = Vec::with_capacity(k);
    for l in 0..obj.catalog.len() {
        roles.clear();
        roles.extend(obj.catalog.get(l).roles());
        for d in 0..perms {
            beta.clear();
            beta.extend(roles.iter().map(|&kk| p.beta.get(kk, d).to_f64_lossy()));
            let absent: f64 = beta.iter().product();
            let q = (eps * r + (1.0 - eps) * (1.0 - absent)).clamp(floor, 1.0 - floor);
            let (a1, a0) = (obj.stats.ones(l, d).to_f64_lossy(), obj.stats.zeros(l, d).to_f64_lossy());
            let d1 = -a1 / q + a0 / (1.0 - q);
            let d2 = a1 / (q * q) + a0 / ((1.0 - q) * (1.0 - q));
            let q_eps = r - (1.0 - absent);
            let q_r = eps;
            out.noise_grad[0] += d1 * q_eps;
            out.noise_grad[1] += d1 * q_r;
            out.noise[0][0] += d2 * q_eps * q_eps;
            out.noise[1][1] += d2 * q_r * q_r;
            out.noise[0][1] += d2 * q_eps * q_r + d1;
            // product of the other roles' betas, without dividing by beta_k
            let others = |skip: &[usize]| -> f64 {
                beta.iter().enumerate().filter(|(j, _)| !skip.contains(j)).map(|(_, &b)| b).product()
            };
            for (a, &ka) in roles.iter().enumerate() {
                let pa = others(&[a]);
                let qa = -(1.0 - eps) * pa;
                out.grad[d][ka] += d1 * qa;
                out.cross[d][0][ka] += d2 * qa * q_eps + d1 * pa;
                out.cross[d][1][ka] += d2 * qa * q_r;
                for (b, &kb) in roles.iter().enumerate() {
                    let qb = -(1.0 - eps) * others(&[b]);
                    let mixed = if a == b { 0.0 } else { -(1.0 - eps) * others(&[a, b]) };
                    out.block[d][(ka, kb)] += d2 * qa * qb + d1 * mixed;
                }
            }
        }
    }
    out.noise[1][0] = out.noise[0][1];
    out
}

/// One projected Newton step with Levenberg damping and a backtracking line
/// search. Parameters sitting on a bound with the gradient pointing outward
/// stay fixed. Returns whether the risk decreased.
fn newton_step<F: Real>(obj: &Objective<'_, F>, p: &mut MacParams<F>, opts: &MStepOptions<F>) -> bool {
    let k = p.num_roles();
    let perms = p.num_perms();
    let lo = F::param_floor().to_f64_lossy();
    let hi = 1.0 - lo;
    let h = arrow_hessian(obj, p);
    let free = |v: f64, g: f64| !((v <= lo && g >= 0.0) || (v >= hi && g <= 0.0));
    let beta_free: Vec<Vec<usize>> = (0..perms)
        .map(|d| (0..k).filter(|&kk| free(p.beta.get(kk, d).to_f64_lossy(), h.grad[d][kk])).collect())
        .collect();
    let mut noise_free = Vec::new();
    if !opts.fix_eps && free(p.eps.to_f64_lossy(), h.noise_grad[0]) {
        noise_free.push(0);
    }
    if !opts.fix_r && free(p.r.to_f64_lossy(), h.noise_grad[1]) {
        noise_free.push(1);
    }
    let scale = h
        .block
        .iter()
        .flat_map(|b| b.diagonal().iter().copied().collect::<Vec<_>>())
        .chain([h.noise[0][0], h.noise[1][1]])
        .fold(1.0f64, |a, v| a.max(v.abs()));
    let mut damping = 0.0;
    let step = loop {
        if let Some(step) = solve_arrow(&h, &beta_free, &noise_free, damping) {
            break step;
        }
        damping = if damping == 0.0 { 1e-10 * scale } else { damping * 100.0 };
        if damping > 1e10 * scale {
            return false;
        }
    };
    let base = obj.value(p);
    let mut alpha = 1.0;
    for _ in 0..40 {
        let mut trial = p.clone();
        let clamp = |v: f64| F::lit(v.clamp(lo, hi));
        for (d, idx) in beta_free.iter().enumerate() {
            for (j, &kk) in idx.iter().enumerate() {
                trial.beta.set(kk, d, clamp(p.beta.get(kk, d).to_f64_lossy() + alpha * step.0[d][j]));
            }
        }
        for (j, &which) in noise_free.iter().enumerate() {
            let s = alpha * step.1[j];
            if which == 0 {
                trial.eps = clamp(p.eps.to_f64_lossy() + s);
            } else {
                trial.r = clamp(p.r.to_f64_lossy() + s);
            }
        }
        if obj.value(&trial) < base {
            *p = trial;
            return true;
        }
        alpha *= 0.5;
    }
    false
}

/// Solve `(H + damping I) s = -g` over the free coordinates through the
/// Schur complement of the noise parameters. `None` if a pivot block is not
/// positive definite.
#[allow(clippy::type_complexity)]
fn solve_arrow(h: &ArrowHessian, beta_free: &[Vec<usize>], noise_free: &[usize], damping: f64) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
    let m = noise_free.len();
    let mut schur = DMatrix::from_fn(m, m, |a, b| h.noise[noise_free[a]][noise_free[b]] + if a == b { damping } else { 0.0 });
    let mut rhs = DVector::from_fn(m, |a, _| -h.noise_grad[noise_free[a]]);
    let mut factors = Vec::with_capacity(beta_free.len());
    for (d, idx) in beta_free.iter().enumerate() {
        let n = idx.len();
        if n == 0 {
            factors.push(None);
            continue;
        }
        let block = DMatrix::from_fn(n, n, |a, b| h.block[d][(idx[a], idx[b])] + if a == b { damping } else { 0.0 });
        let chol = block.cholesky()?;
        let g = DVector::from_fn(n, |a, _| h.grad[d][idx[a]]);
        let c = DMatrix::from_fn(n, m, |a, b| h.cross[d][noise_free[b]][idx[a]]);
        let hinv_g = chol.solve(&g);
        let hinv_c = chol.solve(&c);
        schur -= c.transpose() * &hinv_c;
        rhs += c.transpose() * &hinv_g;
        factors.push(Some((hinv_g, hinv_c)));
    }
    let noise_step = if m == 0 { DVector::zeros(0) } else { schur.cholesky()?.solve(&rhs) };
    let beta_step = factors
        .into_iter()
        .map(|f| match f {
            None => Vec::new(),
            Some((hinv_g, hinv_c)) => (-(hinv_g + hinv_c * &noise_step)).iter().copied().collect(),
        })
        .collect();
    Some((beta_step, noise_step.iter().copied().collect()))
}

/// Try `p + s (p - before)` for `s = 1, 2, 4, ...` projected onto the box and
/// keep the best point if it lowers the risk. Returns whether `p` moved.
fn extrapolate<F: Real>(obj: &Objective<'_, F>, before: &MacParams<F>, p: &mut MacParams<F>, opts: &MStepOptions<F>) -> bool {
    let lo = F::param_floor();
    let hi = F::one() - lo;
    let clamp = |v: F| v.max(lo).min(hi);
    let mut best_value = obj.value(p);
    let mut best: Option<MacParams<F>> = None;
    let mut step = F::one();
    for _ in 0..20 {
        let mut trial = p.clone();
        for (t, (&now, &old)) in trial
            .beta
            .as_mut_slice()
            .iter_mut()
            .zip(p.beta.as_slice().iter().zip(before.beta.as_slice()))
        {
            *t = clamp(now + step * (now - old));
        }
        if !opts.fix_eps {
            trial.eps = clamp(p.eps + step * (p.eps - before.eps));
        }
        if !opts.fix_r {
            trial.r = clamp(p.r + step * (p.r - before.r));
        }
        let v = obj.value(&trial);
        if !(v < best_value) {
            break;
        }
        best_value = v;
        best = Some(trial);
        step = step * F::lit(2.0);
    }
    match best {
        Some(b) => {
            *p = b;
            true
        }
        None => false,
    }
}

/// One M-step: minimize the expected risk `sum_iL gamma_iL R_iL` by cycling
/// through the scalar first-order conditions for every `beta_kd`, `eps` and
/// `r`. Free parameters are kept in `[param_floor, 1 - param_floor]`.
pub fn m_step<F: Real>(
    x: &BinaryMatrix,
    gamma: &Responsibilities<F>,
    catalog: &RoleSetCatalog,
    params: &MacParams<F>,
    opts: &MStepOptions<F>,
) -> Result<MStepOutcome<F>> {
    check_x_params(x, params, catalog)?;
    if gamma.users() != x.rows() || gamma.num_sets() != catalog.len() {
        return Err(Error::ShapeMismatch {
            op: "m_step (responsibilities)",
            left: (gamma.users(), gamma.num_sets()),
            right: (x.rows(), catalog.len()),
        });
    }
    let stats = SetStats::new(x, gamma);
    let obj = Objective { stats: &stats, catalog };
    let lo = F::param_floor();
    let hi = F::one() - lo;
    let mut p = params.clone();
    if !opts.fix_eps {
        p.eps = p.eps.clamp_param();
    }
    if !opts.fix_r {
        p.r = p.r.clamp_param();
    }
    let mut fallbacks = Vec::new();
    let mut residual = F::infinity();
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let before = p.clone();
        for nu in 0..p.num_perms() {
            for mu in 0..p.num_roles() {
                let start = p.beta.get(mu, nu);
                let sol = solve_convex(
                    |b| obj.beta_derivs(&p, mu, nu, b),
                    start,
                    lo,
                    hi,
                    opts.tolerance,
                    opts.max_newton_iterations,
                );
                if sol.fell_back {
                    fallbacks.push(ParamId::Beta { role: mu, perm: nu });
                }
                p.beta.set(mu, nu, sol.value);
            }
        }
        let table = set_absence_table(&p, catalog);
        if !opts.fix_eps {
            let r = p.r;
            let sol = solve_convex(
                |e| obj.noise_derivs(&table, e, r, true),
                p.eps,
                lo,
                hi,
                opts.tolerance,
                opts.max_newton_iterations,
            );
            if sol.fell_back {
                fallbacks.push(ParamId::Eps);
            }
            p.eps = sol.value;
        }
        if !opts.fix_r {
            let eps = p.eps;
            let sol = solve_convex(
                |r| obj.noise_derivs(&table, eps, r, false),
                p.r,
                lo,
                hi,
                opts.tolerance,
                opts.max_newton_iterations,
            );
            if sol.fell_back {
                fallbacks.push(ParamId::R);
            }
            p.r = sol.value;
        }
        residual = max_residual(&obj, &p, opts);
        if residual < opts.tolerance {
            break;
        }
        // Coordinate sweeps crawl along valleys where eps and beta trade off;
        // extrapolate along the last sweep, then take a joint Newton step.
        let moved = extrapolate(&obj, &before, &mut p, opts);
        if newton_step(&obj, &mut p, opts) || moved {
            residual = max_residual(&obj, &p, opts);
            if residual < opts.tolerance {
                break;
            }
        }
    }
    fallbacks.sort_by_key(|id| match *id {
        ParamId::Beta { role, perm } => (0, role, perm),
        ParamId::Eps => (1, 0, 0),
        ParamId::R => (2, 0, 0),
    });
    fallbacks.dedup();
    Ok(MStepOutcome {
        params: p,
        max_residual: residual,
        sweeps,
        fallbacks,
    })
}

/// Settings for [`fit_mac`].
#[derive(Clone, Debug, PartialEq)]
pub struct MacFitConfig<F> {
    pub num_roles: usize,
    pub max_set_size: usize,
    /// `T0 = factor * mean initial risk per (user, role set)`.
    pub initial_temperature_factor: F,
    /// Geometric cooling factor applied after every EM pass, in `(0, 1)`.
    pub cooling_rate: F,
    /// Stop once every user's largest responsibility exceeds `1 - threshold`.
    pub convergence_threshold: F,
    pub max_iterations: usize,
    pub newton_tolerance: F,
    pub max_newton_iterations: usize,
    /// Coordinate sweeps per M-step.
    pub max_m_sweeps: usize,
    /// Hold `eps` at this value instead of fitting it.
    pub fixed_eps: Option<F>,
    /// Half-width of the uniform jitter added to every `beta` between EM
    /// passes, so that roles the M-step has made identical can split again
    /// when the temperature drops. Zero disables it.
    pub perturbation: F,
    pub seed: u64,
}

impl<F: Real> MacFitConfig<F> {
    pub fn new(num_roles: usize) -> Self {
        Self {
            num_roles,
            max_set_size: 2.min(num_roles.max(1)),
            initial_temperature_factor: F::one(),
            cooling_rate: F::lit(0.95),
            convergence_threshold: F::lit(1e-6),
            max_iterations: 1000,
            newton_tolerance: F::lit(1e-8),
            max_newton_iterations: 60,
            max_m_sweeps: 50,
            fixed_eps: None,
            perturbation: F::lit(1e-2),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_roles == 0 {
            return Err(Error::InvalidConfig("number of roles must be at least 1".into()));
        }
        if !(self.cooling_rate > F::zero() && self.cooling_rate < F::one()) {
            return Err(Error::out_of_range("cooling_rate", self.cooling_rate.to_f64_lossy(), "(0, 1)"));
        }
        if !(self.initial_temperature_factor > F::zero()) {
            return Err(Error::out_of_range(
                "initial_temperature_factor",
                self.initial_temperature_factor.to_f64_lossy(),
                "(0, inf)",
            ));
        }
        if !(self.convergence_threshold > F::zero()) || !(self.newton_tolerance > F::zero()) {
            return Err(Error::InvalidConfig("thresholds must be positive".into()));
        }
        if let Some(e) = self.fixed_eps {
            check_prob(e, || "fixed_eps".to_string())?;
        }
        if !(self.perturbation >= F::zero() && self.perturbation < F::lit(0.5)) {
            return Err(Error::out_of_range("perturbation", self.perturbation.to_f64_lossy(), "[0, 0.5)"));
        }
        Ok(())
    }

    fn m_options(&self) -> MStepOptions<F> {
        MStepOptions {
            tolerance: self.newton_tolerance,
            max_newton_iterations: self.max_newton_iterations,
            max_sweeps: self.max_m_sweeps,
            fix_eps: self.fixed_eps.is_some(),
            fix_r: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacDiagnostics<F> {
    pub iterations: usize,
    pub converged: bool,
    pub initial_temperature: F,
    pub final_temperature: F,
    /// `sum_i log p(x_i | L_i)` with each user at its most probable role set.
    pub log_likelihood: F,
    pub free_energy: F,
    /// Number of M-step parameter solves that needed the bisection fallback.
    pub newton_fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct MacFit<F> {
    pub config: FlatRbacConfig,
    pub params: MacParams<F>,
    pub responsibilities: Responsibilities<F>,
    pub catalog: RoleSetCatalog,
    pub diagnostics: MacDiagnostics<F>,
}

/// Initial parameters: each role copies the complement of a randomly chosen
/// user row, pulled into the interior by a uniform jitter in `[0, 0.05]`.
pub fn initial_params<F: Real>(x: &BinaryMatrix, num_roles: usize, rng: &mut impl Rng) -> MacParams<F> {
    let n = x.rows();
    let rows: Vec<usize> = if num_roles <= n {
        sample(rng, n, num_roles).into_vec()
    } else {
        (0..num_roles).map(|_| rng.random_range(0..n)).collect()
    };
    let beta = ProbMatrix::from_fn(num_roles, x.cols(), |k, d| {
        let jitter = F::lit(rng.random_range(0.0..=0.05));
        let base = if x.get(rows[k], d) { jitter } else { F::one() - jitter };
        base.clamp_param()
    })
    .expect("valid shape");
    MacParams {
        beta,
        eps: F::lit(0.1),
        r: F::lit(0.5),
    }
}

/// Costs added to the likelihood risk in each E-step, given the previous
/// responsibilities. Returns an N x |catalog| row-major matrix.
pub(crate) type ExtraCostFn<'a, F> = dyn FnMut(&Responsibilities<F>) -> Result<Vec<F>> + 'a;

/// Fit MAC by deterministic-annealing EM.
pub fn fit_mac<F: Real>(x: &BinaryMatrix, config: &MacFitConfig<F>) -> Result<MacFit<F>> {
    anneal(x, config, None)
}

pub(crate) fn anneal<F: Real>(
    x: &BinaryMatrix,
    config: &MacFitConfig<F>,
    mut extra: Option<&mut ExtraCostFn<'_, F>>,
) -> Result<MacFit<F>> {
    config.validate()?;
    let catalog = RoleSetCatalog::new(config.num_roles, config.max_set_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initial_params::<F>(x, config.num_roles, &mut rng);
    if let Some(e) = config.fixed_eps {
        params.eps = e;
    }
    let opts = config.m_options();
    let sets = catalog.len();
    let n = x.rows();

    let total_risk = |params: &MacParams<F>, prev: &Responsibilities<F>, extra: &mut Option<&mut ExtraCostFn<'_, F>>| -> Result<Vec<F>> {
        let mut risk = risk_matrix(x, params, &catalog)?;
        if let Some(f) = extra.as_mut() {
            let add = f(prev)?;
            if add.len() != risk.len() {
                return Err(Error::ShapeMismatch {
                    op: "anneal (extra costs)",
                    left: (n, sets),
                    right: (add.len(), 1),
                });
            }
            for (r, a) in risk.iter_mut().zip(add) {
                *r = *r + a;
            }
        }
        Ok(risk)
    };

    let mut prev = Responsibilities::uniform(n, sets, F::infinity());
    let initial = total_risk(&params, &prev, &mut extra)?;
    let mean = initial.iter().copied().sum::<F>() / F::from_usize(initial.len()).expect("count");
    let t0 = (config.initial_temperature_factor * mean).max(F::min_positive_value());
    let mut temperature = t0;
    let mut converged = false;
    let mut iterations = 0;
    let mut fallbacks = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        let risk = total_risk(&params, &prev, &mut extra)?;
        let gamma = Responsibilities::from_risk(n, sets, &risk, temperature)?;
        converged = gamma.is_crisp(config.convergence_threshold);
        let outcome = m_step(x, &gamma, &catalog, &params, &opts)?;
        fallbacks += outcome.fallbacks.len();
        params = outcome.params;
        prev = gamma;
        if converged {
            break;
        }
        if config.perturbation > F::zero() {
            // an exact M-step keeps symmetric roles symmetric forever
            let delta = config.perturbation;
            for b in params.beta.as_mut_slice() {
                let u = F::lit(rng.random_range(-1.0..=1.0));
                *b = (*b + delta * u).clamp_param();
            }
        }
        temperature = temperature * config.cooling_rate;
    }

    let z = prev.hard_assignment(&catalog);
    let u = binarize_roles(&params);
    let config_out = FlatRbacConfig::new(z, u)?;
    let likelihood_risk = risk_matrix(x, &params, &catalog)?;
    let log_likelihood = -(0..n).map(|i| likelihood_risk[i * sets + prev.argmax(i)]).sum::<F>();
    let free_energy = free_energy(x, &params, &catalog, prev.temperature())?;
    Ok(MacFit {
        config: config_out,
        params,
        responsibilities: prev,
        catalog,
        diagnostics: MacDiagnostics {
            iterations,
            converged,
            initial_temperature: t0,
            final_temperature: temperature,
            log_likelihood,
            free_energy,
            newton_fallbacks: fallbacks,
        },
    })
}

/// `u_kd = 1` iff `beta_kd < 0.5`.
pub fn binarize_roles<F: Real>(params: &MacParams<F>) -> BinaryMatrix {
    BinaryMatrix::from_fn(params.num_roles(), params.num_perms(), |k, d| params.beta.get(k, d) < F::lit(0.5))
        .expect("nonempty")
}

/// `sum_i log p(x_i | L_i)` for fixed role-set choices (indices into `catalog`).
pub fn hard_log_likelihood<F: Real>(
    x: &BinaryMatrix,
    params: &MacParams<F>,
    catalog: &RoleSetCatalog,
    choice: &[usize],
) -> Result<F> {
    check_x_params(x, params, catalog)?;
    Ok(-choice
        .iter()
        .enumerate()
        .map(|(i, &l)| per_item_risk(x, i, catalog.get(l), params))
        .sum::<F>())
}

/// Per-cell confidence in the reconstructed bit:
/// `sum_L gamma_iL p(x_id = recon_id | L)`, row-major N x D.
pub fn posterior_cell_confidence<F: Real>(
    x: &BinaryMatrix,
    config: &FlatRbacConfig,
    params: &MacParams<F>,
    gamma: &Responsibilities<F>,
    catalog: &RoleSetCatalog,
) -> Result<Vec<F>> {
    check_x_params(x, params, catalog)?;
    let recon = config.reconstruct();
    if recon.shape() != x.shape() || gamma.users() != x.rows() || gamma.num_sets() != catalog.len() {
        return Err(Error::ShapeMismatch {
            op: "posterior_cell_confidence",
            left: x.shape(),
            right: recon.shape(),
        });
    }
    let (n, perms) = x.shape();
    let mut out = vec![F::zero(); n * perms];
    for i in 0..n {
        for (l, &g) in gamma.row(i).iter().enumerate() {
            if g == F::zero() {
                continue;
            }
            let set = catalog.get(l);
            for d in 0..perms {
                let q = params.q(set, d).clamp_prob();
                let p = if recon.get(i, d) { q } else { F::one() - q };
                out[i * perms + d] = out[i * perms + d] + g * p;
            }
        }
    }
    Ok(out)
}

/// Cell-wise most probable value under the responsibility-weighted model:
/// `x_id = 1` iff `sum_L gamma_iL q_Ld > 0.5`.
pub fn map_reconstruction<F: Real>(params: &MacParams<F>, gamma: &Responsibilities<F>, catalog: &RoleSetCatalog) -> BinaryMatrix {
    BinaryMatrix::from_fn(gamma.users(), params.num_perms(), |i, d| {
        let p: F = gamma
            .row(i)
            .iter()
            .enumerate()
            .map(|(l, &g)| g * params.q(catalog.get(l), d))
            .sum();
        p > F::lit(0.5)
    })
    .expect("nonempty")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    fn random_params(rng: &mut ChaCha8Rng, k: usize, d: usize) -> MacParams<f64> {
        let beta = ProbMatrix::from_fn(k, d, |_, _| rng.random_range(0.05..0.95)).unwrap();
        MacParams::new(beta, rng.random_range(0.05..0.5), rng.random_range(0.1..0.9)).unwrap()
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize, d: usize) -> BinaryMatrix {
        BinaryMatrix::from_fn(n, d, |_, _| rng.random_bool(0.5)).unwrap()
    }

    #[test]
    fn catalog_size_and_order() {
        let cat = RoleSetCatalog::new(4, 2).unwrap();
        assert_eq!(cat.len(), binom(4, 0) + binom(4, 1) + binom(4, 2));
        assert_eq!(cat.get(0), RoleSet::EMPTY);
        assert_eq!(cat.get(1), RoleSet::from_roles(&[0]));
        assert_eq!(cat.get(5), RoleSet::from_roles(&[0, 1]));
        assert_eq!(cat.get(10), RoleSet::from_roles(&[2, 3]));
        let full = RoleSetCatalog::new(5, 5).unwrap();
        assert_eq!(full.len(), 32);
        let mut masks: Vec<u64> = full.sets().iter().map(|s| s.mask()).collect();
        masks.sort_unstable();
        masks.dedup();
        assert_eq!(masks.len(), 32);
        assert!(RoleSetCatalog::new(0, 1).is_err());
        assert!(RoleSetCatalog::new(3, 4).is_err());
        assert_eq!(cat.sets_containing(2), &[3, 6, 8, 10]);
    }

    #[test]
    fn q_value_limits_and_arithmetic() {
        assert_eq!(q_value(0.3, 0.0, 0.9).unwrap(), 0.7);
        assert_eq!(q_value(0.3, 1.0, 0.9).unwrap(), 0.9);
        assert!((q_value::<f64>(0.2, 0.1, 0.5).unwrap() - 0.77).abs() < 1e-15);
        assert!(q_value(1.2, 0.1, 0.5).is_err());
    }

    #[test]
    fn risk_of_perfect_fit_is_negligible() {
        let beta = ProbMatrix::new(2, 3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let params = MacParams::new(beta, 0.0, 0.5).unwrap();
        let x = BinaryMatrix::from_rows(&[[1u8, 1, 0]]).unwrap();
        let risk = per_item_risk(&x, 0, RoleSet::from_roles(&[0, 1]), &params);
        assert!((0.0..=3.0 * 1e-12 * 1.01).contains(&risk));
        let zeros = BinaryMatrix::from_rows(&[[0u8, 0, 0]]).unwrap();
        let noisy = MacParams::new(ProbMatrix::filled(2, 3, 0.37).unwrap(), 0.0, 0.5).unwrap();
        assert!(per_item_risk(&zeros, 0, RoleSet::EMPTY, &noisy) <= 3.0 * 1e-12 * 1.01);
    }

    #[test]
    fn risk_matches_explicit_noise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let params = random_params(&mut rng, 2, 2);
            let x = random_x(&mut rng, 1, 2);
            let set = RoleSet::from_roles(&[0, 1]);
            // sum over xi in {0,1} per bit
            let mut lik = 1.0;
            for d in 0..2 {
                let bit = x.get(0, d);
                let p_flat1 = 1.0 - params.set_absence(set, d);
                let p_flat = if bit { p_flat1 } else { 1.0 - p_flat1 };
                let p_noise = if bit { params.r() } else { 1.0 - params.r() };
                let mut cell = 0.0;
                for xi in 0..2 {
                    cell += if xi == 1 { params.eps() * p_noise } else { (1.0 - params.eps()) * p_flat };
                }
                lik *= cell;
            }
            let risk = per_item_risk(&x, 0, set, &params);
            assert!((risk + lik.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn table_risk_agrees_with_direct_risk() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_params(&mut rng, 3, 70);
        let x = random_x(&mut rng, 5, 70);
        let cat = RoleSetCatalog::new(3, 3).unwrap();
        let risk = risk_matrix(&x, &params, &cat).unwrap();
        for i in 0..5 {
            for (l, &set) in cat.sets().iter().enumerate() {
                let direct = per_item_risk(&x, i, set, &params);
                assert!((risk[i * cat.len() + l] - direct).abs() < 1e-9 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn e_step_temperature_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_params(&mut rng, 2, 4);
        let x = random_x(&mut rng, 3, 4);
        let cat = RoleSetCatalog::new(2, 2).unwrap();
        let hot = e_step(&x, &params, &cat, 1e12, None).unwrap();
        for i in 0..3 {
            for &g in hot.row(i) {
                assert!((g - 0.25).abs() < 1e-6);
            }
        }
        let cold = e_step(&x, &params, &cat, 1e-12, None).unwrap();
        for i in 0..3 {
            assert!(cold.max_prob(i) > 1.0 - 1e-6);
        }
        assert!(e_step(&x, &params, &cat, 0.0, None).is_err());
    }

    #[test]
    fn e_step_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = random_params(&mut rng, 2, 3);
        let x = random_x(&mut rng, 2, 3);
        let cat = RoleSetCatalog::new(2, 1).unwrap();
        let gamma = e_step(&x, &params, &cat, 1.0, None).unwrap();
        for i in 0..2 {
            let lik: Vec<f64> = cat
                .sets()
                .iter()
                .map(|&set| {
                    (0..3)
                        .map(|d| {
                            let q = params.eps() * params.r() + (1.0 - params.eps()) * (1.0 - params.set_absence(set, d));
                            if x.get(i, d) { q } else { 1.0 - q }
                        })
                        .product()
                })
                .collect();
            let z: f64 = lik.iter().sum();
            for l in 0..cat.len() {
                assert!((gamma.get(i, l) - lik[l] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn e_step_rejects_nan_costs() {
        let params = MacParams::new(ProbMatrix::filled(1, 2, 0.5).unwrap(), 0.1, 0.5).unwrap();
        let x = BinaryMatrix::zeros(1, 2).unwrap();
        let cat = RoleSetCatalog::new(1, 1).unwrap();
        let extra = [f64::NAN, 0.0];
        assert!(matches!(e_step(&x, &params, &cat, 1.0, Some(&extra)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn free_energy_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = random_params(&mut rng, 2, 3);
        let x = random_x(&mut rng, 4, 3);
        let cat = RoleSetCatalog::new(2, 2).unwrap();
        let risk = risk_matrix(&x, &params, &cat).unwrap();
        let direct: f64 = risk
            .chunks(cat.len())
            .map(|r| -r.iter().map(|v| (-v).exp()).sum::<f64>().ln())
            .sum();
        let f = free_energy(&x, &params, &cat, 1.0).unwrap();
        assert!((f - direct).abs() < 1e-10);

        let one = RoleSetCatalog::new(1, 1).unwrap();
        let p1 = random_params(&mut rng, 1, 3);
        // force a single-set catalog by evaluating the {role 0} column only
        let r1 = risk_matrix(&x, &p1, &one).unwrap();
        let single: f64 = (0..4).map(|i| r1[i * 2 + 1]).sum();
        let t = 0.37;
        let gamma_single = {
            // |L| = 1 case via extra costs that exclude the empty set
            let extra: Vec<f64> = (0..4).flat_map(|_| [1e300, 0.0]).collect();
            e_step(&x, &p1, &one, t, Some(&extra)).unwrap()
        };
        for i in 0..4 {
            assert!(gamma_single.get(i, 1) > 1.0 - 1e-12);
        }
        let f_single = -t * (0..4).map(|i| -r1[i * 2 + 1] / t).sum::<f64>();
        assert!((f_single - single).abs() < 1e-12);
    }

    fn fd_check(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d) = (2, 3);
        let params = random_params(&mut rng, k, d);
        let x = random_x(&mut rng, 5, d);
        let cat = RoleSetCatalog::new(k, 2).unwrap();
        let t = rng.random_range(0.3..3.0);
        let grad = free_energy_gradient(&x, &params, &cat, t).unwrap();
        let h = 1e-6;
        let f_at = |p: &MacParams<f64>| free_energy(&x, p, &cat, t).unwrap();
        for mu in 0..k {
            for nu in 0..d {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.beta.set(mu, nu, params.beta.get(mu, nu) + h);
                minus.beta.set(mu, nu, params.beta.get(mu, nu) - h);
                let fd = (f_at(&plus) - f_at(&minus)) / (2.0 * h);
                let an = grad.beta[mu * d + nu];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "beta {mu},{nu}: fd {fd} an {an}");
            }
        }
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.eps += h;
        minus.eps -= h;
        let fd = (f_at(&plus) - f_at(&minus)) / (2.0 * h);
        assert!((fd - grad.eps).abs() <= 1e-5 * grad.eps.abs().max(1e-3));
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.r += h;
        minus.r -= h;
        let fd = (f_at(&plus) - f_at(&minus)) / (2.0 * h);
        assert!((fd - grad.r).abs() <= 1e-5 * grad.r.abs().max(1e-3));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            fd_check(seed);
        }
    }

    #[test]
    fn m_step_reaches_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let params = random_params(&mut rng, 3, 4);
            let x = random_x(&mut rng, 8, 4);
            let cat = RoleSetCatalog::new(3, 2).unwrap();
            let gamma = e_step(&x, &params, &cat, 2.0, None).unwrap();
            let out = m_step(&x, &gamma, &cat, &params, &MStepOptions::default()).unwrap();
            assert!(out.max_residual < 1e-8, "residual {}", out.max_residual);
        }
    }

    #[test]
    fn m_step_one_hot_noiseless_gives_empirical_fraction() {
        // Users 0..4 own role 0 only, users 4..8 role 1 only; eps fixed at 0.
        let rows: Vec<Vec<u8>> = vec![
            vec![1, 1, 0],
            vec![1, 0, 0],
            vec![1, 1, 0],
            vec![1, 1, 0],
            vec![0, 0, 1],
            vec![0, 1, 1],
            vec![0, 0, 1],
            vec![0, 0, 1],
        ];
        let x = BinaryMatrix::from_rows(&rows).unwrap();
        let cat = RoleSetCatalog::new(2, 1).unwrap();
        let mut gamma = vec![0.0; 8 * 3];
        for i in 0..8 {
            gamma[i * 3 + if i < 4 { 1 } else { 2 }] = 1.0;
        }
        let gamma = Responsibilities::from_rows(8, 3, gamma, 1.0).unwrap();
        let params = MacParams::new(ProbMatrix::filled(2, 3, 0.5).unwrap(), 0.0, 0.5).unwrap();
        let opts = MStepOptions {
            fix_eps: true,
            fix_r: true,
            ..MStepOptions::default()
        };
        let out = m_step(&x, &gamma, &cat, &params, &opts).unwrap();
        let lo = f64::param_floor();
        let expect = [[lo, 0.25, 1.0 - lo], [1.0 - lo, 0.75, lo]];
        for k in 0..2 {
            for d in 0..3 {
                assert!((out.params.beta().get(k, d) - expect[k][d]).abs() < 1e-9, "{k},{d}");
            }
        }
    }

    #[test]
    fn m_step_single_set_noise_roots() {
        // One user set {0}, D = 1. With beta fixed near 1 the structural part
        // predicts 0, so the noise parameters must explain the ones.
        let x = BinaryMatrix::from_rows(&[[1u8], [1], [0], [1], [0], [0], [0], [0]]).unwrap();
        let cat = RoleSetCatalog::new(1, 1).unwrap();
        let mut g = vec![0.0; 16];
        for i in 0..8 {
            g[i * 2] = 1.0;
        }
        let gamma = Responsibilities::from_rows(8, 2, g, 1.0).unwrap();
        // empty set: q = eps * r, so the condition for r is eps*r = 3/8
        let params = MacParams::new(ProbMatrix::filled(1, 1, 0.5).unwrap(), 0.5, 0.5).unwrap();
        let opts = MStepOptions {
            fix_eps: true,
            ..MStepOptions::default()
        };
        let out = m_step(&x, &gamma, &cat, &params, &opts).unwrap();
        assert!((out.params.r() - 0.75_f64).abs() < 1e-9);
        // with r fixed at 0.5, eps*0.5 = 3/8 gives eps = 0.75
        let opts = MStepOptions {
            fix_r: true,
            ..MStepOptions::default()
        };
        let out = m_step(&x, &gamma, &cat, &params, &opts).unwrap();
        assert!((out.params.eps() - 0.75_f64).abs() < 1e-9);
    }

    #[test]
    fn em_step_does_not_increase_free_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let params = random_params(&mut rng, 3, 5);
            let x = random_x(&mut rng, 10, 5);
            let cat = RoleSetCatalog::new(3, 2).unwrap();
            let t = rng.random_range(0.2..5.0);
            let before = free_energy(&x, &params, &cat, t).unwrap();
            let gamma = e_step(&x, &params, &cat, t, None).unwrap();
            let out = m_step(&x, &gamma, &cat, &params, &MStepOptions::default()).unwrap();
            let after = free_energy(&x, &out.params, &cat, t).unwrap();
            assert!(after <= before + 1e-7, "{after} > {before}");
        }
    }

    #[test]
    fn solver_falls_back_to_bisection() {
        // g(x) = atan(x - 0.3): Newton overshoots from far away.
        let sol = solve_convex(
            |x: f64| ((x - 0.3).atan() * 50.0, 50.0 / (1.0 + (x - 0.3).powi(2)) * 1e-3),
            0.99,
            1e-6,
            1.0 - 1e-6,
            1e-10,
            200,
        );
        assert!(sol.fell_back);
        assert!((sol.value - 0.3).abs() < 1e-9);
    }

    #[test]
    fn mixture_identity_holds_per_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let params = random_params(&mut rng, 3, 4);
        let cat = RoleSetCatalog::new(3, 3).unwrap();
        for &set in cat.sets() {
            for d in 0..4 {
                let p_flat1 = 1.0 - params.set_absence(set, d);
                let mixed = params.eps() * params.r() + (1.0 - params.eps()) * p_flat1;
                assert_eq!(mixed, params.q(set, d));
            }
        }
    }

    #[test]
    fn confidence_limits() {
        let beta = ProbMatrix::new(2, 3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let cat = RoleSetCatalog::new(2, 2).unwrap();
        let x = BinaryMatrix::from_rows(&[[1u8, 0, 0], [0, 1, 0], [1, 1, 0]]).unwrap();
        let choice = [1usize, 2, 3];
        let mut g = vec![0.0; 3 * cat.len()];
        for (i, &l) in choice.iter().enumerate() {
            g[i * cat.len() + l] = 1.0;
        }
        let gamma = Responsibilities::from_rows(3, cat.len(), g, 1e-3).unwrap();
        let z = gamma.hard_assignment(&cat);
        let config = FlatRbacConfig::new(z, binarize_roles(&MacParams::new(beta.clone(), 0.0, 0.5).unwrap())).unwrap();
        let exact = MacParams::new(beta.clone(), 0.0, 0.5).unwrap();
        let conf = posterior_cell_confidence(&x, &config, &exact, &gamma, &cat).unwrap();
        assert!(conf.iter().all(|&c| c >= 1.0 - 1e-11));
        let noise = MacParams::new(beta, 1.0, 0.5).unwrap();
        let conf = posterior_cell_confidence(&x, &config, &noise, &gamma, &cat).unwrap();
        assert!(conf.iter().all(|&c: &f64| (c - 0.5).abs() < 1e-12));
    }

    #[test]
    fn confidence_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = random_params(&mut rng, 2, 3);
        let x = random_x(&mut rng, 3, 3);
        let cat = RoleSetCatalog::new(2, 2).unwrap();
        let gamma = e_step(&x, &params, &cat, 1.0, None).unwrap();
        let config = FlatRbacConfig::new(gamma.hard_assignment(&cat), binarize_roles(&params)).unwrap();
        let recon = config.reconstruct();
        let conf = posterior_cell_confidence(&x, &config, &params, &gamma, &cat).unwrap();
        for i in 0..3 {
            for d in 0..3 {
                let mut s = 0.0;
                for l in 0..cat.len() {
                    let set = cat.get(l);
                    let q = params.eps() * params.r() + (1.0 - params.eps()) * (1.0 - set.roles().map(|k| params.beta().get(k, d)).product::<f64>());
                    s += gamma.get(i, l) * if recon.get(i, d) { q } else { 1.0 - q };
                }
                assert!((conf[i * 3 + d] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_role_all_ones() {
        let x = BinaryMatrix::ones(6, 4).unwrap();
        let fit = fit_mac(&x, &MacFitConfig::<f64>::new(1).with_seed(3)).unwrap();
        assert!(fit.diagnostics.converged);
        assert_eq!(fit.config.u(), &BinaryMatrix::ones(1, 4).unwrap());
        assert_eq!(fit.config.z(), &BinaryMatrix::ones(6, 1).unwrap());
        // eps is not identifiable here (with r = 1 every eps fits), only the
        // likelihood is; beta stops at the parameter floor, so each of the 24
        // cells keeps q >= 1 - floor
        let floor = 24.0 * (1.0 - 2.0 * f64::param_floor()).ln();
        assert!(fit.diagnostics.log_likelihood >= floor, "{}", fit.diagnostics.log_likelihood);
    }

    #[test]
    fn fit_works_in_single_precision() {
        let x = BinaryMatrix::from_rows(&[[1u8, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]).unwrap();
        let mut cfg = MacFitConfig::<f32>::new(2).with_seed(1);
        cfg.newton_tolerance = 1e-4;
        let fit = fit_mac(&x, &cfg).unwrap();
        assert_eq!(fit.config.reconstruct(), x);
    }
}
