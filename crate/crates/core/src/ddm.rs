//! Disjoint decomposition model (DDM).
//!
//! Users are partitioned into business roles and permissions into technical
//! roles. Each (business, technical) block has its own Bernoulli parameter
//! with a symmetric Beta prior, which is integrated out, and both partitions
//! carry a Dirichlet-process (Chinese restaurant) prior. Inference alternates
//! collapsed Gibbs sweeps over users and permissions and keeps the state with
//! the highest log joint.
//!
//! All quantities here are `f64`: log-gamma sums over large counts lose too
//! much precision in single precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::matrix::{BinaryMatrix, BinaryMatrixBuilder};
use crate::rbac::HierRbacConfig;
use crate::scalar::log_sum_exp;

#[derive(Clone, Debug, PartialEq)]
pub struct DdmConfig {
    /// Concentration of both partition priors.
    pub alpha: f64,
    /// Symmetric Beta hyperparameter of the block parameters.
    pub beta_prior_strength: f64,
    pub max_alternations: usize,
    /// Stop after this many consecutive alternations without any reassignment.
    pub stagnation_window: usize,
    pub seed: u64,
}

impl Default for DdmConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_prior_strength: 0.5,
            max_alternations: 200,
            stagnation_window: 5,
            seed: 0,
        }
    }
}

impl DdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::out_of_range("alpha", self.alpha, "(0, inf)"));
        }
        if !(self.beta_prior_strength > 0.0 && self.beta_prior_strength.is_finite()) {
            return Err(Error::out_of_range("beta_prior_strength", self.beta_prior_strength, "(0, inf)"));
        }
        if self.stagnation_window == 0 {
            return Err(Error::InvalidConfig("stagnation window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrpTarget {
    Existing(usize),
    New,
}

/// Chinese-restaurant conditional: `N_k / (N - 1 + alpha)` for an existing
/// role, `alpha / (N - 1 + alpha)` for a new one. `counts` excludes the item
/// being placed and `n_total` includes it.
pub fn dp_prior(counts: &[usize], n_total: usize, alpha: f64, target: CrpTarget) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::out_of_range("alpha", alpha, "(0, inf)"));
    }
    if n_total == 0 {
        return Err(Error::InvalidConfig("dp_prior needs at least one item".into()));
    }
    let denom = (n_total - 1) as f64 + alpha;
    match target {
        CrpTarget::Existing(k) => counts
            .get(k)
            .map(|&c| c as f64 / denom)
            .ok_or_else(|| Error::InvalidConfig(format!("role {k} does not exist"))),
        CrpTarget::New => Ok(alpha / denom),
    }
}

#[inline]
fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log marginal likelihood of one block with `n1` ones and `n0` zeros:
/// `ln B(n1 + g, n0 + g) - ln B(g, g)`.
#[inline]
pub fn block_log_evidence(n1: u64, n0: u64, gamma: f64) -> f64 {
    if n1 == 0 && n0 == 0 {
        return 0.0;
    }
    ln_beta(n1 as f64 + gamma, n0 as f64 + gamma) - ln_beta(gamma, gamma)
}

/// Sum of [`block_log_evidence`] over all blocks. `n1` and `n0` are indexed
/// `[k][l]` and must have the same shape.
pub fn log_evidence(n1: &[Vec<u64>], n0: &[Vec<u64>], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::out_of_range("beta_prior_strength", gamma, "(0, inf)"));
    }
    if n1.len() != n0.len() || n1.iter().zip(n0).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::InvalidConfig("counter matrices differ in shape".into()));
    }
    Ok(n1
        .iter()
        .zip(n0)
        .flat_map(|(a, b)| a.iter().zip(b))
        .map(|(&a, &b)| block_log_evidence(a, b, gamma))
        .sum())
}

/// Log exchangeable partition probability of the Chinese restaurant process:
/// `K ln(alpha) + ln G(alpha) - ln G(alpha + N) + sum_k ln G(N_k)`.
pub fn log_crp(sizes: &[usize], alpha: f64) -> f64 {
    let n: usize = sizes.iter().sum();
    sizes.len() as f64 * alpha.ln() + ln_gamma(alpha) - ln_gamma(alpha + n as f64)
        + sizes.iter().map(|&s| ln_gamma(s as f64)).sum::<f64>()
}

/// Which partition a Gibbs step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Users,
    Perms,
}

/// Partitions plus block counters. Role ids are always `0..K` and `0..L`
/// with no empty role.
#[derive(Clone, Debug, PartialEq)]
pub struct DdmState {
    user_assign: Vec<usize>,
    perm_assign: Vec<usize>,
    user_sizes: Vec<usize>,
    perm_sizes: Vec<usize>,
    n1: Vec<Vec<u64>>,
    n0: Vec<Vec<u64>>,
}

fn sizes_of(assign: &[usize], what: &str) -> Result<Vec<usize>> {
    let k = assign.iter().max().map_or(0, |&m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assign {
        sizes[a] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidConfig(format!("{what} role {empty} has no members")));
    }
    Ok(sizes)
}

impl DdmState {
    /// Build a state from explicit partitions and count the blocks.
    pub fn from_partitions(x: &BinaryMatrix, user_assign: Vec<usize>, perm_assign: Vec<usize>) -> Result<Self> {
        if user_assign.len() != x.rows() || perm_assign.len() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "DdmState::from_partitions",
                left: x.shape(),
                right: (user_assign.len(), perm_assign.len()),
            });
        }
        let user_sizes = sizes_of(&user_assign, "business")?;
        let perm_sizes = sizes_of(&perm_assign, "technical")?;
        let mut n1 = vec![vec![0u64; perm_sizes.len()]; user_sizes.len()];
        for i in 0..x.rows() {
            for d in x.row_ones(i) {
                n1[user_assign[i]][perm_assign[d]] += 1;
            }
        }
        let n0 = n1
            .iter()
            .enumerate()
            .map(|(k, row)| {
                row.iter()
                    .enumerate()
                    .map(|(l, &ones)| (user_sizes[k] * perm_sizes[l]) as u64 - ones)
                    .collect()
            })
            .collect();
        Ok(Self {
            user_assign,
            perm_assign,
            user_sizes,
            perm_sizes,
            n1,
            n0,
        })
    }

    /// One business role and one technical role.
    pub fn single_block(x: &BinaryMatrix) -> Self {
        Self::from_partitions(x, vec![0; x.rows()], vec![0; x.cols()]).expect("valid partitions")
    }

    /// Both partitions drawn from the Chinese restaurant process.
    pub fn from_prior(x: &BinaryMatrix, alpha: f64, rng: &mut impl Rng) -> Self {
        let users = crate::synth::sample_crp(x.rows(), alpha, rng);
        let perms = crate::synth::sample_crp(x.cols(), alpha, rng);
        Self::from_partitions(x, users, perms).expect("CRP labels are contiguous")
    }

    pub fn user_assign(&self) -> &[usize] {
        &self.user_assign
    }

    pub fn perm_assign(&self) -> &[usize] {
        &self.perm_assign
    }

    pub fn num_business_roles(&self) -> usize {
        self.user_sizes.len()
    }

    pub fn num_technical_roles(&self) -> usize {
        self.perm_sizes.len()
    }

    pub fn user_sizes(&self) -> &[usize] {
        &self.user_sizes
    }

    pub fn perm_sizes(&self) -> &[usize] {
        &self.perm_sizes
    }

    pub fn n1(&self) -> &[Vec<u64>] {
        &self.n1
    }

    pub fn n0(&self) -> &[Vec<u64>] {
        &self.n0
    }

    pub fn log_evidence(&self, gamma: f64) -> f64 {
        log_evidence(&self.n1, &self.n0, gamma).expect("consistent counters")
    }

    /// Evidence plus the partition priors of both sides.
    pub fn log_joint(&self, config: &DdmConfig) -> f64 {
        self.log_evidence(config.beta_prior_strength)
            + log_crp(&self.user_sizes, config.alpha)
            + log_crp(&self.perm_sizes, config.alpha)
    }

    fn assign(&self, side: Side) -> &[usize] {
        match side {
            Side::Users => &self.user_assign,
            Side::Perms => &self.perm_assign,
        }
    }

    fn sizes(&self, side: Side) -> &[usize] {
        match side {
            Side::Users => &self.user_sizes,
            Side::Perms => &self.perm_sizes,
        }
    }

    fn other_sizes(&self, side: Side) -> &[usize] {
        match side {
            Side::Users => &self.perm_sizes,
            Side::Perms => &self.user_sizes,
        }
    }

    /// Counters of block (own role `a`, other-side role `b`).
    #[inline]
    fn block(&self, side: Side, a: usize, b: usize) -> (u64, u64) {
        match side {
            Side::Users => (self.n1[a][b], self.n0[a][b]),
            Side::Perms => (self.n1[b][a], self.n0[b][a]),
        }
    }

    fn shift_block(&mut self, side: Side, a: usize, b: usize, ones: u64, zeros: u64, add: bool) {
        let (k, l) = match side {
            Side::Users => (a, b),
            Side::Perms => (b, a),
        };
        if add {
            self.n1[k][l] += ones;
            self.n0[k][l] += zeros;
        } else {
            self.n1[k][l] -= ones;
            self.n0[k][l] -= zeros;
        }
    }

    fn push_role(&mut self, side: Side) -> usize {
        match side {
            Side::Users => {
                self.user_sizes.push(0);
                self.n1.push(vec![0; self.perm_sizes.len()]);
                self.n0.push(vec![0; self.perm_sizes.len()]);
                self.user_sizes.len() - 1
            }
            Side::Perms => {
                self.perm_sizes.push(0);
                for row in self.n1.iter_mut().chain(self.n0.iter_mut()) {
                    row.push(0);
                }
                self.perm_sizes.len() - 1
            }
        }
    }

    /// Drop the empty role `r`; the last role takes its id.
    fn remove_role(&mut self, side: Side, r: usize) {
        let last = self.sizes(side).len() - 1;
        let (assign, sizes) = match side {
            Side::Users => {
                self.n1.swap_remove(r);
                self.n0.swap_remove(r);
                (&mut self.user_assign, &mut self.user_sizes)
            }
            Side::Perms => {
                for row in self.n1.iter_mut().chain(self.n0.iter_mut()) {
                    row.swap_remove(r);
                }
                (&mut self.perm_assign, &mut self.perm_sizes)
            }
        };
        debug_assert_eq!(sizes[r], 0);
        sizes.swap_remove(r);
        if r != last {
            for a in assign.iter_mut().filter(|a| **a == last) {
                *a = r;
            }
        }
    }

    /// Per other-side role, how many of the item's cells are 1.
    fn item_ones(&self, x: &BinaryMatrix, side: Side, item: usize) -> Vec<u64> {
        let mut m1 = vec![0u64; self.other_sizes(side).len()];
        match side {
            Side::Users => {
                for d in x.row_ones(item) {
                    m1[self.perm_assign[d]] += 1;
                }
            }
            Side::Perms => {
                for i in 0..x.rows() {
                    if x.get(i, item) {
                        m1[self.user_assign[i]] += 1;
                    }
                }
            }
        }
        m1
    }

    fn detach(&mut self, side: Side, item: usize, m1: &[u64]) -> (usize, bool) {
        let a = self.assign(side)[item];
        for (b, &ones) in m1.iter().enumerate() {
            let zeros = self.other_sizes(side)[b] as u64 - ones;
            self.shift_block(side, a, b, ones, zeros, false);
        }
        let emptied = match side {
            Side::Users => {
                self.user_sizes[a] -= 1;
                self.user_sizes[a] == 0
            }
            Side::Perms => {
                self.perm_sizes[a] -= 1;
                self.perm_sizes[a] == 0
            }
        };
        if emptied {
            self.remove_role(side, a);
        }
        (a, emptied)
    }

    fn attach(&mut self, side: Side, item: usize, role: usize, m1: &[u64]) {
        for (b, &ones) in m1.iter().enumerate() {
            let zeros = self.other_sizes(side)[b] as u64 - ones;
            self.shift_block(side, role, b, ones, zeros, true);
        }
        match side {
            Side::Users => {
                self.user_sizes[role] += 1;
                self.user_assign[item] = role;
            }
            Side::Perms => {
                self.perm_sizes[role] += 1;
                self.perm_assign[item] = role;
            }
        }
    }

    /// Unnormalized log weights of every existing role followed by a new one,
    /// for a detached item with per-block ones `m1`.
    fn log_weights(&self, side: Side, m1: &[u64], config: &DdmConfig) -> Vec<f64> {
        let g = config.beta_prior_strength;
        let other = self.other_sizes(side);
        let sizes = self.sizes(side);
        let mut w = Vec::with_capacity(sizes.len() + 1);
        for (a, &size) in sizes.iter().enumerate() {
            let mut lw = (size as f64).ln();
            for (b, &ones) in m1.iter().enumerate() {
                let zeros = other[b] as u64 - ones;
                let (n1, n0) = self.block(side, a, b);
                lw += block_log_evidence(n1 + ones, n0 + zeros, g) - block_log_evidence(n1, n0, g);
            }
            w.push(lw);
        }
        let mut lw = config.alpha.ln();
        for (b, &ones) in m1.iter().enumerate() {
            lw += block_log_evidence(ones, other[b] as u64 - ones, g);
        }
        w.push(lw);
        w
    }

    /// Normalized conditional distribution of one item's role given all
    /// others; the last entry is a new role. Role ids refer to the state
    /// after the item is removed (an emptied role is dropped).
    pub fn conditional(&self, x: &BinaryMatrix, side: Side, item: usize, config: &DdmConfig) -> Vec<f64> {
        let mut tmp = self.clone();
        let m1 = tmp.item_ones(x, side, item);
        tmp.detach(side, item, &m1);
        normalize(&tmp.log_weights(side, &m1, config))
    }

    /// One collapsed Gibbs step. Returns whether the partition changed.
    pub fn resample(&mut self, x: &BinaryMatrix, side: Side, item: usize, config: &DdmConfig, rng: &mut impl Rng) -> bool {
        let m1 = self.item_ones(x, side, item);
        let (old, emptied) = self.detach(side, item, &m1);
        let probs = normalize(&self.log_weights(side, &m1, config));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        let is_new = pick == probs.len() - 1;
        let role = if is_new { self.push_role(side) } else { pick };
        self.attach(side, item, role, &m1);
        if emptied {
            !is_new
        } else {
            role != old
        }
    }

    fn check_shape(&self, x: &BinaryMatrix) -> Result<()> {
        if self.user_assign.len() != x.rows() || self.perm_assign.len() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "ddm (state vs x)",
                left: (self.user_assign.len(), self.perm_assign.len()),
                right: x.shape(),
            });
        }
        Ok(())
    }

    /// Hierarchical configuration with `v_kl = 1` iff the block's posterior
    /// mean `(n1 + g) / (n1 + n0 + 2g)` exceeds 0.5.
    pub fn to_config(&self, gamma: f64) -> HierRbacConfig {
        let (k, l) = (self.num_business_roles(), self.num_technical_roles());
        let n = self.user_assign.len();
        let d = self.perm_assign.len();
        let z = BinaryMatrix::from_fn(n, k, |i, r| self.user_assign[i] == r).expect("nonempty");
        let y = BinaryMatrix::from_fn(l, d, |t, p| self.perm_assign[p] == t).expect("nonempty");
        let mut v = BinaryMatrixBuilder::new(k, l).expect("nonempty");
        for a in 0..k {
            for b in 0..l {
                let (n1, n0) = (self.n1[a][b] as f64, self.n0[a][b] as f64);
                v.set(a, b, (n1 + gamma) / (n1 + n0 + 2.0 * gamma) > 0.5);
            }
        }
        HierRbacConfig::new(z, v.build(), y).expect("conforming shapes")
    }
}

fn normalize(log_w: &[f64]) -> Vec<f64> {
    let norm = log_sum_exp(log_w);
    log_w.iter().map(|&w| (w - norm).exp()).collect()
}

/// Resample the role of user `i`.
pub fn gibbs_resample_user(
    state: &mut DdmState,
    x: &BinaryMatrix,
    i: usize,
    config: &DdmConfig,
    rng: &mut impl Rng,
) -> Result<bool> {
    state.check_shape(x)?;
    if i >= x.rows() {
        return Err(Error::InvalidConfig(format!("user {i} out of range")));
    }
    Ok(state.resample(x, Side::Users, i, config, rng))
}

/// Resample the technical role of permission `d`.
pub fn gibbs_resample_permission(
    state: &mut DdmState,
    x: &BinaryMatrix,
    d: usize,
    config: &DdmConfig,
    rng: &mut impl Rng,
) -> Result<bool> {
    state.check_shape(x)?;
    if d >= x.cols() {
        return Err(Error::InvalidConfig(format!("permission {d} out of range")));
    }
    Ok(state.resample(x, Side::Perms, d, config, rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdmDiagnostics {
    pub alternations: usize,
    /// True when the stagnation window was reached before the alternation cap.
    pub converged: bool,
    pub map_log_joint: f64,
    pub final_log_joint: f64,
    /// Log joint after every half sweep (users, then permissions, ...).
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DdmFit {
    pub config: HierRbacConfig,
    pub state: DdmState,
    pub diagnostics: DdmDiagnostics,
}

/// Alternating Gibbs sweeps from a partition pair drawn from the prior,
/// keeping the MAP state.
pub fn fit_ddm(x: &BinaryMatrix, config: &DdmConfig) -> Result<DdmFit> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = DdmState::from_prior(x, config.alpha, &mut rng);
    let mut best = state.clone();
    let mut best_joint = state.log_joint(config);
    let mut trace = Vec::new();
    let mut quiet = 0;
    let mut alternations = 0;
    let mut converged = false;
    while alternations < config.max_alternations {
        alternations += 1;
        let mut changes = 0;
        for side in [Side::Users, Side::Perms] {
            let items = match side {
                Side::Users => x.rows(),
                Side::Perms => x.cols(),
            };
            for item in 0..items {
                changes += state.resample(x, side, item, config, &mut rng) as usize;
            }
            let joint = state.log_joint(config);
            trace.push(joint);
            if joint > best_joint {
                best_joint = joint;
                best = state.clone();
            }
        }
        if changes == 0 {
            quiet += 1;
            if quiet >= config.stagnation_window {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
    }
    let final_log_joint = state.log_joint(config);
    Ok(DdmFit {
        config: best.to_config(config.beta_prior_strength),
        state: best,
        diagnostics: DdmDiagnostics {
            alternations,
            converged,
            map_log_joint: best_joint,
            final_log_joint,
            trace,
        },
    })
}

/// Independent chains with seeds `seed, seed + 1, ...`; returns the one with
/// the highest MAP joint (lowest chain index on ties).
pub fn fit_ddm_chains(x: &BinaryMatrix, config: &DdmConfig, chains: usize) -> Result<DdmFit> {
    if chains == 0 {
        return Err(Error::InvalidConfig("at least one chain is required".into()));
    }
    let fits: Vec<DdmFit> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(c as u64);
            fit_ddm(x, &cfg)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (c, f) in fits.iter().enumerate() {
        if f.diagnostics.map_log_joint > fits[best].diagnostics.map_log_joint {
            best = c;
        }
    }
    Ok(fits.into_iter().nth(best).expect("nonempty"))
}

/// `Z ∘ V ∘ Y`.
pub fn ddm_reconstruct(config: &HierRbacConfig) -> Result<BinaryMatrix> {
    Ok(config.reconstruct())
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn crp_conditional() {
        let counts = [3usize, 4, 2];
        assert!((dp_prior(&counts, 10, 1.0, CrpTarget::Existing(0)).unwrap() - 0.3).abs() < 1e-15);
        assert!((dp_prior(&counts, 10, 1.0, CrpTarget::New).unwrap() - 0.1).abs() < 1e-15);
        let total: f64 = (0..3)
            .map(|k| dp_prior(&counts, 10, 1.0, CrpTarget::Existing(k)).unwrap())
            .sum::<f64>()
            + dp_prior(&counts, 10, 1.0, CrpTarget::New).unwrap();
        assert!((total - 1.0).abs() < 1e-15);
        assert!(dp_prior(&counts, 10, 0.0, CrpTarget::New).is_err());
    }

    #[test]
    fn evidence_values() {
        assert_eq!(log_evidence(&[vec![0, 0]], &[vec![0, 0]], 0.5).unwrap(), 0.0);
        let got = log_evidence(&[vec![2]], &[vec![1]], 1.0).unwrap();
        assert!((got - (1.0f64 / 12.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn crp_eppf_sums_to_one_over_partitions_of_three() {
        // partitions of 3 items by block sizes: {3}, {2,1} x3, {1,1,1}
        let a: f64 = 0.7;
        let total = log_crp(&[3], a).exp() + 3.0 * log_crp(&[2, 1], a).exp() + log_crp(&[1, 1, 1], a).exp();
        assert!((total - 1.0).abs() < 1e-12);
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize, d: usize, p: f64) -> BinaryMatrix {
        BinaryMatrix::from_fn(n, d, |_, _| rng.random_bool(p)).unwrap()
    }

    fn random_partition(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
        // assign, then relabel to contiguous ids in first-occurrence order
        let raw: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut map = std::collections::HashMap::new();
        raw.iter()
            .map(|r| {
                let next = map.len();
                *map.entry(*r).or_insert(next)
            })
            .collect()
    }

    #[test]
    fn incremental_counters_match_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_x(&mut rng, 9, 7, 0.4);
        let cfg = DdmConfig {
            alpha: 2.0,
            ..DdmConfig::default()
        };
        let mut state = DdmState::from_partitions(&x, random_partition(&mut rng, 9, 3), random_partition(&mut rng, 7, 3)).unwrap();
        for step in 0..300 {
            let side = if step % 2 == 0 { Side::Users } else { Side::Perms };
            let item = rng.random_range(0..if side == Side::Users { 9 } else { 7 });
            state.resample(&x, side, item, &cfg, &mut rng);
            let recount = DdmState::from_partitions(&x, state.user_assign.clone(), state.perm_assign.clone()).unwrap();
            assert_eq!(recount, state, "step {step}");
        }
    }

    #[test]
    fn conditionals_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_x(&mut rng, 6, 5, 0.5);
        let state = DdmState::from_partitions(&x, random_partition(&mut rng, 6, 3), random_partition(&mut rng, 5, 2)).unwrap();
        let cfg = DdmConfig::default();
        for i in 0..6 {
            let p = state.conditional(&x, Side::Users, i, &cfg);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for d in 0..5 {
            let p = state.conditional(&x, Side::Perms, d, &cfg);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_matches_joint_ratio() {
        // The Gibbs conditional must be proportional to the full log joint.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_x(&mut rng, 5, 4, 0.5);
        let cfg = DdmConfig {
            alpha: 1.3,
            beta_prior_strength: 0.8,
            ..DdmConfig::default()
        };
        let users = vec![0, 0, 1, 1, 2];
        let state = DdmState::from_partitions(&x, users.clone(), vec![0, 1, 0, 1]).unwrap();
        let probs = state.conditional(&x, Side::Users, 1, &cfg);
        let joints: Vec<f64> = [0usize, 1, 2, 3]
            .iter()
            .map(|&r| {
                let mut u = users.clone();
                u[1] = r;
                DdmState::from_partitions(&x, u, vec![0, 1, 0, 1]).unwrap().log_joint(&cfg)
            })
            .collect();
        let expect = normalize(&joints);
        for (a, b) in probs.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adding_empty_block_leaves_evidence_unchanged() {
        let n1 = vec![vec![3, 1]];
        let n0 = vec![vec![2, 5]];
        let base = log_evidence(&n1, &n0, 0.5).unwrap();
        let grown = log_evidence(&[vec![3, 1, 0], vec![0, 0, 0]], &[vec![2, 5, 0], vec![0, 0, 0]], 0.5).unwrap();
        assert_eq!(base, grown);
    }

    #[test]
    fn small_alpha_rejoins_existing_role() {
        let x = BinaryMatrix::from_rows(&[[1u8, 0, 1], [0, 1, 1]]).unwrap();
        let state = DdmState::single_block(&x);
        let cfg = DdmConfig {
            alpha: 1e-12,
            ..DdmConfig::default()
        };
        let p = state.conditional(&x, Side::Users, 0, &cfg);
        assert!(p[0] > 1.0 - 1e-9);
    }

    #[test]
    fn single_item_goes_to_new_role() {
        let x = BinaryMatrix::from_rows(&[[1u8, 0, 1]]).unwrap();
        let state = DdmState::single_block(&x);
        let cfg = DdmConfig::default();
        assert_eq!(state.conditional(&x, Side::Users, 0, &cfg), vec![1.0]);
        let col = x.transpose();
        let state = DdmState::single_block(&col);
        assert_eq!(state.conditional(&col, Side::Perms, 0, &cfg), vec![1.0]);
    }

    #[test]
    fn identical_rows_share_a_role() {
        let x = BinaryMatrix::from_rows(&[[1u8, 1, 1, 1, 0, 0, 0, 0], [1, 1, 1, 1, 0, 0, 0, 0]]).unwrap();
        let cfg = DdmConfig {
            alpha: 0.1,
            ..DdmConfig::default()
        };
        let mut state = DdmState::from_partitions(&x, vec![0, 1], vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut together = 0;
        for _ in 0..1000 {
            for i in 0..2 {
                state.resample(&x, Side::Users, i, &cfg, &mut rng);
            }
            together += (state.user_assign[0] == state.user_assign[1]) as usize;
        }
        assert!(together > 900, "{together}");
    }

    #[test]
    fn permission_step_mirrors_user_step_on_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = DdmConfig::default();
        for trial in 0..30 {
            let x = random_x(&mut rng, 6, 5, 0.5);
            let xt = x.transpose();
            let users = random_partition(&mut rng, 6, 3);
            let perms = random_partition(&mut rng, 5, 3);
            let mut a = DdmState::from_partitions(&x, users.clone(), perms.clone()).unwrap();
            let mut b = DdmState::from_partitions(&xt, perms, users).unwrap();
            let d = trial % 5;
            let mut r1 = ChaCha8Rng::seed_from_u64(trial as u64);
            let mut r2 = ChaCha8Rng::seed_from_u64(trial as u64);
            gibbs_resample_permission(&mut a, &x, d, &cfg, &mut r1).unwrap();
            gibbs_resample_user(&mut b, &xt, d, &cfg, &mut r2).unwrap();
            assert_eq!(a.perm_assign, b.user_assign);
            assert_eq!(a.user_assign, b.perm_assign);
        }
    }

    fn block_diagonal() -> BinaryMatrix {
        BinaryMatrix::from_fn(12, 10, |i, d| (i < 6) == (d < 5)).unwrap()
    }

    #[test]
    fn recovers_two_by_two_blocks() {
        let x = block_diagonal();
        let mut hits = 0;
        for seed in 0..10 {
            let fit = fit_ddm(&x, &DdmConfig { seed, ..DdmConfig::default() }).unwrap();
            let s = &fit.state;
            let good = s.num_business_roles() == 2
                && s.num_technical_roles() == 2
                && (0..12).all(|i| (s.user_assign[i] == s.user_assign[0]) == (i < 6))
                && (0..10).all(|d| (s.perm_assign[d] == s.perm_assign[0]) == (d < 5));
            hits += good as usize;
            assert_eq!(ddm_reconstruct(&fit.config).unwrap(), x);
        }
        assert!(hits >= 9, "{hits}/10");
    }

    #[test]
    fn map_dominates_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_x(&mut rng, 10, 8, 0.3);
        let fit = fit_ddm(&x, &DdmConfig { seed: 3, ..DdmConfig::default() }).unwrap();
        assert!(fit.diagnostics.trace.iter().all(|&j| j <= fit.diagnostics.map_log_joint));
        assert_eq!(fit.state.log_joint(&DdmConfig::default()), fit.diagnostics.map_log_joint);
    }

    fn set_partitions(n: usize) -> Vec<Vec<usize>> {
        // restricted growth strings
        let mut out = Vec::new();
        let mut cur = vec![0usize; n];
        fn rec(pos: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if pos == cur.len() {
                out.push(cur.clone());
                return;
            }
            for v in 0..=max + 1 {
                cur[pos] = v;
                rec(pos + 1, max.max(v), cur, out);
            }
        }
        if n > 0 {
            rec(1, 0, &mut cur, &mut out);
        }
        out
    }

    #[test]
    fn all_zero_matrix_prefers_one_block() {
        let x = BinaryMatrix::zeros(4, 5).unwrap();
        let cfg = DdmConfig {
            alpha: 0.5,
            ..DdmConfig::default()
        };
        let fit = fit_ddm(&x, &cfg).unwrap();
        for users in set_partitions(4) {
            for perms in set_partitions(5) {
                let j = DdmState::from_partitions(&x, users.clone(), perms).unwrap().log_joint(&cfg);
                assert!(fit.diagnostics.map_log_joint >= j - 1e-12);
            }
        }
        assert_eq!(fit.state.num_business_roles(), 1);
    }

    #[test]
    fn exchangeable_under_user_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_x(&mut rng, 8, 6, 0.4);
        let perm: Vec<usize> = vec![5, 2, 7, 0, 3, 1, 6, 4];
        let xp = x.select_rows(&perm).unwrap();
        let cfg = DdmConfig::default();
        let hist = |x: &BinaryMatrix, base: u64| {
            let mut h = [0usize; 9];
            for c in 0..400u64 {
                let mut r = ChaCha8Rng::seed_from_u64(base + c);
                let mut s = DdmState::single_block(x);
                for _ in 0..15 {
                    for i in 0..8 {
                        s.resample(x, Side::Users, i, &cfg, &mut r);
                    }
                    for d in 0..6 {
                        s.resample(x, Side::Perms, d, &cfg, &mut r);
                    }
                }
                h[s.num_business_roles()] += 1;
            }
            h
        };
        let a = hist(&x, 0);
        let b = hist(&xp, 100_000);
        // chi-square test of homogeneity over occupied categories
        let mut stat = 0.0;
        let mut cats = 0;
        for k in 0..9 {
            let tot = (a[k] + b[k]) as f64;
            if tot == 0.0 {
                continue;
            }
            cats += 1;
            for obs in [a[k], b[k]] {
                let e = tot / 2.0;
                stat += (obs as f64 - e).powi(2) / e;
            }
        }
        let p = 1.0 - ChiSquared::new((cats - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "p = {p}, {a:?} vs {b:?}");
    }

    #[test]
    fn rejects_bad_config() {
        let x = block_diagonal();
        assert!(fit_ddm(&x, &DdmConfig { alpha: 0.0, ..DdmConfig::default() }).is_err());
        assert!(fit_ddm(&x, &DdmConfig { beta_prior_strength: -1.0, ..DdmConfig::default() }).is_err());
    }
}
