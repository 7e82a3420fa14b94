//! Synthetic data with known ground truth.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mac::RoleSetCatalog;
use crate::matrix::{BinaryMatrix, BinaryMatrixBuilder};
use crate::rbac::{FlatRbacConfig, HierRbacConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Mac,
    Ddm,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrueConfig {
    Flat(FlatRbacConfig),
    Hier(HierRbacConfig),
}

impl TrueConfig {
    pub fn reconstruct(&self) -> BinaryMatrix {
        match self {
            TrueConfig::Flat(c) => c.reconstruct(),
            TrueConfig::Hier(c) => c.reconstruct(),
        }
    }

    pub fn num_roles(&self) -> usize {
        match self {
            TrueConfig::Flat(c) => c.num_roles(),
            TrueConfig::Hier(c) => c.num_business_roles(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub x_observed: BinaryMatrix,
    pub x_clean: BinaryMatrix,
    pub truth: TrueConfig,
    pub noise: f64,
    /// Cells that were replaced by a coin flip, row-major order.
    pub noise_cells: Vec<(usize, usize)>,
    pub kind: GeneratorKind,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacDataSpec {
    pub users: usize,
    pub perms: usize,
    pub roles: usize,
    pub max_roles_per_user: usize,
    /// Probability that a role grants a given permission.
    pub density: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for MacDataSpec {
    fn default() -> Self {
        Self {
            users: 400,
            perms: 50,
            roles: 10,
            max_roles_per_user: 2,
            density: 0.3,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdmDataSpec {
    pub users: usize,
    pub perms: usize,
    pub alpha: f64,
    pub beta_prior_strength: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DdmDataSpec {
    fn default() -> Self {
        Self {
            users: 400,
            perms: 50,
            alpha: 1.0,
            beta_prior_strength: 0.5,
            noise: 0.0,
            seed: 0,
        }
    }
}

fn check_noise(noise: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::out_of_range("noise", noise, "[0, 1]"));
    }
    Ok(())
}

/// Replace `floor(noise * cells)` distinct cells by fair coin flips.
fn add_noise(clean: &BinaryMatrix, noise: f64, rng: &mut impl Rng) -> (BinaryMatrix, Vec<(usize, usize)>) {
    let (n, d) = clean.shape();
    let cells = n * d;
    // guard against 0.1 * 30 = 2.9999999999999996
    let count = ((noise * cells as f64) + 1e-9).floor().min(cells as f64) as usize;
    let mut idx = sample(rng, cells, count).into_vec();
    idx.sort_unstable();
    let mut b = clean.to_builder();
    let mut chosen = Vec::with_capacity(count);
    for c in idx {
        let (i, j) = (c / d, c % d);
        b.set(i, j, rng.random_bool(0.5));
        chosen.push((i, j));
    }
    (b.build(), chosen)
}

/// Flat RBAC data: `roles` distinct nonempty permission sets, each user gets a
/// uniformly drawn nonempty role subset of size at most `max_roles_per_user`.
pub fn gen_mac_data(spec: &MacDataSpec) -> Result<SyntheticDataset> {
    check_noise(spec.noise)?;
    if spec.users == 0 || spec.perms == 0 || spec.roles == 0 || spec.max_roles_per_user == 0 {
        return Err(Error::InvalidConfig("users, permissions, roles and roles per user must be positive".into()));
    }
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(Error::out_of_range("density", spec.density, "(0, 1]"));
    }
    if spec.perms < 64 && spec.roles as u64 > (1u64 << spec.perms) - 1 {
        return Err(Error::Infeasible(format!(
            "{} distinct nonempty roles do not fit in {} permissions",
            spec.roles, spec.perms
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut roles: Vec<Vec<bool>> = Vec::with_capacity(spec.roles);
    let mut attempts = 0usize;
    while roles.len() < spec.roles {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Infeasible("could not draw distinct roles at this density".into()));
        }
        let row: Vec<bool> = (0..spec.perms).map(|_| rng.random_bool(spec.density)).collect();
        if row.iter().any(|&b| b) && !roles.contains(&row) {
            roles.push(row);
        }
    }
    let u = BinaryMatrix::from_fn(spec.roles, spec.perms, |k, d| roles[k][d])?;
    let catalog = RoleSetCatalog::new(spec.roles, spec.max_roles_per_user.min(spec.roles))?;
    let mut z = BinaryMatrixBuilder::new(spec.users, spec.roles)?;
    for i in 0..spec.users {
        // index 0 is the empty set
        let set = catalog.get(rng.random_range(1..catalog.len()));
        for k in set.roles() {
            z.set(i, k, true);
        }
    }
    let truth = FlatRbacConfig::new(z.build(), u)?;
    let x_clean = truth.reconstruct();
    let (x_observed, noise_cells) = add_noise(&x_clean, spec.noise, &mut rng);
    Ok(SyntheticDataset {
        x_observed,
        x_clean,
        truth: TrueConfig::Flat(truth),
        noise: spec.noise,
        noise_cells,
        kind: GeneratorKind::Mac,
        seed: spec.seed,
    })
}

/// Sequential Chinese-restaurant draw of a partition of `n` items.
pub fn sample_crp(n: usize, alpha: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut sizes: Vec<usize> = Vec::new();
    let mut assign = Vec::with_capacity(n);
    for i in 0..n {
        let u = rng.random::<f64>() * (i as f64 + alpha);
        let mut acc = 0.0;
        let mut pick = sizes.len();
        for (k, &s) in sizes.iter().enumerate() {
            acc += s as f64;
            if u < acc {
                pick = k;
                break;
            }
        }
        if pick == sizes.len() {
            sizes.push(0);
        }
        sizes[pick] += 1;
        assign.push(pick);
    }
    assign
}

/// Two-level data from the DDM generative process, plus optional cell noise.
pub fn gen_ddm_data(spec: &DdmDataSpec) -> Result<SyntheticDataset> {
    check_noise(spec.noise)?;
    if spec.users == 0 || spec.perms == 0 {
        return Err(Error::InvalidConfig("users and permissions must be positive".into()));
    }
    if !(spec.alpha > 0.0) {
        return Err(Error::out_of_range("alpha", spec.alpha, "(0, inf)"));
    }
    let g = spec.beta_prior_strength;
    let beta = Beta::new(g, g).map_err(|_| Error::out_of_range("beta_prior_strength", g, "(0, inf)"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let users = sample_crp(spec.users, spec.alpha, &mut rng);
    let perms = sample_crp(spec.perms, spec.alpha, &mut rng);
    let k = users.iter().max().map_or(0, |m| m + 1);
    let l = perms.iter().max().map_or(0, |m| m + 1);
    let mut v = BinaryMatrixBuilder::new(k, l)?;
    for a in 0..k {
        for b in 0..l {
            let absent: f64 = beta.sample(&mut rng);
            v.set(a, b, rng.random_bool((1.0 - absent).clamp(0.0, 1.0)));
        }
    }
    let z = BinaryMatrix::from_fn(spec.users, k, |i, r| users[i] == r)?;
    let y = BinaryMatrix::from_fn(l, spec.perms, |t, d| perms[d] == t)?;
    let truth = HierRbacConfig::new(z, v.build(), y)?;
    let x_clean = truth.reconstruct();
    let (x_observed, noise_cells) = add_noise(&x_clean, spec.noise, &mut rng);
    Ok(SyntheticDataset {
        x_observed,
        x_clean,
        truth: TrueConfig::Hier(truth),
        noise: spec.noise,
        noise_cells,
        kind: GeneratorKind::Ddm,
        seed: spec.seed,
    })
}
