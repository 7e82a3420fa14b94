//! Hybrid role mining: MAC plus a cost that rewards users with the same
//! business attribute for sharing roles, attribute relevance scores, and the
//! conditional role entropy used to judge how well roles follow attributes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{generalization_error, split_users, transfer_roles, SplitSpec};
use crate::mac::{anneal, MacFit, MacFitConfig, Responsibilities, RoleSet, RoleSetCatalog};
use crate::matrix::BinaryMatrix;
use crate::scalar::Real;

/// One business attribute kind (e.g. organizational unit): a value id per user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeTable {
    kind: String,
    labels: Vec<String>,
    values: Vec<usize>,
}

impl AttributeTable {
    pub fn new(kind: impl Into<String>, labels: Vec<String>, values: Vec<usize>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("attribute table has no users".into()));
        }
        if let Some(i) = values.iter().position(|&v| v >= labels.len()) {
            return Err(Error::InvalidConfig(format!("user {i} has an unknown attribute value id {}", values[i])));
        }
        Ok(Self {
            kind: kind.into(),
            labels,
            values,
        })
    }

    /// Vocabulary in first-occurrence order.
    pub fn from_labels<S: AsRef<str>>(kind: impl Into<String>, per_user: &[S]) -> Result<Self> {
        let mut ids: HashMap<&str, usize> = HashMap::new();
        let mut labels = Vec::new();
        let values = per_user
            .iter()
            .map(|s| {
                let s = s.as_ref();
                *ids.entry(s).or_insert_with(|| {
                    labels.push(s.to_string());
                    labels.len() - 1
                })
            })
            .collect();
        Self::new(kind, labels, values)
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn num_users(&self) -> usize {
        self.values.len()
    }

    pub fn num_values(&self) -> usize {
        self.labels.len()
    }

    pub fn value(&self, i: usize) -> usize {
        self.values[i]
    }

    /// One-hot indicator `w_is`.
    pub fn w(&self, i: usize, s: usize) -> bool {
        self.values[i] == s
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.labels.len()];
        for &v in &self.values {
            sizes[v] += 1;
        }
        sizes
    }

    /// Per value, whether it has at least `min_count` users.
    pub fn kept_values(&self, min_count: usize) -> Vec<bool> {
        self.group_sizes().into_iter().map(|c| c >= min_count).collect()
    }

    fn check_users(&self, n: usize, op: &'static str) -> Result<()> {
        if self.num_users() != n {
            return Err(Error::ShapeMismatch {
                op,
                left: (n, 0),
                right: (self.num_users(), 0),
            });
        }
        Ok(())
    }
}

/// Business cost of a binary assignment, summed over all ordered user pairs
/// (self-pairs included) that share an attribute value:
/// `(1/N) sum_s sum_{i,j} w_is w_js sum_k z_jk (1 - 2 z_jk z_ik)`.
pub fn business_cost(z: &BinaryMatrix, attrs: &AttributeTable) -> Result<f64> {
    attrs.check_users(z.rows(), "business_cost")?;
    let n = z.rows();
    let mut total = 0i64;
    for i in 0..n {
        for j in 0..n {
            if attrs.value(i) != attrs.value(j) {
                continue;
            }
            for k in 0..z.cols() {
                if z.get(j, k) {
                    total += if z.get(i, k) { -1 } else { 1 };
                }
            }
        }
    }
    Ok(total as f64 / n as f64)
}

/// `N_sk`: number of users with value `s` holding role `k`.
pub fn attribute_role_counts(z: &BinaryMatrix, attrs: &AttributeTable) -> Result<Vec<Vec<f64>>> {
    attrs.check_users(z.rows(), "attribute_role_counts")?;
    let mut counts = vec![vec![0.0; z.cols()]; attrs.num_values()];
    for i in 0..z.rows() {
        for k in z.row_ones(i) {
            counts[attrs.value(i)][k] += 1.0;
        }
    }
    Ok(counts)
}

/// The same cost through role counts: `(1/N) sum_i sum_k (N_{s_i k} - 2 z_ik N_{s_i k})`.
pub fn business_cost_from_counts(z: &BinaryMatrix, attrs: &AttributeTable) -> Result<f64> {
    let counts = attribute_role_counts(z, attrs)?;
    let n = z.rows() as f64;
    let mut total = 0.0;
    for i in 0..z.rows() {
        let row = &counts[attrs.value(i)];
        for (k, &c) in row.iter().enumerate() {
            total += c - if z.get(i, k) { 2.0 * c } else { 0.0 };
        }
    }
    Ok(total / n)
}

/// Cost of giving user `i` role set `set`:
/// `sum_{k not in set} N_{s_i k}/N - sum_{k in set} N_{s_i k}/N`.
pub fn per_item_business_cost(set: RoleSet, i: usize, counts: &[Vec<f64>], attrs: &AttributeTable) -> Result<f64> {
    if i >= attrs.num_users() {
        return Err(Error::InvalidConfig(format!("user {i} out of range")));
    }
    let s = attrs.value(i);
    let row = counts
        .get(s)
        .ok_or_else(|| Error::InvalidConfig(format!("attribute value {s} has no counts row")))?;
    let n = attrs.num_users() as f64;
    Ok(row
        .iter()
        .enumerate()
        .map(|(k, &c)| if set.contains(k) { -c / n } else { c / n })
        .sum())
}

/// Expected `N_sk` under responsibilities `gamma`.
pub fn expected_counts<F: Real>(
    gamma: &Responsibilities<F>,
    catalog: &RoleSetCatalog,
    attrs: &AttributeTable,
) -> Result<Vec<Vec<f64>>> {
    attrs.check_users(gamma.users(), "expected_counts")?;
    let mut counts = vec![vec![0.0; catalog.num_roles()]; attrs.num_values()];
    for i in 0..gamma.users() {
        let row = &mut counts[attrs.value(i)];
        for (l, &g) in gamma.row(i).iter().enumerate() {
            let g = g.to_f64_lossy();
            if g == 0.0 {
                continue;
            }
            for k in catalog.get(l).roles() {
                row[k] += g;
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridConfig<F> {
    pub lambda: F,
    pub mac: MacFitConfig<F>,
    /// Attribute values with fewer users contribute no business cost.
    pub min_count: usize,
}

impl<F: Real> HybridConfig<F> {
    pub fn new(lambda: F, mac: MacFitConfig<F>) -> Self {
        Self {
            lambda,
            mac,
            min_count: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HybridFit<F> {
    pub mac: MacFit<F>,
    pub lambda: F,
    /// Business cost of the returned hard assignment.
    pub business_cost: f64,
}

/// MAC with the business cost added to every E-step.
///
/// Internally the per-user cost is `R_ll + lambda * D * R_s`, which is the
/// objective `R_ll / D + lambda * R_s` multiplied by the permission count. The
/// temperature schedule is expressed in the same scaled units, so the
/// responsibilities are those of the unscaled objective and `lambda = 0`
/// reproduces [`crate::mac::fit_mac`] bit for bit. Counts for the business
/// cost come from the previous iteration's responsibilities (uniform before
/// the first E-step).
pub fn fit_hybrid<F: Real>(x: &BinaryMatrix, attrs: &AttributeTable, config: &HybridConfig<F>) -> Result<HybridFit<F>> {
    if !(config.lambda >= F::zero()) || !config.lambda.is_finite() {
        return Err(Error::out_of_range("lambda", config.lambda.to_f64_lossy(), "[0, inf)"));
    }
    attrs.check_users(x.rows(), "fit_hybrid")?;
    let catalog = RoleSetCatalog::new(config.mac.num_roles, config.mac.max_set_size)?;
    let kept = attrs.kept_values(config.min_count);
    let scale = config.lambda * F::from_usize(x.cols()).expect("count");
    let n = x.rows();
    let mut extra = |gamma: &Responsibilities<F>| -> Result<Vec<F>> {
        let counts = expected_counts(gamma, &catalog, attrs)?;
        let mut out = Vec::with_capacity(n * catalog.len());
        for i in 0..n {
            let keep = kept[attrs.value(i)];
            for &set in catalog.sets() {
                let c = if keep { per_item_business_cost(set, i, &counts, attrs)? } else { 0.0 };
                out.push(scale * F::lit(c));
            }
        }
        Ok(out)
    };
    let mac = anneal(x, &config.mac, Some(&mut extra))?;
    let business_cost = business_cost(mac.config.z(), attrs)?;
    Ok(HybridFit {
        mac,
        lambda: config.lambda,
        business_cost,
    })
}

/// Average conditional entropy (bits) of a user's role set given the
/// attribute value, from empirical role-set frequencies per value.
pub fn conditional_role_entropy(z: &BinaryMatrix, attrs: &AttributeTable) -> Result<f64> {
    attrs.check_users(z.rows(), "conditional_role_entropy")?;
    let mut freq: Vec<HashMap<&[u64], usize>> = vec![HashMap::new(); attrs.num_values()];
    for i in 0..z.rows() {
        *freq[attrs.value(i)].entry(z.row_words(i)).or_insert(0) += 1;
    }
    let n = z.rows() as f64;
    let mut h = 0.0;
    for table in &freq {
        let size: usize = table.values().sum();
        for &c in table.values() {
            let p = c as f64 / size as f64;
            // each of the c users contributes -p log2 p summed over sets, i.e. the group entropy
            h -= size as f64 * p * p.log2();
        }
    }
    Ok(h / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceStats {
    /// `h(X_d)` in bits.
    pub entropy: f64,
    /// `h(X_d | S)` in bits.
    pub conditional_entropy: f64,
    pub mutual_information: f64,
    /// `1 - h(X_d|S) / h(X_d)`, with `0/0 := 1`.
    pub rho: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PermissionRelevance {
    Measured(RelevanceStats),
    /// No attribute value reached the minimum user count.
    InsufficientData,
}

impl PermissionRelevance {
    pub fn rho(&self) -> Option<f64> {
        match self {
            PermissionRelevance::Measured(s) => Some(s.rho),
            PermissionRelevance::InsufficientData => None,
        }
    }
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
    }
}

/// Relative mutual information between each permission and the attribute,
/// computed only over users whose attribute value has at least `min_count`
/// users. `p(x_d | s)` is the within-group frequency.
pub fn attribute_relevance(x: &BinaryMatrix, attrs: &AttributeTable, min_count: usize) -> Result<Vec<PermissionRelevance>> {
    attrs.check_users(x.rows(), "attribute_relevance")?;
    if min_count == 0 {
        return Err(Error::InvalidConfig("min_count must be at least 1".into()));
    }
    let sizes = attrs.group_sizes();
    let kept: Vec<usize> = (0..sizes.len()).filter(|&s| sizes[s] >= min_count).collect();
    let total: usize = kept.iter().map(|&s| sizes[s]).sum();
    if kept.is_empty() {
        return Ok(vec![PermissionRelevance::InsufficientData; x.cols()]);
    }
    let mut ones = vec![vec![0usize; x.cols()]; sizes.len()];
    for i in 0..x.rows() {
        let row = &mut ones[attrs.value(i)];
        for d in x.row_ones(i) {
            row[d] += 1;
        }
    }
    Ok((0..x.cols())
        .map(|d| {
            let all: usize = kept.iter().map(|&s| ones[s][d]).sum();
            let entropy = binary_entropy(all as f64 / total as f64);
            let conditional_entropy: f64 = kept
                .iter()
                .map(|&s| sizes[s] as f64 / total as f64 * binary_entropy(ones[s][d] as f64 / sizes[s] as f64))
                .sum();
            let mutual_information = (entropy - conditional_entropy).max(0.0);
            let rho = if entropy == 0.0 {
                1.0
            } else {
                (1.0 - conditional_entropy / entropy).clamp(0.0, 1.0)
            };
            PermissionRelevance::Measured(RelevanceStats {
                entropy,
                conditional_entropy,
                mutual_information,
                rho,
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub gen_error: f64,
    pub role_entropy: f64,
}

/// Index of the point closest to the ideal corner after min-max scaling both
/// coordinates to `[0, 1]`; first index on ties.
pub fn pareto_knee(points: &[(f64, f64)]) -> Option<usize> {
    if points.is_empty() {
        return None;
    }
    let scale = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        vals.into_iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect::<Vec<_>>()
    };
    let a = scale(points.iter().map(|p| p.0).collect());
    let b = scale(points.iter().map(|p| p.1).collect());
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..points.len() {
        let d = a[i].hypot(b[i]);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Some(best)
}

/// Fit on a training split for every `lambda`, scoring hold-out error after
/// role transfer and the training users' conditional role entropy.
pub fn lambda_sweep(
    x: &BinaryMatrix,
    attrs: &AttributeTable,
    lambdas: &[f64],
    base: &HybridConfig<f64>,
    spec: &SplitSpec,
) -> Result<(Vec<LambdaPoint>, Option<usize>)> {
    attrs.check_users(x.rows(), "lambda_sweep")?;
    let split = split_users(x, spec, 0)?;
    let train_values: Vec<usize> = split.train_users.iter().map(|&i| attrs.value(i)).collect();
    let train_attrs = AttributeTable::new(attrs.kind(), attrs.labels().to_vec(), train_values)?;
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = HybridConfig {
            lambda,
            ..base.clone()
        };
        let fit = fit_hybrid(&split.train, &train_attrs, &cfg)?;
        let z_prime = transfer_roles(&split.train, fit.mac.config.z(), &split.test)?;
        points.push(LambdaPoint {
            lambda,
            gen_error: generalization_error(&z_prime, fit.mac.config.u(), &split.test)?,
            role_entropy: conditional_role_entropy(fit.mac.config.z(), &train_attrs)?,
        });
    }
    let knee = pareto_knee(&points.iter().map(|p| (p.gen_error, p.role_entropy)).collect::<Vec<_>>());
    Ok((points, knee))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mac::fit_mac;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn attrs(v: &[&str]) -> AttributeTable {
        AttributeTable::from_labels("ou", v).unwrap()
    }

    #[test]
    fn cost_of_two_identical_users() {
        let z = BinaryMatrix::from_rows(&[[1u8, 0], [1, 0]]).unwrap();
        assert_eq!(business_cost(&z, &attrs(&["a", "a"])).unwrap(), -2.0);
    }

    #[test]
    fn cost_with_distinct_attributes_counts_self_pairs() {
        let z = BinaryMatrix::from_rows(&[[1u8, 1, 0], [0, 1, 0], [1, 1, 1]]).unwrap();
        let got = business_cost(&z, &attrs(&["a", "b", "c"])).unwrap();
        assert_eq!(got, -(2.0 + 1.0 + 3.0) / 3.0);
        let empty = BinaryMatrix::zeros(3, 3).unwrap();
        assert_eq!(business_cost(&empty, &attrs(&["a", "b", "a"])).unwrap(), 0.0);
    }

    #[test]
    fn pairwise_and_count_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let k = rng.random_range(1..5);
            let z = BinaryMatrix::from_fn(n, k, |_, _| rng.random_bool(0.4)).unwrap();
            let labels: Vec<String> = (0..n).map(|_| format!("v{}", rng.random_range(0..3))).collect();
            let a = AttributeTable::from_labels("ou", &labels).unwrap();
            assert_eq!(business_cost(&z, &a).unwrap(), business_cost_from_counts(&z, &a).unwrap());
        }
    }

    #[test]
    fn per_item_costs() {
        let a = attrs(&["a"; 10]);
        let counts = vec![vec![4.0, 1.0, 0.0]];
        let one = per_item_business_cost(RoleSet::from_roles(&[0]), 0, &counts, &a).unwrap();
        assert!((one - -0.3).abs() < 1e-15);
        let all = per_item_business_cost(RoleSet::from_roles(&[0, 1, 2]), 0, &counts, &a).unwrap();
        assert!((all - -0.5).abs() < 1e-15);
        let none = per_item_business_cost(RoleSet::EMPTY, 0, &counts, &a).unwrap();
        assert!((none - 0.5).abs() < 1e-15);
        assert!(per_item_business_cost(RoleSet::EMPTY, 0, &[], &a).is_err());
    }

    #[test]
    fn decomposition_identity_with_exact_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let n = rng.random_range(2..7);
            let cat = RoleSetCatalog::new(3, 3).unwrap();
            let choice: Vec<usize> = (0..n).map(|_| rng.random_range(0..cat.len())).collect();
            let mut g = vec![0.0; n * cat.len()];
            for (i, &l) in choice.iter().enumerate() {
                g[i * cat.len() + l] = 1.0;
            }
            let gamma = Responsibilities::from_rows(n, cat.len(), g, 1.0).unwrap();
            let z = gamma.hard_assignment(&cat);
            let labels: Vec<String> = (0..n).map(|_| format!("{}", rng.random_range(0..2))).collect();
            let a = AttributeTable::from_labels("ou", &labels).unwrap();
            let counts = expected_counts(&gamma, &cat, &a).unwrap();
            assert_eq!(counts, attribute_role_counts(&z, &a).unwrap());
            let summed: f64 = (0..n).map(|i| per_item_business_cost(cat.get(choice[i]), i, &counts, &a).unwrap()).sum();
            assert!((summed - business_cost(&z, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_singletons_spread_counts() {
        let cat = RoleSetCatalog::new(4, 1).unwrap();
        let n = 6;
        let mut g = vec![0.0; n * cat.len()];
        for i in 0..n {
            for l in 1..cat.len() {
                g[i * cat.len() + l] = 0.25;
            }
        }
        let gamma = Responsibilities::from_rows(n, cat.len(), g, 1.0).unwrap();
        let a = attrs(&["x", "x", "y", "x", "y", "x"]);
        let counts = expected_counts(&gamma, &cat, &a).unwrap();
        assert!(counts[0].iter().all(|&c| (c - 1.0).abs() < 1e-15));
        assert!(counts[1].iter().all(|&c| (c - 0.5).abs() < 1e-15));
    }

    #[test]
    fn entropy_cases() {
        let z = BinaryMatrix::from_rows(&[[1u8, 0], [1, 0], [0, 1], [0, 1]]).unwrap();
        assert_eq!(conditional_role_entropy(&z, &attrs(&["a", "a", "b", "b"])).unwrap(), 0.0);
        assert_eq!(conditional_role_entropy(&z, &attrs(&["a"; 4])).unwrap(), 1.0);
        // group a: sets {0},{0},{1} ; group b: {0,1},{0,1},{0,1}
        let z = BinaryMatrix::from_rows(&[[1u8, 0], [1, 0], [0, 1], [1, 1], [1, 1], [1, 1]]).unwrap();
        let h_a = -(2.0 / 3.0 * (2.0f64 / 3.0).log2() + 1.0 / 3.0 * (1.0f64 / 3.0).log2());
        let got = conditional_role_entropy(&z, &attrs(&["a", "a", "a", "b", "b", "b"])).unwrap();
        assert!((got - h_a / 2.0).abs() < 1e-12);
    }

    #[test]
    fn relevance_cases() {
        // column 0 follows the attribute, column 1 is constant, column 2 mixed
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let g = i % 2;
            rows.push(vec![g as u8, 1, (i % 4 < 2) as u8]);
            labels.push(if g == 0 { "a" } else { "b" });
        }
        let x = BinaryMatrix::from_rows(&rows).unwrap();
        let a = attrs(&labels);
        let rel = attribute_relevance(&x, &a, 10).unwrap();
        assert_eq!(rel[0].rho(), Some(1.0));
        assert_eq!(rel[1].rho(), Some(1.0));
        let r2 = rel[2].rho().unwrap();
        assert!((0.0..=1.0).contains(&r2));
        // singleton groups are filtered away
        let unique: Vec<String> = (0..40).map(|i| i.to_string()).collect();
        let rel = attribute_relevance(&x, &AttributeTable::from_labels("id", &unique).unwrap(), 10).unwrap();
        assert!(rel.iter().all(|r| *r == PermissionRelevance::InsufficientData));
        let raw = attribute_relevance(&x, &AttributeTable::from_labels("id", &unique).unwrap(), 1).unwrap();
        assert_eq!(raw[2].rho(), Some(1.0));
    }

    #[test]
    fn relevance_ignores_value_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = BinaryMatrix::from_fn(60, 5, |_, _| rng.random_bool(0.4)).unwrap();
        let labels: Vec<&str> = (0..60).map(|i| ["p", "q", "r"][i % 3]).collect();
        let renamed: Vec<&str> = labels.iter().map(|l| match *l { "p" => "r", "q" => "p", _ => "q" }).collect();
        let a = attribute_relevance(&x, &attrs(&labels), 10).unwrap();
        let b = attribute_relevance(&x, &attrs(&renamed), 10).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u.rho().unwrap() - v.rho().unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_matches_plain_mac() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = BinaryMatrix::from_fn(20, 8, |_, _| rng.random_bool(0.4)).unwrap();
        let labels: Vec<&str> = (0..20).map(|i| if i < 10 { "a" } else { "b" }).collect();
        let mac = MacFitConfig::<f64>::new(3).with_seed(9);
        let plain = fit_mac(&x, &mac).unwrap();
        let hyb = fit_hybrid(&x, &attrs(&labels), &HybridConfig::new(0.0, mac)).unwrap();
        assert_eq!(plain.params, hyb.mac.params);
        assert_eq!(plain.responsibilities, hyb.mac.responsibilities);
        assert_eq!(plain.config, hyb.mac.config);
        assert_eq!(plain.diagnostics, hyb.mac.diagnostics);
    }

    #[test]
    fn knee_selection() {
        assert_eq!(pareto_knee(&[(0.0, 1.0), (0.1, 0.1), (1.0, 0.0)]), Some(1));
        assert_eq!(pareto_knee(&[]), None);
    }
}
