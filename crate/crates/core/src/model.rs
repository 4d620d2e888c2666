//! Spherical two-level Gaussian model of one domain and matched-condition
//! normalized-likelihood scoring.
//!
//! Speaker means are drawn from `N(0, εI)` and utterances of a speaker from
//! `N(μ, σI)`, after subtracting a global center. All densities are returned
//! as exact log densities, normalization constants included, so that scores
//! from different methods and from independent oracles are directly
//! comparable.

use std::f64::consts::PI;

use crate::data::{Embedding, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsOptions {
    /// Lower bound applied to both variance estimates.
    pub min_variance: f64,
    /// Scale every embedding to unit length before estimation.
    pub length_normalize: bool,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            min_variance: 1e-6,
            length_normalize: false,
        }
    }
}

/// Between-speaker variance `epsilon`, within-speaker variance `sigma` and
/// the global center of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStats {
    dim: usize,
    epsilon: f64,
    sigma: f64,
    center: Vec<f64>,
}

impl DomainStats {
    pub fn new(epsilon: f64, sigma: f64, center: Vec<f64>) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::Model("stats dimension must be positive".into()));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Model(format!(
                "epsilon must be finite and > 0, got {epsilon}"
            )));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Model(format!(
                "sigma must be finite and > 0, got {sigma}"
            )));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("stats center has non-finite entries".into()));
        }
        Ok(DomainStats {
            dim: center.len(),
            epsilon,
            sigma,
            center,
        })
    }

    /// Stats with a zero center.
    pub fn centered_at_origin(dim: usize, epsilon: f64, sigma: f64) -> Result<Self> {
        DomainStats::new(epsilon, sigma, vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Variance of the marginal `p(x)`, per dimension.
    pub fn total_variance(&self) -> f64 {
        self.epsilon + self.sigma
    }

    pub fn with_center(&self, center: Vec<f64>) -> Result<Self> {
        DomainStats::new(self.epsilon, self.sigma, center)
    }

    pub(crate) fn check_dim(&self, what: &str, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::dim_mismatch(what, self.dim, got));
        }
        Ok(())
    }

    pub(crate) fn centered(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).map(|(v, c)| v - c).collect()
    }
}

/// Posterior-predictive distribution of one enrolled speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentModel {
    model_id: String,
    n: usize,
    xbar: Vec<f64>,
    pred_mean: Vec<f64>,
    pred_var: f64,
}

impl EnrollmentModel {
    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Number of enrollment samples.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Mean of the centered enrollment samples.
    pub fn xbar(&self) -> &[f64] {
        &self.xbar
    }

    /// Predictive mean in centered coordinates.
    pub fn pred_mean(&self) -> &[f64] {
        &self.pred_mean
    }

    /// Predictive variance per dimension.
    pub fn pred_var(&self) -> f64 {
        self.pred_var
    }

    pub fn dim(&self) -> usize {
        self.xbar.len()
    }
}

/// Estimates the spherical model of one domain from labeled data.
///
/// `sigma` is the pooled within-speaker variance and `epsilon` the variance
/// of speaker means (population form) minus `sigma / n̄`, where `n̄` is the
/// harmonic mean of per-speaker counts. Both are floored at
/// `opts.min_variance`.
pub fn estimate_domain_stats(data: &LabeledDataset, opts: &StatsOptions) -> Result<DomainStats> {
    if data.is_empty() {
        return Err(Error::Estimation("dataset is empty".into()));
    }
    if !(opts.min_variance.is_finite() && opts.min_variance > 0.0) {
        return Err(Error::Estimation(format!(
            "min_variance must be finite and > 0, got {}",
            opts.min_variance
        )));
    }
    let normalized;
    let data = if opts.length_normalize {
        normalized = data.length_normalized();
        &normalized
    } else {
        data
    };

    let dim = data.dim();
    let groups = data.speaker_groups();
    if groups.len() < 2 {
        return Err(Error::Estimation(format!(
            "need at least 2 speakers, got {}",
            groups.len()
        )));
    }
    if groups.iter().all(|(_, idx)| idx.len() < 2) {
        return Err(Error::Estimation(
            "no speaker has 2 or more utterances; within-speaker variance is unidentifiable".into(),
        ));
    }

    let records = data.records();
    let mut center = vec![0.0; dim];
    for r in records {
        for (c, v) in center.iter_mut().zip(r.embedding.as_slice()) {
            *c += v;
        }
    }
    let total = records.len() as f64;
    center.iter_mut().for_each(|c| *c /= total);

    let mut within_scatter = 0.0;
    let mut means = Vec::with_capacity(groups.len());
    let mut inv_count_sum = 0.0;
    for (_, idx) in &groups {
        let n = idx.len() as f64;
        let mut mean = vec![0.0; dim];
        for &i in idx {
            for ((m, v), c) in mean
                .iter_mut()
                .zip(records[i].embedding.as_slice())
                .zip(&center)
            {
                *m += v - c;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for &i in idx {
            for ((v, c), m) in records[i]
                .embedding
                .as_slice()
                .iter()
                .zip(&center)
                .zip(&mean)
            {
                let d = v - c - m;
                within_scatter += d * d;
            }
        }
        inv_count_sum += 1.0 / n;
        means.push(mean);
    }

    let n_speakers = groups.len() as f64;
    let dof = (records.len() - groups.len()) as f64;
    let sigma_raw = within_scatter / (dof * dim as f64);

    let mut grand = vec![0.0; dim];
    for mean in &means {
        for (g, m) in grand.iter_mut().zip(mean) {
            *g += m;
        }
    }
    grand.iter_mut().for_each(|g| *g /= n_speakers);
    let between: f64 = means
        .iter()
        .flat_map(|mean| mean.iter().zip(&grand).map(|(m, g)| (m - g) * (m - g)))
        .sum();
    let eps_raw = between / (n_speakers * dim as f64);
    let harmonic_count = n_speakers / inv_count_sum;

    let epsilon = (eps_raw - sigma_raw / harmonic_count).max(opts.min_variance);
    let sigma = sigma_raw.max(opts.min_variance);
    if !(epsilon.is_finite() && sigma.is_finite()) {
        return Err(Error::Estimation(format!(
            "degenerate variance estimate (epsilon {epsilon}, sigma {sigma})"
        )));
    }
    DomainStats::new(epsilon, sigma, center).map_err(|e| Error::Estimation(e.to_string()))
}

/// Builds the posterior-predictive model of a speaker from enrollment samples.
pub fn build_enrollment_model(
    stats: &DomainStats,
    model_id: &str,
    samples: &[&Embedding],
) -> Result<EnrollmentModel> {
    if samples.is_empty() {
        return Err(Error::Model(format!(
            "model {model_id}: no enrollment samples"
        )));
    }
    let dim = stats.dim();
    let mut xbar = vec![0.0; dim];
    for s in samples {
        stats.check_dim(&format!("enrollment sample of {model_id}"), s.dim())?;
        for ((m, v), c) in xbar.iter_mut().zip(s.as_slice()).zip(stats.center()) {
            *m += v - c;
        }
    }
    let n = samples.len();
    xbar.iter_mut().for_each(|m| *m /= n as f64);
    Ok(enrollment_from_mean(stats, model_id, n, xbar))
}

pub(crate) fn enrollment_from_mean(
    stats: &DomainStats,
    model_id: &str,
    n: usize,
    xbar: Vec<f64>,
) -> EnrollmentModel {
    let (eps, sig) = (stats.epsilon(), stats.sigma());
    let precision_sum = n as f64 * eps + sig;
    let shrink = n as f64 * eps / precision_sum;
    let pred_var = sig + eps * sig / precision_sum;
    let pred_mean = xbar.iter().map(|m| shrink * m).collect();
    EnrollmentModel {
        model_id: model_id.to_string(),
        n,
        xbar,
        pred_mean,
        pred_var,
    }
}

/// `log N(x - c; 0, (ε+σ)I)`.
pub fn marginal_log_density(stats: &DomainStats, x: &Embedding) -> Result<f64> {
    stats.check_dim("marginal density input", x.dim())?;
    Ok(marginal_log_density_raw(stats, x.as_slice()))
}

pub(crate) fn marginal_log_density_raw(stats: &DomainStats, x: &[f64]) -> f64 {
    let var = stats.total_variance();
    let sq: f64 = x
        .iter()
        .zip(stats.center())
        .map(|(v, c)| (v - c) * (v - c))
        .sum();
    isotropic_log_density(sq, var, x.len())
}

/// `log N(x - c; μ̃, vI)` for the speaker model built under `stats`.
pub fn predictive_log_density(
    model: &EnrollmentModel,
    x: &Embedding,
    stats: &DomainStats,
) -> Result<f64> {
    check_model(model, stats)?;
    stats.check_dim("predictive density input", x.dim())?;
    Ok(predictive_log_density_raw(model, x.as_slice(), stats))
}

pub(crate) fn predictive_log_density_raw(
    model: &EnrollmentModel,
    x: &[f64],
    stats: &DomainStats,
) -> f64 {
    let sq: f64 = x
        .iter()
        .zip(stats.center())
        .zip(model.pred_mean())
        .map(|((v, c), m)| {
            let d = v - c - m;
            d * d
        })
        .sum();
    isotropic_log_density(sq, model.pred_var(), x.len())
}

/// Log normalized likelihood `log p_k(x) - log p(x)` under one domain model.
pub fn nl_log_score(model: &EnrollmentModel, x: &Embedding, stats: &DomainStats) -> Result<f64> {
    Ok(predictive_log_density(model, x, stats)? - marginal_log_density(stats, x)?)
}

pub(crate) fn check_model(model: &EnrollmentModel, stats: &DomainStats) -> Result<()> {
    stats.check_dim(&format!("model {}", model.model_id()), model.dim())
}

/// Log density of an isotropic Gaussian given the squared distance to its mean.
pub(crate) fn isotropic_log_density(sq_dist: f64, var: f64, dim: usize) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI * var).ln() - sq_dist / (2.0 * var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn dataset(rows: &[(&str, &[f64])]) -> LabeledDataset {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, (spk, v))| Record {
                utt_id: format!("u{i}"),
                spk_id: spk.to_string(),
                domain_id: "A".into(),
                embedding: emb(v),
            })
            .collect();
        LabeledDataset::new(rows[0].1.len(), records).unwrap()
    }

    #[test]
    fn zero_within_scatter_floors_sigma() {
        let ds = dataset(&[
            ("a", &[0.0, 0.0]),
            ("a", &[0.0, 0.0]),
            ("b", &[2.0, 0.0]),
            ("b", &[2.0, 0.0]),
        ]);
        let stats = estimate_domain_stats(&ds, &StatsOptions::default()).unwrap();
        assert_eq!(stats.sigma(), 1e-6);
        assert_eq!(stats.center(), &[1.0, 0.0]);
        // raw 0.5 averaged over the two dims, corrected by sigma_raw / n̄ = 0
        assert!((stats.epsilon() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn estimation_preconditions() {
        let single = dataset(&[("a", &[0.0]), ("a", &[1.0])]);
        assert!(matches!(
            estimate_domain_stats(&single, &StatsOptions::default()),
            Err(Error::Estimation(_))
        ));
        let singletons = dataset(&[("a", &[0.0]), ("b", &[1.0])]);
        assert!(matches!(
            estimate_domain_stats(&singletons, &StatsOptions::default()),
            Err(Error::Estimation(_))
        ));
        let empty = LabeledDataset::new(1, vec![]).unwrap();
        assert!(estimate_domain_stats(&empty, &StatsOptions::default()).is_err());
    }

    #[test]
    fn enrollment_single_sample() {
        let stats = DomainStats::centered_at_origin(2, 1.0, 1.0).unwrap();
        let x = emb(&[2.0, 0.0]);
        let m = build_enrollment_model(&stats, "k", &[&x]).unwrap();
        assert_eq!(m.pred_mean(), &[1.0, 0.0]);
        assert_eq!(m.pred_var(), 1.5);
    }

    #[test]
    fn enrollment_many_samples_approaches_mean() {
        let stats = DomainStats::centered_at_origin(2, 1.0, 1.0).unwrap();
        let x = emb(&[2.0, 0.0]);
        let samples = vec![&x; 10_000];
        let m = build_enrollment_model(&stats, "k", &samples).unwrap();
        assert!((m.pred_mean()[0] - 2.0).abs() < 1e-3);
        assert!((m.pred_var() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn enrollment_hand_evaluated() {
        let stats = DomainStats::centered_at_origin(4, 2.0, 0.5).unwrap();
        let c = 0.7;
        let samples: Vec<Embedding> = (0..4).map(|_| emb(&[c; 4])).collect();
        let refs: Vec<&Embedding> = samples.iter().collect();
        let m = build_enrollment_model(&stats, "k", &refs).unwrap();
        for v in m.pred_mean() {
            assert!((v - 8.0 / 8.5 * c).abs() < 1e-15);
        }
        assert!((m.pred_var() - (0.5 + 1.0 / 8.5)).abs() < 1e-15);
    }

    #[test]
    fn enrollment_errors() {
        let stats = DomainStats::centered_at_origin(2, 1.0, 1.0).unwrap();
        assert!(build_enrollment_model(&stats, "k", &[]).is_err());
        let wrong = emb(&[1.0]);
        assert!(matches!(
            build_enrollment_model(&stats, "k", &[&wrong]),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn marginal_closed_forms() {
        let stats = DomainStats::centered_at_origin(1, 1.0, 1.0).unwrap();
        let at_mean = marginal_log_density(&stats, &emb(&[0.0])).unwrap();
        assert!((at_mean + 0.5 * (4.0 * PI).ln()).abs() < 1e-15);
        let off = marginal_log_density(&stats, &emb(&[2.0])).unwrap();
        assert!((off - (-0.5 * (4.0 * PI).ln() - 1.0)).abs() < 1e-15);
        assert!(marginal_log_density(&stats, &emb(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn predictive_at_its_mean() {
        let stats = DomainStats::centered_at_origin(2, 1.0, 1.0).unwrap();
        let m = build_enrollment_model(&stats, "k", &[&emb(&[2.0, 0.0])]).unwrap();
        let lp = predictive_log_density(&m, &emb(&[1.0, 0.0]), &stats).unwrap();
        assert!((lp + (2.0 * PI * 1.5).ln()).abs() < 1e-14);
    }

    #[test]
    fn nl_score_hand_evaluated() {
        let stats = DomainStats::centered_at_origin(2, 1.0, 1.0).unwrap();
        let m = build_enrollment_model(&stats, "k", &[&emb(&[2.0, 0.0])]).unwrap();
        let score = nl_log_score(&m, &emb(&[2.0, 0.0]), &stats).unwrap();
        let predictive = -(2.0 * PI * 1.5).ln() - 1.0 / (2.0 * 1.5);
        let marginal = -(4.0 * PI).ln() - 4.0 / 4.0;
        assert!((score - (predictive - marginal)).abs() < 1e-14);
    }

    #[test]
    fn nl_score_vanishes_without_between_speaker_variance() {
        // With ε → 0 both densities tend to N(0, σI); the gap is O(ε) per term.
        let eps = 1e-6;
        let stats = DomainStats::centered_at_origin(3, eps, 1.0).unwrap();
        let m = build_enrollment_model(&stats, "k", &[&emb(&[1.0, -2.0, 0.5])]).unwrap();
        let x = emb(&[0.3, 1.0, -1.5]);
        let score = nl_log_score(&m, &x, &stats).unwrap();
        // |Δ| ≤ D·ε + ε·(|x|² + |x||xbar|) up to higher-order terms.
        let bound = 3.0 * eps + eps * (3.34 + 3.34f64.sqrt() * 5.25f64.sqrt()) * 2.0;
        assert!(score.abs() < bound, "score {score} bound {bound}");
    }
}
