//! Synthetic cross-domain worlds with known ground truth.
//!
//! Speaker means are drawn once; every domain records each speaker with fresh
//! within-speaker noise. The first domain is canonical, every other domain
//! passes its utterances through a scaled rotation plus shift
//! `x̂ = s·Q·x + d`, which keeps that domain exactly spherical with variances
//! scaled by `s²`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adapt::DomainTransform;
use crate::data::{Embedding, LabeledDataset, Record};
use crate::error::{Error, Result};
use crate::model::DomainStats;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub dim: usize,
    pub n_speakers: usize,
    pub n_utts_per_domain: usize,
    pub epsilon_true: f64,
    pub sigma_true: f64,
    /// The `s` of the channel `G = s·Q`.
    pub channel_scale: f64,
    /// Norm of the channel shift `d`.
    pub channel_shift_norm: f64,
    /// When false every channel rotation is the identity.
    pub random_rotation: bool,
    pub rotation_seed: u64,
    pub sample_seed: u64,
    /// Domain ids; the first one is canonical.
    pub domains: Vec<String>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dim: 16,
            n_speakers: 260,
            n_utts_per_domain: 20,
            epsilon_true: 1.0,
            sigma_true: 0.5,
            channel_scale: 1.5,
            channel_shift_norm: 1.0,
            random_rotation: true,
            rotation_seed: 0,
            sample_seed: 1,
            domains: vec!["A".into(), "B".into()],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.n_speakers < 2 {
            return fail(format!("n_speakers must be >= 2, got {}", self.n_speakers));
        }
        if self.n_utts_per_domain == 0 {
            return fail("n_utts_per_domain must be >= 1".into());
        }
        for (name, v) in [
            ("epsilon_true", self.epsilon_true),
            ("sigma_true", self.sigma_true),
            ("channel_scale", self.channel_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if !(self.channel_shift_norm.is_finite() && self.channel_shift_norm >= 0.0) {
            return fail(format!(
                "channel_shift_norm must be finite and >= 0, got {}",
                self.channel_shift_norm
            ));
        }
        if self.domains.is_empty() {
            return fail("at least one domain is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.domains {
            if d.is_empty() || d.chars().any(char::is_whitespace) {
                return fail(format!("invalid domain id '{d}'"));
            }
            if !seen.insert(d) {
                return fail(format!("duplicate domain id '{d}'"));
            }
        }
        Ok(())
    }
}

/// Ground truth of one non-canonical domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub domain_id: String,
    /// Unit-determinant orthogonal factor `Q`.
    pub rotation: DMatrix<f64>,
    pub scale: f64,
    pub shift: DVector<f64>,
    /// Stats implied by the channel: `s²ε`, `s²σ`, center `d`.
    pub stats: DomainStats,
}

impl Channel {
    /// `G = s·Q`.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.rotation * self.scale
    }

    /// The optimal test-to-canonical transform `M* = Qᵀ/s`, `b* = -M*·d`.
    pub fn inverse(&self) -> DomainTransform {
        let m = self.rotation.transpose() / self.scale;
        let b = -(&m * &self.shift);
        DomainTransform::new(m, b).expect("finite ground-truth transform")
    }

    /// The canonical-to-test transform `x ↦ G·x + d`.
    pub fn forward(&self) -> DomainTransform {
        DomainTransform::new(self.matrix(), self.shift.clone()).expect("finite channel")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldTruth {
    pub canonical_domain: String,
    pub canonical_stats: DomainStats,
    pub channels: Vec<Channel>,
    pub speaker_means: Vec<Vec<f64>>,
}

impl WorldTruth {
    pub fn channel(&self, domain: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.domain_id == domain)
    }

    /// True stats of any domain of the world.
    pub fn stats(&self, domain: &str) -> Option<&DomainStats> {
        if domain == self.canonical_domain {
            Some(&self.canonical_stats)
        } else {
            self.channel(domain).map(|c| &c.stats)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// One dataset per domain, in configuration order.
    pub datasets: Vec<LabeledDataset>,
    pub truth: WorldTruth,
}

impl World {
    pub fn domain(&self, id: &str) -> Option<&LabeledDataset> {
        self.datasets
            .iter()
            .find(|d| d.records().first().map(|r| r.domain_id.as_str()) == Some(id))
    }
}

pub fn speaker_id(k: usize, n_speakers: usize) -> String {
    let width = n_speakers.saturating_sub(1).to_string().len().max(4);
    format!("spk{k:0width$}")
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let dim = cfg.dim;

    let mut rot_rng = ChaCha8Rng::seed_from_u64(cfg.rotation_seed);
    let mut channels = Vec::with_capacity(cfg.domains.len().saturating_sub(1));
    for domain in cfg.domains.iter().skip(1) {
        let rotation = if cfg.random_rotation {
            random_rotation(dim, &mut rot_rng)
        } else {
            DMatrix::identity(dim, dim)
        };
        let direction = gaussian_vector(dim, &mut rot_rng);
        let norm = direction.norm();
        let shift = if norm > 0.0 {
            direction * (cfg.channel_shift_norm / norm)
        } else {
            DVector::zeros(dim)
        };
        let s2 = cfg.channel_scale * cfg.channel_scale;
        let stats = DomainStats::new(
            s2 * cfg.epsilon_true,
            s2 * cfg.sigma_true,
            shift.iter().copied().collect(),
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        channels.push(Channel {
            domain_id: domain.clone(),
            rotation,
            scale: cfg.channel_scale,
            shift,
            stats,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let between_sd = cfg.epsilon_true.sqrt();
    let within_sd = cfg.sigma_true.sqrt();
    let speaker_means: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|_| (0..dim).map(|_| between_sd * normal(&mut rng)).collect())
        .collect();
    let spk_ids: Vec<String> = (0..cfg.n_speakers)
        .map(|k| speaker_id(k, cfg.n_speakers))
        .collect();
    let utt_width = cfg
        .n_utts_per_domain
        .saturating_sub(1)
        .to_string()
        .len()
        .max(3);

    let mut datasets = Vec::with_capacity(cfg.domains.len());
    for (di, domain) in cfg.domains.iter().enumerate() {
        let channel = di.checked_sub(1).map(|i| &channels[i]);
        let g = channel.map(Channel::matrix);
        let mut records = Vec::with_capacity(cfg.n_speakers * cfg.n_utts_per_domain);
        for (k, mean) in speaker_means.iter().enumerate() {
            for u in 0..cfg.n_utts_per_domain {
                let x = DVector::from_iterator(
                    dim,
                    mean.iter().map(|m| m + within_sd * normal(&mut rng)),
                );
                let values = match (&g, channel) {
                    (Some(g), Some(c)) => g * x + &c.shift,
                    _ => x,
                };
                records.push(Record {
                    utt_id: format!("{domain}-{}-{u:0utt_width$}", spk_ids[k]),
                    spk_id: spk_ids[k].clone(),
                    domain_id: domain.clone(),
                    embedding: Embedding::new(values.iter().copied().collect())?,
                });
            }
        }
        datasets.push(LabeledDataset::from_parts_unchecked(dim, records));
    }

    let canonical_stats = DomainStats::centered_at_origin(dim, cfg.epsilon_true, cfg.sigma_true)
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(World {
        datasets,
        truth: WorldTruth {
            canonical_domain: cfg.domains[0].clone(),
            canonical_stats,
            channels,
            speaker_means,
        },
    })
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian_vector<R: Rng>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| normal(rng)))
}

/// Haar-distributed rotation with determinant +1.
pub(crate) fn random_rotation<R: Rng>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    // sign fix on the diagonal of R makes Q Haar distributed
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}
