//! Domain-mismatch handling: the decoupled (DSD) scorer with its linear
//! test-to-enrollment transform, the DAT baseline, and multi-domain stats
//! estimation with controlled label sharing (MDT).

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Embedding, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{
    self, build_enrollment_model, estimate_domain_stats, DomainStats, EnrollmentModel, StatsOptions,
};
use crate::simulate::random_rotation;

/// Linear map `x = M·x̂ + b` from test-condition vectors into enrollment-condition
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    m: DMatrix<f64>,
    b: DVector<f64>,
}

impl DomainTransform {
    pub fn new(m: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() != b.len() || b.is_empty() {
            return Err(Error::Model(format!(
                "transform must be DxD with a length-D offset, got {}x{} and {}",
                m.nrows(),
                m.ncols(),
                b.len()
            )));
        }
        if m.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Model("transform has non-finite entries".into()));
        }
        Ok(DomainTransform { m, b })
    }

    pub fn identity(dim: usize) -> Self {
        DomainTransform {
            m: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub(crate) fn apply_raw(&self, xhat: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                let row: f64 = (0..d).map(|j| self.m[(i, j)] * xhat[j]).sum();
                row + self.b[i]
            })
            .collect()
    }
}

pub fn transform_apply(t: &DomainTransform, xhat: &Embedding) -> Result<Embedding> {
    if xhat.dim() != t.dim() {
        return Err(Error::dim_mismatch("transform input", t.dim(), xhat.dim()));
    }
    Embedding::new(t.apply_raw(xhat.as_slice()))
}

/// Predictive log density of `M·x̂ + b` under a model of the enrollment condition.
pub fn transformed_predictive_log_density(
    t: &DomainTransform,
    model: &EnrollmentModel,
    xhat: &Embedding,
    enroll_stats: &DomainStats,
) -> Result<f64> {
    let x = transform_apply(t, xhat)?;
    model::predictive_log_density(model, &x, enroll_stats)
}

/// Decoupled score: prediction under the enrollment condition through the
/// transform, normalization by the test-condition marginal of the raw `x̂`.
pub fn dsd_log_score(
    t: &DomainTransform,
    model: &EnrollmentModel,
    xhat: &Embedding,
    enroll_stats: &DomainStats,
    test_stats: &DomainStats,
) -> Result<f64> {
    let predictive = transformed_predictive_log_density(t, model, xhat, enroll_stats)?;
    Ok(predictive - model::marginal_log_density(test_stats, xhat)?)
}

/// Adaptation baseline: transform into the enrollment condition and score
/// there entirely, normalization included.
pub fn dat_log_score(
    t: &DomainTransform,
    model: &EnrollmentModel,
    xhat: &Embedding,
    enroll_stats: &DomainStats,
) -> Result<f64> {
    let x = transform_apply(t, xhat)?;
    model::nl_log_score(model, &x, enroll_stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    All,
    Size(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformInit {
    Identity,
    RandomOrthogonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub batch_size: BatchSize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop once the relative change of the full objective drops below this.
    pub convergence_tol: f64,
    pub init: TransformInit,
    /// Add `log|det M|` per test sample, making the objective the likelihood of
    /// the observed `x̂` rather than of the transformed vectors. Without it the
    /// maximizer shrinks `M` toward the regression of speaker means on `x̂`.
    pub jacobian: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_iters: 2000,
            batch_size: BatchSize::All,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            convergence_tol: 1e-7,
            init: TransformInit::Identity,
            jacobian: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.max_iters == 0 {
            return fail("max_iters must be positive".into());
        }
        if self.batch_size == BatchSize::Size(0) {
            return fail("batch_size must be positive".into());
        }
        for (name, beta) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(beta > 0.0 && beta < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {beta}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol > 0.0) {
            return fail(format!(
                "convergence_tol must be > 0, got {}",
                self.convergence_tol
            ));
        }
        Ok(())
    }
}

/// One test-condition vector paired with the index of its speaker's model.
#[derive(Debug, Clone, Copy)]
pub struct TrainingPair<'a> {
    pub model: usize,
    pub xhat: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformGradient {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Sum of `log p_k(x̂_i; M, b)` over the batch and its gradient w.r.t. `M` and `b`.
///
/// With `jacobian` set, each term also carries `log|det M|`.
pub fn objective_and_gradient(
    t: &DomainTransform,
    batch: &[TrainingPair<'_>],
    models: &[EnrollmentModel],
    enroll_stats: &DomainStats,
    jacobian: bool,
) -> Result<(f64, TransformGradient)> {
    let d = t.dim();
    let non_finite = |what: &str| Error::Train {
        iteration: 0,
        message: format!("non-finite {what}"),
    };
    if t.dim() != enroll_stats.dim() {
        return Err(Error::dim_mismatch(
            "transform",
            enroll_stats.dim(),
            t.dim(),
        ));
    }

    let mut objective = 0.0;
    let mut grad_m = DMatrix::zeros(d, d);
    let mut grad_b = DVector::zeros(d);
    let mut residual = vec![0.0; d];
    for pair in batch {
        let model = models
            .get(pair.model)
            .ok_or_else(|| Error::Model(format!("batch refers to missing model {}", pair.model)))?;
        if pair.xhat.len() != d || model.dim() != d {
            return Err(Error::dim_mismatch("training pair", d, pair.xhat.len()));
        }
        if pair.xhat.iter().any(|v| !v.is_finite()) {
            return Err(non_finite("training vector"));
        }
        let z = t.apply_raw(pair.xhat);
        let mut sq = 0.0;
        for i in 0..d {
            residual[i] = z[i] - enroll_stats.center()[i] - model.pred_mean()[i];
            sq += residual[i] * residual[i];
        }
        let var = model.pred_var();
        objective += model::isotropic_log_density(sq, var, d);
        for i in 0..d {
            let r = residual[i] / var;
            grad_b[i] -= r;
            for j in 0..d {
                grad_m[(i, j)] -= r * pair.xhat[j];
            }
        }
    }
    if jacobian && !batch.is_empty() {
        let (log_det, inv_t) = log_abs_det_and_inverse_transpose(&t.m)?;
        let count = batch.len() as f64;
        objective += count * log_det;
        grad_m += inv_t * count;
    }
    if !objective.is_finite() {
        return Err(non_finite("objective"));
    }
    if grad_m.iter().chain(grad_b.iter()).any(|v| !v.is_finite()) {
        return Err(non_finite("gradient"));
    }
    Ok((
        objective,
        TransformGradient {
            m: grad_m,
            b: grad_b,
        },
    ))
}

fn log_abs_det_and_inverse_transpose(m: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let lu = m.clone().lu();
    let det = lu.determinant();
    let inv = lu.try_inverse().filter(|_| det != 0.0 && det.is_finite());
    match inv {
        Some(inv) => Ok((det.abs().ln(), inv.transpose())),
        None => Err(Error::Train {
            iteration: 0,
            message: "transform matrix is singular".into(),
        }),
    }
}

/// Weighted second-order statistics of a full training batch. The objective
/// is quadratic in `(M, b)` apart from the log-determinant, so a full-batch
/// evaluation costs O(D³) regardless of the number of pairs.
#[derive(Debug, Clone)]
pub struct BatchMoments {
    count: f64,
    log_norm: f64,
    weight: f64,
    sx: DVector<f64>,
    st: DVector<f64>,
    sxx: DMatrix<f64>,
    stx: DMatrix<f64>,
    stt: f64,
}

impl BatchMoments {
    pub fn new(
        batch: &[TrainingPair<'_>],
        models: &[EnrollmentModel],
        enroll_stats: &DomainStats,
    ) -> Result<Self> {
        let d = enroll_stats.dim();
        let mut mo = BatchMoments {
            count: batch.len() as f64,
            log_norm: 0.0,
            weight: 0.0,
            sx: DVector::zeros(d),
            st: DVector::zeros(d),
            sxx: DMatrix::zeros(d, d),
            stx: DMatrix::zeros(d, d),
            stt: 0.0,
        };
        for pair in batch {
            let model = models.get(pair.model).ok_or_else(|| {
                Error::Model(format!("batch refers to missing model {}", pair.model))
            })?;
            if pair.xhat.len() != d || model.dim() != d {
                return Err(Error::dim_mismatch("training pair", d, pair.xhat.len()));
            }
            let var = model.pred_var();
            let w = 1.0 / var;
            let x = DVector::from_column_slice(pair.xhat);
            let target = DVector::from_iterator(
                d,
                enroll_stats
                    .center()
                    .iter()
                    .zip(model.pred_mean())
                    .map(|(c, m)| c + m),
            );
            mo.log_norm += model::isotropic_log_density(0.0, var, d);
            mo.weight += w;
            mo.sx.axpy(w, &x, 1.0);
            mo.st.axpy(w, &target, 1.0);
            mo.sxx.ger(w, &x, &x, 1.0);
            mo.stx.ger(w, &target, &x, 1.0);
            mo.stt += w * target.norm_squared();
        }
        Ok(mo)
    }

    pub fn objective_and_gradient(
        &self,
        t: &DomainTransform,
        jacobian: bool,
    ) -> Result<(f64, TransformGradient)> {
        let (m, b) = (&t.m, &t.b);
        let m_sxx = m * &self.sxx;
        let m_sx = m * &self.sx;
        let quad = m_sxx.dot(m) + 2.0 * b.dot(&m_sx) - 2.0 * m.dot(&self.stx)
            + self.weight * b.norm_squared()
            - 2.0 * b.dot(&self.st)
            + self.stt;
        let mut objective = self.log_norm - 0.5 * quad;
        let mut grad_m = -(m_sxx + b * self.sx.transpose() - &self.stx);
        let grad_b = -(m_sx + b * self.weight - &self.st);
        if jacobian && self.count > 0.0 {
            let (log_det, inv_t) = log_abs_det_and_inverse_transpose(m)?;
            objective += self.count * log_det;
            grad_m += inv_t * self.count;
        }
        if !objective.is_finite() || grad_m.iter().chain(grad_b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Train {
                iteration: 0,
                message: "non-finite objective or gradient".into(),
            });
        }
        Ok((
            objective,
            TransformGradient {
                m: grad_m,
                b: grad_b,
            },
        ))
    }
}

/// Enrollment models and test-condition pairs for transform training.
#[derive(Debug, Clone)]
pub struct TrainingProblem<'a> {
    pub models: Vec<EnrollmentModel>,
    pub pairs: Vec<TrainingPair<'a>>,
}

impl<'a> TrainingProblem<'a> {
    /// Each shared speaker's model is built from all of its enrollment-domain
    /// utterances; its test-domain utterances become the pairs.
    pub fn new(
        enroll_data: &LabeledDataset,
        test_data: &'a LabeledDataset,
        enroll_stats: &DomainStats,
    ) -> Result<Self> {
        if enroll_data.dim() != test_data.dim() || enroll_data.dim() != enroll_stats.dim() {
            return Err(Error::Model(format!(
                "dimension mismatch: enroll {}, test {}, stats {}",
                enroll_data.dim(),
                test_data.dim(),
                enroll_stats.dim()
            )));
        }
        let test_speakers: HashSet<&str> = test_data.speakers().into_iter().collect();
        let mut models = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (spk, idx) in enroll_data.speaker_groups() {
            if !test_speakers.contains(spk) {
                continue;
            }
            let samples: Vec<&Embedding> = idx
                .iter()
                .map(|&i| &enroll_data.records()[i].embedding)
                .collect();
            index.insert(spk, models.len());
            models.push(build_enrollment_model(enroll_stats, spk, &samples)?);
        }
        if models.is_empty() {
            return Err(Error::Train {
                iteration: 0,
                message: "enrollment and test data share no speakers".into(),
            });
        }
        let pairs = test_data
            .iter()
            .filter_map(|r| {
                index.get(r.spk_id.as_str()).map(|&model| TrainingPair {
                    model,
                    xhat: r.embedding.as_slice(),
                })
            })
            .collect();
        Ok(TrainingProblem { models, pairs })
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub transform: DomainTransform,
    /// Full objective at the initial point and after every step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximum-likelihood transform from the test condition into the enrollment
/// condition, optimized with Adam.
pub fn train_transform(
    enroll_data: &LabeledDataset,
    test_data: &LabeledDataset,
    enroll_stats: &DomainStats,
    cfg: &TrainConfig,
) -> Result<DomainTransform> {
    train_transform_with_report(enroll_data, test_data, enroll_stats, cfg).map(|r| r.transform)
}

pub fn train_transform_with_report(
    enroll_data: &LabeledDataset,
    test_data: &LabeledDataset,
    enroll_stats: &DomainStats,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let problem = TrainingProblem::new(enroll_data, test_data, enroll_stats)?;
    let d = enroll_stats.dim();
    let full = BatchMoments::new(&problem.pairs, &problem.models, enroll_stats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut t = match cfg.init {
        TransformInit::Identity => DomainTransform::identity(d),
        TransformInit::RandomOrthogonal => DomainTransform {
            m: random_rotation(d, &mut rng),
            b: DVector::zeros(d),
        },
    };

    let at = |iteration: usize| {
        move |e: Error| match e {
            Error::Train { message, .. } => Error::Train { iteration, message },
            other => other,
        }
    };
    let (mut objective, mut grad) = full
        .objective_and_gradient(&t, cfg.jacobian)
        .map_err(at(0))?;
    let mut trace = vec![objective];
    let mut adam = Adam::new(d * d + d, cfg);
    let mut order: Vec<usize> = (0..problem.pairs.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iters {
        if let BatchSize::Size(size) = cfg.batch_size {
            if size < problem.pairs.len() {
                batch.clear();
                while batch.len() < size {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    batch.push(problem.pairs[order[cursor]]);
                    cursor += 1;
                }
                grad =
                    objective_and_gradient(&t, &batch, &problem.models, enroll_stats, cfg.jacobian)
                        .map_err(at(iter))?
                        .1;
            }
        }
        adam.ascend(&mut t, &grad);
        if t.m.iter().chain(t.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Train {
                iteration: iter,
                message: "parameters became non-finite".into(),
            });
        }
        let (next, next_grad) = full
            .objective_and_gradient(&t, cfg.jacobian)
            .map_err(at(iter))?;
        iterations = iter;
        trace.push(next);
        let change = (next - objective).abs() / objective.abs().max(f64::MIN_POSITIVE);
        objective = next;
        grad = next_grad;
        if iter == 50
            && cfg.init == TransformInit::Identity
            && trace[1..].iter().all(|&v| v <= trace[0])
        {
            log::warn!("transform objective did not improve over the first 50 iterations");
        }
        if change < cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    log::debug!(
        "transform training stopped after {iterations} iterations (converged: {converged}), objective {objective}"
    );
    Ok(TrainReport {
        transform: t,
        objective_trace: trace,
        iterations,
        converged,
    })
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    fn ascend(&mut self, t: &mut DomainTransform, grad: &TransformGradient) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let params = t.m.iter_mut().chain(t.b.iter_mut());
        let grads = grad.m.iter().chain(grad.b.iter());
        for (((p, g), m), v) in params
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p += self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMixConfig {
    /// Fraction of speakers whose label is shared across domains.
    pub proportion_independent: f64,
    pub seed: u64,
}

/// Multi-domain stats with a controlled share of domain-independent labels.
///
/// Speakers are sorted, shuffled with `mix.seed` and the first
/// `round(p·K)` keep their label across domains; every other speaker is
/// split into one class per domain, labeled `spk::domain`.
pub fn mdt_estimate(
    pooled: &LabeledDataset,
    mix: &LabelMixConfig,
    opts: &StatsOptions,
) -> Result<DomainStats> {
    let relabeled = mdt_relabel(pooled, mix)?;
    estimate_domain_stats(&relabeled, opts)
}

pub fn mdt_relabel(pooled: &LabeledDataset, mix: &LabelMixConfig) -> Result<LabeledDataset> {
    let p = mix.proportion_independent;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "proportion_independent must lie in [0, 1], got {p}"
        )));
    }
    let domains = pooled.domains();
    if domains.len() < 2 {
        return Err(Error::Estimation(format!(
            "multi-domain training needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    let mut speakers = pooled.speakers();
    if speakers.len() < 2 {
        return Err(Error::Estimation(format!(
            "need at least 2 speakers, got {}",
            speakers.len()
        )));
    }
    speakers.sort_unstable();
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(mix.seed));
    let keep = (p * speakers.len() as f64).round() as usize;
    let shared: HashSet<&str> = speakers[..keep].iter().copied().collect();
    Ok(pooled.relabeled(|r| {
        if shared.contains(r.spk_id.as_str()) {
            r.spk_id.clone()
        } else {
            format!("{}::{}", r.spk_id, r.domain_id)
        }
    }))
}
