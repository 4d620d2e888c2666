//! Trials, batch scoring and equal error rate.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapt::{self, DomainTransform};
use crate::data::{Embedding, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{self, build_enrollment_model, DomainStats, EnrollmentModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            "unknown" => Ok(TrialLabel::Unknown),
            other => Err(format!("unknown trial label '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub model_id: String,
    pub test_utt_id: String,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn count(&self, label: TrialLabel) -> usize {
        self.trials.iter().filter(|t| t.label == label).count()
    }
}

/// Builds one model per enrollment speaker (model id = speaker id) and pairs
/// it with every test utterance of the same speaker plus a seeded sample of
/// at most `max_nontarget` other speakers' test utterances (`None` keeps all).
/// Trials of a model follow test-file order.
pub fn make_trials(
    enroll_data: &LabeledDataset,
    test_data: &LabeledDataset,
    max_nontarget: Option<usize>,
    seed: u64,
) -> Result<TrialSet> {
    let mut enrolled: HashMap<&str, HashSet<&str>> = HashMap::new();
    for r in enroll_data.iter() {
        enrolled
            .entry(r.spk_id.as_str())
            .or_default()
            .insert(r.utt_id.as_str());
    }
    for r in test_data.iter() {
        if enrolled
            .get(r.spk_id.as_str())
            .is_some_and(|utts| utts.contains(r.utt_id.as_str()))
        {
            return Err(Error::Eval(format!(
                "test utterance {} is also in the enrollment set of its own speaker",
                r.utt_id
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::new();
    for spk in enroll_data.speakers() {
        let targets = test_data.iter().filter(|r| r.spk_id == spk).count();
        if targets == 0 {
            log::warn!("speaker {spk} has no test utterances; skipped");
            continue;
        }
        let nontarget_total = test_data.len() - targets;
        let keep: Option<HashSet<usize>> = match max_nontarget {
            Some(limit) if limit < nontarget_total => Some(
                rand::seq::index::sample(&mut rng, nontarget_total, limit)
                    .into_iter()
                    .collect(),
            ),
            _ => None,
        };
        let mut nontarget_idx = 0;
        for r in test_data.iter() {
            let label = if r.spk_id == spk {
                TrialLabel::Target
            } else {
                let idx = nontarget_idx;
                nontarget_idx += 1;
                if keep.as_ref().is_some_and(|k| !k.contains(&idx)) {
                    continue;
                }
                TrialLabel::Nontarget
            };
            trials.push(Trial {
                model_id: spk.to_string(),
                test_utt_id: r.utt_id.clone(),
                label,
            });
        }
    }
    if trials.is_empty() {
        return Err(Error::Eval("trial set is empty".into()));
    }
    Ok(TrialSet { trials })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Plain NL scoring with a single set of stats.
    Nl,
    /// NL scoring with multi-domain stats.
    Mdt,
    Dat,
    Dsd,
    /// Cosine similarity of centered vectors.
    Cosine,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Nl,
        Method::Mdt,
        Method::Dat,
        Method::Dsd,
        Method::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nl => "NL",
            Method::Mdt => "MDT",
            Method::Dat => "DAT",
            Method::Dsd => "DSD",
            Method::Cosine => "COSINE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method '{s}' (expected nl, mdt, dat, dsd or cosine)"))
    }
}

/// Everything a scoring method may need. Which fields are required depends
/// on the method; see [`score_trials`].
#[derive(Debug, Clone, Copy)]
pub struct ScoringArtifacts<'a> {
    pub enroll_data: &'a LabeledDataset,
    pub test_data: &'a LabeledDataset,
    pub enroll_stats: Option<&'a DomainStats>,
    pub test_stats: Option<&'a DomainStats>,
    pub mdt_stats: Option<&'a DomainStats>,
    pub transform: Option<&'a DomainTransform>,
}

impl<'a> ScoringArtifacts<'a> {
    pub fn new(enroll_data: &'a LabeledDataset, test_data: &'a LabeledDataset) -> Self {
        ScoringArtifacts {
            enroll_data,
            test_data,
            enroll_stats: None,
            test_stats: None,
            mdt_stats: None,
            transform: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub model_id: String,
    pub test_utt_id: String,
    pub score: f64,
    pub label: TrialLabel,
}

fn require<'a, T>(value: Option<&'a T>, method: Method, name: &str) -> Result<&'a T> {
    value.ok_or_else(|| Error::Eval(format!("method {method} requires the '{name}' artifact")))
}

/// Scores every trial with `method`; output order equals trial order.
///
/// Required artifacts: NL `enroll_stats`; MDT `mdt_stats`; DAT `enroll_stats`
/// and `transform`; DSD `enroll_stats`, `test_stats` and `transform`; COSINE
/// `enroll_stats` (test vectors are centered by `test_stats` when present).
pub fn score_trials(
    trials: &TrialSet,
    method: Method,
    artifacts: &ScoringArtifacts<'_>,
) -> Result<Vec<ScoreRecord>> {
    let stats = match method {
        Method::Mdt => require(artifacts.mdt_stats, method, "mdt_stats")?,
        _ => require(artifacts.enroll_stats, method, "enroll_stats")?,
    };
    let transform = match method {
        Method::Dat | Method::Dsd => Some(require(artifacts.transform, method, "transform")?),
        _ => None,
    };
    let test_stats = match method {
        Method::Dsd => Some(require(artifacts.test_stats, method, "test_stats")?),
        Method::Cosine => artifacts.test_stats,
        _ => None,
    };
    let dim = stats.dim();
    for (what, got) in [
        ("enrollment data", artifacts.enroll_data.dim()),
        ("test data", artifacts.test_data.dim()),
    ] {
        if got != dim {
            return Err(Error::dim_mismatch(what, dim, got));
        }
    }
    if let Some(t) = transform {
        if t.dim() != dim {
            return Err(Error::dim_mismatch("transform", dim, t.dim()));
        }
    }
    if let Some(s) = test_stats {
        if s.dim() != dim {
            return Err(Error::dim_mismatch("test stats", dim, s.dim()));
        }
    }

    let test_index: HashMap<&str, &Embedding> = artifacts
        .test_data
        .iter()
        .map(|r| (r.utt_id.as_str(), &r.embedding))
        .collect();
    let mut enroll_groups: HashMap<&str, Vec<&Embedding>> = HashMap::new();
    for r in artifacts.enroll_data.iter() {
        enroll_groups
            .entry(r.spk_id.as_str())
            .or_default()
            .push(&r.embedding);
    }
    let mut models: HashMap<&str, EnrollmentModel> = HashMap::new();
    for t in &trials.trials {
        if models.contains_key(t.model_id.as_str()) {
            continue;
        }
        let samples = enroll_groups
            .get(t.model_id.as_str())
            .ok_or_else(|| Error::Eval(format!("model {} has no enrollment data", t.model_id)))?;
        models.insert(
            t.model_id.as_str(),
            build_enrollment_model(stats, &t.model_id, samples)?,
        );
    }
    for t in &trials.trials {
        if !test_index.contains_key(t.test_utt_id.as_str()) {
            return Err(Error::Eval(format!(
                "test utterance {} not found in test data",
                t.test_utt_id
            )));
        }
    }

    trials
        .trials
        .par_iter()
        .map(|t| {
            let model = &models[t.model_id.as_str()];
            let x = test_index[t.test_utt_id.as_str()];
            let score = match method {
                Method::Nl | Method::Mdt => model::nl_log_score(model, x, stats)?,
                Method::Dat => adapt::dat_log_score(transform.unwrap(), model, x, stats)?,
                Method::Dsd => {
                    adapt::dsd_log_score(transform.unwrap(), model, x, stats, test_stats.unwrap())?
                }
                Method::Cosine => {
                    let test_center = test_stats.unwrap_or(stats);
                    cosine(model.xbar(), &test_center.centered(x.as_slice()))
                }
            };
            if !score.is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite score for trial {} {}",
                    t.model_id, t.test_utt_id
                )));
            }
            Ok(ScoreRecord {
                model_id: t.model_id.clone(),
                test_utt_id: t.test_utt_id.clone(),
                score,
                label: t.label,
            })
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    /// Equal error rate as a fraction in [0, 1].
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// Equal error rate by a sweep over every distinct score.
///
/// At threshold `t`, FAR is the fraction of nontarget scores `>= t` and FRR
/// the fraction of target scores `< t`. The EER is taken where FAR - FRR
/// changes sign, linearly interpolated between the two adjacent thresholds.
/// When the sign change lands exactly on a threshold, the reported
/// threshold is the midpoint of the interval that attains it.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<EerResult> {
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(records.len());
    for r in records {
        let is_target = match r.label {
            TrialLabel::Target => true,
            TrialLabel::Nontarget => false,
            TrialLabel::Unknown => {
                return Err(Error::Eval(format!(
                    "trial {} {} has no label",
                    r.model_id, r.test_utt_id
                )))
            }
        };
        if !r.score.is_finite() {
            return Err(Error::Eval(format!(
                "trial {} {} has a non-finite score",
                r.model_id, r.test_utt_id
            )));
        }
        scored.push((r.score, is_target));
    }
    let n_target = scored.iter().filter(|s| s.1).count();
    let n_nontarget = scored.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::Eval(format!(
            "EER needs targets and nontargets, got {n_target} and {n_nontarget}"
        )));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    let nt = n_target as f64;
    let nn = n_nontarget as f64;
    // Walking up the sorted scores: before the group at score t, `below_tar`
    // targets and `below_non` nontargets are strictly below t.
    let mut below_tar = 0usize;
    let mut below_non = 0usize;
    let mut prev: Option<(f64, f64, f64)> = None;
    let mut i = 0;
    while i <= scored.len() {
        let (t, far, frr) = if i < scored.len() {
            let t = scored[i].0;
            (
                t,
                (n_nontarget - below_non) as f64 / nn,
                below_tar as f64 / nt,
            )
        } else {
            (f64::INFINITY, 0.0, 1.0)
        };
        let gap = far - frr;
        if gap <= 0.0 {
            let (pt, pfar, pfrr) = prev.expect("lowest threshold has FAR 1 and FRR 0");
            let result = if gap == 0.0 {
                let threshold = if t.is_finite() { 0.5 * (pt + t) } else { pt };
                EerResult {
                    eer: far,
                    threshold,
                    n_target,
                    n_nontarget,
                }
            } else {
                let pgap = pfar - pfrr;
                let alpha = pgap / (pgap - gap);
                let eer = pfar + alpha * (far - pfar);
                let threshold = if t.is_finite() {
                    pt + alpha * (t - pt)
                } else {
                    pt
                };
                EerResult {
                    eer,
                    threshold,
                    n_target,
                    n_nontarget,
                }
            };
            return Ok(result);
        }
        prev = Some((t, far, frr));
        if i == scored.len() {
            break;
        }
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                below_tar += 1;
            } else {
                below_non += 1;
            }
            i += 1;
        }
    }
    unreachable!("FAR - FRR reaches -1 at the infinite threshold")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;

    fn rec(score: f64, target: bool) -> ScoreRecord {
        ScoreRecord {
            model_id: "m".into(),
            test_utt_id: "u".into(),
            score,
            label: if target {
                TrialLabel::Target
            } else {
                TrialLabel::Nontarget
            },
        }
    }

    fn records(tar: &[f64], non: &[f64]) -> Vec<ScoreRecord> {
        tar.iter()
            .map(|&s| rec(s, true))
            .chain(non.iter().map(|&s| rec(s, false)))
            .collect()
    }

    #[test]
    fn separated_scores_have_zero_eer() {
        let r = compute_eer(&records(&[0.9, 0.8, 0.7], &[0.2, 0.1, 0.5])).unwrap();
        assert_eq!(r.eer, 0.0);
        assert!(r.threshold > 0.5 && r.threshold < 0.7);
        assert_eq!((r.n_target, r.n_nontarget), (3, 3));
    }

    #[test]
    fn identical_multisets_give_one_half() {
        let s = [0.1, 0.4, 0.4, 0.9];
        let r = compute_eer(&records(&s, &s)).unwrap();
        assert!((r.eer - 0.5).abs() <= 0.25, "{}", r.eer);
        let single = compute_eer(&records(&[1.0], &[1.0])).unwrap();
        assert_eq!(single.eer, 0.5);
    }

    #[test]
    fn one_overlap() {
        // targets {0.9, 0.8, 0.7}, nontargets {0.75, 0.2, 0.1}:
        // at 0.75 FAR = 1/3, FRR = 1/3 exactly.
        let r = compute_eer(&records(&[0.9, 0.8, 0.7], &[0.75, 0.2, 0.1])).unwrap();
        assert_eq!(r.eer, 1.0 / 3.0);
        assert_eq!(r.threshold, 0.5 * (0.7 + 0.75));
    }

    #[test]
    fn eer_errors() {
        assert!(compute_eer(&records(&[1.0], &[])).is_err());
        assert!(compute_eer(&records(&[], &[1.0])).is_err());
        let mut r = records(&[1.0], &[0.0]);
        r[0].label = TrialLabel::Unknown;
        assert!(matches!(compute_eer(&r), Err(Error::Eval(_))));
    }

    fn ds(rows: &[(&str, &str, f64)]) -> LabeledDataset {
        LabeledDataset::new(
            1,
            rows.iter()
                .map(|(u, s, v)| Record {
                    utt_id: u.to_string(),
                    spk_id: s.to_string(),
                    domain_id: "A".into(),
                    embedding: Embedding::new(vec![*v]).unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn trials_two_speakers() {
        let enroll = ds(&[("e1", "a", 0.0), ("e2", "b", 1.0)]);
        let test = ds(&[("t1", "a", 0.1), ("t2", "b", 0.9)]);
        let trials = make_trials(&enroll, &test, None, 0).unwrap();
        assert_eq!(trials.count(TrialLabel::Target), 2);
        assert_eq!(trials.count(TrialLabel::Nontarget), 2);
        assert_eq!(trials.trials[0].model_id, "a");
        assert_eq!(trials.trials[1].label, TrialLabel::Nontarget);
    }

    #[test]
    fn trials_subsampling_and_skips() {
        let enroll = ds(&[("e1", "a", 0.0), ("e2", "b", 1.0), ("e3", "c", 2.0)]);
        let test = ds(&[
            ("t1", "a", 0.1),
            ("t2", "a", 0.2),
            ("t3", "b", 0.9),
            ("t4", "d", 0.9),
            ("t5", "d", 0.5),
        ]);
        let all = make_trials(&enroll, &test, None, 0).unwrap();
        // c has no test utterances; a has 3 nontargets, b has 4
        assert_eq!(all.count(TrialLabel::Target), 3);
        assert_eq!(all.count(TrialLabel::Nontarget), 7);
        let capped = make_trials(&enroll, &test, Some(2), 9).unwrap();
        assert_eq!(capped.count(TrialLabel::Nontarget), 4);
        assert_eq!(capped, make_trials(&enroll, &test, Some(2), 9).unwrap());

        let overlap = ds(&[("e1", "a", 0.0)]);
        assert!(make_trials(&enroll, &overlap, None, 0).is_err());
        let empty = ds(&[("x", "zz", 0.0)]);
        assert!(make_trials(&ds(&[("e1", "q", 0.0)]), &empty, None, 0).is_err());
    }

    #[test]
    fn missing_artifacts_are_named() {
        let enroll = ds(&[("e1", "a", 0.0), ("e2", "b", 1.0)]);
        let test = ds(&[("t1", "a", 0.1), ("t2", "b", 0.9)]);
        let trials = make_trials(&enroll, &test, None, 0).unwrap();
        let stats = DomainStats::centered_at_origin(1, 1.0, 1.0).unwrap();
        let mut art = ScoringArtifacts::new(&enroll, &test);
        art.enroll_stats = Some(&stats);
        let err = score_trials(&trials, Method::Dsd, &art)
            .unwrap_err()
            .to_string();
        assert!(err.contains("transform"), "{err}");
        let err = score_trials(&trials, Method::Mdt, &art)
            .unwrap_err()
            .to_string();
        assert!(err.contains("mdt_stats"), "{err}");
        assert_eq!(score_trials(&trials, Method::Nl, &art).unwrap().len(), 4);
        assert_eq!(
            score_trials(&trials, Method::Cosine, &art).unwrap().len(),
            4
        );
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().to_lowercase().parse::<Method>().unwrap(), m);
        }
        assert!("plda".parse::<Method>().is_err());
    }
}
