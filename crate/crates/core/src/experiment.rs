//! Cross-domain experiment drivers: method comparison over every ordered
//! domain pair, the label-sharing sweep for multi-domain stats, and the
//! training-speaker-count sweep.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapt::{mdt_estimate, train_transform, LabelMixConfig, TrainConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval::{compute_eer, make_trials, score_trials, Method, ScoringArtifacts, TrialSet};
use crate::model::{estimate_domain_stats, DomainStats, StatsOptions};
use crate::simulate::World;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Speakers held out for evaluation; the rest train the artifacts.
    pub n_eval_speakers: usize,
    /// Enrollment utterances per evaluation speaker and domain.
    pub n_enroll_utts: usize,
    /// `None` pairs every model with every other speaker's test utterances.
    pub max_nontarget: Option<usize>,
    /// Seeds the speaker split, the enrollment split, trial sampling and label mixing.
    pub seed: u64,
    pub train: TrainConfig,
    pub stats: StatsOptions,
    /// Label-sharing proportion used for MDT in the method comparison.
    pub mdt_proportion: f64,
    /// Evaluate domain pairs on the rayon pool; results are identical either way.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_eval_speakers: 60,
            n_enroll_utts: 3,
            max_nontarget: None,
            seed: 0,
            // 1e-3 does not reach the convergence tolerance within 2000 steps at desk scale
            train: TrainConfig {
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            stats: StatsOptions::default(),
            mdt_proportion: 1.0,
            parallel: false,
        }
    }
}

impl ExperimentConfig {
    fn trial_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    fn mix_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
}

/// Per-domain data split into training speakers and held-out evaluation
/// speakers, the latter further split into enrollment and test utterances.
#[derive(Debug, Clone)]
pub struct SplitCorpus {
    pub domains: Vec<String>,
    pub train: Vec<LabeledDataset>,
    /// Training speakers in seeded order; the first `c` form the count-`c` subset.
    pub train_speakers: Vec<String>,
    pub enroll: Vec<LabeledDataset>,
    pub test: Vec<LabeledDataset>,
}

impl SplitCorpus {
    pub fn from_world(world: &World, cfg: &ExperimentConfig) -> Result<Self> {
        let refs: Vec<&LabeledDataset> = world.datasets.iter().collect();
        let pooled = LabeledDataset::concat(&refs)?;
        SplitCorpus::new(&pooled, cfg)
    }

    /// Splits pooled multi-domain data; domains keep first-appearance order.
    /// With `cfg.stats.length_normalize` every vector is normalized up front so
    /// training and scoring see the same data.
    pub fn new(pooled: &LabeledDataset, cfg: &ExperimentConfig) -> Result<Self> {
        let normalized;
        let pooled = if cfg.stats.length_normalize {
            normalized = pooled.length_normalized();
            &normalized
        } else {
            pooled
        };
        let domains: Vec<String> = pooled.domains().into_iter().map(String::from).collect();
        if domains.len() < 2 {
            return Err(Error::Eval(format!(
                "cross-domain experiments need at least 2 domains, got {}",
                domains.len()
            )));
        }
        if cfg.n_enroll_utts == 0 {
            return Err(Error::Config("n_enroll_utts must be positive".into()));
        }
        let mut speakers: Vec<&str> = pooled.speakers();
        speakers.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        speakers.shuffle(&mut rng);
        if cfg.n_eval_speakers + 2 > speakers.len() {
            return Err(Error::Config(format!(
                "{} evaluation speakers leave fewer than 2 of {} for training",
                cfg.n_eval_speakers,
                speakers.len()
            )));
        }
        let (eval_spk, train_spk) = speakers.split_at(cfg.n_eval_speakers);
        let eval_set: HashSet<&str> = eval_spk.iter().copied().collect();
        let train_set: HashSet<&str> = train_spk.iter().copied().collect();
        let mut eval_sorted = eval_spk.to_vec();
        eval_sorted.sort_unstable();

        let mut train = Vec::new();
        let mut enroll = Vec::new();
        let mut test = Vec::new();
        for domain in &domains {
            let data = pooled.with_domain(domain);
            train.push(data.with_speakers(&train_set));
            let eval = data.with_speakers(&eval_set);
            let mut enroll_utts: HashSet<String> = HashSet::new();
            let groups = eval.speaker_groups();
            for spk in &eval_sorted {
                let Some((_, idx)) = groups.iter().find(|(s, _)| s == spk) else {
                    continue;
                };
                let take = cfg.n_enroll_utts.min(idx.len());
                for pick in rand::seq::index::sample(&mut rng, idx.len(), take) {
                    enroll_utts.insert(eval.records()[idx[pick]].utt_id.clone());
                }
            }
            enroll.push(eval.filter(|r| enroll_utts.contains(&r.utt_id)));
            test.push(eval.filter(|r| !enroll_utts.contains(&r.utt_id)));
        }
        Ok(SplitCorpus {
            domains,
            train,
            train_speakers: train_spk.iter().map(|s| s.to_string()).collect(),
            enroll,
            test,
        })
    }

    /// Training data restricted to the first `count` training speakers.
    pub fn train_subset(&self, count: usize) -> Result<Vec<LabeledDataset>> {
        if count > self.train_speakers.len() {
            return Err(Error::Config(format!(
                "requested {count} training speakers, only {} available",
                self.train_speakers.len()
            )));
        }
        if count == self.train_speakers.len() {
            return Ok(self.train.clone());
        }
        let keep: HashSet<&str> = self.train_speakers[..count]
            .iter()
            .map(String::as_str)
            .collect();
        Ok(self.train.iter().map(|d| d.with_speakers(&keep)).collect())
    }

    fn case(&self, enroll: usize, test: usize) -> String {
        format!("{}-{}", self.domains[enroll], self.domains[test])
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.domains.len();
        (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    /// `A-B`: enrollment in domain A, test in domain B.
    pub case: String,
    pub method: Method,
    pub n_speakers: usize,
    pub proportion: Option<f64>,
    pub eer_percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Methods,
    LabelSweep,
    SpeakerSweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub kind: TableKind,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn find(&self, case: &str, method: Method) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.case == case && r.method == method)
    }

    /// Aligned text layout: cases down the side, methods, proportions or
    /// speaker counts across the top. Matched-condition rows are marked as
    /// floor references.
    pub fn render(&self) -> String {
        let mut cells: Vec<(String, String, f64)> = Vec::new();
        for r in &self.rows {
            let matched = is_matched(&r.case);
            let (row, col) = match self.kind {
                TableKind::Methods => (
                    if matched {
                        format!("{} (floor)", r.case)
                    } else {
                        r.case.clone()
                    },
                    r.method.name().to_string(),
                ),
                TableKind::LabelSweep => (
                    if matched {
                        format!("{} (floor)", r.case)
                    } else {
                        r.case.clone()
                    },
                    match r.proportion {
                        Some(p) => format!("{:.0}%", 100.0 * p),
                        None => "Base".to_string(),
                    },
                ),
                TableKind::SpeakerSweep => {
                    (format!("{} {}", r.method, r.case), r.n_speakers.to_string())
                }
            };
            cells.push((row, col, r.eer_percent));
        }
        let rows = first_appearance(cells.iter().map(|c| c.0.as_str()));
        let cols = first_appearance(cells.iter().map(|c| c.1.as_str()));
        let lookup = |r: &str, c: &str| {
            cells
                .iter()
                .find(|x| x.0 == r && x.1 == c)
                .map(|x| format!("{:.3}", x.2))
                .unwrap_or_else(|| "-".into())
        };
        let first_w = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(4);
        let col_w: Vec<usize> = cols.iter().map(|c| c.len().max(7)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<first_w$}", "Case");
        for (c, w) in cols.iter().zip(&col_w) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for r in &rows {
            let _ = write!(out, "{r:<first_w$}");
            for (c, w) in cols.iter().zip(&col_w) {
                let _ = write!(out, "  {:>w$}", lookup(r, c));
            }
            out.push('\n');
        }
        out.push_str("EER in %.\n");
        out
    }
}

fn is_matched(case: &str) -> bool {
    case.split_once('-').is_some_and(|(a, b)| a == b)
}

fn first_appearance<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    items.filter(|s| seen.insert(*s)).collect()
}

/// Artifacts trained on one training subset.
struct Trained {
    stats: Vec<DomainStats>,
    n_speakers: usize,
}

impl Trained {
    fn new(train: &[LabeledDataset], cfg: &ExperimentConfig) -> Result<Self> {
        let stats = train
            .iter()
            .map(|d| estimate_domain_stats(d, &cfg.stats))
            .collect::<Result<Vec<_>>>()?;
        let n_speakers = train
            .iter()
            .flat_map(|d| d.speakers())
            .collect::<BTreeSet<_>>()
            .len();
        Ok(Trained { stats, n_speakers })
    }
}

struct CaseScorer<'a> {
    split: &'a SplitCorpus,
    train: &'a [LabeledDataset],
    trained: &'a Trained,
    cfg: &'a ExperimentConfig,
    enroll: usize,
    test: usize,
    trials: TrialSet,
}

impl<'a> CaseScorer<'a> {
    fn new(
        split: &'a SplitCorpus,
        train: &'a [LabeledDataset],
        trained: &'a Trained,
        cfg: &'a ExperimentConfig,
        (enroll, test): (usize, usize),
    ) -> Result<Self> {
        let trials = make_trials(
            &split.enroll[enroll],
            &split.test[test],
            cfg.max_nontarget,
            cfg.trial_seed(),
        )?;
        Ok(CaseScorer {
            split,
            train,
            trained,
            cfg,
            enroll,
            test,
            trials,
        })
    }

    fn row(&self, method: Method, proportion: Option<f64>, eer: f64) -> ResultRow {
        ResultRow {
            case: self.split.case(self.enroll, self.test),
            method,
            n_speakers: self.trained.n_speakers,
            proportion,
            eer_percent: 100.0 * eer,
        }
    }

    fn artifacts(&self) -> ScoringArtifacts<'_> {
        let mut art =
            ScoringArtifacts::new(&self.split.enroll[self.enroll], &self.split.test[self.test]);
        art.enroll_stats = Some(&self.trained.stats[self.enroll]);
        art.test_stats = Some(&self.trained.stats[self.test]);
        art
    }

    fn eer(&self, method: Method, art: &ScoringArtifacts<'_>) -> Result<f64> {
        let scores = score_trials(&self.trials, method, art)?;
        Ok(compute_eer(&scores)?.eer)
    }

    fn mdt_stats(&self, proportion: f64) -> Result<DomainStats> {
        let pooled = LabeledDataset::concat(&[&self.train[self.enroll], &self.train[self.test]])?;
        let mix = LabelMixConfig {
            proportion_independent: proportion,
            seed: self.cfg.mix_seed(),
        };
        mdt_estimate(&pooled, &mix, &self.cfg.stats)
    }

    fn methods(&self, methods: &[Method]) -> Result<Vec<ResultRow>> {
        let mut rows = Vec::new();
        let mut transform = None;
        for &method in methods {
            let mut art = self.artifacts();
            let mdt;
            match method {
                Method::Mdt => {
                    mdt = self.mdt_stats(self.cfg.mdt_proportion)?;
                    art.mdt_stats = Some(&mdt);
                }
                Method::Dat | Method::Dsd => {
                    if transform.is_none() {
                        transform = Some(train_transform(
                            &self.train[self.enroll],
                            &self.train[self.test],
                            &self.trained.stats[self.enroll],
                            &self.cfg.train,
                        )?);
                    }
                    art.transform = transform.as_ref();
                }
                Method::Nl | Method::Cosine => {}
            }
            let proportion = (method == Method::Mdt).then_some(self.cfg.mdt_proportion);
            rows.push(self.row(method, proportion, self.eer(method, &art)?));
        }
        Ok(rows)
    }
}

fn map_pairs<T, F>(pairs: Vec<(usize, usize)>, parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn((usize, usize)) -> Result<T> + Sync + Send,
{
    if parallel {
        pairs.into_par_iter().map(f).collect()
    } else {
        pairs.into_iter().map(f).collect()
    }
}

fn floor_row(
    split: &SplitCorpus,
    train: &[LabeledDataset],
    trained: &Trained,
    cfg: &ExperimentConfig,
    domain: usize,
) -> Result<ResultRow> {
    let scorer = CaseScorer::new(split, train, trained, cfg, (domain, domain))?;
    let eer = scorer.eer(Method::Nl, &scorer.artifacts())?;
    Ok(scorer.row(Method::Nl, None, eer))
}

/// For every ordered domain pair: matched pairs report the NL floor, mismatched
/// pairs one row per requested method.
pub fn run_table2_experiment(
    split: &SplitCorpus,
    methods: &[Method],
    cfg: &ExperimentConfig,
) -> Result<ResultTable> {
    let trained = Trained::new(&split.train, cfg)?;
    let rows = map_pairs(split.pairs(), cfg.parallel, |(a, b)| {
        if a == b {
            return Ok(vec![floor_row(split, &split.train, &trained, cfg, a)?]);
        }
        CaseScorer::new(split, &split.train, &trained, cfg, (a, b))?.methods(methods)
    })?;
    Ok(ResultTable {
        kind: TableKind::Methods,
        rows: rows.into_iter().flatten().collect(),
    })
}

/// MDT under each label-sharing proportion, next to the enrollment-matched
/// base scorer, for every mismatched pair; matched pairs report the NL floor.
pub fn run_table1_sweep(
    split: &SplitCorpus,
    proportions: &[f64],
    cfg: &ExperimentConfig,
) -> Result<ResultTable> {
    if let Some(p) = proportions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Config(format!("proportion {p} outside [0, 1]")));
    }
    let trained = Trained::new(&split.train, cfg)?;
    let rows = map_pairs(split.pairs(), cfg.parallel, |(a, b)| {
        if a == b {
            return Ok(vec![floor_row(split, &split.train, &trained, cfg, a)?]);
        }
        let scorer = CaseScorer::new(split, &split.train, &trained, cfg, (a, b))?;
        let mut rows = vec![scorer.row(
            Method::Nl,
            None,
            scorer.eer(Method::Nl, &scorer.artifacts())?,
        )];
        for &p in proportions {
            let stats = scorer.mdt_stats(p)?;
            let mut art = scorer.artifacts();
            art.mdt_stats = Some(&stats);
            rows.push(scorer.row(Method::Mdt, Some(p), scorer.eer(Method::Mdt, &art)?));
        }
        Ok(rows)
    })?;
    Ok(ResultTable {
        kind: TableKind::LabelSweep,
        rows: rows.into_iter().flatten().collect(),
    })
}

/// Retrains every artifact on nested subsets of the training speakers and
/// reports each method on every mismatched pair.
pub fn run_table3_sweep(
    split: &SplitCorpus,
    speaker_counts: &[usize],
    methods: &[Method],
    cfg: &ExperimentConfig,
) -> Result<ResultTable> {
    let mut rows = Vec::new();
    for &count in speaker_counts {
        let train = split.train_subset(count)?;
        let trained = Trained::new(&train, cfg)?;
        let mismatched: Vec<(usize, usize)> =
            split.pairs().into_iter().filter(|(a, b)| a != b).collect();
        let cells = map_pairs(mismatched, cfg.parallel, |pair| {
            CaseScorer::new(split, &train, &trained, cfg, pair)?.methods(methods)
        })?;
        rows.extend(cells.into_iter().flatten());
    }
    let order = |r: &ResultRow| methods.iter().position(|m| *m == r.method);
    // group by method, keeping case and count order within a method
    rows.sort_by_key(|r| order(r));
    Ok(ResultTable {
        kind: TableKind::SpeakerSweep,
        rows,
    })
}
