//! Splits, per-episode metrics, aggregation, and rank-based statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::scenario::{QuestionRef, Scenario, Subtask};
use crate::transcript::Transcript;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cause {cause_id:?} has {wordings} wordings; at least 3 are needed for a train/validation/test split")]
    TooFewWordings { cause_id: String, wordings: usize },
    #[error("transcript of {0} has not terminated")]
    NotTerminal(String),
    #[error("scenario has no key questions")]
    NoKeyQuestions,
    #[error("{0}")]
    Input(String),
    #[error("results file: {0}")]
    Csv(#[from] csv::Error),
    #[error("results file: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: Vec<Subtask>,
    pub validation: Vec<Subtask>,
    pub test: Vec<Subtask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitSpec {
    pub fn get(&self, name: SplitName) -> &[Subtask] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn extend(&mut self, other: SplitSpec) {
        self.train.extend(other.train);
        self.validation.extend(other.validation);
        self.test.extend(other.test);
    }
}

/// Sizes `(train, validation, test)` for `w` wordings: 80% rounded up to train, capped so
/// validation and test keep one wording each, the rest halved with validation taking the
/// odd one.
pub fn split_sizes(w: usize) -> Option<(usize, usize, usize)> {
    if w < 3 {
        return None;
    }
    let train = ((4 * w).div_ceil(5)).min(w - 2);
    let rest = w - train;
    let validation = rest.div_ceil(2);
    Some((train, validation, rest - validation))
}

/// Per cause: shuffles the wording indices with `seed` and cuts them by [`split_sizes`].
pub fn make_splits(scenario: &Scenario, seed: u64) -> Result<SplitSpec, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = SplitSpec {
        seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for cause in &scenario.causes {
        let w = cause.wording_count();
        let (n_train, n_val, _) = split_sizes(w).ok_or_else(|| EvalError::TooFewWordings {
            cause_id: cause.cause_id.clone(),
            wordings: w,
        })?;
        let mut order: Vec<usize> = (0..w).collect();
        order.shuffle(&mut rng);
        let subtask = |i: usize| Subtask {
            scenario_id: scenario.patient_id.clone(),
            cause_id: cause.cause_id.clone(),
            wording_index: i,
        };
        for (pos, &i) in order.iter().enumerate() {
            let bucket = if pos < n_train {
                &mut spec.train
            } else if pos < n_train + n_val {
                &mut spec.validation
            } else {
                &mut spec.test
            };
            bucket.push(subtask(i));
        }
    }
    for set in [&mut spec.train, &mut spec.validation, &mut spec.test] {
        set.sort();
    }
    Ok(spec)
}

/// Splits of several scenarios, each seeded with the same seed.
pub fn make_corpus_splits(scenarios: &[Scenario], seed: u64) -> Result<SplitSpec, EvalError> {
    let mut all = SplitSpec {
        seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for s in scenarios {
        all.extend(make_splits(s, seed)?);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub subtask: Subtask,
    pub posttest: u8,
    pub trajectory_quality: f64,
    pub combined: f64,
    pub steps: usize,
}

/// Fraction of distinct key questions that were asked.
pub fn trajectory_quality(transcript: &Transcript, key_questions: &[QuestionRef]) -> Result<f64, EvalError> {
    if key_questions.is_empty() {
        return Err(EvalError::NoKeyQuestions);
    }
    let asked = transcript.asked_questions();
    let hits = key_questions.iter().filter(|q| asked.contains(*q)).count();
    Ok(hits as f64 / key_questions.len() as f64)
}

/// 1 iff the posttest choice matched the true cause; step-cap terminations score 0.
pub fn posttest_score(transcript: &Transcript) -> Result<u8, EvalError> {
    let outcome = transcript
        .outcome
        .as_ref()
        .ok_or_else(|| EvalError::NotTerminal(transcript.subtask.to_string()))?;
    Ok(u8::from(outcome.correct))
}

pub fn score_card(transcript: &Transcript, scenario: &Scenario) -> Result<ScoreCard, EvalError> {
    let posttest = posttest_score(transcript)?;
    let trajectory_quality = trajectory_quality(transcript, &scenario.key_questions)?;
    Ok(ScoreCard {
        subtask: transcript.subtask.clone(),
        posttest,
        trajectory_quality,
        combined: f64::from(posttest) * trajectory_quality,
        steps: transcript.steps.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Overall,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub group: String,
    pub count: usize,
    pub posttest: f64,
    pub trajectory_quality: f64,
    pub combined: f64,
}

pub fn aggregate(cards: &[ScoreCard], by: GroupBy) -> Result<Vec<AggregateRow>, EvalError> {
    if cards.is_empty() {
        return Err(EvalError::Input("no score cards to aggregate".into()));
    }
    let mut groups: BTreeMap<String, Vec<&ScoreCard>> = BTreeMap::new();
    for c in cards {
        let key = match by {
            GroupBy::Overall => "overall".to_string(),
            GroupBy::Patient => c.subtask.scenario_id.clone(),
        };
        groups.entry(key).or_default().push(c);
    }
    Ok(groups
        .into_iter()
        .map(|(group, cs)| {
            let n = cs.len() as f64;
            let mean = |f: fn(&ScoreCard) -> f64| cs.iter().map(|c| f(c)).sum::<f64>() / n;
            AggregateRow {
                group,
                count: cs.len(),
                posttest: mean(|c| f64::from(c.posttest)),
                trajectory_quality: mean(|c| c.trajectory_quality),
                combined: mean(|c| c.combined),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Rank statistics

/// Mid-ranks (1-based) of `values` and the sizes of every tie group.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

fn check_finite(values: &[f64]) -> Result<(), EvalError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EvalError::Input("non-finite value in test input".into()))
    }
}

/// Tie-corrected Kruskal–Wallis `H` and its chi-squared p-value with `groups - 1` df.
/// All-tied input yields `(0, 1)`.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<(f64, f64), EvalError> {
    if groups.len() < 2 {
        return Err(EvalError::Input("Kruskal-Wallis needs at least 2 groups".into()));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(EvalError::Input("Kruskal-Wallis groups must be non-empty".into()));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    check_finite(&all)?;
    let n = all.len() as f64;
    let (ranks, ties) = midranks(&all);
    let correction = 1.0 - tie_sum(&ties) / (n * n * n - n);
    if correction <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let center = (n + 1.0) / 2.0;
    let mut offset = 0;
    let mut between = 0.0;
    for g in groups {
        let mean_rank = ranks[offset..offset + g.len()].iter().sum::<f64>() / g.len() as f64;
        between += g.len() as f64 * (mean_rank - center).powi(2);
        offset += g.len();
    }
    let h = 12.0 / (n * (n + 1.0)) * between / correction;
    let df = (groups.len() - 1) as f64;
    let p = ChiSquared::new(df).expect("positive df").sf(h);
    Ok((h, p))
}

/// Two-sided Mann–Whitney test: `U = min(U_a, U_b)` and the normal-approximation p-value
/// with tie-corrected variance and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64), EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Input("Mann-Whitney samples must be non-empty".into()));
    }
    check_finite(a)?;
    check_finite(b)?;
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&all);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let rank_sum_a: f64 = ranks[..a.len()].iter().sum();
    let u_a = rank_sum_a - na * (na + 1.0) / 2.0;
    let u_b = na * nb - u_a;
    let u = u_a.min(u_b);
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - tie_sum(&ties) / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok((u, 1.0));
    }
    let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok((u, p))
}

/// Benjamini–Hochberg adjusted p-values, returned in input order.
pub fn bh_correct(pvals: &[f64]) -> Result<Vec<f64>, EvalError> {
    if let Some(bad) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(EvalError::Input(format!("p-value {bad} outside [0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        let rank = (pos + 1) as f64;
        running = running.min((m as f64 / rank * pvals[i]).min(1.0));
        adjusted[i] = running;
    }
    Ok(adjusted)
}

// ---------------------------------------------------------------------------
// Results files

pub const RESULTS_HEADER: [&str; 9] = [
    "agent",
    "patient",
    "cause_id",
    "wording",
    "posttest",
    "trajectory_quality",
    "combined",
    "steps",
    "trial",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub agent: String,
    pub patient: String,
    pub cause_id: String,
    pub wording: usize,
    pub posttest: u8,
    pub trajectory_quality: f64,
    pub combined: f64,
    pub steps: usize,
    pub trial: usize,
}

impl ResultRow {
    pub fn new(agent: &str, card: &ScoreCard, trial: usize) -> Self {
        ResultRow {
            agent: agent.to_string(),
            patient: card.subtask.scenario_id.clone(),
            cause_id: card.subtask.cause_id.clone(),
            wording: card.subtask.wording_index,
            posttest: card.posttest,
            trajectory_quality: card.trajectory_quality,
            combined: card.combined,
            steps: card.steps,
            trial,
        }
    }

    pub fn card(&self) -> ScoreCard {
        ScoreCard {
            subtask: Subtask {
                scenario_id: self.patient.clone(),
                cause_id: self.cause_id.clone(),
                wording_index: self.wording,
            },
            posttest: self.posttest,
            trajectory_quality: self.trajectory_quality,
            combined: self.combined,
            steps: self.steps,
        }
    }
}

pub fn write_results<W: io::Write>(rows: &[ResultRow], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(RESULTS_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: io::Read>(input: R) -> Result<Vec<ResultRow>, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(EvalError::Input(format!("unexpected results header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(EvalError::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Posttest,
    TrajectoryQuality,
    Combined,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Posttest, Metric::TrajectoryQuality, Metric::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Posttest => "posttest",
            Metric::TrajectoryQuality => "trajectory_quality",
            Metric::Combined => "combined",
        }
    }

    pub fn of(self, row: &ResultRow) -> f64 {
        match self {
            Metric::Posttest => f64::from(row.posttest),
            Metric::TrajectoryQuality => row.trajectory_quality,
            Metric::Combined => row.combined,
        }
    }
}

/// Per-agent means plus, for two or more agents, a Kruskal–Wallis test and pairwise
/// Mann–Whitney tests with Benjamini–Hochberg adjustment, for every metric.
pub fn stats_report(rows: &[ResultRow]) -> Result<String, EvalError> {
    let mut agents: Vec<&str> = Vec::new();
    for r in rows {
        if !agents.contains(&r.agent.as_str()) {
            agents.push(&r.agent);
        }
    }
    let mut out = String::new();
    writeln!(out, "# unit of analysis: per-subtask scores (best trial per subtask)").unwrap();
    writeln!(out, "# agents: {}", agents.join(", ")).unwrap();
    for agent in &agents {
        let cards: Vec<ScoreCard> = rows.iter().filter(|r| r.agent == *agent).map(ResultRow::card).collect();
        for row in aggregate(&cards, GroupBy::Overall)?.into_iter().chain(aggregate(&cards, GroupBy::Patient)?) {
            writeln!(
                out,
                "mean agent={agent} group={} n={} posttest={:.4} trajectory_quality={:.4} combined={:.4}",
                row.group, row.count, row.posttest, row.trajectory_quality, row.combined
            )
            .unwrap();
        }
    }
    if agents.len() < 2 {
        return Ok(out);
    }
    for metric in Metric::ALL {
        let samples: Vec<Vec<f64>> = agents
            .iter()
            .map(|a| rows.iter().filter(|r| r.agent == *a).map(|r| metric.of(r)).collect())
            .collect();
        let (h, p) = kruskal_wallis(&samples)?;
        writeln!(out, "kruskal_wallis metric={} H={h:.6} p={p:.6e}", metric.name()).unwrap();
        let mut pairs = Vec::new();
        for i in 0..agents.len() {
            for j in i + 1..agents.len() {
                let (u, p) = mann_whitney_u(&samples[i], &samples[j])?;
                pairs.push((i, j, u, p));
            }
        }
        let raw: Vec<f64> = pairs.iter().map(|p| p.3).collect();
        let adjusted = bh_correct(&raw)?;
        for ((i, j, u, p), adj) in pairs.iter().zip(adjusted) {
            writeln!(
                out,
                "mann_whitney metric={} a={} b={} U={u} p_raw={p:.6e} p_bh={adj:.6e}",
                metric.name(),
                agents[*i],
                agents[*j]
            )
            .unwrap();
        }
    }
    Ok(out)
}
