//! Agreement and provenance statistics, recomputed from assessments on
//! every call.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{EvaluationType, EvaluatorKind, Payload, PairChoice, Scenario, ScenarioSource, Verdict};
use crate::prompt::PromptVersion;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("no unit has two or more ratings")]
    InsufficientData,
    #[error("alpha undefined: all values identical, agreement trivially perfect")]
    DegenerateData,
    #[error("values mix numbers and labels, or labels under a non-nominal metric")]
    MixedValues,
    #[error("unknown dimension {0}")]
    UnknownDimension(String),
    #[error("scenario has no provenance links")]
    NoProvenance,
    #[error("report needs a {expected} scenario, got {got}")]
    WrongKind { expected: &'static str, got: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Nominal,
    Ordinal,
    Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorFilter {
    Combined,
    HumansOnly,
    LlmsOnly,
}

impl EvaluatorFilter {
    pub fn admits(&self, kind: EvaluatorKind) -> bool {
        match self {
            EvaluatorFilter::Combined => true,
            EvaluatorFilter::HumansOnly => kind == EvaluatorKind::Human,
            EvaluatorFilter::LlmsOnly => kind == EvaluatorKind::Llm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatingValue {
    Number(f64),
    Label(String),
}

impl From<f64> for RatingValue {
    fn from(v: f64) -> Self {
        RatingValue::Number(v)
    }
}

impl From<i64> for RatingValue {
    fn from(v: i64) -> Self {
        RatingValue::Number(v as f64)
    }
}

impl From<&str> for RatingValue {
    fn from(v: &str) -> Self {
        RatingValue::Label(v.to_string())
    }
}

fn value_cmp(a: &RatingValue, b: &RatingValue) -> Ordering {
    match (a, b) {
        (RatingValue::Number(x), RatingValue::Number(y)) => x.total_cmp(y),
        (RatingValue::Label(x), RatingValue::Label(y)) => x.cmp(y),
        (RatingValue::Number(_), RatingValue::Label(_)) => Ordering::Less,
        (RatingValue::Label(_), RatingValue::Number(_)) => Ordering::Greater,
    }
}

/// unit → evaluator → value, with the distance metric to apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityInput {
    pub units: BTreeMap<String, BTreeMap<String, RatingValue>>,
    pub metric: Metric,
}

impl ReliabilityInput {
    pub fn new(metric: Metric) -> Self {
        ReliabilityInput {
            units: BTreeMap::new(),
            metric,
        }
    }

    pub fn add(&mut self, unit: impl Into<String>, evaluator: impl Into<String>, value: impl Into<RatingValue>) {
        self.units
            .entry(unit.into())
            .or_default()
            .insert(evaluator.into(), value.into());
    }

    /// Builds an input from a units × coders table; `None` marks a missing
    /// value.
    pub fn from_table(metric: Metric, rows: &[Vec<Option<f64>>]) -> Self {
        let mut input = ReliabilityInput::new(metric);
        for (u, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    input.add(format!("u{u:04}"), format!("c{c:04}"), *v);
                }
            }
        }
        input
    }

    /// Units with at least two values.
    pub fn pairable_units(&self) -> usize {
        self.units.values().filter(|m| m.len() >= 2).count()
    }

    pub fn evaluators(&self) -> BTreeSet<&str> {
        self.units.values().flat_map(|m| m.keys().map(String::as_str)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceMatrix {
    /// Distinct values in ascending order.
    pub values: Vec<RatingValue>,
    /// `cells[c][k]`, indexed like `values`.
    pub cells: Vec<Vec<f64>>,
    pub n: f64,
}

impl CoincidenceMatrix {
    pub fn margins(&self) -> Vec<f64> {
        self.cells.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn cell(&self, c: &RatingValue, k: &RatingValue) -> f64 {
        let i = self.values.iter().position(|v| v == c);
        let j = self.values.iter().position(|v| v == k);
        match (i, j) {
            (Some(i), Some(j)) => self.cells[i][j],
            _ => 0.0,
        }
    }
}

pub fn coincidence_matrix(input: &ReliabilityInput) -> Result<CoincidenceMatrix, AnalyticsError> {
    let included: Vec<Vec<&RatingValue>> = input
        .units
        .values()
        .filter(|m| m.len() >= 2)
        .map(|m| m.values().collect())
        .collect();
    if included.is_empty() {
        return Err(AnalyticsError::InsufficientData);
    }
    let mut values: Vec<RatingValue> = Vec::new();
    for v in included.iter().flatten() {
        if !values.contains(v) {
            values.push((*v).clone());
        }
    }
    let numbers = values.iter().filter(|v| matches!(v, RatingValue::Number(_))).count();
    if numbers != 0 && numbers != values.len() {
        return Err(AnalyticsError::MixedValues);
    }
    if numbers == 0 && input.metric != Metric::Nominal {
        return Err(AnalyticsError::MixedValues);
    }
    values.sort_by(value_cmp);
    let index = |v: &RatingValue| values.iter().position(|x| x == v).expect("collected");

    let q = values.len();
    let mut cells = vec![vec![0.0; q]; q];
    let mut n = 0.0;
    for unit in &included {
        let m = unit.len();
        let w = 1.0 / (m as f64 - 1.0);
        n += m as f64;
        for (i, a) in unit.iter().enumerate() {
            for (j, b) in unit.iter().enumerate() {
                if i != j {
                    cells[index(a)][index(b)] += w;
                }
            }
        }
    }
    Ok(CoincidenceMatrix { values, cells, n })
}

fn delta_sq(metric: Metric, m: &CoincidenceMatrix, margins: &[f64], c: usize, k: usize) -> f64 {
    match metric {
        Metric::Nominal => {
            if c == k {
                0.0
            } else {
                1.0
            }
        }
        Metric::Interval => match (&m.values[c], &m.values[k]) {
            (RatingValue::Number(x), RatingValue::Number(y)) => (x - y) * (x - y),
            _ => unreachable!("checked when building the matrix"),
        },
        Metric::Ordinal => {
            let (lo, hi) = if c <= k { (c, k) } else { (k, c) };
            let span: f64 = margins[lo..=hi].iter().sum();
            let d = span - (margins[c] + margins[k]) / 2.0;
            d * d
        }
    }
}

/// Krippendorff's alpha, `1 - D_o / D_e`.
pub fn krippendorff_alpha(input: &ReliabilityInput) -> Result<f64, AnalyticsError> {
    let m = coincidence_matrix(input)?;
    let margins = m.margins();
    let q = m.values.len();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..q {
        for k in 0..q {
            if c == k {
                continue;
            }
            let d = delta_sq(input.metric, &m, &margins, c, k);
            observed += m.cells[c][k] * d;
            expected += margins[c] * margins[k] * d;
        }
    }
    if expected == 0.0 {
        return Err(AnalyticsError::DegenerateData);
    }
    let d_o = observed / m.n;
    let d_e = expected / (m.n * (m.n - 1.0));
    Ok(1.0 - d_o / d_e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AlphaOutcome {
    Defined {
        alpha: f64,
        n_units: usize,
        n_evaluators: usize,
    },
    InsufficientData {
        n_units: usize,
        n_evaluators: usize,
    },
    /// Every value identical: agreement is trivially perfect but alpha is
    /// undefined.
    Degenerate {
        n_units: usize,
        n_evaluators: usize,
    },
}

impl AlphaOutcome {
    pub fn alpha(&self) -> Option<f64> {
        match self {
            AlphaOutcome::Defined { alpha, .. } => Some(*alpha),
            _ => None,
        }
    }

    fn from_input(input: &ReliabilityInput) -> Result<Self, AnalyticsError> {
        let n_units = input.pairable_units();
        let n_evaluators = input.evaluators().len();
        match krippendorff_alpha(input) {
            Ok(alpha) => Ok(AlphaOutcome::Defined {
                alpha,
                n_units,
                n_evaluators,
            }),
            Err(AnalyticsError::InsufficientData) => Ok(AlphaOutcome::InsufficientData { n_units, n_evaluators }),
            Err(AnalyticsError::DegenerateData) => Ok(AlphaOutcome::Degenerate { n_units, n_evaluators }),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub scenario_id: String,
    pub facet: String,
    pub metric: Metric,
    pub assessments: usize,
    pub combined: AlphaOutcome,
    pub humans_only: AlphaOutcome,
    pub llms_only: AlphaOutcome,
}

/// Default facet and metric for a scenario type.
fn facet_and_metric(eval_type: &EvaluationType, facet: Option<&str>) -> Result<(String, Metric), AnalyticsError> {
    match eval_type {
        EvaluationType::Rating { dimensions } => {
            let name = match facet {
                Some(f) => f.to_string(),
                None => dimensions
                    .iter()
                    .find(|d| d.name == "overall")
                    .or(dimensions.first())
                    .map(|d| d.name.clone())
                    .unwrap_or_default(),
            };
            if !dimensions.iter().any(|d| d.name == name) {
                return Err(AnalyticsError::UnknownDimension(name));
            }
            Ok((name, Metric::Interval))
        }
        other => {
            let (name, metric) = match other {
                EvaluationType::BucketRanking { .. } => ("bucket", Metric::Ordinal),
                EvaluationType::Ranking => ("rank", Metric::Ordinal),
                EvaluationType::Categorical { .. } => ("label", Metric::Nominal),
                EvaluationType::Pairwise { .. } => ("choice", Metric::Nominal),
                _ => ("verdict", Metric::Nominal),
            };
            match facet {
                Some(f) if f != name => Err(AnalyticsError::UnknownDimension(f.to_string())),
                _ => Ok((name.to_string(), metric)),
            }
        }
    }
}

/// Reliability input for one facet of a scenario under an evaluator filter.
pub fn reliability_input(
    scenario: &Scenario,
    facet: &str,
    metric: Metric,
    filter: EvaluatorFilter,
) -> ReliabilityInput {
    let mut input = ReliabilityInput::new(metric);
    for a in scenario.all_assessments().filter(|a| filter.admits(a.evaluator_kind)) {
        let ev = a.evaluator_id.as_str();
        match (&scenario.eval_type, &a.payload) {
            (_, Payload::Rating { scores }) => {
                if let Some(v) = scores.get(facet) {
                    input.add(a.target_id.as_str(), ev, *v);
                }
            }
            (EvaluationType::BucketRanking { buckets }, Payload::Buckets { placements }) => {
                for p in placements {
                    if let Some(i) = buckets.iter().position(|b| *b == p.bucket) {
                        input.add(p.eval_item_id.as_str(), ev, i as f64);
                    }
                }
            }
            (_, Payload::Order { order }) => {
                for (i, id) in order.iter().enumerate() {
                    input.add(id.as_str(), ev, (i + 1) as f64);
                }
            }
            (_, Payload::Label { label }) => input.add(a.target_id.as_str(), ev, label.as_str()),
            (_, Payload::Choice { choice }) => {
                let c = match choice {
                    PairChoice::A => "A",
                    PairChoice::B => "B",
                    PairChoice::Tie => "tie",
                };
                input.add(a.target_id.as_str(), ev, c);
            }
            (_, Payload::Authenticity { verdict }) => {
                let v = match verdict {
                    Verdict::Authentic => "authentic",
                    Verdict::Generated => "generated",
                };
                input.add(a.target_id.as_str(), ev, v);
            }
            _ => {}
        }
    }
    input
}

/// Alpha over all evaluators, humans only and LLMs only. Each filter is
/// computed from the raw assessments it admits.
pub fn agreement_report(
    scenario: &Scenario,
    facet: Option<&str>,
    metric: Option<Metric>,
) -> Result<AgreementReport, AnalyticsError> {
    let (facet, default_metric) = facet_and_metric(&scenario.eval_type, facet)?;
    let metric = metric.unwrap_or(default_metric);
    let outcome = |filter| AlphaOutcome::from_input(&reliability_input(scenario, &facet, metric, filter));
    Ok(AgreementReport {
        scenario_id: scenario.scenario_id.clone(),
        assessments: scenario.assessment_count(),
        combined: outcome(EvaluatorFilter::Combined)?,
        humans_only: outcome(EvaluatorFilter::HumansOnly)?,
        llms_only: outcome(EvaluatorFilter::LlmsOnly)?,
        facet,
        metric,
    })
}

// ---------------------------------------------------------------------------
// Provenance

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Combination {
    pub model_id: String,
    pub prompt: PromptVersion,
}

impl Combination {
    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.model_id, self.prompt.doc_id, self.prompt.key())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitRate {
    pub hits: u64,
    pub total: u64,
}

impl HitRate {
    pub fn as_f64(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }

    /// Exact comparison by cross-multiplication.
    pub fn cmp_exact(&self, other: &HitRate) -> Ordering {
        (self.hits as u128 * other.total as u128).cmp(&(other.hits as u128 * self.total as u128))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinationStats {
    pub combination: Combination,
    pub top_bucket_hits: u64,
    pub total: u64,
    pub hit_rate: HitRate,
    /// Bucket label → count, in configured bucket order.
    pub bucket_distribution: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceReport {
    pub scenario_id: String,
    pub buckets: Vec<String>,
    /// Best first.
    pub ranking: Vec<CombinationStats>,
}

impl ProvenanceReport {
    pub fn best(&self) -> Option<&CombinationStats> {
        self.ranking.first()
    }

    pub fn csv_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["model_id", "doc_id", "prompt_version_label", "total", "top_bucket_hits", "hit_rate"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend(self.buckets.iter().cloned());
        cols
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.csv_columns()).expect("in-memory write");
        for s in &self.ranking {
            let mut row = vec![
                s.combination.model_id.clone(),
                s.combination.prompt.doc_id.clone(),
                s.combination.prompt.version_label.clone(),
                s.total.to_string(),
                s.top_bucket_hits.to_string(),
                format!("{:.6}", s.hit_rate.as_f64()),
            ];
            row.extend(s.bucket_distribution.iter().map(|(_, n)| n.to_string()));
            w.write_record(&row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

fn combination_of(scenario: &Scenario, eval_item_id: &str) -> Option<Combination> {
    let p = scenario.item(eval_item_id)?.provenance.as_ref()?;
    Some(Combination {
        model_id: p.model_id.clone(),
        prompt: p.prompt.clone(),
    })
}

fn require_provenance(scenario: &Scenario) -> Result<(), AnalyticsError> {
    let linked = matches!(scenario.source, ScenarioSource::Batch { .. })
        && scenario.items.iter().all(|i| i.provenance.is_some());
    if linked {
        Ok(())
    } else {
        Err(AnalyticsError::NoProvenance)
    }
}

/// Top-bucket hit rate and bucket distribution per model–prompt
/// combination, counted per assessment placement. Combinations without any
/// placement are omitted.
pub fn provenance_report(scenario: &Scenario) -> Result<ProvenanceReport, AnalyticsError> {
    let EvaluationType::BucketRanking { buckets } = &scenario.eval_type else {
        return Err(AnalyticsError::WrongKind {
            expected: "bucket_ranking",
            got: scenario.eval_type.kind_name(),
        });
    };
    require_provenance(scenario)?;
    let mut counts: BTreeMap<Combination, Vec<u64>> = BTreeMap::new();
    for a in scenario.all_assessments() {
        let Payload::Buckets { placements } = &a.payload else { continue };
        for p in placements {
            let (Some(combo), Some(b)) = (
                combination_of(scenario, &p.eval_item_id),
                buckets.iter().position(|x| *x == p.bucket),
            ) else {
                continue;
            };
            counts.entry(combo).or_insert_with(|| vec![0; buckets.len()])[b] += 1;
        }
    }
    let mut ranking: Vec<CombinationStats> = counts
        .into_iter()
        .map(|(combination, dist)| {
            let total: u64 = dist.iter().sum();
            let hits = dist[0];
            CombinationStats {
                combination,
                top_bucket_hits: hits,
                total,
                hit_rate: HitRate { hits, total },
                bucket_distribution: buckets.iter().cloned().zip(dist).collect(),
            }
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.hit_rate
            .cmp_exact(&a.hit_rate)
            .then(b.total.cmp(&a.total))
            .then_with(|| a.combination.key().cmp(&b.combination.key()))
    });
    Ok(ProvenanceReport {
        scenario_id: scenario.scenario_id.clone(),
        buckets: buckets.clone(),
        ranking,
    })
}

/// Win-rate and mean-rank summary for pairwise and ranking scenarios. These
/// are descriptive tallies, not reliability coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonStats {
    pub combination: Combination,
    pub appearances: u64,
    pub wins: u64,
    pub ties: u64,
    /// Wins over decided comparisons (pairwise only).
    pub win_rate: Option<f64>,
    /// Mean 1-based position (ranking only).
    pub mean_rank: Option<f64>,
}

pub fn comparison_summary(scenario: &Scenario) -> Result<Vec<ComparisonStats>, AnalyticsError> {
    let pairwise = match scenario.eval_type {
        EvaluationType::Pairwise { .. } => true,
        EvaluationType::Ranking => false,
        ref other => {
            return Err(AnalyticsError::WrongKind {
                expected: "pairwise or ranking",
                got: other.kind_name(),
            })
        }
    };
    require_provenance(scenario)?;
    // appearances, wins, ties, rank sum
    let mut acc: BTreeMap<Combination, (u64, u64, u64, u64)> = BTreeMap::new();
    for a in scenario.all_assessments() {
        match &a.payload {
            Payload::Choice { choice } => {
                let Some(g) = scenario.group(&a.target_id) else { continue };
                for (i, m) in g.members.iter().enumerate() {
                    let Some(c) = combination_of(scenario, m) else { continue };
                    let e = acc.entry(c).or_default();
                    e.0 += 1;
                    match (choice, i) {
                        (PairChoice::Tie, _) => e.2 += 1,
                        (PairChoice::A, 0) | (PairChoice::B, 1) => e.1 += 1,
                        _ => {}
                    }
                }
            }
            Payload::Order { order } => {
                for (i, m) in order.iter().enumerate() {
                    let Some(c) = combination_of(scenario, m) else { continue };
                    let e = acc.entry(c).or_default();
                    e.0 += 1;
                    e.3 += i as u64 + 1;
                }
            }
            _ => {}
        }
    }
    Ok(acc
        .into_iter()
        .map(|(combination, (n, wins, ties, rank_sum))| {
            let decided = n - ties;
            ComparisonStats {
                combination,
                appearances: n,
                wins,
                ties,
                win_rate: (pairwise && decided > 0).then(|| wins as f64 / decided as f64),
                mean_rank: (!pairwise && n > 0).then(|| rank_sum as f64 / n as f64),
            }
        })
        .collect())
}
