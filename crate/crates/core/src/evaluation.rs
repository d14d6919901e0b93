//! Evaluation scenarios, evaluator assignment and blinded presentation.
//!
//! Evaluators only ever see [`Presentation`] values: an opaque id, the text
//! under review and the type configuration. Provenance links stay on the
//! [`EvalItem`] and are only reachable through owner-side analytics.
//!
//! Comparison kinds (bucket ranking, ranking, pairwise) are assessed per
//! group: the assignment target is the group and the payload covers every
//! member.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{substitute, PromptVersion};
use crate::provider::{CompletionRequest, Gateway, GenerationParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("scenario has no items")]
    EmptyItems,
    #[error("group {0} has fewer than two items")]
    GroupTooSmall(String),
    #[error("group {group} has {size} items, expected {expected}")]
    GroupSizeMismatch {
        group: String,
        size: usize,
        expected: usize,
    },
    #[error("item {0} has no group")]
    MissingGroup(usize),
    #[error("invalid evaluation type: {0}")]
    InvalidType(String),
    #[error("k={k} exceeds {evaluators} evaluators")]
    KTooLarge { k: usize, evaluators: usize },
    #[error("invalid evaluators: {0}")]
    InvalidEvaluators(String),
    #[error("evaluator {evaluator} is not assigned {target}")]
    NotAssigned { evaluator: String, target: String },
    #[error("scenario is closed")]
    ScenarioClosed,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("invalid rubric: {0}")]
    InvalidRubric(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub scale_min: i64,
    pub scale_max: i64,
    #[serde(default)]
    pub labels: Vec<String>,
}

impl Dimension {
    pub fn likert(name: &str, min: i64, max: i64) -> Self {
        Dimension {
            name: name.into(),
            scale_min: min,
            scale_max: max,
            labels: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluationType {
    Rating { dimensions: Vec<Dimension> },
    /// Ordered bucket labels, best first.
    BucketRanking { buckets: Vec<String> },
    Ranking,
    Categorical { labels: Vec<String> },
    Pairwise { allow_tie: bool },
    Authenticity,
}

impl EvaluationType {
    /// Likert preset for judging a reply within an email thread.
    pub fn mail_rating() -> Self {
        EvaluationType::Rating {
            dimensions: ["empathy", "clarity", "appropriateness", "overall"]
                .iter()
                .map(|n| Dimension::likert(n, 1, 5))
                .collect(),
        }
    }

    pub fn default_buckets() -> Self {
        EvaluationType::BucketRanking {
            buckets: vec!["top".into(), "mid".into(), "low".into()],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EvaluationType::Rating { .. } => "rating",
            EvaluationType::BucketRanking { .. } => "bucket_ranking",
            EvaluationType::Ranking => "ranking",
            EvaluationType::Categorical { .. } => "categorical",
            EvaluationType::Pairwise { .. } => "pairwise",
            EvaluationType::Authenticity => "authenticity",
        }
    }

    pub fn is_group_kind(&self) -> bool {
        matches!(
            self,
            EvaluationType::BucketRanking { .. } | EvaluationType::Ranking | EvaluationType::Pairwise { .. }
        )
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidType(m.to_string()));
        let clean_label = |l: &String| !l.is_empty() && !l.contains(',') && !l.contains('\n') && l.trim() == l;
        match self {
            EvaluationType::Rating { dimensions } => {
                if dimensions.is_empty() {
                    return bad("rating needs at least one dimension");
                }
                let mut names = BTreeSet::new();
                for d in dimensions {
                    if d.scale_min >= d.scale_max {
                        return bad(&format!("dimension {} needs scale_min < scale_max", d.name));
                    }
                    if !crate::prompt::is_variable_name(&d.name) || !names.insert(&d.name) {
                        return bad(&format!("invalid or duplicate dimension name {:?}", d.name));
                    }
                }
            }
            EvaluationType::BucketRanking { buckets } => {
                if buckets.len() < 2 {
                    return bad("bucket ranking needs at least two buckets");
                }
                if !buckets.iter().all(clean_label) || buckets.iter().collect::<BTreeSet<_>>().len() != buckets.len() {
                    return bad("bucket labels must be unique, non-empty and comma-free");
                }
            }
            EvaluationType::Categorical { labels } => {
                if labels.len() < 2 {
                    return bad("categorical needs at least two labels");
                }
                if !labels.iter().all(clean_label) || labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
                    return bad("labels must be unique, non-empty and comma-free");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProvenanceLink {
    pub job_id: String,
    pub output_id: String,
    pub item_id: String,
    pub model_id: String,
    pub prompt: PromptVersion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewEvalItem {
    pub content: String,
    /// Caller-side group label; members sharing it are compared together.
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub provenance: Option<ProvenanceLink>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub eval_item_id: String,
    pub content: String,
    pub group_id: Option<String>,
    pub provenance: Option<ProvenanceLink>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalGroup {
    pub group_id: String,
    /// Member eval item ids in presentation order.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    Human,
    Llm,
}

impl EvaluatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvaluatorKind::Human => "human",
            EvaluatorKind::Llm => "llm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluator {
    pub evaluator_id: String,
    pub kind: EvaluatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

impl Evaluator {
    pub fn human(id: impl Into<String>) -> Self {
        Evaluator {
            evaluator_id: id.into(),
            kind: EvaluatorKind::Human,
            model_id: None,
        }
    }

    pub fn llm(id: impl Into<String>, model_id: impl Into<String>) -> Self {
        Evaluator {
            evaluator_id: id.into(),
            kind: EvaluatorKind::Llm,
            model_id: Some(model_id.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Coverage {
    All,
    KPerItem { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioState {
    Draft,
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioSource {
    Batch { job_id: String },
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairChoice {
    A,
    B,
    #[serde(rename = "tie")]
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Authentic,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketPlacement {
    pub eval_item_id: String,
    pub bucket: String,
    /// 1-based rank inside the bucket.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Rating { scores: BTreeMap<String, i64> },
    Buckets { placements: Vec<BucketPlacement> },
    /// Member ids, best first.
    Order { order: Vec<String> },
    Label { label: String },
    Choice { choice: PairChoice },
    Authenticity { verdict: Verdict },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub assessment_id: String,
    pub scenario_id: String,
    pub evaluator_id: String,
    pub evaluator_kind: EvaluatorKind,
    /// Eval item id, or group id for comparison kinds.
    pub target_id: String,
    pub payload: Payload,
    pub submitted_at: String,
}

/// Evaluator-facing view of one assignment target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub eval_item_id: String,
    /// Text under review. Empty for comparison kinds, whose candidates are
    /// carried in `group`.
    pub content: String,
    pub config: EvaluationType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Vec<Peer>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peer {
    pub eval_item_id: String,
    pub content: String,
}

fn opaque_id(prefix: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    format!("{prefix}-{}", &hex::encode(h.finalize())[..12])
}

fn seeded_rng(parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub owner: String,
    pub source: ScenarioSource,
    pub eval_type: EvaluationType,
    pub items: Vec<EvalItem>,
    pub groups: Vec<EvalGroup>,
    pub evaluators: Vec<Evaluator>,
    pub coverage: Option<Coverage>,
    /// evaluator id → targets in assignment order.
    pub assignments: BTreeMap<String, Vec<String>>,
    pub state: ScenarioState,
    /// evaluator id → target id → latest assessment.
    pub assessments: BTreeMap<String, BTreeMap<String, Assessment>>,
    #[serde(default)]
    pub submissions: u64,
}

impl Scenario {
    pub fn create(
        scenario_id: impl Into<String>,
        owner: impl Into<String>,
        source: ScenarioSource,
        items: Vec<NewEvalItem>,
        eval_type: EvaluationType,
    ) -> Result<Scenario, EvalError> {
        let scenario_id = scenario_id.into();
        if items.is_empty() {
            return Err(EvalError::EmptyItems);
        }
        eval_type.validate()?;
        let grouped = eval_type.is_group_kind();

        let mut eval_items = Vec::with_capacity(items.len());
        let mut group_labels: Vec<String> = Vec::new();
        let mut members: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, item) in items.into_iter().enumerate() {
            let eval_item_id = opaque_id("ei", &[&scenario_id, &i.to_string()]);
            let group_id = if grouped {
                let label = item.group.clone().ok_or(EvalError::MissingGroup(i))?;
                if !members.contains_key(&label) {
                    group_labels.push(label.clone());
                }
                members.entry(label.clone()).or_default().push(eval_item_id.clone());
                Some(label)
            } else {
                None
            };
            eval_items.push(EvalItem {
                eval_item_id,
                content: item.content,
                group_id,
                provenance: item.provenance,
            });
        }

        let mut groups = Vec::new();
        let mut label_to_id = BTreeMap::new();
        for label in &group_labels {
            let mut m = members.remove(label).unwrap_or_default();
            if m.len() < 2 {
                return Err(EvalError::GroupTooSmall(label.clone()));
            }
            if matches!(eval_type, EvaluationType::Pairwise { .. }) && m.len() != 2 {
                return Err(EvalError::GroupSizeMismatch {
                    group: label.clone(),
                    size: m.len(),
                    expected: 2,
                });
            }
            let group_id = opaque_id("eg", &[&scenario_id, label]);
            // Position within a comparison is randomized once per scenario.
            m.shuffle(&mut seeded_rng(&[&scenario_id, "group-order", label]));
            label_to_id.insert(label.clone(), group_id.clone());
            groups.push(EvalGroup { group_id, members: m });
        }
        for item in &mut eval_items {
            if let Some(label) = item.group_id.take() {
                item.group_id = label_to_id.get(&label).cloned();
            }
        }

        Ok(Scenario {
            scenario_id,
            owner: owner.into(),
            source,
            eval_type,
            items: eval_items,
            groups,
            evaluators: Vec::new(),
            coverage: None,
            assignments: BTreeMap::new(),
            state: ScenarioState::Draft,
            assessments: BTreeMap::new(),
            submissions: 0,
        })
    }

    /// Assignment targets in item order: item ids, or group ids for
    /// comparison kinds.
    pub fn targets(&self) -> Vec<String> {
        if self.eval_type.is_group_kind() {
            self.groups.iter().map(|g| g.group_id.clone()).collect()
        } else {
            self.items.iter().map(|i| i.eval_item_id.clone()).collect()
        }
    }

    pub fn item(&self, eval_item_id: &str) -> Option<&EvalItem> {
        self.items.iter().find(|i| i.eval_item_id == eval_item_id)
    }

    pub fn group(&self, group_id: &str) -> Option<&EvalGroup> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    pub fn evaluator(&self, evaluator_id: &str) -> Option<&Evaluator> {
        self.evaluators.iter().find(|e| e.evaluator_id == evaluator_id)
    }

    /// Distributes targets over evaluators and opens the scenario.
    pub fn assign(&mut self, evaluators: Vec<Evaluator>, coverage: Coverage) -> Result<(), EvalError> {
        if self.state != ScenarioState::Draft {
            return Err(EvalError::InvalidState("scenario already assigned".into()));
        }
        self.assignments = compute_assignments(&self.targets(), &evaluators, coverage)?;
        self.evaluators = evaluators;
        self.coverage = Some(coverage);
        self.state = ScenarioState::Open;
        Ok(())
    }

    pub fn close(&mut self) {
        self.state = ScenarioState::Closed;
    }

    fn presentation(&self, target: &str) -> Presentation {
        match self.group(target) {
            Some(g) => Presentation {
                eval_item_id: g.group_id.clone(),
                content: String::new(),
                config: self.eval_type.clone(),
                group: Some(
                    g.members
                        .iter()
                        .map(|m| Peer {
                            eval_item_id: m.clone(),
                            content: self.item(m).map(|i| i.content.clone()).unwrap_or_default(),
                        })
                        .collect(),
                ),
            },
            None => Presentation {
                eval_item_id: target.to_string(),
                content: self.item(target).map(|i| i.content.clone()).unwrap_or_default(),
                config: self.eval_type.clone(),
                group: None,
            },
        }
    }

    /// The evaluator's assigned targets in a stable per-evaluator shuffled
    /// order, stripped of provenance.
    pub fn presentation_queue(&self, evaluator_id: &str) -> Result<Vec<Presentation>, EvalError> {
        if self.state == ScenarioState::Closed {
            return Err(EvalError::ScenarioClosed);
        }
        let targets = self.assignments.get(evaluator_id).ok_or_else(|| EvalError::NotAssigned {
            evaluator: evaluator_id.to_string(),
            target: "*".into(),
        })?;
        let order = presentation_order(&self.scenario_id, evaluator_id, targets.len());
        Ok(order.into_iter().map(|i| self.presentation(&targets[i])).collect())
    }

    pub fn is_assigned(&self, evaluator_id: &str, target: &str) -> bool {
        self.assignments
            .get(evaluator_id)
            .is_some_and(|t| t.iter().any(|x| x == target))
    }

    /// Checks a payload against the type config and the target.
    pub fn validate_payload(&self, target: &str, payload: &Payload) -> Result<(), EvalError> {
        validate_payload(&self.eval_type, self.group(target), payload)
    }

    /// Records an assessment, replacing any earlier one by the same
    /// evaluator on the same target.
    pub fn submit(
        &mut self,
        evaluator_id: &str,
        target: &str,
        payload: Payload,
        submitted_at: &str,
    ) -> Result<Assessment, EvalError> {
        let assessment = self.check_submission(evaluator_id, target, payload, submitted_at)?;
        self.store(assessment.clone());
        Ok(assessment)
    }

    /// Validates a submission without storing it.
    pub fn check_submission(
        &self,
        evaluator_id: &str,
        target: &str,
        payload: Payload,
        submitted_at: &str,
    ) -> Result<Assessment, EvalError> {
        match self.state {
            ScenarioState::Closed => return Err(EvalError::ScenarioClosed),
            ScenarioState::Draft => {
                return Err(EvalError::NotAssigned {
                    evaluator: evaluator_id.into(),
                    target: target.into(),
                })
            }
            ScenarioState::Open => {}
        }
        if !self.is_assigned(evaluator_id, target) {
            return Err(EvalError::NotAssigned {
                evaluator: evaluator_id.into(),
                target: target.into(),
            });
        }
        self.validate_payload(target, &payload)?;
        let kind = self
            .evaluator(evaluator_id)
            .map(|e| e.kind)
            .unwrap_or(EvaluatorKind::Human);
        Ok(Assessment {
            assessment_id: format!("{}-a{:06}", self.scenario_id, self.submissions + 1),
            scenario_id: self.scenario_id.clone(),
            evaluator_id: evaluator_id.into(),
            evaluator_kind: kind,
            target_id: target.into(),
            payload,
            submitted_at: submitted_at.into(),
        })
    }

    /// Stores an already-validated assessment.
    pub fn store(&mut self, assessment: Assessment) {
        self.submissions += 1;
        self.assessments
            .entry(assessment.evaluator_id.clone())
            .or_default()
            .insert(assessment.target_id.clone(), assessment);
    }

    /// Current assessments, evaluator-major.
    pub fn all_assessments(&self) -> impl Iterator<Item = &Assessment> {
        self.assessments.values().flat_map(|m| m.values())
    }

    pub fn assessment_count(&self) -> usize {
        self.assessments.values().map(|m| m.len()).sum()
    }
}

/// Balanced distribution. Under `KPerItem(k)` each target goes, in order,
/// to the `k` evaluators with the smallest current load (ties by id).
pub fn compute_assignments(
    targets: &[String],
    evaluators: &[Evaluator],
    coverage: Coverage,
) -> Result<BTreeMap<String, Vec<String>>, EvalError> {
    if evaluators.is_empty() {
        return Err(EvalError::InvalidEvaluators("no evaluators".into()));
    }
    let mut ids = BTreeSet::new();
    for e in evaluators {
        if !ids.insert(e.evaluator_id.as_str()) {
            return Err(EvalError::InvalidEvaluators(format!("duplicate {}", e.evaluator_id)));
        }
        if e.kind == EvaluatorKind::Llm && e.model_id.is_none() {
            return Err(EvalError::InvalidEvaluators(format!("{} has no model", e.evaluator_id)));
        }
    }
    let mut out: BTreeMap<String, Vec<String>> =
        evaluators.iter().map(|e| (e.evaluator_id.clone(), Vec::new())).collect();
    match coverage {
        Coverage::All => {
            for list in out.values_mut() {
                list.extend(targets.iter().cloned());
            }
        }
        Coverage::KPerItem { k } => {
            if k == 0 {
                return Err(EvalError::InvalidEvaluators("k must be at least 1".into()));
            }
            if k > evaluators.len() {
                return Err(EvalError::KTooLarge {
                    k,
                    evaluators: evaluators.len(),
                });
            }
            for t in targets {
                let mut by_load: Vec<(usize, String)> =
                    out.iter().map(|(id, list)| (list.len(), id.clone())).collect();
                by_load.sort();
                for (_, id) in by_load.into_iter().take(k) {
                    out.get_mut(&id).expect("known evaluator").push(t.clone());
                }
            }
        }
    }
    Ok(out)
}

/// Permutation of `0..len` seeded by the scenario and evaluator ids.
pub fn presentation_order(scenario_id: &str, evaluator_id: &str, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeded_rng(&[scenario_id, evaluator_id]));
    order
}

fn validate_payload(eval_type: &EvaluationType, group: Option<&EvalGroup>, payload: &Payload) -> Result<(), EvalError> {
    let fail = |m: String| Err(EvalError::ValidationFailed(m));
    let members = || -> Result<&Vec<String>, EvalError> {
        group
            .map(|g| &g.members)
            .ok_or_else(|| EvalError::ValidationFailed("target is not a group".into()))
    };
    match (eval_type, payload) {
        (EvaluationType::Rating { dimensions }, Payload::Rating { scores }) => {
            for d in dimensions {
                match scores.get(&d.name) {
                    None => return fail(format!("missing score for {}", d.name)),
                    Some(v) if *v < d.scale_min || *v > d.scale_max => {
                        return fail(format!(
                            "{} score {v} outside {}..={}",
                            d.name, d.scale_min, d.scale_max
                        ))
                    }
                    _ => {}
                }
            }
            if let Some(extra) = scores.keys().find(|k| !dimensions.iter().any(|d| &d.name == *k)) {
                return fail(format!("unknown dimension {extra}"));
            }
        }
        (EvaluationType::BucketRanking { buckets }, Payload::Buckets { placements }) => {
            let members = members()?;
            let placed: BTreeSet<&str> = placements.iter().map(|p| p.eval_item_id.as_str()).collect();
            let expected: BTreeSet<&str> = members.iter().map(String::as_str).collect();
            if placed != expected || placements.len() != members.len() {
                return fail("placements must cover each group member exactly once".into());
            }
            let mut ranks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for p in placements {
                if !buckets.contains(&p.bucket) {
                    return fail(format!("unknown bucket {}", p.bucket));
                }
                ranks.entry(p.bucket.as_str()).or_default().push(p.rank);
            }
            for (bucket, mut r) in ranks {
                r.sort_unstable();
                if r != (1..=r.len()).collect::<Vec<_>>() {
                    return fail(format!("ranks in bucket {bucket} must be 1..={}", r.len()));
                }
            }
        }
        (EvaluationType::Ranking, Payload::Order { order }) => {
            let members = members()?;
            let mut a = order.clone();
            let mut b = members.clone();
            a.sort();
            b.sort();
            if a != b {
                return fail("order must be a permutation of the group".into());
            }
        }
        (EvaluationType::Categorical { labels }, Payload::Label { label }) => {
            if !labels.contains(label) {
                return fail(format!("unknown label {label}"));
            }
        }
        (EvaluationType::Pairwise { allow_tie }, Payload::Choice { choice }) => {
            members()?;
            if *choice == PairChoice::Tie && !allow_tie {
                return fail("ties are not allowed".into());
            }
        }
        (EvaluationType::Authenticity, Payload::Authenticity { .. }) => {}
        (t, _) => return fail(format!("payload does not match type {}", t.kind_name())),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// LLM evaluators

pub const DEFAULT_RUBRIC: &str = "You are an expert reviewer. Assess the text below.\n\n{{content}}{{candidates}}\n\n{{answer_format}}";

/// Answer-format section appended to rubric prompts. Each field is one
/// `- name: constraint` line; answers use one `name: value` line per field.
pub fn answer_format(eval_type: &EvaluationType, candidates: usize) -> String {
    let mut lines = vec!["Answer with exactly one line per field, formatted as `name: value`, and nothing else.".to_string(), "Fields:".to_string()];
    match eval_type {
        EvaluationType::Rating { dimensions } => {
            for d in dimensions {
                lines.push(format!("- {}: integer from {} to {}", d.name, d.scale_min, d.scale_max));
            }
        }
        EvaluationType::BucketRanking { buckets } => {
            for i in 1..=candidates {
                lines.push(format!("- candidate_{i}: one of {}", buckets.join(", ")));
            }
            lines.push("List candidates that share a bucket in order of preference, best first.".into());
        }
        EvaluationType::Ranking => {
            lines.push(format!(
                "- order: ordering of {candidates} candidates, best first, as comma-separated candidate numbers"
            ));
        }
        EvaluationType::Categorical { labels } => {
            lines.push(format!("- label: one of {}", labels.join(", ")));
        }
        EvaluationType::Pairwise { allow_tie } => {
            let opts = if *allow_tie { "A, B, tie" } else { "A, B" };
            lines.push(format!("- choice: one of {opts}"));
        }
        EvaluationType::Authenticity => {
            lines.push("- verdict: one of authentic, generated".into());
        }
    }
    lines.join("\n")
}

fn candidates_block(p: &Presentation) -> String {
    let Some(peers) = &p.group else {
        return String::new();
    };
    let pairwise = matches!(p.config, EvaluationType::Pairwise { .. });
    peers
        .iter()
        .enumerate()
        .map(|(i, peer)| {
            let name = if pairwise {
                ["A", "B"].get(i).map(|s| s.to_string()).unwrap_or_else(|| (i + 1).to_string())
            } else {
                (i + 1).to_string()
            };
            format!("Candidate {name}:\n{}", peer.content)
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Renders a rubric template for one presentation. Recognized variables:
/// `content`, `candidates` and `answer_format`.
pub fn render_rubric(rubric: &str, p: &Presentation) -> Result<String, EvalError> {
    let candidates = p.group.as_ref().map_or(0, |g| g.len());
    let bindings: BTreeMap<String, String> = [
        ("content".to_string(), p.content.clone()),
        ("candidates".to_string(), candidates_block(p)),
        ("answer_format".to_string(), answer_format(&p.config, candidates)),
    ]
    .into_iter()
    .collect();
    substitute(rubric, &bindings).map_err(|e| EvalError::InvalidRubric(e.to_string()))
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| format!("line without `name: value`: {line:?}"))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(format!("duplicate field {k}"));
        }
        out.push((k, v));
    }
    Ok(out)
}

fn expect_keys(fields: &[(String, String)], keys: &[String]) -> Result<(), String> {
    for (k, _) in fields {
        if !keys.contains(k) {
            return Err(format!("unexpected field {k}"));
        }
    }
    for k in keys {
        if !fields.iter().any(|(f, _)| f == k) {
            return Err(format!("missing field {k}"));
        }
    }
    Ok(())
}

/// Strict parser for LLM answers in the `name: value` format.
pub fn parse_answer(p: &Presentation, text: &str) -> Result<Payload, String> {
    let fields = parse_lines(text)?;
    let get = |k: &str| fields.iter().find(|(f, _)| f == k).map(|(_, v)| v.as_str());
    let peers = p.group.as_deref().unwrap_or(&[]);
    match &p.config {
        EvaluationType::Rating { dimensions } => {
            let keys: Vec<String> = dimensions.iter().map(|d| d.name.clone()).collect();
            expect_keys(&fields, &keys)?;
            let mut scores = BTreeMap::new();
            for d in dimensions {
                let v = get(&d.name).unwrap_or_default();
                let n: i64 = v.parse().map_err(|_| format!("{}: not an integer: {v:?}", d.name))?;
                scores.insert(d.name.clone(), n);
            }
            Ok(Payload::Rating { scores })
        }
        EvaluationType::BucketRanking { buckets } => {
            let keys: Vec<String> = (1..=peers.len()).map(|i| format!("candidate_{i}")).collect();
            expect_keys(&fields, &keys)?;
            let mut per_bucket: BTreeMap<String, usize> = BTreeMap::new();
            let mut placements = Vec::new();
            for (k, v) in &fields {
                if !buckets.contains(v) {
                    return Err(format!("{k}: unknown bucket {v:?}"));
                }
                let idx: usize = k["candidate_".len()..].parse().map_err(|_| format!("bad key {k}"))?;
                let rank = per_bucket.entry(v.clone()).or_insert(0);
                *rank += 1;
                placements.push(BucketPlacement {
                    eval_item_id: peers[idx - 1].eval_item_id.clone(),
                    bucket: v.clone(),
                    rank: *rank,
                });
            }
            Ok(Payload::Buckets { placements })
        }
        EvaluationType::Ranking => {
            expect_keys(&fields, &["order".to_string()])?;
            let mut order = Vec::new();
            for part in get("order").unwrap_or_default().split(',') {
                let i: usize = part.trim().parse().map_err(|_| format!("bad candidate number {part:?}"))?;
                let peer = peers.get(i.wrapping_sub(1)).ok_or_else(|| format!("no candidate {i}"))?;
                order.push(peer.eval_item_id.clone());
            }
            Ok(Payload::Order { order })
        }
        EvaluationType::Categorical { .. } => {
            expect_keys(&fields, &["label".to_string()])?;
            Ok(Payload::Label {
                label: get("label").unwrap_or_default().to_string(),
            })
        }
        EvaluationType::Pairwise { .. } => {
            expect_keys(&fields, &["choice".to_string()])?;
            let choice = match get("choice").unwrap_or_default() {
                "A" => PairChoice::A,
                "B" => PairChoice::B,
                "tie" => PairChoice::Tie,
                other => return Err(format!("bad choice {other:?}")),
            };
            Ok(Payload::Choice { choice })
        }
        EvaluationType::Authenticity => {
            expect_keys(&fields, &["verdict".to_string()])?;
            let verdict = match get("verdict").unwrap_or_default() {
                "authentic" => Verdict::Authentic,
                "generated" => Verdict::Generated,
                other => return Err(format!("bad verdict {other:?}")),
            };
            Ok(Payload::Authenticity { verdict })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTarget {
    pub target_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRunReport {
    pub submitted: Vec<Assessment>,
    pub skipped: Vec<SkippedTarget>,
}

/// Asks the model for one presentation. Parse or validation failures are
/// retried once.
pub fn llm_assess(
    gateway: &Gateway,
    model_id: &str,
    params: &GenerationParams,
    rubric: &str,
    p: &Presentation,
    validate: &dyn Fn(&Payload) -> Result<(), EvalError>,
) -> Result<Payload, String> {
    let prompt = render_rubric(rubric, p).map_err(|e| e.to_string())?;
    let req = CompletionRequest {
        model_id: model_id.to_string(),
        system: None,
        user: prompt,
        params: params.clone(),
    };
    let mut last = String::new();
    for _ in 0..2 {
        let out = gateway.complete(&req).map_err(|e| e.to_string())?;
        match parse_answer(p, &out.text).and_then(|pl| validate(&pl).map(|_| pl).map_err(|e| e.to_string())) {
            Ok(payload) => return Ok(payload),
            Err(e) => last = format!("unparseable answer: {e}"),
        }
    }
    Err(last)
}

/// Runs an LLM evaluator over its queue, submitting through `submit`
/// (the same path human submissions take). Per-item failures are reported
/// as skipped and never abort the run.
pub fn run_llm_evaluator(
    queue: &[Presentation],
    gateway: &Gateway,
    model_id: &str,
    params: &GenerationParams,
    rubric: &str,
    validate: &dyn Fn(&str, &Payload) -> Result<(), EvalError>,
    submit: &mut dyn FnMut(&str, Payload) -> Result<Assessment, EvalError>,
) -> LlmRunReport {
    let mut report = LlmRunReport::default();
    for p in queue {
        let target = p.eval_item_id.as_str();
        let result = llm_assess(gateway, model_id, params, rubric, p, &|pl| validate(target, pl))
            .and_then(|payload| submit(target, payload).map_err(|e| e.to_string()));
        match result {
            Ok(a) => report.submitted.push(a),
            Err(reason) => report.skipped.push(SkippedTarget {
                target_id: target.to_string(),
                reason,
            }),
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Scripted assessors

/// Deterministic stand-in for a human evaluator. Judgements derive from a
/// latent quality shared by all scripted evaluators (a hash of the content)
/// plus per-evaluator noise, so agreement is high but not perfect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAssessor {
    pub seed: u64,
    /// Half-width of the uniform noise added to the latent quality.
    pub noise: f64,
}

fn latent_quality(content: &str) -> f64 {
    let d: [u8; 32] = Sha256::digest(content.as_bytes()).into();
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64
}

impl ScriptedAssessor {
    fn perceived(&self, rng: &mut ChaCha8Rng, content: &str) -> f64 {
        let n = if self.noise > 0.0 {
            rng.random_range(-self.noise..=self.noise)
        } else {
            0.0
        };
        (latent_quality(content) + n).clamp(0.0, 0.999_999)
    }

    pub fn assess(&self, p: &Presentation) -> Payload {
        let mut rng = seeded_rng(&[&self.seed.to_string(), &p.eval_item_id]);
        let peers = p.group.as_deref().unwrap_or(&[]);
        let mut scored: Vec<(f64, &str)> = peers
            .iter()
            .map(|peer| (self.perceived(&mut rng, &peer.content), peer.eval_item_id.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        match &p.config {
            EvaluationType::Rating { dimensions } => {
                let q = self.perceived(&mut rng, &p.content);
                Payload::Rating {
                    scores: dimensions
                        .iter()
                        .map(|d| {
                            let span = (d.scale_max - d.scale_min + 1) as f64;
                            (d.name.clone(), d.scale_min + (q * span).floor() as i64)
                        })
                        .collect(),
                }
            }
            EvaluationType::BucketRanking { buckets } => {
                let nb = buckets.len() as f64;
                let mut per_bucket: BTreeMap<usize, usize> = BTreeMap::new();
                let placements = scored
                    .iter()
                    .map(|(q, id)| {
                        let b = ((1.0 - q) * nb).floor().min(nb - 1.0) as usize;
                        let r = per_bucket.entry(b).or_insert(0);
                        *r += 1;
                        BucketPlacement {
                            eval_item_id: id.to_string(),
                            bucket: buckets[b].clone(),
                            rank: *r,
                        }
                    })
                    .collect();
                Payload::Buckets { placements }
            }
            EvaluationType::Ranking => Payload::Order {
                order: scored.iter().map(|(_, id)| id.to_string()).collect(),
            },
            EvaluationType::Categorical { labels } => {
                let q = self.perceived(&mut rng, &p.content);
                Payload::Label {
                    label: labels[(q * labels.len() as f64).floor() as usize].clone(),
                }
            }
            EvaluationType::Pairwise { .. } => {
                let first = peers.first().map(|x| x.eval_item_id.as_str());
                let choice = match scored.first() {
                    Some((_, id)) if Some(*id) == first => PairChoice::A,
                    _ => PairChoice::B,
                };
                Payload::Choice { choice }
            }
            EvaluationType::Authenticity => Payload::Authenticity {
                verdict: if self.perceived(&mut rng, &p.content) >= 0.5 {
                    Verdict::Authentic
                } else {
                    Verdict::Generated
                },
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Export

fn payload_columns(eval_type: &EvaluationType) -> Vec<String> {
    match eval_type {
        EvaluationType::Rating { dimensions } => dimensions.iter().map(|d| d.name.clone()).collect(),
        EvaluationType::BucketRanking { .. } => vec!["bucket".into(), "within_rank".into()],
        EvaluationType::Ranking => vec!["rank".into()],
        EvaluationType::Categorical { .. } => vec!["label".into()],
        EvaluationType::Pairwise { .. } => vec!["choice".into(), "chosen_eval_item_id".into()],
        EvaluationType::Authenticity => vec!["verdict".into()],
    }
}

/// Header for the assessment export of a scenario.
pub fn assessment_columns(eval_type: &EvaluationType) -> Vec<String> {
    let mut cols: Vec<String> = [
        "assessment_id",
        "scenario_id",
        "evaluator_id",
        "evaluator_kind",
        "eval_item_id",
        "group_id",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend(payload_columns(eval_type));
    cols.push("submitted_at".into());
    cols
}

/// Flattened export rows. Group payloads expand to one row per member
/// where the payload is per member.
pub fn assessment_rows(scenario: &Scenario) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for a in scenario.all_assessments() {
        let base = |item: &str, group: &str| {
            vec![
                a.assessment_id.clone(),
                a.scenario_id.clone(),
                a.evaluator_id.clone(),
                a.evaluator_kind.as_str().to_string(),
                item.to_string(),
                group.to_string(),
            ]
        };
        let finish = |mut r: Vec<String>, extra: Vec<String>| {
            r.extend(extra);
            r.push(a.submitted_at.clone());
            r
        };
        match (&scenario.eval_type, &a.payload) {
            (EvaluationType::Rating { dimensions }, Payload::Rating { scores }) => {
                let extra = dimensions
                    .iter()
                    .map(|d| scores.get(&d.name).map(|v| v.to_string()).unwrap_or_default())
                    .collect();
                rows.push(finish(base(&a.target_id, ""), extra));
            }
            (_, Payload::Buckets { placements }) => {
                for p in placements {
                    rows.push(finish(
                        base(&p.eval_item_id, &a.target_id),
                        vec![p.bucket.clone(), p.rank.to_string()],
                    ));
                }
            }
            (_, Payload::Order { order }) => {
                for (i, id) in order.iter().enumerate() {
                    rows.push(finish(base(id, &a.target_id), vec![(i + 1).to_string()]));
                }
            }
            (_, Payload::Label { label }) => rows.push(finish(base(&a.target_id, ""), vec![label.clone()])),
            (_, Payload::Choice { choice }) => {
                let members = scenario.group(&a.target_id).map(|g| g.members.clone()).unwrap_or_default();
                let (c, chosen) = match choice {
                    PairChoice::A => ("A", members.first().cloned().unwrap_or_default()),
                    PairChoice::B => ("B", members.get(1).cloned().unwrap_or_default()),
                    PairChoice::Tie => ("tie", String::new()),
                };
                rows.push(finish(base("", &a.target_id), vec![c.to_string(), chosen]));
            }
            (_, Payload::Authenticity { verdict }) => {
                let v = match verdict {
                    Verdict::Authentic => "authentic",
                    Verdict::Generated => "generated",
                };
                rows.push(finish(base(&a.target_id, ""), vec![v.to_string()]));
            }
            _ => {}
        }
    }
    rows
}

pub fn export_assessments_csv(scenario: &Scenario) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(assessment_columns(&scenario.eval_type)).expect("in-memory write");
    for r in assessment_rows(scenario) {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn export_assessments_structured(scenario: &Scenario) -> Vec<u8> {
    let cols = assessment_columns(&scenario.eval_type);
    let records: Vec<serde_json::Map<String, serde_json::Value>> = assessment_rows(scenario)
        .into_iter()
        .map(|r| {
            cols.iter()
                .cloned()
                .zip(r.into_iter().map(serde_json::Value::String))
                .collect()
        })
        .collect();
    let mut out = serde_json::to_vec_pretty(&records).expect("serializable");
    out.push(b'\n');
    out
}
