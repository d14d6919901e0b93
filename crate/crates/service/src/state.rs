//! In-memory service state, rebuilt purely from events.

use std::collections::BTreeMap;

use promptloop_core::batch::{BatchJob, JobState};
use promptloop_core::dataset::Dataset;
use promptloop_core::evaluation::Scenario;
use promptloop_core::prompt::PromptDocument;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::events::{Event, EventBody};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Offset of the last applied event.
    pub offset: u64,
    pub prompts: BTreeMap<String, PromptDocument>,
    pub datasets: BTreeMap<String, Dataset>,
    pub jobs: BTreeMap<String, BatchJob>,
    pub scenarios: BTreeMap<String, Scenario>,
}

fn next_id<V>(map: &BTreeMap<String, V>, prefix: &str) -> String {
    (map.len() + 1..)
        .map(|n| format!("{prefix}-{n:04}"))
        .find(|id| !map.contains_key(id))
        .expect("unbounded range")
}

impl State {
    pub fn next_prompt_id(&self) -> String {
        next_id(&self.prompts, "prompt")
    }

    pub fn next_job_id(&self) -> String {
        next_id(&self.jobs, "job")
    }

    pub fn next_scenario_id(&self) -> String {
        next_id(&self.scenarios, "sc")
    }

    /// Applies one event. Events are validated before they are appended,
    /// so a failure here means the log and the code disagree.
    pub fn apply(&mut self, event: &Event) -> Result<(), String> {
        if event.offset != self.offset + 1 {
            return Err(format!("expected offset {}, got {}", self.offset + 1, event.offset));
        }
        let ts = event.timestamp.as_str();
        match &event.body {
            EventBody::PromptCreated { doc_id, title } => {
                if self.prompts.contains_key(doc_id) {
                    return Err(format!("prompt {doc_id} exists"));
                }
                self.prompts
                    .insert(doc_id.clone(), PromptDocument::new(doc_id.clone(), title.clone(), ts));
            }
            EventBody::PromptImported { doc_id, file } => {
                if self.prompts.contains_key(doc_id) {
                    return Err(format!("prompt {doc_id} exists"));
                }
                let mut file = file.clone();
                file.doc_id = doc_id.clone();
                let doc = file.into_document(ts).map_err(|e| e.to_string())?;
                self.prompts.insert(doc_id.clone(), doc);
            }
            EventBody::BlockAdded { doc_id, block_id, role } => {
                let doc = self.prompt_mut(doc_id)?;
                doc.add_block(block_id.clone(), *role).map_err(|e| e.to_string())?;
                doc.updated_at = ts.to_string();
            }
            EventBody::BlockRoleSet { doc_id, block_id, role } => {
                let doc = self.prompt_mut(doc_id)?;
                doc.set_role(block_id, *role).map_err(|e| e.to_string())?;
                doc.updated_at = ts.to_string();
            }
            EventBody::BlockMoved { doc_id, block_id, position } => {
                let doc = self.prompt_mut(doc_id)?;
                doc.move_block(block_id, *position).map_err(|e| e.to_string())?;
                doc.updated_at = ts.to_string();
            }
            EventBody::SampleSet { doc_id, name, value } => {
                let doc = self.prompt_mut(doc_id)?;
                doc.set_sample(name, value.clone()).map_err(|e| e.to_string())?;
                doc.updated_at = ts.to_string();
            }
            EventBody::VersionLabelSet { doc_id, label } => {
                let doc = self.prompt_mut(doc_id)?;
                doc.version_label = label.clone();
                doc.updated_at = ts.to_string();
            }
            EventBody::EditCommitted {
                doc_id,
                block_id,
                committed,
            } => {
                let doc = self.prompt_mut(doc_id)?;
                let block = doc.block_mut(block_id).map_err(|e| e.to_string())?;
                for c in committed {
                    block
                        .log
                        .append_committed(c.rev, c.op.clone())
                        .map_err(|e| e.to_string())?;
                }
                doc.updated_at = ts.to_string();
            }
            EventBody::DatasetImported { dataset } => {
                self.datasets.insert(dataset.dataset_id.clone(), dataset.clone());
            }
            EventBody::BatchPlanned { plan } => {
                if self.jobs.contains_key(&plan.plan_id) {
                    return Err(format!("job {} exists", plan.plan_id));
                }
                self.jobs.insert(plan.plan_id.clone(), BatchJob::new(plan.clone()));
            }
            EventBody::BatchStateChanged {
                job_id,
                state,
                budget_cap,
            } => {
                let job = self.job_mut(job_id)?;
                job.state = *state;
                if let Some(cap) = budget_cap {
                    job.budget_cap = *cap;
                }
            }
            EventBody::OutputRecorded { job_id, output } => {
                self.job_mut(job_id)?
                    .record_output(output.clone())
                    .map_err(|e| e.to_string())?;
            }
            EventBody::ScenarioCreated { scenario } => {
                if self.scenarios.contains_key(&scenario.scenario_id) {
                    return Err(format!("scenario {} exists", scenario.scenario_id));
                }
                self.scenarios.insert(scenario.scenario_id.clone(), scenario.clone());
            }
            EventBody::ScenarioAssigned {
                scenario_id,
                evaluators,
                coverage,
            } => {
                self.scenario_mut(scenario_id)?
                    .assign(evaluators.clone(), *coverage)
                    .map_err(|e| e.to_string())?;
            }
            EventBody::AssessmentSubmitted { assessment } => {
                self.scenario_mut(&assessment.scenario_id)?.store(assessment.clone());
            }
            EventBody::ScenarioClosed { scenario_id } => {
                self.scenario_mut(scenario_id)?.close();
            }
        }
        self.offset = event.offset;
        Ok(())
    }

    fn prompt_mut(&mut self, doc_id: &str) -> Result<&mut PromptDocument, String> {
        self.prompts.get_mut(doc_id).ok_or_else(|| format!("unknown prompt {doc_id}"))
    }

    fn job_mut(&mut self, job_id: &str) -> Result<&mut BatchJob, String> {
        self.jobs.get_mut(job_id).ok_or_else(|| format!("unknown job {job_id}"))
    }

    fn scenario_mut(&mut self, scenario_id: &str) -> Result<&mut Scenario, String> {
        self.scenarios
            .get_mut(scenario_id)
            .ok_or_else(|| format!("unknown scenario {scenario_id}"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    /// Hex sha256 of the canonical state JSON.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn running_jobs(&self) -> Vec<String> {
        self.jobs
            .values()
            .filter(|j| j.state == JobState::Running)
            .map(|j| j.job_id.clone())
            .collect()
    }
}
