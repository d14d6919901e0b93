//! Block-structured prompt documents.
//!
//! A document is an ordered list of blocks. At most one block carries the
//! system role; the rest are joined with a newline into the user prompt.
//! Each block keeps its own [`BlockLog`], so diffs and rollback are per
//! block and never touch siblings.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sync::{BlockLog, Checkpoint, Committed, EditOp, OpKind, RevisionDelta, SyncError};

/// Session id used for edits the server makes on its own behalf.
pub const SERVER_SESSION: &str = "~server";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("missing bindings for: {}", .0.join(", "))]
    MissingBinding(Vec<String>),
    #[error("revision {rev} out of range (available {oldest}..={head})")]
    RevisionOutOfRange { rev: u64, oldest: u64, head: u64 },
    #[error("document already has a system block ({0})")]
    DuplicateSystemBlock(String),
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("duplicate block id {0}")]
    DuplicateBlock(String),
    #[error("invalid variable name {0:?}")]
    InvalidVariableName(String),
    #[error("malformed prompt file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Sync(#[from] SyncError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

fn variable_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([A-Za-z0-9_]+)\}\}").expect("static regex"))
}

pub fn is_variable_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Variable names referenced as `{{name}}`, deduplicated in order of first
/// appearance.
pub fn extract_variables(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for cap in variable_pattern().captures_iter(text) {
        let name = &cap[1];
        if seen.insert(name.to_string()) {
            out.push(name.to_string());
        }
    }
    out
}

/// Literal single-pass substitution. Values are never re-scanned.
pub fn substitute(text: &str, bindings: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let missing: Vec<String> = extract_variables(text)
        .into_iter()
        .filter(|v| !bindings.contains_key(v))
        .collect();
    if !missing.is_empty() {
        return Err(PromptError::MissingBinding(missing));
    }
    Ok(variable_pattern()
        .replace_all(text, |cap: &regex::Captures<'_>| bindings[&cap[1]].clone())
        .into_owned())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: String,
}

/// Renders `(role, text)` blocks in order. Shared by live documents and
/// frozen batch snapshots.
pub fn render_blocks<'a>(
    blocks: impl IntoIterator<Item = (Role, &'a str)>,
    bindings: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, PromptError> {
    let blocks: Vec<(Role, &str)> = blocks.into_iter().collect();
    let mut missing = Vec::new();
    for (_, text) in &blocks {
        for v in extract_variables(text) {
            if !bindings.contains_key(&v) && !missing.contains(&v) {
                missing.push(v);
            }
        }
    }
    if !missing.is_empty() {
        return Err(PromptError::MissingBinding(missing));
    }
    let mut system = None;
    let mut user = Vec::new();
    for (role, text) in blocks {
        let rendered = substitute(text, bindings)?;
        match role {
            Role::System => system = Some(rendered),
            Role::User => user.push(rendered),
        }
    }
    Ok(RenderedPrompt {
        system,
        user: user.join("\n"),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBlock {
    pub role: Role,
    pub log: BlockLog,
}

impl PromptBlock {
    pub fn id(&self) -> &str {
        &self.log.block_id
    }

    pub fn text(&self) -> &str {
        self.log.text()
    }

    pub fn head_rev(&self) -> u64 {
        self.log.head_rev()
    }

    fn check_rev(&self, rev: u64) -> Result<(), PromptError> {
        if rev > self.head_rev() {
            return Err(PromptError::RevisionOutOfRange {
                rev,
                oldest: self.log.oldest_rev(),
                head: self.head_rev(),
            });
        }
        Ok(())
    }

    /// Inserted/deleted character totals over `(from_rev, to_rev]`.
    pub fn revision_delta(&self, from_rev: u64, to_rev: u64) -> Result<RevisionDelta, PromptError> {
        let out_of_range = |rev| PromptError::RevisionOutOfRange {
            rev,
            oldest: self.log.oldest_rev(),
            head: self.head_rev(),
        };
        if from_rev > to_rev {
            return Err(out_of_range(from_rev));
        }
        self.check_rev(to_rev)?;
        self.log.delta(from_rev, to_rev).map_err(|e| match e {
            SyncError::RevisionUnavailable { base_rev, .. } => out_of_range(base_rev),
            other => other.into(),
        })
    }

    pub fn text_at(&self, rev: u64) -> Result<String, PromptError> {
        self.check_rev(rev)?;
        self.log.text_at(rev).map_err(|e| match e {
            SyncError::RevisionUnavailable { base_rev, .. } => PromptError::RevisionOutOfRange {
                rev: base_rev,
                oldest: self.log.oldest_rev(),
                head: self.head_rev(),
            },
            other => other.into(),
        })
    }

    /// Compensating ops that bring the text back to revision `target_rev`,
    /// expressed against the current head. Empty when nothing changes.
    pub fn rollback_ops(&self, target_rev: u64) -> Result<Vec<EditOp>, PromptError> {
        let target = self.text_at(target_rev)?;
        let current = self.text();
        if target == current {
            return Ok(vec![]);
        }
        let mut ops = Vec::new();
        let mut base = self.head_rev();
        let len = crate::sync::char_len(current);
        if len > 0 {
            ops.push(EditOp::new(OpKind::delete(0, len), SERVER_SESSION, base));
            base += 1;
        }
        if !target.is_empty() {
            ops.push(EditOp::new(OpKind::insert(0, target), SERVER_SESSION, base));
        }
        Ok(ops)
    }

    /// Appends compensating ops so the text equals the text at `target_rev`.
    /// The log stays append-only. Returns the new head revision.
    pub fn rollback(&mut self, target_rev: u64) -> Result<u64, PromptError> {
        for op in self.rollback_ops(target_rev)? {
            self.log.commit(op)?;
        }
        Ok(self.head_rev())
    }
}

/// A prompt version as referenced by batch provenance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptVersion {
    pub doc_id: String,
    pub version_label: String,
    /// `(block_id, head_rev)` in block order.
    pub block_revs: Vec<(String, u64)>,
}

impl PromptVersion {
    /// Compact key such as `label@b1:3,b2:1`.
    pub fn key(&self) -> String {
        let revs: Vec<String> = self
            .block_revs
            .iter()
            .map(|(b, r)| format!("{b}:{r}"))
            .collect();
        format!("{}@{}", self.version_label, revs.join(","))
    }
}

/// A frozen copy of a document's blocks at a given version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSnapshot {
    pub version: PromptVersion,
    pub blocks: Vec<(Role, String)>,
}

impl PromptSnapshot {
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        render_blocks(self.blocks.iter().map(|(r, t)| (*r, t.as_str())), bindings)
    }

    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (_, text) in &self.blocks {
            for v in extract_variables(text) {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub doc_id: String,
    pub title: String,
    pub blocks: Vec<PromptBlock>,
    /// Variable name → sample value.
    pub palette: BTreeMap<String, String>,
    pub version_label: String,
    pub created_at: String,
    pub updated_at: String,
}

impl PromptDocument {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, now: &str) -> Self {
        PromptDocument {
            doc_id: doc_id.into(),
            title: title.into(),
            blocks: Vec::new(),
            palette: BTreeMap::new(),
            version_label: "v1".into(),
            created_at: now.to_string(),
            updated_at: now.to_string(),
        }
    }

    pub fn block(&self, block_id: &str) -> Result<&PromptBlock, PromptError> {
        self.blocks
            .iter()
            .find(|b| b.id() == block_id)
            .ok_or_else(|| PromptError::UnknownBlock(block_id.to_string()))
    }

    pub fn block_mut(&mut self, block_id: &str) -> Result<&mut PromptBlock, PromptError> {
        self.blocks
            .iter_mut()
            .find(|b| b.log.block_id == block_id)
            .ok_or_else(|| PromptError::UnknownBlock(block_id.to_string()))
    }

    fn system_block(&self) -> Option<&PromptBlock> {
        self.blocks.iter().find(|b| b.role == Role::System)
    }

    /// Appends an empty block. Initial text is written through the edit path
    /// by the caller so it shows up in the block's history.
    pub fn add_block(&mut self, block_id: impl Into<String>, role: Role) -> Result<(), PromptError> {
        let block_id = block_id.into();
        if self.blocks.iter().any(|b| b.id() == block_id) {
            return Err(PromptError::DuplicateBlock(block_id));
        }
        if role == Role::System {
            if let Some(existing) = self.system_block() {
                return Err(PromptError::DuplicateSystemBlock(existing.id().to_string()));
            }
        }
        self.blocks.push(PromptBlock {
            role,
            log: BlockLog::new(block_id),
        });
        Ok(())
    }

    pub fn set_role(&mut self, block_id: &str, role: Role) -> Result<(), PromptError> {
        if role == Role::System {
            if let Some(existing) = self.system_block() {
                if existing.id() != block_id {
                    return Err(PromptError::DuplicateSystemBlock(existing.id().to_string()));
                }
            }
        }
        self.block_mut(block_id)?.role = role;
        Ok(())
    }

    /// Moves a block to `position` (clamped), preserving the relative order
    /// of the others.
    pub fn move_block(&mut self, block_id: &str, position: usize) -> Result<(), PromptError> {
        let from = self
            .blocks
            .iter()
            .position(|b| b.id() == block_id)
            .ok_or_else(|| PromptError::UnknownBlock(block_id.to_string()))?;
        let block = self.blocks.remove(from);
        let to = position.min(self.blocks.len());
        self.blocks.insert(to, block);
        Ok(())
    }

    pub fn set_sample(&mut self, name: &str, sample: impl Into<String>) -> Result<(), PromptError> {
        if !is_variable_name(name) {
            return Err(PromptError::InvalidVariableName(name.to_string()));
        }
        self.palette.insert(name.to_string(), sample.into());
        Ok(())
    }

    pub fn commit_edit(&mut self, block_id: &str, op: EditOp) -> Result<Vec<Committed>, PromptError> {
        Ok(self.block_mut(block_id)?.log.commit(op)?)
    }

    /// All variables across blocks in block order, first appearance wins.
    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for v in extract_variables(b.text()) {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        out
    }

    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        render_blocks(self.blocks.iter().map(|b| (b.role, b.text())), bindings)
    }

    /// Renders with the palette's sample values.
    pub fn render_with_samples(&self) -> Result<RenderedPrompt, PromptError> {
        self.render(&self.palette)
    }

    pub fn version(&self) -> PromptVersion {
        PromptVersion {
            doc_id: self.doc_id.clone(),
            version_label: self.version_label.clone(),
            block_revs: self
                .blocks
                .iter()
                .map(|b| (b.id().to_string(), b.head_rev()))
                .collect(),
        }
    }

    pub fn snapshot(&self) -> PromptSnapshot {
        PromptSnapshot {
            version: self.version(),
            blocks: self
                .blocks
                .iter()
                .map(|b| (b.role, b.text().to_string()))
                .collect(),
        }
    }

    pub fn to_file(&self) -> PromptFile {
        PromptFile {
            doc_id: self.doc_id.clone(),
            title: self.title.clone(),
            version_label: self.version_label.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let delta = b.revision_delta(0, b.head_rev()).unwrap_or_default();
                    PromptFileBlock {
                        block_id: b.id().to_string(),
                        role: b.role,
                        text: b.text().to_string(),
                        head_rev: b.head_rev(),
                        insertions: delta.insertions,
                        deletions: delta.deletions,
                    }
                })
                .collect(),
            palette: self.palette.clone(),
        }
    }

    /// Deterministic JSON export.
    pub fn export(&self) -> String {
        self.to_file().to_json()
    }

    pub fn import(raw: &str, now: &str) -> Result<PromptDocument, PromptError> {
        PromptFile::parse(raw)?.into_document(now)
    }
}

/// Canonical prompt file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFile {
    pub doc_id: String,
    pub title: String,
    pub version_label: String,
    pub blocks: Vec<PromptFileBlock>,
    #[serde(default)]
    pub palette: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFileBlock {
    pub block_id: String,
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub head_rev: u64,
    #[serde(default)]
    pub insertions: usize,
    #[serde(default)]
    pub deletions: usize,
}

impl PromptFile {
    pub fn parse(raw: &str) -> Result<Self, PromptError> {
        serde_json::from_str(raw).map_err(|e| PromptError::Malformed(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("prompt file serializes");
        s.push('\n');
        s
    }

    pub fn into_document(self, now: &str) -> Result<PromptDocument, PromptError> {
        let mut doc = PromptDocument::new(self.doc_id, self.title, now);
        doc.version_label = self.version_label;
        for (name, sample) in self.palette {
            doc.set_sample(&name, sample)?;
        }
        for b in self.blocks {
            doc.add_block(b.block_id.clone(), b.role)?;
            let block = doc.block_mut(&b.block_id)?;
            if b.head_rev == 0 {
                if !b.text.is_empty() {
                    block
                        .log
                        .commit(EditOp::new(OpKind::insert(0, b.text), SERVER_SESSION, 0))?;
                }
            } else {
                block.log = BlockLog::from_checkpoint(
                    b.block_id,
                    Checkpoint {
                        rev: b.head_rev,
                        text: b.text,
                        delta: RevisionDelta {
                            insertions: b.insertions,
                            deletions: b.deletions,
                        },
                    },
                );
            }
        }
        Ok(doc)
    }
}
