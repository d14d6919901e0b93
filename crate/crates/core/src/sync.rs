//! Server-serialized edit protocol for prompt blocks.
//!
//! Every block owns a [`BlockLog`]: an append-only list of committed
//! operations indexed by revision. Clients send an [`EditOp`] tagged with the
//! revision they last saw; the server rebases it over everything committed
//! since that revision and appends the result. Offsets are character
//! (Unicode scalar) indices, never byte indices.
//!
//! Rebasing a delete over a concurrent insert that landed strictly inside the
//! deleted range splits the delete in two, so a single client op may commit
//! as more than one revision. An op that rebases to nothing commits as
//! [`OpKind::Noop`] so the sender still receives an acknowledgement.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("base revision {base_rev} is ahead of head revision {head_rev}")]
    StaleBase { base_rev: u64, head_rev: u64 },
    #[error("base revision {base_rev} predates the oldest retained revision {oldest}")]
    RevisionUnavailable { base_rev: u64, oldest: u64 },
    #[error("operation out of bounds: {0}")]
    InvalidOffset(String),
    #[error("invalid operation: {0}")]
    InvalidOp(String),
    #[error("revision gap: expected {expected}, got {got}")]
    RevisionGap { expected: u64, got: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpKind {
    Insert { offset: usize, text: String },
    Delete { offset: usize, length: usize },
    Noop,
}

impl OpKind {
    pub fn insert(offset: usize, text: impl Into<String>) -> Self {
        OpKind::Insert {
            offset,
            text: text.into(),
        }
    }

    pub fn delete(offset: usize, length: usize) -> Self {
        OpKind::Delete { offset, length }
    }

    pub fn is_noop(&self) -> bool {
        matches!(self, OpKind::Noop)
    }

    /// Characters inserted by this op.
    pub fn inserted_chars(&self) -> usize {
        match self {
            OpKind::Insert { text, .. } => char_len(text),
            _ => 0,
        }
    }

    /// Characters removed by this op.
    pub fn deleted_chars(&self) -> usize {
        match self {
            OpKind::Delete { length, .. } => *length,
            _ => 0,
        }
    }

    fn validate_shape(&self) -> Result<(), SyncError> {
        match self {
            OpKind::Insert { text, .. } if text.is_empty() => {
                Err(SyncError::InvalidOp("insert with empty text".into()))
            }
            OpKind::Delete { length: 0, .. } => {
                Err(SyncError::InvalidOp("delete with zero length".into()))
            }
            _ => Ok(()),
        }
    }

    fn check_bounds(&self, len: usize) -> Result<(), SyncError> {
        match self {
            OpKind::Insert { offset, .. } if *offset > len => Err(SyncError::InvalidOffset(
                format!("insert at {offset} beyond length {len}"),
            )),
            OpKind::Delete { offset, length } if offset + length > len => {
                Err(SyncError::InvalidOffset(format!(
                    "delete {offset}+{length} beyond length {len}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// One edit as exchanged on the wire and stored in a block log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    #[serde(flatten)]
    pub kind: OpKind,
    pub session_id: String,
    pub base_rev: u64,
}

impl EditOp {
    pub fn new(kind: OpKind, session_id: impl Into<String>, base_rev: u64) -> Self {
        EditOp {
            kind,
            session_id: session_id.into(),
            base_rev,
        }
    }

    fn with_kind(&self, kind: OpKind) -> Self {
        EditOp {
            kind,
            session_id: self.session_id.clone(),
            base_rev: self.base_rev,
        }
    }
}

pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn byte_index(s: &str, char_idx: usize) -> Option<usize> {
    if char_idx == 0 {
        return Some(0);
    }
    match s.char_indices().nth(char_idx) {
        Some((b, _)) => Some(b),
        None if char_idx == char_len(s) => Some(s.len()),
        None => None,
    }
}

/// Applies a single op to `text` in place.
pub fn apply(text: &mut String, kind: &OpKind) -> Result<(), SyncError> {
    kind.check_bounds(char_len(text))?;
    match kind {
        OpKind::Insert { offset, text: ins } => {
            let at = byte_index(text, *offset)
                .ok_or_else(|| SyncError::InvalidOffset(format!("insert at {offset}")))?;
            text.insert_str(at, ins);
        }
        OpKind::Delete { offset, length } => {
            let start = byte_index(text, *offset)
                .ok_or_else(|| SyncError::InvalidOffset(format!("delete at {offset}")))?;
            let end = byte_index(text, offset + length)
                .ok_or_else(|| SyncError::InvalidOffset(format!("delete to {}", offset + length)))?;
            text.replace_range(start..end, "");
        }
        OpKind::Noop => {}
    }
    Ok(())
}

/// Rebases `incoming` over `committed`, both expressed against the same text.
///
/// Returns the pieces to apply, in order, after `committed`. An empty result
/// means the incoming op was entirely shadowed.
pub fn transform(incoming: &EditOp, committed: &EditOp) -> Vec<EditOp> {
    use OpKind::*;
    let out: Vec<OpKind> = match (&incoming.kind, &committed.kind) {
        (Noop, _) => vec![],
        (k, Noop) => vec![k.clone()],
        (Insert { offset, text }, Insert { offset: p, text: t }) => {
            let goes_first = *offset < *p
                || (*offset == *p && incoming.session_id < committed.session_id);
            let offset = if goes_first { *offset } else { offset + char_len(t) };
            vec![OpKind::insert(offset, text.clone())]
        }
        (Insert { offset, text }, Delete { offset: p, length: l }) => {
            let offset = if *offset <= *p {
                *offset
            } else if *offset >= p + l {
                offset - l
            } else {
                *p
            };
            vec![OpKind::insert(offset, text.clone())]
        }
        (Delete { offset, length }, Insert { offset: p, text: t }) => {
            let ins = char_len(t);
            if *p <= *offset {
                vec![OpKind::delete(offset + ins, *length)]
            } else if *p >= offset + length {
                vec![OpKind::delete(*offset, *length)]
            } else {
                // Insert landed inside the range: delete around it.
                let head = p - offset;
                vec![
                    OpKind::delete(*offset, head),
                    OpKind::delete(offset + ins, length - head),
                ]
            }
        }
        (Delete { offset, length }, Delete { offset: p, length: l }) => {
            let (a0, a1) = (*offset, offset + length);
            let (b0, b1) = (*p, p + l);
            let overlap = a1.min(b1).saturating_sub(a0.max(b0));
            let remaining = length - overlap;
            if remaining == 0 {
                vec![]
            } else {
                let start = if a0 <= b0 {
                    a0
                } else if a0 >= b1 {
                    a0 - l
                } else {
                    b0
                };
                vec![OpKind::delete(start, remaining)]
            }
        }
    };
    out.into_iter().map(|k| incoming.with_kind(k)).collect()
}

/// Rebases two op sequences that both start from the same text.
///
/// Returns `(a', b')` such that applying `a` then `b'` yields the same text
/// as applying `b` then `a'`.
pub fn transform_seq(a: Vec<EditOp>, b: Vec<EditOp>) -> (Vec<EditOp>, Vec<EditOp>) {
    if a.is_empty() || b.is_empty() {
        return (a, b);
    }
    if a.len() == 1 && b.len() == 1 {
        let a_next = transform(&a[0], &b[0]);
        let b_next = transform(&b[0], &a[0]);
        return (a_next, b_next);
    }
    if a.len() > 1 {
        let mut a = a;
        let rest = a.split_off(1);
        let (mut first, b1) = transform_seq(a, b);
        let (rest, b2) = transform_seq(rest, b1);
        first.extend(rest);
        (first, b2)
    } else {
        let mut b = b;
        let rest = b.split_off(1);
        let (a1, mut first) = transform_seq(a, b);
        let (a2, rest) = transform_seq(a1, rest);
        first.extend(rest);
        (a2, first)
    }
}

/// Replays committed ops from the empty string.
pub fn replay<'a>(ops: impl IntoIterator<Item = &'a EditOp>) -> Result<String, SyncError> {
    let mut text = String::new();
    for op in ops {
        apply(&mut text, &op.kind)?;
    }
    Ok(text)
}

/// Character-level edit counts over a revision range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionDelta {
    pub insertions: usize,
    pub deletions: usize,
}

impl std::ops::Add for RevisionDelta {
    type Output = RevisionDelta;
    fn add(self, rhs: Self) -> Self {
        RevisionDelta {
            insertions: self.insertions + rhs.insertions,
            deletions: self.deletions + rhs.deletions,
        }
    }
}

/// State of a block imported from an exported file, where earlier
/// revisions are not available.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub rev: u64,
    pub text: String,
    pub delta: RevisionDelta,
}

/// One committed revision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Committed {
    pub rev: u64,
    pub op: EditOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLog {
    pub block_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<Checkpoint>,
    pub ops: Vec<EditOp>,
    text: String,
}

impl BlockLog {
    pub fn new(block_id: impl Into<String>) -> Self {
        BlockLog {
            block_id: block_id.into(),
            checkpoint: None,
            ops: Vec::new(),
            text: String::new(),
        }
    }

    pub fn from_checkpoint(block_id: impl Into<String>, checkpoint: Checkpoint) -> Self {
        BlockLog {
            block_id: block_id.into(),
            text: checkpoint.text.clone(),
            checkpoint: Some(checkpoint),
            ops: Vec::new(),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Oldest revision whose text can be reconstructed.
    pub fn oldest_rev(&self) -> u64 {
        self.checkpoint.as_ref().map_or(0, |c| c.rev)
    }

    pub fn head_rev(&self) -> u64 {
        self.oldest_rev() + self.ops.len() as u64
    }

    /// Ops committed after `rev`, in revision order.
    pub fn ops_since(&self, rev: u64) -> &[EditOp] {
        let start = (rev - self.oldest_rev()) as usize;
        &self.ops[start..]
    }

    pub fn committed_since(&self, rev: u64) -> Vec<Committed> {
        self.ops_since(rev)
            .iter()
            .enumerate()
            .map(|(i, op)| Committed {
                rev: rev + 1 + i as u64,
                op: op.clone(),
            })
            .collect()
    }

    fn check_rev(&self, rev: u64) -> Result<(), SyncError> {
        if rev > self.head_rev() {
            return Err(SyncError::StaleBase {
                base_rev: rev,
                head_rev: self.head_rev(),
            });
        }
        if rev < self.oldest_rev() {
            return Err(SyncError::RevisionUnavailable {
                base_rev: rev,
                oldest: self.oldest_rev(),
            });
        }
        Ok(())
    }

    /// Text as of revision `rev`.
    pub fn text_at(&self, rev: u64) -> Result<String, SyncError> {
        self.check_rev(rev)?;
        let mut text = self
            .checkpoint
            .as_ref()
            .map(|c| c.text.clone())
            .unwrap_or_default();
        let upto = (rev - self.oldest_rev()) as usize;
        for op in &self.ops[..upto] {
            apply(&mut text, &op.kind)?;
        }
        Ok(text)
    }

    fn len_at(&self, rev: u64) -> usize {
        let ops = self.ops_since(rev);
        let ins: usize = ops.iter().map(|o| o.kind.inserted_chars()).sum();
        let del: usize = ops.iter().map(|o| o.kind.deleted_chars()).sum();
        char_len(&self.text) + del - ins
    }

    /// Inserted and deleted character totals over `(from, to]`.
    pub fn delta(&self, from: u64, to: u64) -> Result<RevisionDelta, SyncError> {
        if from > to || to > self.head_rev() {
            return Err(SyncError::InvalidOffset(format!(
                "revision range ({from}, {to}] outside 0..={}",
                self.head_rev()
            )));
        }
        let oldest = self.oldest_rev();
        let mut total = RevisionDelta::default();
        let mut start = from;
        if from < oldest {
            if from == 0 && to >= oldest {
                total = self.checkpoint.as_ref().map(|c| c.delta).unwrap_or_default();
                start = oldest;
            } else if from != to {
                return Err(SyncError::RevisionUnavailable {
                    base_rev: from,
                    oldest,
                });
            } else {
                return Ok(total);
            }
        }
        let lo = (start - oldest) as usize;
        let hi = (to - oldest) as usize;
        for op in &self.ops[lo..hi] {
            total.insertions += op.kind.inserted_chars();
            total.deletions += op.kind.deleted_chars();
        }
        Ok(total)
    }

    /// Rebases `op` over everything committed since its base revision and
    /// appends the result. Returns the committed revisions in order.
    pub fn commit(&mut self, op: EditOp) -> Result<Vec<Committed>, SyncError> {
        op.kind.validate_shape()?;
        self.check_rev(op.base_rev)?;
        op.kind.check_bounds(self.len_at(op.base_rev))?;

        let concurrent = self.ops_since(op.base_rev).to_vec();
        let (pieces, _) = transform_seq(vec![op.clone()], concurrent);
        let pieces = if pieces.is_empty() {
            vec![op.with_kind(OpKind::Noop)]
        } else {
            pieces
        };

        // Validate on a scratch copy so a failure leaves the log untouched.
        let mut text = self.text.clone();
        for piece in &pieces {
            apply(&mut text, &piece.kind)?;
        }
        self.text = text;

        let mut committed = Vec::with_capacity(pieces.len());
        for piece in pieces {
            let rev = self.head_rev() + 1;
            let stored = EditOp {
                base_rev: rev - 1,
                ..piece
            };
            self.ops.push(stored.clone());
            committed.push(Committed { rev, op: stored });
        }
        Ok(committed)
    }

    /// Appends an already-committed op (used when replaying persisted
    /// history). The revision must be exactly `head_rev + 1`.
    pub fn append_committed(&mut self, rev: u64, op: EditOp) -> Result<(), SyncError> {
        if rev != self.head_rev() + 1 {
            return Err(SyncError::RevisionGap {
                expected: self.head_rev() + 1,
                got: rev,
            });
        }
        apply(&mut self.text, &op.kind)?;
        self.ops.push(op);
        Ok(())
    }
}

/// Client-side replica following the one-op-in-flight protocol.
///
/// Local edits apply immediately. At most one op is outstanding at the
/// server; further edits queue locally and are rebased over incoming remote
/// revisions until the outstanding op is acknowledged.
#[derive(Debug, Clone)]
pub struct ClientReplica {
    session_id: String,
    text: String,
    last_rev: u64,
    /// Pieces the server is expected to commit for the outstanding op.
    /// `Some(vec![])` means the op rebased to nothing and a noop ack is due.
    inflight: Option<Vec<EditOp>>,
    queue: VecDeque<EditOp>,
}

impl ClientReplica {
    pub fn new(session_id: impl Into<String>, text: impl Into<String>, rev: u64) -> Self {
        ClientReplica {
            session_id: session_id.into(),
            text: text.into(),
            last_rev: rev,
            inflight: None,
            queue: VecDeque::new(),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn last_rev(&self) -> u64 {
        self.last_rev
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    /// True when nothing is outstanding or queued.
    pub fn is_settled(&self) -> bool {
        self.inflight.is_none() && self.queue.is_empty()
    }

    /// Applies a local edit. Returns the op to send, if the channel is free.
    pub fn local_edit(&mut self, kind: OpKind) -> Result<Option<EditOp>, SyncError> {
        kind.validate_shape()?;
        apply(&mut self.text, &kind)?;
        self.queue
            .push_back(EditOp::new(kind, self.session_id.clone(), self.last_rev));
        Ok(self.flush())
    }

    fn flush(&mut self) -> Option<EditOp> {
        if self.inflight.is_some() {
            return None;
        }
        let mut op = self.queue.pop_front()?;
        op.base_rev = self.last_rev;
        self.inflight = Some(vec![op.clone()]);
        Some(op)
    }

    /// Handles a committed revision broadcast by the server. Returns the
    /// next op to send, if one became eligible.
    pub fn receive(&mut self, rev: u64, op: &EditOp) -> Result<Option<EditOp>, SyncError> {
        if rev != self.last_rev + 1 {
            return Err(SyncError::RevisionGap {
                expected: self.last_rev + 1,
                got: rev,
            });
        }
        self.last_rev = rev;
        if op.session_id == self.session_id {
            let pending = self.inflight.as_mut().ok_or_else(|| {
                SyncError::InvalidOp("acknowledgement without outstanding op".into())
            })?;
            if !op.kind.is_noop() {
                if pending.is_empty() {
                    return Err(SyncError::InvalidOp("unexpected acknowledgement".into()));
                }
                pending.remove(0);
            }
            if pending.is_empty() {
                self.inflight = None;
            }
            return Ok(self.flush());
        }

        let remote = vec![op.clone()];
        let remote = match self.inflight.take() {
            Some(pending) => {
                let (pending, remote) = transform_seq(pending, remote);
                self.inflight = Some(pending);
                remote
            }
            None => remote,
        };
        let queued: Vec<EditOp> = self.queue.drain(..).collect();
        let (queued, remote) = transform_seq(queued, remote);
        self.queue = queued.into();
        for r in &remote {
            apply(&mut self.text, &r.kind)?;
        }
        Ok(None)
    }
}
