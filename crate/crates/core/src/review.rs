//! The review state machine. Every suggestion becomes a [`ReviewItem`] that
//! only an operator can move; confidence affects queue position and nothing
//! else.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::{Actor, AuditError, AuditLog};
use crate::extraction::FieldSuggestion;
use crate::pii::{PiiCandidate, PiiCategory};
use crate::vischeck::RuleOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReviewState {
    Suggested,
    Confirmed,
    Rejected,
    Edited,
    Committed,
}

impl ReviewState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ReviewState::Rejected | ReviewState::Committed)
    }
}

impl fmt::Display for ReviewState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", content = "value", rename_all = "snake_case")]
pub enum ReviewAction {
    Confirm,
    Reject,
    Edit(String),
    Commit,
}

impl ReviewAction {
    pub fn name(&self) -> &'static str {
        match self {
            ReviewAction::Confirm => "confirm",
            ReviewAction::Reject => "reject",
            ReviewAction::Edit(_) => "edit",
            ReviewAction::Commit => "commit",
        }
    }
}

/// The transition table. `None` means the action is illegal from `state`.
pub fn next_state(state: ReviewState, action: &ReviewAction) -> Option<ReviewState> {
    use ReviewAction as A;
    use ReviewState as S;
    match (state, action) {
        (S::Suggested, A::Confirm) => Some(S::Confirmed),
        (S::Suggested, A::Reject) => Some(S::Rejected),
        (S::Suggested, A::Edit(_)) => Some(S::Edited),
        (S::Confirmed, A::Reject) => Some(S::Rejected),
        (S::Confirmed, A::Edit(_)) => Some(S::Edited),
        (S::Confirmed, A::Commit) => Some(S::Committed),
        (S::Edited, A::Reject) => Some(S::Rejected),
        (S::Edited, A::Commit) => Some(S::Committed),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReviewPayload {
    Field(FieldSuggestion),
    Pii(PiiCandidate),
    Rule(RuleOutcome),
}

impl ReviewPayload {
    pub fn confidence(&self) -> Option<f64> {
        match self {
            ReviewPayload::Field(f) => Some(f.confidence),
            ReviewPayload::Pii(p) => Some(p.confidence),
            ReviewPayload::Rule(_) => None,
        }
    }

    /// Tie-break rank among equal confidences; lower sorts first.
    pub fn risk_rank(&self) -> u8 {
        match self {
            ReviewPayload::Pii(p) => match p.category {
                PiiCategory::Signatures => 0,
                PiiCategory::Emails => 1,
                PiiCategory::Phones => 2,
                PiiCategory::Addresses => 3,
                PiiCategory::Names => 4,
            },
            ReviewPayload::Field(_) => 5,
            ReviewPayload::Rule(_) => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub from: ReviewState,
    pub to: ReviewState,
    pub action: ReviewAction,
    pub operator: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub doc_id: String,
    pub ordinal: u32,
    pub payload: ReviewPayload,
    pub state: ReviewState,
    pub operator_id: Option<String>,
    pub edited_value: Option<String>,
    pub history: Vec<HistoryEntry>,
}

pub fn item_id(doc_id: &str, ordinal: u32) -> String {
    format!("{doc_id}:{ordinal:04}")
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("illegal transition: cannot {action} item {item_id} in state {from}")]
    IllegalTransition { item_id: String, from: ReviewState, action: String },
    #[error("an operator id is required")]
    MissingOperator,
    #[error("edit of item {0} needs a non-empty value")]
    EmptyEdit(String),
    #[error("item {item_id} is {actual}, expected {expected}")]
    StaleState { item_id: String, expected: ReviewState, actual: ReviewState },
    #[error("unknown review item {0}")]
    UnknownItem(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl ReviewItem {
    pub fn new(doc_id: &str, ordinal: u32, payload: ReviewPayload) -> Self {
        ReviewItem {
            item_id: item_id(doc_id, ordinal),
            doc_id: doc_id.to_string(),
            ordinal,
            payload,
            state: ReviewState::Suggested,
            operator_id: None,
            edited_value: None,
            history: Vec::new(),
        }
    }

    /// Applies `action` without touching the audit log.
    pub fn apply(&self, action: &ReviewAction, operator_id: &str, at: DateTime<Utc>) -> Result<ReviewItem, ReviewError> {
        if operator_id.trim().is_empty() {
            return Err(ReviewError::MissingOperator);
        }
        let to = next_state(self.state, action).ok_or_else(|| ReviewError::IllegalTransition { item_id: self.item_id.clone(), from: self.state, action: action.name().into() })?;
        let mut next = self.clone();
        match action {
            ReviewAction::Edit(v) if v.trim().is_empty() => return Err(ReviewError::EmptyEdit(self.item_id.clone())),
            ReviewAction::Edit(v) => next.edited_value = Some(v.clone()),
            ReviewAction::Reject => next.edited_value = None,
            _ => {}
        }
        next.state = to;
        next.operator_id = Some(operator_id.to_string());
        next.history.push(HistoryEntry { from: self.state, to, action: action.clone(), operator: operator_id.to_string(), timestamp: at });
        Ok(next)
    }

    /// State and edited value recomputed from the history alone.
    pub fn replay(&self) -> (ReviewState, Option<String>) {
        let mut state = ReviewState::Suggested;
        let mut edited = None;
        for h in &self.history {
            match &h.action {
                ReviewAction::Edit(v) => edited = Some(v.clone()),
                ReviewAction::Reject => edited = None,
                _ => {}
            }
            state = h.to;
        }
        (state, edited)
    }

    /// The value an operator approved: the edit if any, else the suggestion.
    pub fn effective_value(&self) -> Option<String> {
        if let Some(v) = &self.edited_value {
            return Some(v.clone());
        }
        match &self.payload {
            ReviewPayload::Field(f) => Some(f.value.clone()),
            ReviewPayload::Pii(p) => Some(p.value.clone()),
            ReviewPayload::Rule(_) => None,
        }
    }

    pub fn was_edited(&self) -> bool {
        self.history.iter().any(|h| matches!(h.action, ReviewAction::Edit(_)))
    }
}

fn transition_event(before: &ReviewItem, after: &ReviewItem) -> (Actor, String, Value) {
    let last = after.history.last().expect("a transition appends history");
    let mut payload = json!({
        "doc_id": after.doc_id,
        "item_id": after.item_id,
        "from": before.state,
        "to": after.state,
        "action": last.action.name(),
    });
    if let ReviewAction::Edit(v) = &last.action {
        if !matches!(after.payload, ReviewPayload::Pii(_)) {
            payload["edited_value"] = json!(v);
        }
    }
    (Actor::operator(last.operator.clone()), "ReviewTransition".into(), payload)
}

/// Applies `action` and appends exactly one audit event.
pub fn transition(item: &ReviewItem, action: &ReviewAction, operator_id: &str, audit: &AuditLog) -> Result<ReviewItem, ReviewError> {
    let next = item.apply(action, operator_id, Utc::now())?;
    let (actor, tag, payload) = transition_event(item, &next);
    audit.append(actor, &tag, &payload)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewQueue {
    pub doc_id: String,
    pub items: Vec<String>,
}

/// Priority order: confidence-bearing items by ascending confidence, ties by
/// category risk (Signatures, Emails, Phones, Addresses, Names, then
/// metadata fields), then item id. Rule outcomes follow, unsatisfied first,
/// then in rule order.
pub fn priority_cmp(a: &ReviewItem, b: &ReviewItem) -> std::cmp::Ordering {
    match (a.payload.confidence(), b.payload.confidence()) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.payload.risk_rank().cmp(&b.payload.risk_rank())).then(a.item_id.cmp(&b.item_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => {
            let sat = |i: &ReviewItem| matches!(&i.payload, ReviewPayload::Rule(r) if r.satisfied);
            sat(a).cmp(&sat(b)).then(a.ordinal.cmp(&b.ordinal)).then(a.item_id.cmp(&b.item_id))
        }
    }
}

pub fn prioritize(items: &[ReviewItem]) -> ReviewQueue {
    let mut sorted: Vec<&ReviewItem> = items.iter().collect();
    sorted.sort_by(|a, b| priority_cmp(a, b));
    ReviewQueue { doc_id: items.first().map(|i| i.doc_id.clone()).unwrap_or_default(), items: sorted.into_iter().map(|i| i.item_id.clone()).collect() }
}

/// Share of reviewed items accepted as suggested. Items still `Suggested`
/// are not counted; `None` when nothing has been reviewed.
pub fn acceptance_rate(items: &[ReviewItem]) -> Option<f64> {
    let reviewed: Vec<&ReviewItem> = items.iter().filter(|i| i.state != ReviewState::Suggested).collect();
    if reviewed.is_empty() {
        return None;
    }
    let accepted = reviewed.iter().filter(|i| matches!(i.state, ReviewState::Confirmed | ReviewState::Committed) && !i.was_edited()).count();
    Some(accepted as f64 / reviewed.len() as f64)
}

/// Concurrent store of review items. Transitions on one item are serialized
/// by compare-and-set on its state.
#[derive(Debug, Default)]
pub struct ReviewSession {
    items: Mutex<BTreeMap<String, ReviewItem>>,
}

impl ReviewSession {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, ReviewItem>> {
        self.items.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Inserts or replaces items (used when creating and when restoring).
    pub fn upsert(&self, items: impl IntoIterator<Item = ReviewItem>) {
        let mut map = self.lock();
        for i in items {
            map.insert(i.item_id.clone(), i);
        }
    }

    pub fn get(&self, item_id: &str) -> Option<ReviewItem> {
        self.lock().get(item_id).cloned()
    }

    pub fn items_for(&self, doc_id: &str) -> Vec<ReviewItem> {
        let mut v: Vec<ReviewItem> = self.lock().values().filter(|i| i.doc_id == doc_id).cloned().collect();
        v.sort_by_key(|i| i.ordinal);
        v
    }

    pub fn next_ordinal(&self, doc_id: &str) -> u32 {
        self.lock().values().filter(|i| i.doc_id == doc_id).map(|i| i.ordinal + 1).max().unwrap_or(1)
    }

    /// Adds suggestions for `doc_id` as new `Suggested` items.
    pub fn add_suggestions(&self, doc_id: &str, payloads: Vec<ReviewPayload>) -> Vec<ReviewItem> {
        let mut map = self.lock();
        let first = map.values().filter(|i| i.doc_id == doc_id).map(|i| i.ordinal + 1).max().unwrap_or(1);
        let mut out = Vec::new();
        for (ordinal, p) in (first..).zip(payloads) {
            let item = ReviewItem::new(doc_id, ordinal, p);
            map.insert(item.item_id.clone(), item.clone());
            out.push(item);
        }
        out
    }

    /// Applies one transition. When `expected` is set the call fails unless
    /// the item is currently in that state.
    pub fn apply(&self, item_id: &str, action: &ReviewAction, operator_id: &str, expected: Option<ReviewState>, audit: &AuditLog) -> Result<ReviewItem, ReviewError> {
        let mut map = self.lock();
        let current = map.get(item_id).ok_or_else(|| ReviewError::UnknownItem(item_id.to_string()))?;
        if let Some(e) = expected {
            if current.state != e {
                return Err(ReviewError::StaleState { item_id: item_id.to_string(), expected: e, actual: current.state });
            }
        }
        let next = transition(current, action, operator_id, audit)?;
        map.insert(item_id.to_string(), next.clone());
        Ok(next)
    }

    /// Commits several items atomically. `prepare` sees the items before
    /// the commit and returns extra audit events plus a result; those events
    /// and one transition event per item go into a single batch append.
    pub fn commit_with<T, E>(
        &self,
        item_ids: &[String],
        operator_id: &str,
        audit: &AuditLog,
        prepare: impl FnOnce(&[ReviewItem]) -> Result<(Vec<(Actor, String, Value)>, T), E>,
    ) -> Result<(T, Vec<ReviewItem>), E>
    where
        E: From<ReviewError>,
    {
        let mut map = self.lock();
        let now = Utc::now();
        let mut before = Vec::new();
        let mut after = Vec::new();
        for id in item_ids {
            let item = map.get(id).ok_or_else(|| ReviewError::UnknownItem(id.clone()))?;
            after.push(item.apply(&ReviewAction::Commit, operator_id, now)?);
            before.push(item.clone());
        }
        let (mut events, result) = prepare(&before)?;
        events.extend(before.iter().zip(&after).map(|(b, a)| transition_event(b, a)));
        audit.append_batch(events).map_err(ReviewError::from)?;
        for a in &after {
            map.insert(a.item_id.clone(), a.clone());
        }
        Ok((result, after))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::FieldStatus;

    fn field(conf: f64) -> ReviewPayload {
        ReviewPayload::Field(FieldSuggestion { field_name: "Title".into(), value: "x".into(), raw_value: "x".into(), confidence: conf, source_spans: vec![], status: FieldStatus::Normalized })
    }

    #[test]
    fn transition_table() {
        let item = ReviewItem::new("d", 1, field(0.9));
        let now = Utc::now();
        assert_eq!(item.apply(&ReviewAction::Confirm, "op", now).unwrap().state, ReviewState::Confirmed);
        assert!(matches!(item.apply(&ReviewAction::Commit, "op", now), Err(ReviewError::IllegalTransition { .. })));
        let edited = item.apply(&ReviewAction::Edit("2024-03-12".into()), "op", now).unwrap();
        assert_eq!(edited.state, ReviewState::Edited);
        assert_eq!(edited.edited_value.as_deref(), Some("2024-03-12"));
        assert!(matches!(edited.apply(&ReviewAction::Confirm, "op", now), Err(ReviewError::IllegalTransition { .. })));
        assert!(matches!(item.apply(&ReviewAction::Confirm, " ", now), Err(ReviewError::MissingOperator)));
        let rejected = edited.apply(&ReviewAction::Reject, "op", now).unwrap();
        assert_eq!(rejected.edited_value, None);
        assert_eq!(rejected.replay(), (ReviewState::Rejected, None));
    }

    #[test]
    fn acceptance_counting() {
        let now = Utc::now();
        let confirmed = ReviewItem::new("d", 1, field(0.5)).apply(&ReviewAction::Confirm, "op", now).unwrap();
        let edited = ReviewItem::new("d", 2, field(0.5)).apply(&ReviewAction::Edit("y".into()), "op", now).unwrap();
        assert_eq!(acceptance_rate(&[confirmed, edited]), Some(0.5));
        assert_eq!(acceptance_rate(&[ReviewItem::new("d", 3, field(0.5))]), None);
    }
}
