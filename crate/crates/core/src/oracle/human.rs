use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use thiserror::Error;

use super::{Oracle, OracleError};
use crate::domain::{ClassId, LabelSource, LabelledPixel, PixelRef};

/// Rejections of a submission from the annotating side.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("no labelling request is pending")]
    NoRequest,
    #[error("proposal {given} is not the current one ({expected})")]
    NotCurrent { given: usize, expected: usize },
    #[error("the link is closed")]
    Closed,
}

#[derive(Debug)]
struct Request {
    id: u64,
    round: u32,
    proposals: Vec<PixelRef>,
    labels: Vec<LabelledPixel>,
}

#[derive(Debug, Default)]
struct State {
    next_id: u64,
    request: Option<Request>,
    closed: bool,
}

/// Snapshot of the request waiting for a human.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingRequest {
    pub id: u64,
    pub round: u32,
    pub proposals: Vec<PixelRef>,
    /// Index of the next proposal to label.
    pub cursor: usize,
}

/// Rendezvous between the engine, which asks for labels, and the annotation
/// server, which answers them one proposal at a time.
#[derive(Debug, Clone, Default)]
pub struct HumanLink {
    inner: Arc<(Mutex<State>, Condvar)>,
}

/// Ticket for a request created by [`human_request`].
#[derive(Debug)]
pub struct HumanHandle {
    link: HumanLink,
    id: u64,
    expected: usize,
}

impl HumanLink {
    pub fn new() -> Self {
        Self::default()
    }

    fn state(&self) -> MutexGuard<'_, State> {
        // a panicked holder leaves the state consistent, so keep going
        self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn pending(&self) -> Option<PendingRequest> {
        let s = self.state();
        s.request.as_ref().filter(|r| r.labels.len() < r.proposals.len()).map(|r| PendingRequest {
            id: r.id,
            round: r.round,
            proposals: r.proposals.clone(),
            cursor: r.labels.len(),
        })
    }

    /// Records the class of proposal `index`, which must be the current one.
    pub fn submit(&self, index: usize, class: ClassId) -> Result<(), SubmitError> {
        let mut s = self.state();
        if s.closed {
            return Err(SubmitError::Closed);
        }
        let r = s.request.as_mut().ok_or(SubmitError::NoRequest)?;
        let cursor = r.labels.len();
        if cursor >= r.proposals.len() {
            return Err(SubmitError::NoRequest);
        }
        if index != cursor {
            return Err(SubmitError::NotCurrent { given: index, expected: cursor });
        }
        r.labels.push(LabelledPixel::new(r.proposals[cursor].clone(), class, r.round, LabelSource::Human));
        self.inner.1.notify_all();
        Ok(())
    }

    /// Ends the session; a waiting collector receives what was submitted.
    pub fn close(&self) {
        self.state().closed = true;
        self.inner.1.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state().closed
    }

    /// Blocks until a request is pending or the link closes.
    pub fn wait_pending(&self, timeout: Duration) -> Option<PendingRequest> {
        let guard = self.state();
        let (guard, _) = self
            .inner
            .1
            .wait_timeout_while(guard, timeout, |s| {
                !s.closed && !s.request.as_ref().is_some_and(|r| r.labels.len() < r.proposals.len())
            })
            .unwrap_or_else(|e| e.into_inner());
        drop(guard);
        self.pending()
    }
}

/// Queues `proposals` for annotation.
pub fn human_request(link: &HumanLink, proposals: Vec<PixelRef>, round: u32) -> Result<HumanHandle, OracleError> {
    if proposals.is_empty() {
        return Err(OracleError::EmptyRequest);
    }
    let mut s = link.state();
    if s.closed {
        return Err(OracleError::Incomplete { received: Vec::new(), expected: proposals.len() });
    }
    if s.request.is_some() {
        return Err(OracleError::Busy);
    }
    s.next_id += 1;
    let id = s.next_id;
    let expected = proposals.len();
    s.request = Some(Request { id, round, proposals, labels: Vec::with_capacity(expected) });
    link.inner.1.notify_all();
    Ok(HumanHandle { link: link.clone(), id, expected })
}

/// Waits until every proposal of the request has a label. If the link
/// closes first, the labels received so far travel in the error.
pub fn human_collect(handle: HumanHandle) -> Result<Vec<LabelledPixel>, OracleError> {
    let link = &handle.link;
    let guard = link.state();
    let mut s = link
        .inner
        .1
        .wait_while(guard, |s| {
            !s.closed && s.request.as_ref().is_some_and(|r| r.id == handle.id && r.labels.len() < handle.expected)
        })
        .unwrap_or_else(|e| e.into_inner());
    let request = match s.request.take() {
        Some(r) if r.id == handle.id => r,
        other => {
            s.request = other;
            return Err(OracleError::Incomplete { received: Vec::new(), expected: handle.expected });
        }
    };
    if request.labels.len() < handle.expected {
        return Err(OracleError::Incomplete { received: request.labels, expected: handle.expected });
    }
    Ok(request.labels)
}

/// Oracle that forwards each query batch to a human over a [`HumanLink`].
pub struct HumanOracle {
    link: HumanLink,
}

impl HumanOracle {
    pub fn new(link: HumanLink) -> Self {
        Self { link }
    }
}

impl Oracle for HumanOracle {
    fn label(&mut self, queries: &[PixelRef], round: u32) -> Result<Vec<LabelledPixel>, OracleError> {
        human_collect(human_request(&self.link, queries.to_vec(), round)?)
    }
}
