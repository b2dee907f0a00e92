//! HTTP service for live annotation sessions.
//!
//! A session is an ordered queue of pixel proposals that one annotator
//! classifies by key press, or, in human-pick mode, an open-ended list of
//! pixels the annotator chooses. Every accepted label is appended to a JSON
//! Lines file and synced before the request returns, so the file is always
//! a prefix of what was submitted. Sessions survive restarts through a
//! sidecar file next to the label file.
//!
//! Endpoints:
//!
//! - `POST /sessions` creates a session from `{"proposals", "mode", "round"}`.
//! - `GET /sessions` lists sessions.
//! - `GET /sessions/{id}/next` returns the current proposal or `done`.
//! - `POST /sessions/{id}/labels` submits `{"index", "class", "elapsed_ms"}`.
//! - `GET /sessions/{id}/progress` reports counts and mean timing.
//! - `POST /sessions/{id}/picks` records a freely chosen pixel.
//! - `GET /images/{id}` serves the image as PNG.
//! - `GET /classes` returns the key map.

mod error;
mod session;
mod store;

pub use error::{ApiError, ErrorBody};
pub use session::{group_by_image, key_map, Coord, KeyBinding, SessionMode, SessionRecord};
pub use store::{StoreError, TimingRecord};

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pixelpick_core::datasets::{encode_png, Dataset};
use pixelpick_core::oracle::HumanLink;
use pixelpick_core::{LabelSource, LabelledPixel, PixelRef};
use serde::{Deserialize, Serialize};

use session::Session;
use store::Store;

struct Inner {
    dataset: Dataset,
    image_index: HashMap<String, usize>,
    keys: Vec<KeyBinding>,
    sessions: RwLock<BTreeMap<u64, Arc<Mutex<Session>>>>,
    store: Mutex<Store>,
}

/// Shared server state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn session_number(id: &str) -> Option<u64> {
    id.strip_prefix('s')?.parse().ok()
}

impl AppState {
    /// Opens (or resumes) the label file at `session_out` for `dataset`.
    pub fn open(dataset: Dataset, session_out: &Path) -> Result<Self, StoreError> {
        let store = Store::open(session_out, dataset.num_classes())?;
        let records = store.load_sessions()?;
        let timings = store.load_timings()?;
        let mut sessions = BTreeMap::new();
        for record in records {
            let mut s = Session::new(record);
            let id = s.record.id.clone();
            let timing = |index: usize| timings.iter().find(|t| t.session == id && t.index == index).map(|t| t.elapsed_ms);
            match s.record.mode {
                SessionMode::Propose => {
                    for p in &s.proposals {
                        let Some(lp) = store.db.get(p) else { break };
                        s.collected.push(lp.clone());
                    }
                    s.timings_ms = (0..s.collected.len()).map(timing).collect();
                }
                SessionMode::HumanPick => {
                    for t in timings.iter().filter(|t| t.session == id) {
                        if let Some(lp) = store.db.get(&PixelRef::new(t.image.clone(), t.row, t.col)) {
                            s.collected.push(lp.clone());
                            s.timings_ms.push(Some(t.elapsed_ms));
                        }
                    }
                }
            }
            let n = session_number(&id).unwrap_or(0);
            sessions.insert(n, Arc::new(Mutex::new(s)));
        }
        let image_index = dataset.images.iter().enumerate().map(|(i, im)| (im.id().to_string(), i)).collect();
        let keys = key_map(&dataset.class_names, &dataset.palette, dataset.keys.as_deref());
        Ok(Self {
            inner: Arc::new(Inner { dataset, image_index, keys, sessions: RwLock::new(sessions), store: Mutex::new(store) }),
        })
    }

    pub fn key_map(&self) -> &[KeyBinding] {
        &self.inner.keys
    }

    /// Every label collected so far, in file order.
    pub fn labels(&self) -> Vec<LabelledPixel> {
        lock(&self.inner.store).db.entries().to_vec()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let missing = || ApiError::not_found("unknown_session", format!("no session `{id}`"));
        let n = session_number(id).ok_or_else(missing)?;
        let sessions = self.inner.sessions.read().unwrap_or_else(|e| e.into_inner());
        sessions.get(&n).cloned().ok_or_else(missing)
    }

    fn check_coord(&self, c: &Coord) -> Result<(), ApiError> {
        let i = *self
            .inner
            .image_index
            .get(&c.image)
            .ok_or_else(|| ApiError::bad_request("unknown_image", format!("no image `{}`", c.image)))?;
        let im = &self.inner.dataset.images[i];
        if !im.contains(c.row, c.col) {
            return Err(ApiError::bad_request(
                "out_of_bounds",
                format!("({}, {}) is outside `{}` ({}x{})", c.row, c.col, c.image, im.height(), im.width()),
            ));
        }
        Ok(())
    }

    fn check_class(&self, class: u32) -> Result<u8, ApiError> {
        let c = self.inner.dataset.num_classes();
        if (class as usize) < c {
            Ok(class as u8)
        } else {
            Err(ApiError::bad_request("invalid_class", format!("class {class} is not below {c}")))
        }
    }

    /// Validates and persists a new session. Propose-mode proposals are
    /// grouped by image unless `keep_order` is set.
    pub fn create_session(
        &self,
        proposals: Vec<Coord>,
        mode: SessionMode,
        round: Option<u32>,
        keep_order: bool,
    ) -> Result<SessionRecord, ApiError> {
        if mode == SessionMode::Propose && proposals.is_empty() {
            return Err(ApiError::bad_request("empty_proposals", "propose mode needs at least one proposal"));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &proposals {
            self.check_coord(c)?;
            if !seen.insert(c) {
                return Err(ApiError::bad_request(
                    "duplicate_proposal",
                    format!("{}@({}, {}) is proposed twice", c.image, c.row, c.col),
                ));
            }
        }
        let proposals = if keep_order { proposals } else { group_by_image(&proposals) };
        let store = lock(&self.inner.store);
        if let Some(c) = proposals.iter().find(|c| store.contains(&PixelRef::from(*c))) {
            return Err(ApiError::conflict("already_labelled", format!("{}@({}, {}) already has a label", c.image, c.row, c.col)));
        }
        let last = store.max_round();
        let round = round.unwrap_or(last);
        if round < last {
            return Err(ApiError::conflict("round_order", format!("round {round} is earlier than the last labelled round {last}")));
        }
        let mut sessions = self.inner.sessions.write().unwrap_or_else(|e| e.into_inner());
        let n = sessions.keys().next_back().map_or(1, |k| k + 1);
        let record = SessionRecord { id: format!("s{n}"), mode, round, proposals };
        let mut records: Vec<SessionRecord> = sessions.values().map(|s| lock(s).record.clone()).collect();
        records.push(record.clone());
        store.save_sessions(&records).map_err(|e| ApiError::internal(e.to_string()))?;
        sessions.insert(n, Arc::new(Mutex::new(Session::new(record.clone()))));
        Ok(record)
    }

    fn persist(&self, session: &mut Session, lp: LabelledPixel, index: usize, elapsed_ms: u64) -> Result<(), ApiError> {
        let mut store = lock(&self.inner.store);
        if store.contains(&lp.pixel) {
            return Err(ApiError::conflict("already_labelled", format!("{} already has a label", lp.pixel)));
        }
        if lp.round < store.max_round() {
            return Err(ApiError::conflict("round_order", format!("session round {} is behind the label file", lp.round)));
        }
        store.record(&lp, &session.record.id, index, elapsed_ms).map_err(|e| ApiError::internal(e.to_string()))?;
        session.collected.push(lp);
        session.timings_ms.push(Some(elapsed_ms));
        Ok(())
    }

    /// Labels the current proposal of a propose-mode session.
    pub fn submit(&self, id: &str, req: &SubmitRequest) -> Result<SubmitResponse, ApiError> {
        let session = self.session(id)?;
        let mut s = lock(&session);
        if s.record.mode != SessionMode::Propose {
            return Err(ApiError::conflict("wrong_mode", "labels are for propose sessions; use picks"));
        }
        let cursor = s.cursor();
        if s.is_done() {
            return Err(ApiError::conflict("session_done", "every proposal is labelled").with_cursor(cursor));
        }
        if req.index != cursor {
            return Err(ApiError::conflict("wrong_index", format!("index {} is not the current proposal {cursor}", req.index))
                .with_cursor(cursor));
        }
        let class = self.check_class(req.class)?;
        let lp = LabelledPixel::new(s.proposals[cursor].clone(), class, s.record.round, LabelSource::Human);
        self.persist(&mut s, lp, cursor, req.elapsed_ms)?;
        if let Some((link, _)) = &s.link {
            if let Err(e) = link.submit(cursor, class) {
                log::warn!("session {id}: engine did not take label {cursor}: {e}");
            }
        }
        Ok(SubmitResponse { accepted: true, cursor: s.cursor(), total: s.total(), done: s.is_done() })
    }

    /// Records a pixel chosen by the annotator in a human-pick session.
    pub fn pick(&self, id: &str, req: &PickRequest) -> Result<SubmitResponse, ApiError> {
        let session = self.session(id)?;
        let mut s = lock(&session);
        if s.record.mode != SessionMode::HumanPick {
            return Err(ApiError::conflict("wrong_mode", "picks are for human_pick sessions"));
        }
        let coord = Coord { image: req.image.clone(), row: req.row, col: req.col };
        self.check_coord(&coord)?;
        let class = self.check_class(req.class)?;
        let lp = LabelledPixel::new(PixelRef::from(&coord), class, s.record.round, LabelSource::Human);
        let index = s.cursor();
        self.persist(&mut s, lp, index, req.elapsed_ms)?;
        Ok(SubmitResponse { accepted: true, cursor: s.cursor(), total: s.total(), done: false })
    }

    pub fn next(&self, id: &str) -> Result<NextResponse, ApiError> {
        let session = self.session(id)?;
        let s = lock(&session);
        let keys = self.inner.keys.clone();
        let (total, cursor) = (s.total(), s.cursor());
        if s.record.mode == SessionMode::HumanPick {
            return Ok(NextResponse { done: false, mode: s.record.mode, total, cursor, proposal: None, keys });
        }
        let proposal = s.proposals.get(cursor).map(|p| {
            let im = &self.inner.dataset.images[self.inner.image_index[&p.image_id]];
            Proposal {
                index: cursor,
                image_id: p.image_id.clone(),
                image_url: format!("/images/{}", p.image_id),
                row: p.row,
                col: p.col,
                height: im.height(),
                width: im.width(),
            }
        });
        Ok(NextResponse { done: proposal.is_none(), mode: s.record.mode, total, cursor, proposal, keys })
    }

    pub fn progress(&self, id: &str) -> Result<ProgressResponse, ApiError> {
        let session = self.session(id)?;
        let s = lock(&session);
        Ok(ProgressResponse {
            session_id: s.record.id.clone(),
            mode: s.record.mode,
            done: s.cursor(),
            total: s.total(),
            finished: s.is_done(),
            mean_ms: s.mean_ms(),
            per_class: s.per_class(self.inner.dataset.num_classes()),
        })
    }

    pub fn list(&self) -> Vec<ProgressResponse> {
        let ids: Vec<String> = {
            let sessions = self.inner.sessions.read().unwrap_or_else(|e| e.into_inner());
            sessions.values().map(|s| lock(s).record.id.clone()).collect()
        };
        ids.iter().filter_map(|id| self.progress(id).ok()).collect()
    }

    pub fn image_png(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        let id = id.strip_suffix(".png").unwrap_or(id);
        let i = self.inner.image_index.get(id).ok_or_else(|| ApiError::not_found("unknown_image", format!("no image `{id}`")))?;
        Ok(encode_png(&self.inner.dataset.images[*i]))
    }

    /// Opens a session for the request pending on `link`, unless one exists.
    /// Returns the new session id.
    pub fn adopt_link_request(&self, link: &HumanLink) -> Result<Option<String>, ApiError> {
        let Some(pending) = link.pending() else { return Ok(None) };
        {
            let sessions = self.inner.sessions.read().unwrap_or_else(|e| e.into_inner());
            if sessions.values().any(|s| lock(s).link.as_ref().is_some_and(|(_, r)| *r == pending.id)) {
                return Ok(None);
            }
        }
        let coords: Vec<Coord> = pending.proposals.iter().map(Coord::from).collect();
        // the link expects answers in its own order
        let record = self.create_session(coords, SessionMode::Propose, Some(pending.round), true)?;
        let session = self.session(&record.id)?;
        lock(&session).link = Some((link.clone(), pending.id));
        log::info!("session {} opened for {} engine proposals (round {})", record.id, pending.proposals.len(), pending.round);
        Ok(Some(record.id))
    }
}

/// Watches `link` and turns each engine request into a session, until the
/// link closes.
pub fn spawn_link_watcher(state: AppState, link: HumanLink) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        loop {
            let watched = link.clone();
            let waited = tokio::task::spawn_blocking(move || watched.wait_pending(Duration::from_millis(250))).await;
            if waited.is_err() || link.is_closed() {
                break;
            }
            if let Err(e) = state.adopt_link_request(&link) {
                log::error!("cannot open a session for the engine request: {}", e.body.detail);
                link.close();
                break;
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub proposals: Vec<Coord>,
    #[serde(default)]
    pub mode: SessionMode,
    pub round: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub mode: SessionMode,
    pub round: u32,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub index: usize,
    pub class: u32,
    #[serde(default)]
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickRequest {
    pub image: String,
    pub row: usize,
    pub col: usize,
    pub class: u32,
    #[serde(default)]
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub accepted: bool,
    pub cursor: usize,
    pub total: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub index: usize,
    pub image_id: String,
    pub image_url: String,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextResponse {
    pub done: bool,
    pub mode: SessionMode,
    pub total: usize,
    pub cursor: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposal: Option<Proposal>,
    pub keys: Vec<KeyBinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressResponse {
    pub session_id: String,
    pub mode: SessionMode,
    pub done: usize,
    pub total: usize,
    pub finished: bool,
    pub mean_ms: Option<f64>,
    pub per_class: Vec<usize>,
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let Json(req) = body?;
    let record = state.create_session(req.proposals, req.mode, req.round, false)?;
    let total = if record.mode == SessionMode::Propose { record.proposals.len() } else { 0 };
    Ok((StatusCode::CREATED, Json(CreateSessionResponse { session_id: record.id, mode: record.mode, round: record.round, total })))
}

async fn list_sessions(State(state): State<AppState>) -> Json<Vec<ProgressResponse>> {
    Json(state.list())
}

async fn next_proposal(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<NextResponse>, ApiError> {
    state.next(&id).map(Json)
}

async fn submit_label(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> Result<Json<SubmitResponse>, ApiError> {
    let Json(req) = body?;
    state.submit(&id, &req).map(Json)
}

async fn pick_pixel(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PickRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SubmitResponse>), ApiError> {
    let Json(req) = body?;
    state.pick(&id, &req).map(|r| (StatusCode::CREATED, Json(r)))
}

async fn progress(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<ProgressResponse>, ApiError> {
    state.progress(&id).map(Json)
}

async fn image(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let bytes = state.image_png(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn classes(State(state): State<AppState>) -> Json<Vec<KeyBinding>> {
    Json(state.key_map().to_vec())
}

async fn fallback() -> ApiError {
    ApiError::not_found("not_found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/next", get(next_proposal))
        .route("/sessions/{id}/labels", post(submit_label))
        .route("/sessions/{id}/progress", get(progress))
        .route("/sessions/{id}/picks", post(pick_pixel))
        .route("/images/{id}", get(image))
        .route("/classes", get(classes))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
