//! `serve-annotate`: cluster-level annotation over HTTP.
//!
//! The label rules live in [`Annotator`]; the axum layer only moves bytes. All
//! mutation goes through one mutex, so submissions are applied one at a time.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Deserialize;
use serde_json::{json, Value};
use weaklab_core::activelabel::{label_statistics, medoid, LabelSet};
use weaklab_core::geometry::{project_all, Point3};

use crate::error::{io_err, CliError, Result};
use crate::manifest::{sha256_hex, RunManifest};
use crate::store::{labels_file, labels_text_file, load_frame, seeds_of, LabelArtifact};

pub const LOCK_FILE: &str = "annotate.lock";
pub const MAX_SCATTER: usize = 2000;

/// An API failure: HTTP status plus a stable category.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub category: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: u16, category: &'static str, message: impl Into<String>) -> Self {
        Self { status, category, message: message.into() }
    }

    pub fn body(&self) -> Value {
        json!({"error": self.category, "message": self.message})
    }
}

type ApiResult = std::result::Result<Value, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pure,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    pub class: ClassRef,
    pub point_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub request_id: Option<String>,
    pub cluster_id: i64,
    pub mode: Mode,
    pub assignments: Vec<Assignment>,
}

/// Crop of a cluster in the camera that sees most of it.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ImageRef {
    camera: usize,
    bounds: [f64; 4],
}

struct SceneEntry {
    points: Vec<Point3>,
    art: LabelArtifact,
    members: Vec<Vec<usize>>,
    images: Vec<Option<ImageRef>>,
}

impl SceneEntry {
    fn status(&self, cluster: usize) -> &'static str {
        let l = &self.art.labels;
        let m = &self.members[cluster];
        let sparse = m.iter().filter(|i| l.sparse.contains_key(i)).count();
        if sparse >= 2 || m.iter().any(|i| l.negative.contains_key(i)) {
            "mixed-labeled"
        } else if sparse == 1 || m.iter().any(|i| l.propagated.contains_key(i)) {
            "pure-labeled"
        } else {
            "pending"
        }
    }
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub struct Annotator {
    scenes: BTreeMap<u64, SceneEntry>,
    class_names: Vec<String>,
    readonly: bool,
    /// Where accepted submissions are persisted; `None` keeps them in memory.
    dir: Option<PathBuf>,
    replies: HashMap<String, Value>,
    _lock: Option<LockGuard>,
}

fn image_refs(
    points: &[Point3],
    members: &[Vec<usize>],
    frame_cameras: &[weaklab_core::geometry::CameraModel],
) -> Vec<Option<ImageRef>> {
    let hits = project_all(points, frame_cameras);
    let mut per_point: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); points.len()];
    for (cam, hs) in hits.iter().enumerate() {
        for h in hs {
            per_point[h.point_index].push((cam, h.u, h.v));
        }
    }
    members
        .iter()
        .map(|m| {
            let mut count = vec![0usize; frame_cameras.len()];
            for &i in m {
                for &(c, _, _) in &per_point[i] {
                    count[c] += 1;
                }
            }
            let (camera, &n) = count.iter().enumerate().max_by_key(|&(c, &n)| (n, std::cmp::Reverse(c)))?;
            if n == 0 {
                return None;
            }
            let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            for &i in m {
                for &(c, u, v) in &per_point[i] {
                    if c == camera {
                        b = [b[0].min(u), b[1].min(v), b[2].max(u), b[3].max(v)];
                    }
                }
            }
            Some(ImageRef { camera, bounds: b })
        })
        .collect()
}

impl Annotator {
    /// In-memory annotator over prepared label artifacts (`points` per scene are
    /// the camera-subset points).
    pub fn new(scenes: Vec<(Vec<Point3>, LabelArtifact)>, readonly: bool) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut class_names = Vec::new();
        for (points, art) in scenes {
            if points.len() != art.subset.len() {
                return Err(CliError::Artifact(format!("scene {}: points and labels disagree", art.seed)));
            }
            class_names = art.class_names.clone();
            let members = art.units.members();
            let images = vec![None; members.len()];
            map.insert(art.seed, SceneEntry { points, art, members, images });
        }
        Ok(Self { scenes: map, class_names, readonly, dir: None, replies: HashMap::new(), _lock: None })
    }

    /// Loads every labelled scene; unless read-only, takes the directory lock and
    /// persists each accepted submission. `reset` starts from empty label sets.
    pub fn open(scenes_dir: &Path, labels_dir: &Path, readonly: bool, reset: bool) -> Result<Self> {
        let lock = if readonly {
            None
        } else {
            let path = labels_dir.join(LOCK_FILE);
            OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    CliError::Lock(format!("{} exists: another annotation session holds these labels", path.display()))
                } else {
                    CliError::Io { path: path.clone(), source: e }
                }
            })?;
            Some(LockGuard(path))
        };
        let mut scenes = Vec::new();
        let mut refs = Vec::new();
        for seed in seeds_of(labels_dir)? {
            let mut art = LabelArtifact::load(labels_dir, seed)?;
            let frame = load_frame(scenes_dir, seed)?;
            if art.full_size != frame.len() || art.subset.iter().any(|&i| i >= frame.len()) {
                return Err(CliError::Artifact(format!("labels of seed {seed} do not match its scene")));
            }
            if reset {
                art.labels = LabelSet::new(art.subset.len());
            }
            let sub = frame.restrict(&art.subset);
            refs.push(image_refs(&sub.points, &art.units.members(), &sub.cameras));
            scenes.push((sub.points, art));
        }
        let mut a = Self::new(scenes, readonly)?;
        for (entry, r) in a.scenes.values_mut().zip(refs) {
            entry.images = r;
        }
        a.dir = if readonly { None } else { Some(labels_dir.to_path_buf()) };
        a._lock = lock;
        if reset && !readonly {
            let seeds: Vec<u64> = a.scenes.keys().copied().collect();
            for seed in seeds {
                a.persist(seed)?;
            }
        }
        Ok(a)
    }

    pub fn labels(&self, seed: u64) -> Option<&LabelSet> {
        self.scenes.get(&seed).map(|e| &e.art.labels)
    }

    fn classes_json(&self) -> Value {
        Value::Array(self.class_names.iter().enumerate().map(|(id, n)| json!({"id": id, "name": n})).collect())
    }

    fn scene(&self, seed: &str) -> std::result::Result<(u64, &SceneEntry), ApiError> {
        let not_found = || ApiError::new(404, "not_found", format!("unknown scene `{seed}`"));
        let s: u64 = seed.parse().map_err(|_| not_found())?;
        self.scenes.get(&s).map(|e| (s, e)).ok_or_else(not_found)
    }

    pub fn scenes(&self) -> Value {
        let list: Vec<Value> = self
            .scenes
            .iter()
            .map(|(seed, e)| {
                let done = (0..e.members.len()).filter(|&c| e.status(c) != "pending").count();
                json!({"scene": seed, "points": e.points.len(), "clusters": e.members.len(), "finalized": done})
            })
            .collect();
        json!({"scenes": list, "classes": self.classes_json()})
    }

    pub fn clusters(&self, seed: &str) -> ApiResult {
        let (seed, e) = self.scene(seed)?;
        let clusters: Vec<Value> = e
            .members
            .iter()
            .enumerate()
            .map(|(id, m)| {
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for &i in m {
                    let p = e.points[i];
                    lo = [lo[0].min(p[0]), lo[1].min(p[1])];
                    hi = [hi[0].max(p[0]), hi[1].max(p[1])];
                }
                let stride = m.len().div_ceil(MAX_SCATTER).max(1);
                let scatter: Vec<Value> = m
                    .iter()
                    .step_by(stride)
                    .map(|&i| json!({"index": i, "x": e.points[i][0], "y": e.points[i][1], "z": e.points[i][2]}))
                    .collect();
                let image = e.images[id].map(|r| {
                    json!({"camera": r.camera, "u_min": r.bounds[0], "v_min": r.bounds[1], "u_max": r.bounds[2], "v_max": r.bounds[3]})
                });
                json!({
                    "id": id,
                    "points": m.len(),
                    "status": e.status(id),
                    "medoid": medoid(&e.points, m),
                    "bbox": {"min_x": lo[0], "min_y": lo[1], "max_x": hi[0], "max_y": hi[1]},
                    "scatter": scatter,
                    "image": image,
                })
            })
            .collect();
        Ok(json!({"scene": seed, "points": e.points.len(), "classes": self.classes_json(), "clusters": clusters}))
    }

    pub fn progress(&self) -> ApiResult {
        let sets: Vec<LabelSet> = self.scenes.values().map(|e| e.art.labels.clone()).collect();
        let sizes: Vec<usize> = self.scenes.values().map(|e| e.art.full_size).collect();
        let s = label_statistics(&sets, &sizes).map_err(|e| ApiError::new(500, "internal", e.to_string()))?;
        let clusters: usize = self.scenes.values().map(|e| e.members.len()).sum();
        let finalized: usize =
            self.scenes.values().map(|e| (0..e.members.len()).filter(|&c| e.status(c) != "pending").count()).sum();
        Ok(json!({
            "scenes": self.scenes.len(),
            "clusters": clusters,
            "finalized_clusters": finalized,
            "total_points": s.total_points,
            "training_points": s.training_points,
            "sparse": s.sparse,
            "propagated": s.propagated,
            "negative": s.negative,
            "sparse_rate": s.sparse_rate,
            "propagated_rate": s.propagated_rate,
            "negative_rate": s.negative_rate,
        }))
    }

    fn class_id(&self, c: &ClassRef) -> std::result::Result<usize, ApiError> {
        let id = match c {
            ClassRef::Id(k) => Some(*k).filter(|&k| k < self.class_names.len()),
            ClassRef::Name(n) => self.class_names.iter().position(|x| x == n),
        };
        id.ok_or_else(|| ApiError::new(422, "invalid", format!("unknown class {c:?}")))
    }

    /// Applies one submission. Either every label of the cluster is written or
    /// nothing changes.
    pub fn submit(&mut self, seed: &str, body: &[u8]) -> ApiResult {
        if self.readonly {
            return Err(ApiError::new(403, "readonly", "the service runs read-only"));
        }
        let (seed, _) = self.scene(seed)?;
        let req: LabelRequest = serde_json::from_slice(body)
            .map_err(|e| ApiError::new(422, "invalid", format!("malformed submission: {e}")))?;
        if let Some(id) = &req.request_id {
            if let Some(reply) = self.replies.get(id) {
                return Ok(reply.clone());
            }
        }
        let invalid = |m: String| ApiError::new(422, "invalid", m);
        let entry = &self.scenes[&seed];
        let cluster = usize::try_from(req.cluster_id)
            .ok()
            .filter(|&c| c < entry.members.len())
            .ok_or_else(|| ApiError::new(404, "not_found", format!("unknown cluster {}", req.cluster_id)))?;
        if entry.status(cluster) != "pending" {
            return Err(ApiError::new(409, "finalized", format!("cluster {cluster} is already labeled")));
        }
        let members = &entry.members[cluster];
        let mut picks: Vec<(usize, usize)> = Vec::new();
        for a in &req.assignments {
            let class = self.class_id(&a.class)?;
            let point = match (a.point_index, req.mode) {
                (Some(p), _) => {
                    if members.binary_search(&p).is_err() {
                        return Err(invalid(format!("point {p} is not in cluster {cluster}")));
                    }
                    p
                }
                (None, Mode::Pure) => medoid(&entry.points, members).expect("clusters are non-empty"),
                (None, Mode::Mixed) => return Err(invalid("mixed assignments need a point_index per class".into())),
            };
            picks.push((class, point));
        }
        let mut classes: Vec<usize> = picks.iter().map(|p| p.0).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut points: Vec<usize> = picks.iter().map(|p| p.1).collect();
        points.sort_unstable();
        points.dedup();
        match req.mode {
            Mode::Pure if picks.len() != 1 => return Err(invalid("pure mode takes exactly one assignment".into())),
            Mode::Mixed if classes.len() < 2 => return Err(invalid("mixed mode needs at least two classes".into())),
            Mode::Mixed if classes.len() != picks.len() || points.len() != picks.len() => {
                return Err(invalid("mixed mode takes one distinct point per class".into()))
            }
            _ => {}
        }
        let mut labels = entry.art.labels.clone();
        let apply = |labels: &mut LabelSet| -> weaklab_core::Result<(usize, usize, usize)> {
            for &(class, p) in &picks {
                labels.add_sparse(p, class)?;
            }
            let rest = members.iter().filter(|i| !points.contains(i));
            let n = rest.clone().count();
            match req.mode {
                Mode::Pure => {
                    for &i in rest {
                        labels.add_propagated(i, picks[0].0)?;
                    }
                    Ok((picks.len(), n, 0))
                }
                Mode::Mixed => {
                    for &i in rest {
                        labels.add_negative(i, classes.clone())?;
                    }
                    Ok((picks.len(), 0, n))
                }
            }
        };
        // pseudo labels from an earlier run may sit on cluster members
        let (s, p, n) = apply(&mut labels).map_err(|e| ApiError::new(409, "conflict", e.to_string()))?;
        self.scenes.get_mut(&seed).unwrap().art.labels = labels;
        self.persist(seed).map_err(|e| ApiError::new(500, e.category(), e.to_string()))?;
        let reply = json!({
            "scene": seed,
            "cluster_id": cluster,
            "status": self.scenes[&seed].status(cluster),
            "applied": {"sparse": s, "propagated": p, "negative": n},
            "request_id": req.request_id,
        });
        if let Some(id) = req.request_id {
            self.replies.insert(id, reply.clone());
        }
        Ok(reply)
    }

    /// Rewrites the scene's label files and their digests in the manifest.
    fn persist(&self, seed: u64) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let art = &self.scenes[&seed].art;
        let files = [
            (labels_file(seed), art.to_container()?.to_bytes()),
            (labels_text_file(seed), art.labels.to_text().into_bytes()),
        ];
        let mut manifest = RunManifest::read(dir)?;
        for (name, bytes) in &files {
            let tmp = dir.join(format!("{name}.tmp"));
            std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
            std::fs::rename(&tmp, dir.join(name)).map_err(io_err(&tmp))?;
            let digest = sha256_hex(bytes);
            match manifest.artifacts.iter_mut().find(|(n, _)| n == name) {
                Some(slot) => slot.1 = digest,
                None => manifest.artifacts.push((name.clone(), digest)),
            }
        }
        manifest.write(dir)
    }
}

pub type Shared = Arc<Mutex<Annotator>>;

fn respond(r: ApiResult) -> Response {
    let (status, body) = match r {
        Ok(v) => (StatusCode::OK, v),
        Err(e) => (StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), e.body()),
    };
    (status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
}

async fn get_scenes(State(s): State<Shared>) -> Response {
    respond(Ok(s.lock().unwrap().scenes()))
}

async fn get_clusters(State(s): State<Shared>, UrlPath(scene): UrlPath<String>) -> Response {
    respond(s.lock().unwrap().clusters(&scene))
}

async fn post_labels(State(s): State<Shared>, UrlPath(scene): UrlPath<String>, body: Bytes) -> Response {
    respond(s.lock().unwrap().submit(&scene, &body))
}

async fn get_progress(State(s): State<Shared>) -> Response {
    respond(s.lock().unwrap().progress())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/scenes", get(get_scenes))
        .route("/api/clusters/{scene}", get(get_clusters))
        .route("/api/labels/{scene}", post(post_labels))
        .route("/api/progress", get(get_progress))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(annotator: Annotator, host: &str, port: u16) -> Result<()> {
    let addr = format!("{host}:{port}");
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(io_err(Path::new(&addr)))?;
    log::info!("serve-annotate listening on http://{}", addr);
    axum::serve(listener, router(Arc::new(Mutex::new(annotator)))).await.map_err(io_err(Path::new(&addr)))
}
