//! REST facade over scene generation, rendering, editing and export.

mod error;
pub mod scene;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use singrav::apps::{
    animate, export_mesh, stl_bytes, AnimationConfig, EditMask, EmptySample, FrameIndex, HarmonizeOptions,
    DEFAULT_DENSITY_THRESHOLD,
};
use singrav::camera::Camera;
use singrav::dataio::DEFAULT_DEPTH_SCALE;
use singrav::io::{encode_depth_png, encode_rgb_png};
use singrav::pyramid::{GeneratorStack, NoiseStack};
use singrav::render::{render, samples_for_scale, RaySampleSpec};
use singrav::volume::sgrv_bytes;
use tokio::sync::OwnedMutexGuard;
use tower_http::cors::{Any, CorsLayer};
use uuid::Uuid;

pub use error::{ErrorBody, Result, ServiceError};
use scene::{apply_edit, load_scene, save_scene, scene_dir, Edit, HistoryEntry, SceneData, SceneMeta};

pub const DEFAULT_CACHE_ENTRIES: usize = 256;
pub const DEFAULT_PORT: u16 = 8080;
const MAX_SIDE: usize = 1024;
const MAX_FRAMES: usize = 240;
const DEFAULT_FOV: f64 = 33.40;
const DEPTH_MARGIN: f64 = 1.75;

struct Scene {
    mutate: Arc<tokio::sync::Mutex<()>>,
    data: RwLock<SceneData>,
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    hash: String,
    kind: &'static str,
    query: String,
}

struct Inner {
    stack: Option<Arc<GeneratorStack>>,
    checkpoint: Option<String>,
    root: PathBuf,
    scenes: RwLock<HashMap<Uuid, Arc<Scene>>>,
    cache: Mutex<LruCache<CacheKey, Bytes>>,
}

/// Shared server state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Opens the scene store at `root`, replaying and verifying every saved scene.
    pub fn new(stack: Option<GeneratorStack>, checkpoint: Option<&Path>, root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root).map_err(|e| ServiceError::Internal(format!("{}: {e}", root.display())))?;
        let mut scenes = HashMap::new();
        if let Some(stack) = &stack {
            let entries =
                std::fs::read_dir(&root).map_err(|e| ServiceError::Internal(format!("{}: {e}", root.display())))?;
            for entry in entries.flatten() {
                let dir = entry.path();
                if !dir.join("scene.json").exists() {
                    continue;
                }
                match load_scene(stack, &dir) {
                    Ok(data) => {
                        scenes.insert(data.meta.scene_id, Arc::new(Scene::new(data)));
                    }
                    Err(e) => log::error!("skipping {}: {e}", dir.display()),
                }
            }
        }
        Ok(Self {
            inner: Arc::new(Inner {
                stack: stack.map(Arc::new),
                checkpoint: checkpoint.map(|p| p.display().to_string()),
                root,
                scenes: RwLock::new(scenes),
                cache: Mutex::new(LruCache::new(NonZeroUsize::new(DEFAULT_CACHE_ENTRIES).unwrap())),
            }),
        })
    }

    pub fn scene_count(&self) -> usize {
        self.inner.scenes.read().unwrap().len()
    }

    pub fn cached_renders(&self) -> usize {
        self.inner.cache.lock().unwrap().len()
    }

    /// Takes the scene's mutation lock, as an edit request would; `None` when busy or unknown.
    pub fn try_lock_scene(&self, id: Uuid) -> Option<OwnedMutexGuard<()>> {
        let scene = self.inner.scenes.read().unwrap().get(&id).cloned()?;
        scene.mutate.clone().try_lock_owned().ok()
    }

    fn stack(&self) -> Result<Arc<GeneratorStack>> {
        self.inner.stack.clone().ok_or(ServiceError::NoCheckpoint)
    }

    fn scene(&self, id: &str) -> Result<Arc<Scene>> {
        let uuid = Uuid::parse_str(id).map_err(|_| ServiceError::NotFound(id.to_string()))?;
        self.inner
            .scenes
            .read()
            .unwrap()
            .get(&uuid)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    fn cached(&self, key: &CacheKey) -> Option<Bytes> {
        self.inner.cache.lock().unwrap().get(key).cloned()
    }

    fn store(&self, key: CacheKey, bytes: Bytes) {
        self.inner.cache.lock().unwrap().put(key, bytes);
    }
}

impl Scene {
    fn new(data: SceneData) -> Self {
        Self {
            mutate: Arc::new(tokio::sync::Mutex::new(())),
            data: RwLock::new(data),
        }
    }

    fn lock(&self, id: &str) -> Result<OwnedMutexGuard<()>> {
        self.mutate
            .clone()
            .try_lock_owned()
            .map_err(|_| ServiceError::Conflict(id.to_string()))
    }
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([
            HeaderName::from_static("x-depth-available"),
            HeaderName::from_static("x-depth-scale"),
        ]);
    Router::new()
        .route("/health", get(health))
        .route("/scenes", post(create_scene))
        .route("/scenes/{id}", get(scene_info))
        .route("/scenes/{id}/render", get(render_color))
        .route("/scenes/{id}/depth", get(render_depth))
        .route("/scenes/{id}/edits", post(post_edit))
        .route("/scenes/{id}/harmonize", post(post_harmonize))
        .route("/scenes/{id}/volume", get(get_volume))
        .route("/scenes/{id}/mesh", get(get_mesh))
        .route("/scenes/{id}/animation", get(get_animation))
        .fallback(|| async { ServiceError::NotFound("no such route".into()) })
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

fn query<T>(q: std::result::Result<Query<T>, QueryRejection>) -> Result<T> {
    q.map(|Query(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

fn json_body<T>(body: std::result::Result<Json<T>, JsonRejection>) -> Result<T> {
    body.map(|Json(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

#[derive(Serialize)]
struct Health {
    checkpoint_loaded: bool,
    num_scales: Option<usize>,
    scenes: usize,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        checkpoint_loaded: state.inner.stack.is_some(),
        num_scales: state.inner.stack.as_ref().map(|s| s.num_scales()),
        scenes: state.scene_count(),
    })
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub scene_id: Uuid,
    pub seed: u64,
}

async fn create_scene(
    State(state): State<AppState>,
    body: std::result::Result<Option<Json<CreateRequest>>, JsonRejection>,
) -> Result<(StatusCode, Json<Created>)> {
    let stack = state.stack()?;
    let body = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let seed = body.and_then(|Json(b)| b.seed).unwrap_or_else(rand_seed);
    let st = state.clone();
    let data = blocking(move || {
        let (volume, noise) = stack.sample_scene(seed)?;
        let meta = SceneMeta {
            scene_id: Uuid::new_v4(),
            seed,
            checkpoint: st.inner.checkpoint.clone(),
            history: Vec::new(),
            compacted: false,
        };
        let data = SceneData::new(meta, noise, volume);
        save_scene(&st.inner.root, &data)?;
        Ok(data)
    })
    .await?;
    let id = data.meta.scene_id;
    state.inner.scenes.write().unwrap().insert(id, Arc::new(Scene::new(data)));
    Ok((StatusCode::CREATED, Json(Created { scene_id: id, seed })))
}

fn rand_seed() -> u64 {
    let id = Uuid::new_v4();
    u64::from_le_bytes(id.as_bytes()[..8].try_into().unwrap()) >> 11
}

#[derive(Serialize)]
struct SceneInfo {
    scene_id: Uuid,
    seed: u64,
    dims: [usize; 3],
    content_hash: String,
    history: Vec<HistoryEntry>,
    compacted: bool,
}

async fn scene_info(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SceneInfo>> {
    let scene = state.scene(&id)?;
    let d = scene.data.read().unwrap();
    Ok(Json(SceneInfo {
        scene_id: d.meta.scene_id,
        seed: d.meta.seed,
        dims: d.volume.dims(),
        content_hash: d.hash.clone(),
        history: d.meta.history.clone(),
        compacted: d.meta.compacted,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewQuery {
    pose: Option<String>,
    w: Option<usize>,
    h: Option<usize>,
    fov: Option<f64>,
    near: Option<f64>,
    far: Option<f64>,
}

fn parse_pose(s: &str) -> Result<[f64; 16]> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| ServiceError::BadRequest(format!("pose: {e}")))?;
    let pose: [f64; 16] = vals
        .try_into()
        .map_err(|v: Vec<f64>| ServiceError::BadRequest(format!("pose needs 16 values, got {}", v.len())))?;
    if pose.iter().any(|x| !x.is_finite()) {
        return Err(ServiceError::BadRequest("pose values must be finite".into()));
    }
    Ok(pose)
}

impl ViewQuery {
    fn camera(&self, default_side: usize) -> Result<Camera> {
        let (w, h) = (self.w.unwrap_or(default_side), self.h.unwrap_or(default_side));
        if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
            return Err(ServiceError::BadRequest(format!("w and h must lie in 1..={MAX_SIDE}")));
        }
        let Some(pose) = &self.pose else {
            return Ok(Camera::default_view(w, h)?);
        };
        let pose = parse_pose(pose)?;
        let dist = (pose[3] * pose[3] + pose[7] * pose[7] + pose[11] * pose[11]).sqrt();
        let near = self.near.unwrap_or((dist - DEPTH_MARGIN).max(1e-3));
        let far = self.far.unwrap_or(dist + DEPTH_MARGIN);
        Camera::new(self.fov.unwrap_or(DEFAULT_FOV), w, h, near, far, pose)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))
    }

    fn key(&self) -> String {
        format!("{:?}|{:?}|{:?}|{:?}|{:?}|{:?}", self.pose, self.w, self.h, self.fov, self.near, self.far)
    }
}

fn png(bytes: Bytes) -> Response {
    (
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (HeaderName::from_static("x-depth-available"), HeaderValue::from_static("true")),
            (
                HeaderName::from_static("x-depth-scale"),
                HeaderValue::from_str(&DEFAULT_DEPTH_SCALE.to_string()).unwrap(),
            ),
        ],
        bytes,
    )
        .into_response()
}

async fn render_view(state: AppState, id: String, q: ViewQuery, depth: bool) -> Result<Response> {
    let stack = state.stack()?;
    let scene = state.scene(&id)?;
    let camera = q.camera(64)?;
    let (volume, hash) = {
        let d = scene.data.read().unwrap();
        (d.volume.clone(), d.hash.clone())
    };
    let key = CacheKey {
        hash,
        kind: if depth { "depth" } else { "color" },
        query: q.key(),
    };
    if let Some(b) = state.cached(&key) {
        return Ok(png(b));
    }
    let n = stack.num_scales();
    let bytes = blocking(move || {
        let spec = RaySampleSpec::new(samples_for_scale(n, n))?;
        let out = render(&volume, &camera, spec)?;
        Ok(if depth {
            encode_depth_png(&out.depth, DEFAULT_DEPTH_SCALE)?
        } else {
            encode_rgb_png(&out.color)?
        })
    })
    .await?;
    let bytes = Bytes::from(bytes);
    state.store(key, bytes.clone());
    Ok(png(bytes))
}

async fn render_color(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    q: std::result::Result<Query<ViewQuery>, QueryRejection>,
) -> Result<Response> {
    let q = query(q)?;
    render_view(state, id, q, false).await
}

async fn render_depth(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    q: std::result::Result<Query<ViewQuery>, QueryRejection>,
) -> Result<Response> {
    let q = query(q)?;
    render_view(state, id, q, true).await
}

#[derive(Deserialize, Serialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct SourceRef {
    pub scene_id: Uuid,
    #[serde(rename = "box")]
    pub region: EditMask,
}

/// Body of `POST /scenes/{id}/edits`.
#[derive(Deserialize, Serialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub op: String,
    pub boxes: Vec<EditMask>,
    #[serde(default)]
    pub empty_point: Option<[f64; 3]>,
    #[serde(default)]
    pub sources: Vec<SourceRef>,
}

#[derive(Serialize, Deserialize)]
pub struct EditCreated {
    pub edit_id: Uuid,
}

async fn commit(state: &AppState, scene: &Scene, volume: singrav::volume::RadianceVolume, entry: HistoryEntry, compact: bool) -> Result<()> {
    let (meta, noise) = {
        let d = scene.data.read().unwrap();
        let mut meta = d.meta.clone();
        meta.history.push(entry);
        meta.compacted |= compact;
        (meta, d.noise.clone())
    };
    let root = state.inner.root.clone();
    let data = blocking(move || {
        let data = SceneData::new(meta, noise, volume);
        save_scene(&root, &data)?;
        Ok(data)
    })
    .await?;
    *scene.data.write().unwrap() = data;
    Ok(())
}

async fn post_edit(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Json<EditRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<EditCreated>)> {
    let stack = state.stack()?;
    let scene = state.scene(&id)?;
    let req = json_body(body)?;
    let _guard = scene.lock(&id)?;
    let volume = scene.data.read().unwrap().volume.clone();
    let edit_id = Uuid::new_v4();
    let dir = scene_dir(&state.inner.root, scene.data.read().unwrap().meta.scene_id);
    let empty = match req.empty_point {
        Some(p) => EmptySample::at(&volume, p),
        None => EmptySample::default(),
    };
    let pair = |boxes: &[EditMask]| match boxes {
        [src, dst] => Ok((*src, *dst)),
        _ => Err(ServiceError::BadRequest(format!("{} needs exactly two boxes [src, dst]", req.op))),
    };
    let edit = match req.op.as_str() {
        "remove" if !req.boxes.is_empty() => Edit::Remove {
            boxes: req.boxes.clone(),
            empty,
        },
        "remove" => return Err(ServiceError::BadRequest("remove needs at least one box".into())),
        "duplicate" => {
            let (src, dst) = pair(&req.boxes)?;
            Edit::Duplicate { src, dst }
        }
        "move" => {
            let (src, dst) = pair(&req.boxes)?;
            Edit::Move { src, dst, empty }
        }
        "compose" => {
            if req.sources.len() != req.boxes.len() {
                return Err(ServiceError::BadRequest(format!(
                    "compose has {} sources but {} destination boxes",
                    req.sources.len(),
                    req.boxes.len()
                )));
            }
            let sdir = dir.join("sources");
            std::fs::create_dir_all(&sdir).map_err(|e| ServiceError::Internal(e.to_string()))?;
            let mut sources = Vec::new();
            for (k, s) in req.sources.iter().enumerate() {
                let src = state.scene(&s.scene_id.to_string())?;
                let v = src.data.read().unwrap().volume.clone();
                let name = format!("sources/{edit_id}_{k}.sgrv");
                singrav::io::write_atomic(&dir.join(&name), &sgrv_bytes(&v))?;
                sources.push((name, s.region));
            }
            Edit::Compose {
                sources,
                dst: req.boxes.clone(),
            }
        }
        other => {
            return Err(ServiceError::BadRequest(format!(
                "unknown op `{other}`; expected remove, duplicate, move or compose"
            )))
        }
    };
    let e = edit.clone();
    let out = blocking(move || apply_edit(&stack, &dir, &volume, &e)).await?;
    commit(&state, &scene, out, HistoryEntry { edit_id, edit }, false).await?;
    Ok((StatusCode::CREATED, Json(EditCreated { edit_id })))
}

#[derive(Serialize, Deserialize)]
pub struct Harmonized {
    pub status: String,
    pub dims: [usize; 3],
}

async fn post_harmonize(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Option<Json<HarmonizeOptions>>, JsonRejection>,
) -> Result<Json<Harmonized>> {
    let stack = state.stack()?;
    let scene = state.scene(&id)?;
    let body = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let options = body.map(|Json(o)| o).unwrap_or_default();
    let _guard = scene.lock(&id)?;
    let volume = scene.data.read().unwrap().volume.clone();
    let edit = Edit::Harmonize { options };
    let e = edit.clone();
    let out = blocking(move || apply_edit(&stack, Path::new(""), &volume, &e)).await?;
    let dims = out.dims();
    commit(
        &state,
        &scene,
        out,
        HistoryEntry {
            edit_id: Uuid::new_v4(),
            edit,
        },
        true,
    )
    .await?;
    Ok(Json(Harmonized {
        status: "harmonized".into(),
        dims,
    }))
}

async fn get_volume(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response> {
    let scene = state.scene(&id)?;
    let v = scene.data.read().unwrap().volume.clone();
    let bytes = blocking(move || Ok(sgrv_bytes(&v))).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshQuery {
    threshold: Option<f64>,
}

async fn get_mesh(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    q: std::result::Result<Query<MeshQuery>, QueryRejection>,
) -> Result<Response> {
    let q = query(q)?;
    let scene = state.scene(&id)?;
    let v = scene.data.read().unwrap().volume.clone();
    let threshold = q.threshold.unwrap_or(DEFAULT_DENSITY_THRESHOLD);
    let (bytes, tris) = blocking(move || {
        let mesh = export_mesh(&v, threshold)?;
        Ok((stl_bytes(&mesh), mesh.triangles.len()))
    })
    .await?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("model/stl")),
            (HeaderName::from_static("x-triangle-count"), HeaderValue::from(tris)),
        ],
        bytes,
    )
        .into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnimationQuery {
    alpha: Option<f64>,
    xi: Option<f64>,
    steps: Option<usize>,
    start_scale: Option<usize>,
    seed: Option<u64>,
    pose: Option<String>,
    fov: Option<f64>,
}

/// Uncompressed tar of `frame_%04d.png` plus `index.json`.
pub fn frames_tar(frames: &[Vec<u8>], width: usize, height: usize) -> std::io::Result<Vec<u8>> {
    let mut names = Vec::new();
    let mut builder = tar::Builder::new(Vec::new());
    let append = |b: &mut tar::Builder<Vec<u8>>, name: &str, data: &[u8]| {
        let mut h = tar::Header::new_gnu();
        h.set_size(data.len() as u64);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_cksum();
        b.append_data(&mut h, name, data)
    };
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:04}.png");
        append(&mut builder, &name, f)?;
        names.push(name);
    }
    let index = FrameIndex {
        count: frames.len(),
        width,
        height,
        frames: names,
    };
    append(&mut builder, "index.json", &serde_json::to_vec_pretty(&index)?)?;
    builder.into_inner()
}

async fn get_animation(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    q: std::result::Result<Query<AnimationQuery>, QueryRejection>,
) -> Result<Response> {
    let q = query(q)?;
    let stack = state.stack()?;
    let scene = state.scene(&id)?;
    let n = stack.num_scales();
    let defaults = AnimationConfig::default();
    let config = AnimationConfig {
        alpha: q.alpha.unwrap_or(defaults.alpha),
        xi: q.xi.unwrap_or(defaults.xi),
        steps: q.steps.unwrap_or(defaults.steps),
        start_scale: q.start_scale.unwrap_or(defaults.start_scale.min(n - 1)),
        seed: q.seed.unwrap_or(0),
    };
    if config.steps > MAX_FRAMES {
        return Err(ServiceError::BadRequest(format!("steps must be <= {MAX_FRAMES}")));
    }
    config.validate(n)?;
    let side = stack.schedule.image_side(n);
    let view = ViewQuery {
        pose: q.pose,
        w: Some(side),
        h: Some(side),
        fov: q.fov,
        near: None,
        far: None,
    };
    let camera = view.camera(side)?;
    let noise: NoiseStack = scene.data.read().unwrap().noise.clone();
    let bytes = blocking(move || {
        let frames = animate(&stack, &noise, &config, &camera)?;
        let pngs = frames.iter().map(encode_rgb_png).collect::<singrav::Result<Vec<_>>>()?;
        frames_tar(&pngs, side, side).map_err(|e| ServiceError::Internal(e.to_string()))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/x-tar")], bytes).into_response())
}
