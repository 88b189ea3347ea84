//! HTTP render service over one immutable avatar.

use std::sync::Arc;

use avatar_core::io::FORMAT_VERSION;
use avatar_core::pipeline::Avatar;
use avatar_core::splat::CameraSpec;
use avatar_core::synth::ring_cameras;
use avatar_core::Error;
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::render::{encode_png, render_request, RenderRequest};

pub const DEFAULT_CAMERA_SIZE: usize = 512;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointInfo {
    pub name: String,
    pub parent: Option<usize>,
    pub neutralized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonInfo {
    pub joints: Vec<JointInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    pub resolution: usize,
    pub feature_resolution: usize,
    pub gaussians: usize,
    pub joint_count: usize,
    pub pose_len: usize,
    pub latent_dim: usize,
    pub camera_default: CameraSpec,
}

struct AppState {
    avatar: Avatar,
    meta: Meta,
}

pub fn meta(avatar: &Avatar) -> Meta {
    let maps = &avatar.maps;
    let points: Vec<_> = maps.valid_indices().into_iter().map(|i| maps.position(i)).collect();
    let camera_default = ring_cameras(&points, 1, DEFAULT_CAMERA_SIZE)
        .map(|c| c[0].to_spec())
        .unwrap_or_else(|_| {
            avatar_core::splat::Camera::look_at(
                nalgebra::Vector3::new(0.0, 0.0, 3.0),
                nalgebra::Vector3::zeros(),
                nalgebra::Vector3::y(),
                0.8,
                DEFAULT_CAMERA_SIZE,
                DEFAULT_CAMERA_SIZE,
            )
            .expect("fixed camera is valid")
            .to_spec()
        });
    Meta {
        format_version: FORMAT_VERSION,
        resolution: maps.width,
        feature_resolution: avatar.conditioner.config.feature_res,
        gaussians: maps.valid_count(),
        joint_count: avatar.skeleton.joint_count(),
        pose_len: avatar.skeleton.pose_len(),
        latent_dim: avatar.conditioner.config.latent_dim,
        camera_default,
    }
}

pub fn router(avatar: Avatar) -> Router {
    let meta = meta(&avatar);
    let state = Arc::new(AppState { avatar, meta });
    Router::new()
        .route("/skeleton", get(skeleton))
        .route("/meta", get(get_meta))
        .route("/render", post(render))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn skeleton(State(state): State<Arc<AppState>>) -> Json<SkeletonInfo> {
    let avatar = &state.avatar;
    let neutral = avatar.neutralized_joints();
    Json(SkeletonInfo {
        joints: avatar
            .skeleton
            .joints()
            .iter()
            .enumerate()
            .map(|(i, j)| JointInfo {
                name: j.name.clone(),
                parent: j.parent,
                neutralized: neutral.contains(&i),
            })
            .collect(),
    })
}

async fn get_meta(State(state): State<Arc<AppState>>) -> Json<Meta> {
    Json(state.meta.clone())
}

#[derive(Debug, Deserialize)]
struct RenderQuery {
    format: Option<String>,
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: String) -> Response {
    (status, Json(ErrorBody { error: message })).into_response()
}

async fn render(State(state): State<Arc<AppState>>, Query(q): Query<RenderQuery>, body: Bytes) -> Response {
    let raw = match q.format.as_deref() {
        None | Some("png") => false,
        Some("raw") => true,
        Some(other) => return error(StatusCode::BAD_REQUEST, format!("unknown format {other}")),
    };
    let req: RenderRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let result = tokio::task::spawn_blocking(move || {
        render_request(&state.avatar, &req).map(|img| if raw { img.to_raw_bytes() } else { encode_png(&img) })
    })
    .await;
    match result {
        Ok(Ok(bytes)) => {
            let kind = if raw { "application/octet-stream" } else { "image/png" };
            ([(header::CONTENT_TYPE, kind)], bytes).into_response()
        }
        Ok(Err(e @ Error::DimensionMismatch { .. })) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Ok(Err(e @ Error::InvalidArgument(_))) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => {
            log::error!("render task failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "render failed".into())
        }
    }
}

pub async fn serve(avatar: Avatar, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(avatar))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
