use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::error::{AnnotateError, Result};
use crate::service::{
    Ack, AnnotationService, DistributionTable, LabelSubmission, NextTask, SystemAgreement, ALL_SUBSET,
};
use crate::store::AnnotationRecord;

pub type SharedService = Arc<AnnotationService>;

#[derive(Deserialize)]
struct NextQuery {
    #[serde(default)]
    annotator: String,
}

#[derive(Deserialize)]
struct AgreementQuery {
    system: Option<String>,
}

#[derive(Deserialize)]
struct DistributionQuery {
    subset: Option<String>,
}

async fn next(State(svc): State<SharedService>, Query(q): Query<NextQuery>) -> Result<Json<NextTask>> {
    svc.next_task(&q.annotator).map(Json)
}

async fn label(State(svc): State<SharedService>, Json(body): Json<LabelSubmission>) -> Result<Json<Ack>> {
    // the append blocks on fsync
    let ack = tokio::task::spawn_blocking(move || svc.submit(body))
        .await
        .map_err(|e| AnnotateError::io("annotation log", std::io::Error::other(e.to_string())))??;
    Ok(Json(ack))
}

async fn agreement(
    State(svc): State<SharedService>,
    Query(q): Query<AgreementQuery>,
) -> Result<Json<serde_json::Value>> {
    let value = match q.system {
        Some(system) => serde_json::to_value(svc.agreement(&system)?),
        None => serde_json::to_value::<Vec<SystemAgreement>>(svc.agreement_all()),
    };
    value.map(Json).map_err(|e| AnnotateError::Core(e.into()))
}

async fn distribution(
    State(svc): State<SharedService>,
    Query(q): Query<DistributionQuery>,
) -> Result<Json<DistributionTable>> {
    svc.distribution(q.subset.as_deref().unwrap_or(ALL_SUBSET)).map(Json)
}

async fn export(State(svc): State<SharedService>) -> Json<Vec<AnnotationRecord>> {
    Json(svc.export())
}

pub fn router(service: SharedService) -> Router {
    Router::new()
        .route("/api/next", get(next))
        .route("/api/label", post(label))
        .route("/api/agreement", get(agreement))
        .route("/api/distribution", get(distribution))
        .route("/api/export", get(export))
        .with_state(service)
}

pub async fn serve(service: SharedService, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(service)).await
}
