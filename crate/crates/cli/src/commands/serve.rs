use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::Context;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use histopair::agents::wire::*;
use histopair::agents::{Backend, CallError, CallResult, FaultyBackend, MockBackend, MockConfig};
use serde::Serialize;

use super::Ctx;
use crate::exit::{CmdResult, Failure};

type Shared = Arc<dyn Backend>;

fn reply<T: Serialize>(r: CallResult<T>) -> Response {
    match r {
        Ok(body) => Json(body).into_response(),
        Err(e) => {
            let status = match &e {
                CallError::Permanent { status, .. } => {
                    StatusCode::from_u16(*status).unwrap_or(StatusCode::UNPROCESSABLE_ENTITY)
                }
                CallError::Retryable(_) => StatusCode::SERVICE_UNAVAILABLE,
                CallError::Unreachable(_) => StatusCode::BAD_GATEWAY,
            };
            (status, Json(ErrorBody { error: e.to_string() })).into_response()
        }
    }
}

macro_rules! handler {
    ($name:ident, $req:ty, $method:ident) => {
        async fn $name(State(b): State<Shared>, Json(req): Json<$req>) -> Response {
            reply(b.$method(&req))
        }
    };
}

handler!(embed_text, EmbedTextRequest, embed_text);
handler!(embed_image, EmbedImageRequest, embed_image);
handler!(describe, DescribeRequest, describe);
handler!(revise, ReviseRequest, revise);
handler!(summarize, SummarizeRequest, summarize);
handler!(complete, CompleteRequest, complete);

pub fn router(backend: Shared) -> Router {
    Router::new()
        .route(Endpoint::EmbedText.path(), post(embed_text))
        .route(Endpoint::EmbedImage.path(), post(embed_image))
        .route(Endpoint::Describe.path(), post(describe))
        .route(Endpoint::Revise.path(), post(revise))
        .route(Endpoint::Summarize.path(), post(summarize))
        .route(Endpoint::Complete.path(), post(complete))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(backend)
}

pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    pub describe_failure_rate: f64,
}

/// Serve the deterministic mock backend until killed.
pub fn run(ctx: &Ctx, opts: &ServeOptions) -> CmdResult {
    let cfg = &ctx.config;
    let mock = MockBackend::new(MockConfig { seed: cfg.seed, dim: cfg.backend.mock_dim, ..MockConfig::default() });
    let backend: Shared = if opts.describe_failure_rate > 0.0 {
        Arc::new(FaultyBackend::new(mock, opts.describe_failure_rate, cfg.seed))
    } else {
        Arc::new(mock)
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")
        .map_err(Failure::internal)?;
    rt.block_on(async {
        let addr: SocketAddr = format!("{}:{}", opts.host, opts.port)
            .parse()
            .context("bad listen address")
            .map_err(Failure::usage)?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))
            .map_err(Failure::input)?;
        let local = listener.local_addr().map_err(Failure::internal)?;
        println!("listening on http://{local}");
        axum::serve(listener, router(backend)).await.context("server failed").map_err(Failure::internal)
    })
}
