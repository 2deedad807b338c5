//! Blocking HTTP client for the wire protocol.

use std::collections::BTreeMap;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::backend::{Backend, BackendEndpoint, CallError, CallResult};
use super::wire::*;

// Counting semaphore bounding concurrent requests to one endpoint.
struct Window {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Window {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn enter(&self) -> WindowGuard<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        WindowGuard(self)
    }
}

struct WindowGuard<'a>(&'a Window);

impl Drop for WindowGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

struct Route {
    endpoint: BackendEndpoint,
    agent: ureq::Agent,
    window: Window,
}

pub struct HttpBackend {
    name: String,
    routes: BTreeMap<Endpoint, Route>,
}

impl HttpBackend {
    /// Every endpoint served from `base_url`.
    pub fn uniform(endpoint: BackendEndpoint) -> Self {
        let name = endpoint.name.clone();
        Self::new(name, Endpoint::ALL.into_iter().map(|e| (e, endpoint.clone())).collect())
    }

    pub fn new(name: impl Into<String>, endpoints: BTreeMap<Endpoint, BackendEndpoint>) -> Self {
        let routes = endpoints
            .into_iter()
            .map(|(e, cfg)| {
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
                    .http_status_as_error(false)
                    .build()
                    .into();
                let window = Window::new(cfg.max_in_flight);
                (e, Route { endpoint: cfg, agent, window })
            })
            .collect();
        Self { name: name.into(), routes }
    }

    /// Settings of the endpoint serving `e`, if configured.
    pub fn endpoint(&self, e: Endpoint) -> Option<&BackendEndpoint> {
        self.routes.get(&e).map(|r| &r.endpoint)
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, e: Endpoint, body: &Req) -> CallResult<Resp> {
        let route = self
            .routes
            .get(&e)
            .ok_or_else(|| CallError::Permanent { status: 404, message: format!("no endpoint configured for {e}") })?;
        let url = format!("{}{}", route.endpoint.base_url.trim_end_matches('/'), e.path());
        let _slot = route.window.enter();
        let mut resp = route.agent.post(&url).send_json(body).map_err(classify)?;
        let status = resp.status().as_u16();
        if status == 200 {
            return resp
                .body_mut()
                .read_json::<Resp>()
                .map_err(|err| CallError::Retryable(format!("{url}: bad response body: {err}")));
        }
        let message = resp.body_mut().read_to_string().unwrap_or_default();
        if (400..500).contains(&status) {
            Err(CallError::Permanent { status, message })
        } else {
            Err(CallError::Retryable(format!("{url}: status {status}: {message}")))
        }
    }
}

fn classify(err: ureq::Error) -> CallError {
    match err {
        ureq::Error::Timeout(_) => CallError::Retryable(err.to_string()),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound | ureq::Error::Io(_) => {
            CallError::Unreachable(err.to_string())
        }
        other => CallError::Retryable(other.to_string()),
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }
    fn embed_text(&self, req: &EmbedTextRequest) -> CallResult<EmbedResponse> {
        self.post(Endpoint::EmbedText, req)
    }
    fn embed_image(&self, req: &EmbedImageRequest) -> CallResult<EmbedResponse> {
        self.post(Endpoint::EmbedImage, req)
    }
    fn describe(&self, req: &DescribeRequest) -> CallResult<TextResponse> {
        self.post(Endpoint::Describe, req)
    }
    fn revise(&self, req: &ReviseRequest) -> CallResult<ReviseResponse> {
        self.post(Endpoint::Revise, req)
    }
    fn summarize(&self, req: &SummarizeRequest) -> CallResult<TextResponse> {
        self.post(Endpoint::Summarize, req)
    }
    fn complete(&self, req: &CompleteRequest) -> CallResult<TextResponse> {
        self.post(Endpoint::Complete, req)
    }
}
