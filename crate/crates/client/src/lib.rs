//! Typed HTTP client for the tocom service.

pub mod api;

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use api::*;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8377";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: StatusCode, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder) -> Result<T> {
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let message = serde_json::from_str::<ErrorBody>(&text).map_or(text, |b| b.error);
        Err(ClientError::Api { status, message })
    }

    async fn call<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        self.send(req).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.call::<(), _>(Method::GET, "/health", None).await
    }

    pub async fn gen_data(&self, req: &GenDataRequest) -> Result<GenDataResponse> {
        self.call(Method::POST, "/v1/gen-data", Some(req)).await
    }

    pub async fn train(&self, req: &TrainRequest) -> Result<TrainResponse> {
        self.call(Method::POST, "/v1/train", Some(req)).await
    }

    pub async fn evaluate(&self, req: &EvaluateRequest) -> Result<RateDistortionRecord> {
        self.call(Method::POST, "/v1/evaluate", Some(req)).await
    }

    pub async fn sweep(&self, req: &SweepRequest) -> Result<SweepResponse> {
        self.call(Method::POST, "/v1/sweep", Some(req)).await
    }

    pub async fn baseline(&self, req: &BaselineRequest) -> Result<BaselineRecord> {
        self.call(Method::POST, "/v1/baseline", Some(req)).await
    }

    pub async fn encode(&self, req: &EncodeRequest) -> Result<EncodeResponse> {
        self.call(Method::POST, "/v1/encode", Some(req)).await
    }

    pub async fn open_session(&self, req: &SessionRequest) -> Result<SessionInfo> {
        self.call(Method::POST, "/v1/sessions", Some(req)).await
    }

    /// Posts one serialized packet or a whole packet stream.
    pub async fn send_packets(&self, session: u64, bytes: Vec<u8>) -> Result<DecodeResponse> {
        let req = self
            .http
            .post(format!("{}/v1/sessions/{session}/packets", self.base))
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(bytes);
        self.send(req).await
    }

    pub async fn fuse(&self, session: u64) -> Result<FuseResponse> {
        self.call::<(), _>(Method::POST, &format!("/v1/sessions/{session}/fuse"), None).await
    }

    pub async fn close_session(&self, session: u64) -> Result<SessionInfo> {
        self.call::<(), _>(Method::DELETE, &format!("/v1/sessions/{session}"), None).await
    }
}
