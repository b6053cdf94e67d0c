//! Black-box scoring over HTTP: a minimal JSON protocol, an in-process server
//! wrapping a detector, and a client-side evaluation loop.
//!
//! Protocol (HTTP/1.1, JSON bodies, UTF-8):
//! - `POST /v1/score` with `{"id": ..., "image_png_b64": ...}` returns
//!   `{"id": ..., "score": p, "model": name}` where `score` is the probability
//!   that the image is AI-generated.
//! - `GET /v1/health` returns `{"status": "ok", "model": name}`.
//! - Malformed requests get a 4xx JSON body `{"error": ...}`.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::png_read;
use crate::manifest::DatasetManifest;
use crate::metrics::{self, EvalReport};
use crate::zoo::Detector;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub image_png_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: String,
    pub score: f64,
    pub model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ErrorBody {
    error: String,
}

const MAX_BODY: usize = 64 << 20;

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Serve a detector at `bind` (e.g. "127.0.0.1:0"). The listener thread polls
/// a stop flag; each connection is handled on its own thread against the
/// shared immutable detector.
pub fn serve(detector: Arc<Detector>, bind: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let join = std::thread::spawn(move || {
        while !stop_flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let detector = Arc::clone(&detector);
                    std::thread::spawn(move || {
                        let _ = handle_connection(stream, &detector);
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(_) => break,
            }
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        join: Some(join),
    })
}

fn handle_connection(mut stream: TcpStream, detector: &Detector) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let request = match read_request(&mut stream) {
        Ok(r) => r,
        Err(e) => {
            return write_response(&mut stream, 400, &ErrorBody { error: e });
        }
    };
    match (request.method.as_str(), request.path.as_str()) {
        ("GET", "/v1/health") => write_response(
            &mut stream,
            200,
            &HealthResponse {
                status: "ok".into(),
                model: detector.name().to_string(),
            },
        ),
        ("POST", "/v1/score") => match score_request(detector, &request.body) {
            Ok(response) => write_response(&mut stream, 200, &response),
            Err(e) => write_response(&mut stream, 400, &ErrorBody { error: e.to_string() }),
        },
        ("POST", _) | ("GET", _) => write_response(
            &mut stream,
            404,
            &ErrorBody {
                error: format!("no such endpoint: {}", request.path),
            },
        ),
        (method, _) => write_response(
            &mut stream,
            405,
            &ErrorBody {
                error: format!("method {method} not allowed"),
            },
        ),
    }
}

fn score_request(detector: &Detector, body: &[u8]) -> Result<ScoreResponse> {
    let request: ScoreRequest =
        serde_json::from_slice(body).map_err(|e| Error::Http(format!("bad request JSON: {e}")))?;
    let png = base64::engine::general_purpose::STANDARD
        .decode(&request.image_png_b64)
        .map_err(|e| Error::Http(format!("bad base64: {e}")))?;
    let image = png_read(&png)?;
    let score = detector.probability(&image)?;
    Ok(ScoreResponse {
        id: request.id,
        score,
        model: detector.name().to_string(),
    })
}

struct HttpRequest {
    method: String,
    path: String,
    body: Vec<u8>,
}

fn read_request(stream: &mut TcpStream) -> std::result::Result<HttpRequest, String> {
    let mut buf = Vec::with_capacity(4096);
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        if let Some(pos) = find_header_end(&buf) {
            break pos;
        }
        if buf.len() > MAX_BODY {
            return Err("headers too large".into());
        }
        let n = stream.read(&mut chunk).map_err(|e| e.to_string())?;
        if n == 0 {
            return Err("connection closed mid-request".into());
        }
        buf.extend_from_slice(&chunk[..n]);
    };

    let header_text = String::from_utf8_lossy(&buf[..header_end]).into_owned();
    let mut lines = header_text.split("\r\n");
    let request_line = lines.next().unwrap_or_default();
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    if method.is_empty() || path.is_empty() {
        return Err(format!("malformed request line: {request_line}"));
    }
    let mut content_length = 0usize;
    for line in lines {
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad content-length: {value}"))?;
            }
        }
    }
    if content_length > MAX_BODY {
        return Err("body too large".into());
    }

    let mut body = buf[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk).map_err(|e| e.to_string())?;
        if n == 0 {
            return Err("connection closed mid-body".into());
        }
        body.extend_from_slice(&chunk[..n]);
    }
    body.truncate(content_length);
    Ok(HttpRequest { method, path, body })
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn write_response<T: Serialize>(
    stream: &mut TcpStream,
    status: u16,
    body: &T,
) -> std::io::Result<()> {
    let payload = serde_json::to_vec(body).expect("response serializes");
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        _ => "Error",
    };
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        payload.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(&payload)?;
    stream.flush()
}

#[derive(Debug, Clone, Copy)]
pub struct RemoteEvalConfig {
    pub concurrency: usize,
    pub timeout_ms: u64,
}

impl Default for RemoteEvalConfig {
    fn default() -> Self {
        Self {
            concurrency: 4,
            timeout_ms: 10_000,
        }
    }
}

pub struct RemoteScorer {
    client: reqwest::blocking::Client,
    score_url: String,
}

impl RemoteScorer {
    pub fn new(endpoint: &str, timeout_ms: u64) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(timeout_ms))
            .build()?;
        Ok(Self {
            client,
            score_url: format!("{}/v1/score", endpoint.trim_end_matches('/')),
        })
    }

    /// POST stored PNG bytes unmodified; up to 2 retries per record.
    pub fn score_png(&self, id: &str, png_bytes: &[u8]) -> Result<f64> {
        let request = ScoreRequest {
            id: id.to_string(),
            image_png_b64: base64::engine::general_purpose::STANDARD.encode(png_bytes),
        };
        let mut last_err = None;
        for _attempt in 0..3 {
            match self.try_score(&request) {
                Ok(score) => return Ok(score),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn try_score(&self, request: &ScoreRequest) -> Result<f64> {
        let response = self.client.post(&self.score_url).json(request).send()?;
        let status = response.status();
        if !status.is_success() {
            let body: serde_json::Value = response.json().unwrap_or_default();
            return Err(Error::Http(format!("status {status}: {body}")));
        }
        let scored: ScoreResponse = response.json()?;
        if scored.id != request.id {
            return Err(Error::Http(format!(
                "response id `{}` does not echo request id `{}`",
                scored.id, request.id
            )));
        }
        if !scored.score.is_finite() || !(0.0..=1.0).contains(&scored.score) {
            return Err(Error::Http(format!("score out of range: {}", scored.score)));
        }
        Ok(scored.score)
    }

    pub fn health(endpoint: &str, timeout_ms: u64) -> Result<HealthResponse> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(timeout_ms))
            .build()?;
        let url = format!("{}/v1/health", endpoint.trim_end_matches('/'));
        let response = client.get(url).send()?;
        if !response.status().is_success() {
            return Err(Error::Http(format!("health status {}", response.status())));
        }
        Ok(response.json()?)
    }
}

/// Post every manifest image to the endpoint and assemble the same
/// [`EvalReport`] as local evaluation. The client never decodes or re-encodes
/// images: the stored PNG bytes go on the wire.
pub fn remote_evaluate(
    endpoint: &str,
    manifest: &DatasetManifest,
    cfg: &RemoteEvalConfig,
) -> Result<EvalReport> {
    let scorer = RemoteScorer::new(endpoint, cfg.timeout_ms)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        metrics::evaluate(manifest, |record| {
            let bytes = std::fs::read(manifest.resolve(record))?;
            scorer.score_png(&record.id, &bytes)
        })
    })
}
