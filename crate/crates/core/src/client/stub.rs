//! Minimal HTTP/1.1 server speaking the prediction endpoint protocol.
//!
//! Used by the tests and by `plcompose serve-stub` as a stand-in for a real
//! inference API. One thread per connection, `Connection: close` on every
//! response.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::{PredictRequest, PredictResponse, WireDetection};
use crate::types::{CategoryTable, Detection, ImageId};

/// Reply produced by a stub handler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubReply {
    pub status: u16,
    pub body: String,
}

impl StubReply {
    pub fn json(body: &PredictResponse) -> Self {
        StubReply {
            status: 200,
            body: serde_json::to_string(body).expect("response serializes"),
        }
    }

    pub fn status(status: u16) -> Self {
        StubReply {
            status,
            body: String::from("{}"),
        }
    }
}

type Handler = dyn Fn(&PredictRequest) -> StubReply + Send + Sync;

pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves `handler`.
    pub fn start<F>(addr: &str, handler: F) -> std::io::Result<Self>
    where
        F: Fn(&PredictRequest) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let stop_flag = Arc::clone(&stop);
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || {
                    if let Err(e) = serve_one(stream, &*handler) {
                        log::debug!("stub connection error: {e}");
                    }
                });
            }
        });
        Ok(StubServer {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    /// Serves fixed detections, looked up by `image_id`.
    pub fn serving(addr: &str, detections: &[Detection], categories: &CategoryTable) -> std::io::Result<Self> {
        let mut by_image: HashMap<ImageId, Vec<WireDetection>> = HashMap::new();
        for d in detections {
            by_image.entry(d.image).or_default().push(WireDetection {
                category: categories.label(d.category),
                bbox: d.bbox.to_array(),
                score: d.score,
            });
        }
        StubServer::start(addr, move |req| {
            StubReply::json(&PredictResponse {
                detections: by_image.get(&ImageId(req.image_id)).cloned().unwrap_or_default(),
            })
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/predict", self.addr)
    }

    /// Blocks until the accept loop ends (it only ends on drop).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve_one(stream: TcpStream, handler: &Handler) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let reply = if !request_line.starts_with("POST ") {
        StubReply::status(405)
    } else {
        match serde_json::from_slice::<PredictRequest>(&body) {
            Ok(req) => handler(&req),
            Err(_) => StubReply::status(400),
        }
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reason(reply.status),
        reply.body.len(),
        reply.body
    )?;
    stream.flush()
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        405 => "Method Not Allowed",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}
