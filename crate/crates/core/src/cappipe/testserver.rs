//! Minimal scriptable HTTP server for exercising backend clients without a
//! network. Each incoming request consumes the next scripted response; the
//! hit counter exposes how many attempts a client actually made.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Clone)]
pub struct ScriptedResponse {
    pub status: u16,
    pub body: String,
}

impl ScriptedResponse {
    pub fn ok(body: impl Into<String>) -> Self {
        ScriptedResponse { status: 200, body: body.into() }
    }

    /// A successful JSON envelope carrying `output`.
    pub fn output(output: serde_json::Value) -> Self {
        Self::ok(serde_json::json!({ "output": output }).to_string())
    }

    pub fn failure(status: u16) -> Self {
        ScriptedResponse { status, body: r#"{"error":"scripted failure"}"#.to_string() }
    }
}

pub struct TestServer {
    addr: SocketAddr,
    hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(script: Vec<ScriptedResponse>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let script = Arc::new(Mutex::new(VecDeque::from(script)));

        let (h, s, q) = (hits.clone(), stop.clone(), script);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let response = {
                    let mut q = q.lock().expect("script lock");
                    q.pop_front()
                };
                if serve_one(stream, response).is_ok() {
                    h.fetch_add(1, Ordering::SeqCst);
                }
            }
        });
        Ok(TestServer { addr, hits, stop, handle: Some(handle) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Completed request-response exchanges so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop; the connection is discarded unserved.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Reads one HTTP/1.1 request (headers plus Content-Length body) and writes
/// the scripted response. Returns Err for connections that carry no
/// request, so wake-up connects do not count as hits.
fn serve_one(stream: TcpStream, response: Option<ScriptedResponse>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim().is_empty() {
        return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "no request"));
    }
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some(v) = header.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let r = response.unwrap_or(ScriptedResponse {
        status: 404,
        body: r#"{"error":"script exhausted"}"#.to_string(),
    });
    let reason = match r.status {
        200 => "OK",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Scripted",
    };
    let mut stream = reader.into_inner();
    write!(
        stream,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        r.status,
        reason,
        r.body.len(),
        r.body
    )?;
    stream.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serves_script_in_order_then_reports_exhaustion() {
        let server = TestServer::start(vec![
            ScriptedResponse::failure(500),
            ScriptedResponse::ok(r#"{"output":"hello"}"#),
        ])
        .unwrap();

        let first = ureq::post(&server.url()).send_string("{}");
        assert!(matches!(first, Err(ureq::Error::Status(500, _))));
        let second = ureq::post(&server.url()).send_string("{}").unwrap();
        assert_eq!(second.into_string().unwrap(), r#"{"output":"hello"}"#);
        let third = ureq::post(&server.url()).send_string("{}");
        assert!(matches!(third, Err(ureq::Error::Status(404, _))));
        assert_eq!(server.hits(), 3);
    }
}
