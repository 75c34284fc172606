#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

/// One request as the mock server saw it.
#[derive(Debug, Clone)]
pub struct Seen {
    pub headers: Vec<(String, String)>,
    pub body: serde_json::Value,
}

impl Seen {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn prompt(&self) -> &str {
        self.body["messages"][0]["content"].as_str().unwrap_or("")
    }
}

/// What the server answers for one request.
pub enum Reply {
    /// 200 with a chat completion whose content is the given text.
    Content(String),
    Status(u16, String),
}

pub struct MockServer {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    handle: Option<JoinHandle<()>>,
}

/// Computes a reply from a request.
pub type Responder = Box<dyn Fn(&Seen) -> Reply + Send>;

/// Serves `replies` in order, one per connection, then stops. `responder`
/// may instead compute a reply from each request; it is used once the
/// script is exhausted.
pub fn serve(replies: Vec<Reply>, responder: Option<Responder>, total: usize) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://{}/v1/chat/completions",
        listener.local_addr().unwrap()
    );
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        let mut script = replies.into_iter();
        for _ in 0..total {
            let Ok((stream, _)) = listener.accept() else {
                return;
            };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push((k.trim().to_string(), v.trim().to_string()));
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let req = Seen {
                headers,
                body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
            };
            let reply = match script.next() {
                Some(r) => r,
                None => responder.as_ref().expect("script exhausted")(&req),
            };
            log.lock().unwrap().push(req);
            let (status, text) = match reply {
                Reply::Content(c) => (
                    200,
                    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": c } }] }).to_string(),
                ),
                Reply::Status(s, t) => (s, t),
            };
            let mut out = stream;
            let _ = write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = out.flush();
        }
    });
    MockServer {
        url,
        seen,
        handle: Some(handle),
    }
}

impl MockServer {
    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }

    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
    }
}
