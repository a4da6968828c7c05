#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

/// Copies a fixture config into `dir`, rewriting relative paths to the
/// fixture directory so outputs and caches land in `dir`.
pub fn config_in(dir: &std::path::Path, fixture_set: &str, extra: &str) -> PathBuf {
    let base = fixture(fixture_set);
    let text = std::fs::read_to_string(base.join("config.toml")).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed
            .strip_prefix("path = \"")
            .or_else(|| trimmed.strip_prefix("script_path = \""))
        {
            let key = trimmed.split(" = ").next().unwrap();
            let rel = rest.trim_end_matches('"');
            out.push_str(&format!("{key} = {:?}\n", base.join(rel).display().to_string()));
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(extra);
    let path = dir.join("config.toml");
    std::fs::write(&path, out).unwrap();
    path
}

#[derive(Debug, Clone)]
pub struct Recorded {
    pub path: String,
    pub authorization: Option<String>,
    pub body: Value,
}

type Handler = dyn Fn(usize, &Value) -> (u16, Value) + Send + Sync;

/// Minimal HTTP/1.1 server on a loopback port. The handler gets the request
/// number (0-based) and the JSON body.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
}

impl MockServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(usize, &Value) -> (u16, Value) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
        let requests: Arc<Mutex<Vec<Recorded>>> = Arc::default();
        let handler: Arc<Handler> = Arc::new(handler);
        let log = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let handler = handler.clone();
                let log = log.clone();
                thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        Self { url, requests }
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Recorded>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
        let mut length = 0usize;
        let mut authorization = None;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => length = v.trim().parse().unwrap_or(0),
                    "authorization" => authorization = Some(v.trim().to_string()),
                    _ => {}
                }
            }
        }
        let mut body = vec![0u8; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let index = {
            let mut log = log.lock().unwrap();
            log.push(Recorded { path, authorization, body: body.clone() });
            log.len() - 1
        };
        let (status, reply) = handler(index, &body);
        let payload = reply.to_string();
        let head = format!(
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: keep-alive\r\n\r\n",
            payload.len()
        );
        if writer.write_all(head.as_bytes()).is_err() || writer.write_all(payload.as_bytes()).is_err() {
            return;
        }
    }
}

/// An OpenAI-style chat reply.
pub fn chat_reply(content: &str) -> Value {
    serde_json::json!({ "choices": [ { "message": { "role": "assistant", "content": content } } ] })
}
