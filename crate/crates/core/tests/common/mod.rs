//! Minimal OpenAI-compatible chat server on a local port.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use macd::model::DiseaseId;
use serde_json::{json, Value};

pub type Handler = dyn Fn(&Value) -> (u16, String) + Send + Sync;

pub struct MockServer {
    pub addr: SocketAddr,
    pub hits: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(handler: impl Fn(&Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let handler = handler.clone();
                let counter = counter.clone();
                std::thread::spawn(move || serve(stream, &*handler, &counter));
            }
        });
        Self { addr, hits }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, handler: &Handler, hits: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0usize;
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
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    hits.fetch_add(1, Ordering::SeqCst);
    let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, payload) = handler(&request);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

pub fn chat_reply(content: &str) -> String {
    json!({ "choices": [ { "message": { "role": "assistant", "content": content } } ] }).to_string()
}

/// Concatenated message contents of a chat request.
pub fn prompt_text(request: &Value) -> String {
    request["messages"]
        .as_array()
        .map(|m| m.iter().filter_map(|x| x["content"].as_str()).collect::<Vec<_>>().join("\n"))
        .unwrap_or_default()
}

/// A deterministic "model" for the mock server: diagnoses by looking up
/// which known case history the prompt contains, summarizes by naming
/// generic criteria for the disease mentioned in the result.
pub fn corpus_responder(cases: Vec<(String, DiseaseId)>) -> impl Fn(&Value) -> (u16, String) + Send + Sync {
    move |request| {
        let text = prompt_text(request);
        if text.contains("[OUTPUT FORMAT]") {
            let disease = DiseaseId::CANONICAL
                .iter()
                .find(|d| text.contains(&d.display_name()))
                .map(|d| d.display_name())
                .unwrap_or_else(|| "Unknown".into());
            let mut out = format!("Disease: {disease}\nGeneral Criteria:\n");
            for i in 1..=5 {
                out.push_str(&format!("{i}. {disease} finding {i}\n"));
            }
            out.push_str("Rare Criteria:\n1. Atypical presentation\n");
            for i in 2..=5 {
                out.push_str(&format!("{i}. Not available\n"));
            }
            return (200, chat_reply(&out));
        }
        let answer = cases
            .iter()
            .find(|(hpi, _)| text.contains(hpi.as_str()))
            .map(|(_, d)| format!("{}. Criteria: 1) typical findings", d.display_name()))
            .unwrap_or_else(|| "Unknown condition.".into());
        (200, chat_reply(&answer))
    }
}
