//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use lantree::corpus::Chunk;
use lantree::data_tree::{build_data_tree, BuildConfig, DataTree, OccurrenceMode};
use lantree::probe::protocol::NEXT_TOKEN_PATH;
use lantree::probe::{Transport, TransportError};
use lantree::Tokenizer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Corpus `{"a b a b", "a c"}` with a=0, b=1, c=2, depth 2.
pub fn example(mode: OccurrenceMode) -> (Tokenizer, Vec<Chunk>, DataTree) {
    let tok = Tokenizer::whitespace_from_texts(["a b c"]);
    let chunks: Vec<Chunk> = ["a b a b", "a c"]
        .iter()
        .enumerate()
        .map(|(i, t)| Chunk {
            doc_id: format!("d{i}"),
            offset: 0,
            tokens: tok.tokenize(t).unwrap(),
        })
        .collect();
    let tree = build_data_tree(&chunks, 0, tok.hash(), BuildConfig { max_depth: 2, mode }).unwrap();
    (tok, chunks, tree)
}

/// Whitespace tokenizer over words `w0 .. w{n-1}`.
pub fn word_tokenizer(n: usize) -> Tokenizer {
    let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    Tokenizer::whitespace_from_texts(words.iter().map(String::as_str))
}

/// Random chunks over token ids `0..vocab`.
pub fn random_chunks(rng: &mut ChaCha8Rng, vocab: u32, docs: usize, max_len: usize) -> Vec<Chunk> {
    (0..docs)
        .map(|i| Chunk {
            doc_id: format!("doc{i:04}"),
            offset: 0,
            tokens: (0..rng.gen_range(0..=max_len))
                .map(|_| rng.gen_range(0..vocab))
                .collect(),
        })
        .collect()
}

/// Minimal HTTP/1.1 front for a [`Transport`], one thread per connection.
/// Next-token requests beyond `budget` get a 503.
pub struct MiniServer {
    pub url: String,
    pub next_token_requests: Arc<AtomicUsize>,
    pub budget: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MiniServer {
    pub fn start(backend: Arc<dyn Transport>, fail_after: Option<usize>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let stop = Arc::new(AtomicBool::new(false));
        let counter = Arc::new(AtomicUsize::new(0));
        let budget = Arc::new(AtomicUsize::new(fail_after.unwrap_or(usize::MAX)));
        let (stop2, counter2, budget2) = (stop.clone(), counter.clone(), budget.clone());
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let backend = backend.clone();
                let counter = counter2.clone();
                let budget = budget2.clone();
                std::thread::spawn(move || {
                    let _ = handle_conn(conn, &*backend, &counter, &budget);
                });
            }
        });
        Self {
            url,
            next_token_requests: counter,
            budget,
            stop,
            handle: Some(handle),
        }
    }
}

impl Drop for MiniServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.url.trim_start_matches("http://"));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_conn(
    conn: TcpStream,
    backend: &dyn Transport,
    counter: &AtomicUsize,
    budget: &AtomicUsize,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut conn = conn;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let mut parts = line.split_whitespace();
        let method = parts.next().unwrap_or("").to_string();
        let path = parts.next().unwrap_or("").to_string();
        let mut len = 0usize;
        let mut close = false;
        loop {
            let mut h = String::new();
            reader.read_line(&mut h)?;
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            let lower = h.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                len = v.trim().parse().unwrap_or(0);
            }
            if lower.starts_with("connection:") && lower.contains("close") {
                close = true;
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body)?;
        let result = if method == "GET" {
            backend.get(&path)
        } else if path == NEXT_TOKEN_PATH
            && budget
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
                .is_err()
        {
            Err(TransportError::Status {
                status: 503,
                body: r#"{"error":"overloaded"}"#.into(),
            })
        } else {
            if path == NEXT_TOKEN_PATH {
                counter.fetch_add(1, Ordering::SeqCst);
            }
            backend.post(&path, &body)
        };
        let (status, payload) = match result {
            Ok(b) => (200, b),
            Err(TransportError::Status { status, body }) => (status, body.into_bytes()),
            Err(TransportError::Network(m)) => (500, m.into_bytes()),
        };
        write!(
            conn,
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            payload.len()
        )?;
        conn.write_all(&payload)?;
        conn.flush()?;
        if close {
            return Ok(());
        }
    }
}
