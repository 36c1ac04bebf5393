//! A tiny threaded HTTP/1.1 tile server for tests.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use sha2::{Digest, Sha256};

#[derive(Default)]
struct State {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    requests: AtomicUsize,
    script: Mutex<HashMap<String, VecDeque<u16>>>,
    hits: Mutex<HashMap<String, usize>>,
    always: Mutex<Option<u16>>,
    stop: AtomicBool,
}

/// Serves a deterministic body for every path. Scripted statuses are
/// returned first, per path, before the body is served.
pub struct MockServer {
    addr: SocketAddr,
    delay: Duration,
    state: Arc<State>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(delay: Duration) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(State::default());
        let st = Arc::clone(&state);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if st.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let st = Arc::clone(&st);
                std::thread::spawn(move || {
                    let _ = serve(stream, &st, delay);
                });
            }
        });
        Ok(Self {
            addr,
            delay,
            state,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn delay(&self) -> Duration {
        self.delay
    }

    /// Endpoint template pointing at this server.
    pub fn template(&self) -> String {
        format!(
            "http://{}/{{product}}/{{date}}/{{zoom}}/{{row}}/{{col}}.png",
            self.addr
        )
    }

    /// Answers the next requests for `path` with `statuses`, in order.
    pub fn script(&self, path: &str, statuses: &[u16]) {
        self.state
            .script
            .lock()
            .unwrap()
            .insert(path.to_string(), statuses.iter().copied().collect());
    }

    /// Answers every request with `status` when set.
    pub fn fail_all(&self, status: Option<u16>) {
        *self.state.always.lock().unwrap() = status;
    }

    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub fn hits(&self, path: &str) -> usize {
        self.state
            .hits
            .lock()
            .unwrap()
            .get(path)
            .copied()
            .unwrap_or(0)
    }

    /// Highest number of requests handled at the same time.
    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    /// Body served for `path`.
    pub fn body_for(path: &str) -> Vec<u8> {
        let seed = Sha256::digest(path.as_bytes());
        let len = 64 + seed[0] as usize;
        seed.iter().cycle().take(len).copied().collect()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.state.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, st: &State, delay: Duration) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
    }
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or("/")
        .to_string();
    if st.stop.load(Ordering::SeqCst) {
        return Ok(());
    }
    st.requests.fetch_add(1, Ordering::SeqCst);
    *st.hits.lock().unwrap().entry(path.clone()).or_default() += 1;
    let now = st.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    st.max_in_flight.fetch_max(now, Ordering::SeqCst);
    std::thread::sleep(delay);
    let scripted = st
        .script
        .lock()
        .unwrap()
        .get_mut(&path)
        .and_then(|q| q.pop_front());
    let status = scripted.or(*st.always.lock().unwrap()).unwrap_or(200);
    let body = if status == 200 {
        MockServer::body_for(&path)
    } else {
        b"error".to_vec()
    };
    st.in_flight.fetch_sub(1, Ordering::SeqCst);
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/octet-stream\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    out.write_all(&body)?;
    out.flush()
}
