//! Client side of the model-adapter subprocess protocol.
//!
//! Each spawned process serves one request at a time. [`AdapterPredictor`] keeps a small
//! pool of processes; a process that fails in any way is killed and respawned on the next
//! request that lands on its slot.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::predict::protocol::{self, Frame};
use crate::predict::{Capabilities, InstanceObject, Predictor, SemanticPrediction, TileInput};

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Clone, Debug)]
pub struct AdapterOptions {
    pub handshake_timeout: Duration,
    pub request_timeout: Duration,
    /// Number of adapter processes (each serves one request at a time).
    pub processes: usize,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        AdapterOptions {
            handshake_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
            processes: 1,
        }
    }
}

const STDERR_TAIL: usize = 20;

struct AdapterProcess {
    child: Child,
    to_child: Option<Sender<(Value, Vec<u8>)>>,
    from_child: Receiver<Result<Frame>>,
    stderr: Arc<Mutex<VecDeque<String>>>,
    next_id: u64,
}

impl AdapterProcess {
    fn spawn(command: &[String], timeout: Duration) -> Result<(Self, Capabilities)> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::invalid("adapter command is empty"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Predictor(format!("cannot spawn adapter {program:?}: {e}")))?;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stderr_pipe = child.stderr.take().expect("piped stderr");

        let (frame_tx, from_child) = mpsc::channel();
        thread::spawn(move || loop {
            let msg = match protocol::read_frame(&mut stdout) {
                Ok(Some(f)) => Ok(f),
                Ok(None) => Err(Error::Predictor("adapter closed its output".into())),
                Err(e) => Err(e),
            };
            let stop = msg.is_err();
            if frame_tx.send(msg).is_err() || stop {
                break;
            }
        });

        let (to_child, req_rx) = mpsc::channel::<(Value, Vec<u8>)>();
        thread::spawn(move || {
            let mut stdin = stdin;
            for (header, payload) in req_rx {
                if protocol::write_frame(&mut stdin, &header, &payload).is_err() {
                    break;
                }
            }
            let _ = stdin.flush();
        });

        let stderr = Arc::new(Mutex::new(VecDeque::new()));
        let tail = Arc::clone(&stderr);
        thread::spawn(move || {
            for line in BufReader::new(stderr_pipe).lines().map_while(|l| l.ok()) {
                let mut t = tail.lock().unwrap();
                if t.len() == STDERR_TAIL {
                    t.pop_front();
                }
                t.push_back(line);
            }
        });

        let mut proc = AdapterProcess {
            child,
            to_child: Some(to_child),
            from_child,
            stderr,
            next_id: 1,
        };
        let hello = proc.recv(timeout, "handshake")?;
        let caps = protocol::parse_hello(&hello).map_err(|e| proc.diagnose(e))?;
        debug!("adapter {program} ready: {caps:?}");
        Ok((proc, caps))
    }

    fn diagnose(&self, e: Error) -> Error {
        let tail = self.stderr.lock().unwrap();
        if tail.is_empty() {
            return e;
        }
        let lines: Vec<&str> = tail.iter().map(String::as_str).collect();
        Error::Predictor(format!("{e}; adapter stderr: {}", lines.join(" | ")))
    }

    fn recv(&mut self, timeout: Duration, what: &str) -> Result<Frame> {
        match self.from_child.recv_timeout(timeout) {
            Ok(Ok(f)) => Ok(f),
            Ok(Err(e)) => {
                // Give the stderr reader a moment to collect the last words of a crash.
                thread::sleep(Duration::from_millis(20));
                Err(self.diagnose(e))
            }
            Err(RecvTimeoutError::Timeout) => Err(self.diagnose(Error::Predictor(format!(
                "adapter {what} timed out after {:.1} s",
                timeout.as_secs_f64()
            )))),
            Err(RecvTimeoutError::Disconnected) => Err(self.diagnose(Error::Predictor("adapter output closed".into()))),
        }
    }

    fn request(&mut self, kind: &str, tile: &TileInput<'_>, timeout: Duration) -> Result<(u64, Frame)> {
        let rgb = tile.rgb()?;
        let id = self.next_id;
        self.next_id += 1;
        let header = protocol::request_header(kind, id, tile.block.width, tile.block.height);
        self.to_child
            .as_ref()
            .ok_or_else(|| Error::Predictor("adapter input closed".into()))?
            .send((header, rgb.to_vec()))
            .map_err(|_| self.diagnose(Error::Predictor("adapter input closed".into())))?;
        let frame = self.recv(timeout, kind)?;
        Ok((id, frame))
    }
}

impl Drop for AdapterProcess {
    fn drop(&mut self) {
        self.to_child.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A predictor backed by one or more adapter processes.
pub struct AdapterPredictor {
    command: Vec<String>,
    options: AdapterOptions,
    capabilities: Capabilities,
    slots: Vec<Mutex<Option<AdapterProcess>>>,
    cursor: AtomicUsize,
}

/// Spawns the first adapter process and completes the handshake; the rest of the pool
/// starts lazily.
pub fn spawn_adapter(command: &[String], options: AdapterOptions) -> Result<AdapterPredictor> {
    if options.processes == 0 {
        return Err(Error::invalid("adapter pool needs at least one process"));
    }
    let (first, capabilities) = AdapterProcess::spawn(command, options.handshake_timeout)?;
    let mut slots: Vec<Mutex<Option<AdapterProcess>>> = (0..options.processes).map(|_| Mutex::new(None)).collect();
    *slots[0].get_mut().unwrap() = Some(first);
    Ok(AdapterPredictor {
        command: command.to_vec(),
        options,
        capabilities,
        slots,
        cursor: AtomicUsize::new(0),
    })
}

impl AdapterPredictor {
    fn with_process<T>(&self, f: impl FnOnce(&mut AdapterProcess) -> Result<T>) -> Result<T> {
        let n = self.slots.len();
        let start = self.cursor.fetch_add(1, Ordering::Relaxed);
        let mut guard = (0..n)
            .find_map(|k| self.slots[(start + k) % n].try_lock().ok())
            .unwrap_or_else(|| self.slots[start % n].lock().unwrap_or_else(|p| p.into_inner()));
        if guard.is_none() {
            let (proc, caps) = AdapterProcess::spawn(&self.command, self.options.handshake_timeout)?;
            if caps != self.capabilities {
                return Err(Error::Predictor("respawned adapter changed its capabilities".into()));
            }
            *guard = Some(proc);
        }
        let result = f(guard.as_mut().expect("process present"));
        if let Err(e) = &result {
            warn!("adapter request failed, restarting process: {e}");
            *guard = None;
        }
        result
    }

    fn require(&self, semantic: bool) -> Result<()> {
        let ok = if semantic {
            self.capabilities.semantic
        } else {
            self.capabilities.instance
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Predictor(format!(
                "adapter does not advertise {} prediction",
                if semantic { "semantic" } else { "instance" }
            )))
        }
    }
}

impl Predictor for AdapterPredictor {
    fn name(&self) -> String {
        format!("adapter:{}", self.command.join(" "))
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn predict_semantic(&self, tile: &TileInput<'_>) -> Result<SemanticPrediction> {
        self.require(true)?;
        let timeout = self.options.request_timeout;
        self.with_process(|p| {
            let (id, frame) = p.request("predict_semantic", tile, timeout)?;
            protocol::parse_semantic_result(&frame, id, tile.block.width, tile.block.height)
        })
    }

    fn predict_instances(&self, tile: &TileInput<'_>) -> Result<Vec<InstanceObject>> {
        self.require(false)?;
        let timeout = self.options.request_timeout;
        let (w, h) = (tile.block.width as f64, tile.block.height as f64);
        let raw = self.with_process(|p| {
            let (id, frame) = p.request("predict_instances", tile, timeout)?;
            protocol::parse_instance_result(&frame, id)
        })?;
        Ok(super::clip_to_tile(raw, w, h))
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(self.slots.len())
    }
}
