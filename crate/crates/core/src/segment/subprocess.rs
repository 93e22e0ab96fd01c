//! Segmenter child processes speaking the wire protocol on stdio.
//!
//! Each child handles one request at a time; a pool of children gives
//! concurrency. Responses are matched to requests by id.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, MutexGuard, TryLockError};

use super::wire::{SegmentRequest, SegmentResponse};
use super::{ScoredMask, SegmentError, Segmenter};
use crate::prompting::PointPromptSet;

struct Worker {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Worker {
    fn spawn(command: &str) -> Result<Self, SegmentError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SegmentError::Setup(format!("spawning `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Worker { child, stdin, stdout })
    }

    fn round_trip(&mut self, req: &SegmentRequest) -> Result<SegmentResponse, SegmentError> {
        let transport = |e: std::io::Error| SegmentError::Transport(e.to_string());
        writeln!(self.stdin, "{}", req.to_line()).map_err(transport)?;
        self.stdin.flush().map_err(transport)?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line).map_err(transport)? == 0 {
            return Err(SegmentError::Transport("segmenter process closed stdout".into()));
        }
        SegmentResponse::parse(&line)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct SubprocessSegmenter {
    workers: Vec<Mutex<Worker>>,
    next_id: AtomicU64,
    next_worker: AtomicUsize,
}

impl SubprocessSegmenter {
    /// Launches `pool` copies of `command` (run through `sh -c`).
    pub fn spawn(command: &str, pool: usize) -> Result<Self, SegmentError> {
        let workers = (0..pool.max(1))
            .map(|_| Worker::spawn(command).map(Mutex::new))
            .collect::<Result<_, _>>()?;
        Ok(SubprocessSegmenter {
            workers,
            next_id: AtomicU64::new(1),
            next_worker: AtomicUsize::new(0),
        })
    }

    fn acquire(&self) -> MutexGuard<'_, Worker> {
        let n = self.workers.len();
        let start = self.next_worker.fetch_add(1, Ordering::Relaxed) % n;
        for k in 0..n {
            match self.workers[(start + k) % n].try_lock() {
                Ok(g) => return g,
                Err(TryLockError::Poisoned(p)) => return p.into_inner(),
                Err(TryLockError::WouldBlock) => {}
            }
        }
        self.workers[start].lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Segmenter for SubprocessSegmenter {
    fn segment_raw(
        &self,
        image_ref: &str,
        prompts: &PointPromptSet,
    ) -> Result<Vec<ScoredMask>, SegmentError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let req = SegmentRequest::from_prompts(id, image_ref, prompts, false);
        let resp = self.acquire().round_trip(&req)?;
        resp.into_result(id)
    }
}
