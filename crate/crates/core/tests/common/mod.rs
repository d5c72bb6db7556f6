#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use vidscript_core::backends::{BackendError, LmmRequest, LmmResponse, ModelBackend, Task};
use vidscript_core::media::{SyntheticDecoder, SyntheticVideo};
use vidscript_core::pipeline::{Backends, Pipeline, Store};

/// One result line per acceptance criterion, written past the test
/// harness's output capture so it always shows up.
pub fn report(criterion: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "ACCEPTANCE {criterion:<28} {verdict}  {detail}");
}

pub fn write_demo_video(dir: &Path) -> PathBuf {
    let path = dir.join("demo.vsyn");
    SyntheticVideo::demo_60s().write(&path).unwrap();
    path
}

/// Wraps a backend and remembers the task and fingerprint of every call.
pub struct Counting {
    inner: Arc<dyn ModelBackend>,
    calls: Mutex<Vec<(Task, String)>>,
}

impl Counting {
    pub fn new(inner: Arc<dyn ModelBackend>) -> Arc<Self> {
        Arc::new(Self { inner, calls: Mutex::new(Vec::new()) })
    }

    pub fn calls(&self) -> Vec<(Task, String)> {
        self.calls.lock().unwrap().clone()
    }

    pub fn count(&self, task: Task) -> usize {
        self.calls().iter().filter(|(t, _)| *t == task).count()
    }

    /// Fingerprints of `task` calls that were made more than once.
    pub fn repeated(&self, task: Task) -> usize {
        let mut seen = std::collections::HashMap::new();
        for (t, fp) in self.calls() {
            if t == task {
                *seen.entry(fp).or_insert(0usize) += 1;
            }
        }
        seen.values().filter(|&&n| n > 1).map(|n| n - 1).sum()
    }
}

impl ModelBackend for Counting {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, request: &LmmRequest) -> Result<LmmResponse, BackendError> {
        self.calls.lock().unwrap().push((request.task, request.fingerprint()));
        self.inner.complete(request)
    }
}

pub fn pipeline_at(store_path: &Path, backends: Backends) -> Pipeline {
    let store = Arc::new(Store::open(store_path).unwrap());
    Pipeline::new(store, Arc::new(SyntheticDecoder), backends)
}
