use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{BackendError, LmmRequest, LmmResponse, ModelBackend};

type Responder = dyn Fn(&LmmRequest, usize) -> Result<LmmResponse, BackendError> + Send + Sync;

/// A backend driven by a closure `(request, call_index) -> response`,
/// capturing every request it sees. Handy for flaky-service and
/// prompt-content tests.
pub struct ScriptedBackend {
    id: String,
    responder: Box<Responder>,
    calls: AtomicUsize,
    captured: Mutex<Vec<LmmRequest>>,
}

impl ScriptedBackend {
    pub fn new(
        id: impl Into<String>,
        responder: impl Fn(&LmmRequest, usize) -> Result<LmmResponse, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self { id: id.into(), responder: Box::new(responder), calls: AtomicUsize::new(0), captured: Mutex::new(Vec::new()) }
    }

    /// Returns the given texts in order, repeating the last one.
    pub fn sequence(id: impl Into<String>, texts: Vec<String>) -> Self {
        Self::new(id, move |_, i| {
            let text = texts.get(i).or(texts.last()).cloned().unwrap_or_default();
            Ok(LmmResponse { text })
        })
    }

    pub fn fixed(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(id, move |_, _| Ok(LmmResponse { text: text.clone() }))
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<LmmRequest> {
        self.captured.lock().expect("capture poisoned").clone()
    }
}

impl ModelBackend for ScriptedBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, request: &LmmRequest) -> Result<LmmResponse, BackendError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        self.captured.lock().expect("capture poisoned").push(request.clone());
        (self.responder)(request, i)
    }
}
