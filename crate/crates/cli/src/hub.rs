//! Fan-out of newline-delimited event records. A subscriber first gets
//! every line published on the topic so far, then follows live until the
//! topic is closed.

use std::collections::HashMap;
use std::sync::Mutex;

use futures::stream::{self, Stream, StreamExt};
use tokio::sync::broadcast;

const CHANNEL_CAPACITY: usize = 1024;

struct Topic {
    history: Vec<String>,
    tx: Option<broadcast::Sender<String>>,
}

#[derive(Default)]
pub struct Hub {
    topics: Mutex<HashMap<String, Topic>>,
}

pub struct Subscription {
    backlog: Vec<String>,
    rx: Option<broadcast::Receiver<String>>,
}

impl Hub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates the topic if needed and reopens it if it was closed.
    pub fn open(&self, topic: &str) {
        let mut topics = self.topics.lock().expect("hub lock");
        let t = topics.entry(topic.to_string()).or_insert_with(|| Topic { history: Vec::new(), tx: None });
        if t.tx.is_none() {
            t.tx = Some(broadcast::channel(CHANNEL_CAPACITY).0);
        }
    }

    pub fn publish(&self, topic: &str, line: String) {
        let mut topics = self.topics.lock().expect("hub lock");
        let Some(t) = topics.get_mut(topic) else {
            tracing::debug!(topic, "dropping event for unopened topic");
            return;
        };
        if let Some(tx) = &t.tx {
            // no receivers is fine; the history keeps the line
            let _ = tx.send(line.clone());
        }
        t.history.push(line);
    }

    /// Ends every live subscription; the history stays readable.
    pub fn close(&self, topic: &str) {
        if let Some(t) = self.topics.lock().expect("hub lock").get_mut(topic) {
            t.tx = None;
        }
    }

    pub fn is_open(&self, topic: &str) -> bool {
        self.topics.lock().expect("hub lock").get(topic).is_some_and(|t| t.tx.is_some())
    }

    /// None when the topic was never opened.
    pub fn subscribe(&self, topic: &str) -> Option<Subscription> {
        let topics = self.topics.lock().expect("hub lock");
        let t = topics.get(topic)?;
        Some(Subscription { backlog: t.history.clone(), rx: t.tx.as_ref().map(|tx| tx.subscribe()) })
    }
}

impl Subscription {
    pub fn from_lines(lines: Vec<String>) -> Self {
        Self { backlog: lines, rx: None }
    }

    pub fn into_stream(self) -> impl Stream<Item = String> + Send + 'static {
        let live = stream::unfold(self.rx, |rx| async move {
            let mut rx = rx?;
            loop {
                match rx.recv().await {
                    Ok(line) => return Some((line, Some(rx))),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        tracing::warn!(skipped = n, "event subscriber fell behind");
                    }
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        });
        stream::iter(self.backlog).chain(live)
    }
}
