use std::collections::VecDeque;
use std::sync::Mutex;

use super::{GatewayRequest, GatewayResponse, Transport, TransportError};

/// A transport that answers with a fixed queue of responses, in call order.
///
/// Useful for tests and for recording fixture cassettes without a provider.
/// Once the queue is empty every call fails with a fatal error.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    queue: Mutex<VecDeque<Result<GatewayResponse, TransportError>>>,
    seen: Mutex<Vec<GatewayRequest>>,
}

impl ScriptedTransport {
    pub fn new(responses: impl IntoIterator<Item = Result<GatewayResponse, TransportError>>) -> Self {
        Self {
            queue: Mutex::new(responses.into_iter().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(|t| Ok(GatewayResponse::Text(t.into()))))
    }

    pub fn push(&self, response: Result<GatewayResponse, TransportError>) {
        self.queue.lock().expect("script lock").push_back(response);
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script lock").len()
    }

    /// Requests received so far.
    pub fn requests(&self) -> Vec<GatewayRequest> {
        self.seen.lock().expect("script lock").clone()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &GatewayRequest) -> Result<GatewayResponse, TransportError> {
        self.seen.lock().expect("script lock").push(request.clone());
        self.queue
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or_else(|| Err(TransportError::Fatal("script exhausted".into())))
    }
}
