//! Socket adapters for external scorers and embedders.
//!
//! Each request is one JSON line on a fresh TCP connection, answered by one
//! JSON line: `{"chunk": ..}` -> `{"probability": p}` for fix scoring,
//! `{"chunk": ..}` -> `{"probs": [..10]}` for type scoring (trained-class
//! order), `{"text": ..}` -> `{"vector": [..]}` for embeddings. Any reply
//! may instead be `{"error": "..."}`.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::advisory::OwaspClass;
use crate::encoder::ChunkEncoding;
use crate::similarity::EmbeddingProvider;
use crate::type_score::{TypeDistribution, TypeScoreProvider};
use crate::vfc_score::VfcScoreProvider;

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("provider unreachable at {addr}: {reason}")]
    Unreachable { addr: String, reason: String },
    #[error("provider protocol error: {0}")]
    Protocol(String),
    #[error("provider reported: {0}")]
    Remote(String),
}

#[derive(Debug, Clone)]
pub struct SocketClient {
    addr: SocketAddr,
    timeout: Duration,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Reply<T> {
    Err { error: String },
    Ok(T),
}

impl SocketClient {
    pub fn new(addr: impl ToSocketAddrs + std::fmt::Debug) -> Result<Self, ProviderError> {
        let shown = format!("{addr:?}");
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| ProviderError::Unreachable {
                addr: shown.clone(),
                reason: e.to_string(),
            })?
            .next()
            .ok_or_else(|| ProviderError::Unreachable {
                addr: shown,
                reason: "no address".into(),
            })?;
        Ok(SocketClient {
            addr,
            timeout: Duration::from_secs(30),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(&self, req: &Req) -> Result<Resp, ProviderError> {
        let unreachable = |e: std::io::Error| ProviderError::Unreachable {
            addr: self.addr.to_string(),
            reason: e.to_string(),
        };
        let mut stream = TcpStream::connect_timeout(&self.addr, self.timeout).map_err(unreachable)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(unreachable)?;
        let mut line = serde_json::to_vec(req).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        line.push(b'\n');
        stream.write_all(&line).map_err(unreachable)?;
        let mut reply = String::new();
        BufReader::new(stream).read_line(&mut reply).map_err(unreachable)?;
        match serde_json::from_str::<Reply<Resp>>(reply.trim_end()) {
            Ok(Reply::Ok(v)) => Ok(v),
            Ok(Reply::Err { error }) => Err(ProviderError::Remote(error)),
            Err(e) => Err(ProviderError::Protocol(format!("{e}: {:?}", reply.trim_end()))),
        }
    }
}

#[derive(Serialize)]
struct ChunkRequest<'a> {
    chunk: &'a ChunkEncoding,
}

#[derive(Serialize)]
struct TextRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ProbabilityReply {
    probability: f64,
}

#[derive(Deserialize)]
struct ProbsReply {
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct VectorReply {
    vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SocketVfcProvider(pub SocketClient);

impl VfcScoreProvider for SocketVfcProvider {
    fn score(&self, chunk: &ChunkEncoding) -> Result<f64, ProviderError> {
        let r: ProbabilityReply = self.0.call(&ChunkRequest { chunk })?;
        if !(0.0..=1.0).contains(&r.probability) {
            return Err(ProviderError::Protocol(format!(
                "probability {} outside [0, 1]",
                r.probability
            )));
        }
        Ok(r.probability)
    }
}

#[derive(Debug, Clone)]
pub struct SocketTypeProvider(pub SocketClient);

impl TypeScoreProvider for SocketTypeProvider {
    fn distribution(&self, chunk: &ChunkEncoding) -> Result<TypeDistribution, ProviderError> {
        let r: ProbsReply = self.0.call(&ChunkRequest { chunk })?;
        if r.probs.len() != OwaspClass::TRAINED.len() {
            return Err(ProviderError::Protocol(format!(
                "expected {} probabilities, got {}",
                OwaspClass::TRAINED.len(),
                r.probs.len()
            )));
        }
        TypeDistribution::from_trained(&r.probs).map_err(ProviderError::Protocol)
    }
}

#[derive(Debug, Clone)]
pub struct SocketEmbedder {
    client: SocketClient,
    dim: usize,
}

impl SocketEmbedder {
    pub fn new(client: SocketClient, dim: usize) -> Self {
        SocketEmbedder { client, dim }
    }
}

impl EmbeddingProvider for SocketEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let r: VectorReply = self.client.call(&TextRequest { text })?;
        if r.vector.len() != self.dim || r.vector.iter().any(|x| !x.is_finite()) {
            return Err(ProviderError::Protocol(format!(
                "expected {} finite components, got {}",
                self.dim,
                r.vector.len()
            )));
        }
        Ok(r.vector)
    }
}
