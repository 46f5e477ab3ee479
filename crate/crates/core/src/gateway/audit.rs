use std::io::Write;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ChatMessage, Gateway, ModelRequest, ModelResponse, RequestKind};
use crate::error::GatewayError;
use crate::memory::embed::Embedding;

/// One request/response pair. Identifiers are sequential per gateway, so a
/// replay against the same fixtures yields the same ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: String,
    pub kind: RequestKind,
    pub system: String,
    pub messages: Vec<ChatMessage>,
    pub has_schema: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<ModelResponse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Records every call made through the wrapped gateway.
pub struct AuditedGateway {
    inner: Arc<dyn Gateway>,
    log: Mutex<Vec<AuditRecord>>,
}

impl AuditedGateway {
    pub fn new(inner: Arc<dyn Gateway>) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.log.lock().expect("audit log poisoned").clone()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in self.log.lock().expect("audit log poisoned").iter() {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn push(&self, mut rec: AuditRecord) {
        let mut log = self.log.lock().expect("audit log poisoned");
        rec.id = format!("req-{:06}", log.len() + 1);
        log.push(rec);
    }
}

impl Gateway for AuditedGateway {
    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let result = self.inner.complete(req);
        self.push(AuditRecord {
            id: String::new(),
            kind: req.kind,
            system: req.system.clone(),
            messages: req.messages.clone(),
            has_schema: req.schema.is_some(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        result
    }

    fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        let result = self.inner.embed(text);
        self.push(AuditRecord {
            id: String::new(),
            kind: RequestKind::Embed,
            system: String::new(),
            messages: vec![ChatMessage::user(text)],
            has_schema: false,
            response: None,
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        result
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn supports_vision(&self) -> bool {
        self.inner.supports_vision()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedMock;

    #[test]
    fn records_have_stable_sequential_ids() {
        let mock = ScriptedMock::parse(r#"{"kind":"any","match":{"always":true},"respond":"ok"}"#).unwrap();
        let g = AuditedGateway::new(Arc::new(mock));
        g.complete(&ModelRequest::chat("s", "a")).unwrap();
        g.embed("b").unwrap();
        assert!(g.embed("").is_err());
        let recs = g.records();
        assert_eq!(recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["req-000001", "req-000002", "req-000003"]);
        assert_eq!(recs[0].response, Some(ModelResponse::Text("ok".into())));
        assert!(recs[2].error.is_some());
        let mut out = Vec::new();
        g.write_jsonl(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 3);
    }
}
