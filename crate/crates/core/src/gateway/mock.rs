//! Deterministic scripted backend.
//!
//! A scenario is a set of chat fixtures keyed by request fingerprint plus
//! one of two embedding sources: an explicit id -> matrix table, or a
//! hash mode that derives rows from the payload identity. Both are pure
//! functions of their inputs, so repeated runs produce byte-identical
//! transcripts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    stable_seed, ChatRequest, ChatResponse, EmbedPayload, GatewayError, TranscriptEntry,
};
use crate::retrieval::MultiVectorEmbedding;

/// Hash-derived embeddings: every payload id maps to a fixed
/// `tokens x dim` matrix of L2-normalized rows drawn from a generator
/// seeded by (payload id, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashEmbeddings {
    pub dim: usize,
    pub tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatFixture {
    pub text: String,
    #[serde(default)]
    pub truncated: bool,
}

/// On-disk form: one `{scenario_id}.json` per scenario in the fixtures
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Scenario {
    #[serde(default)]
    pub scenario_id: String,
    /// Request fingerprint -> scripted reply.
    #[serde(default)]
    pub chat: BTreeMap<String, ChatFixture>,
    /// Payload id -> embedding rows. Checked before hash mode.
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<Vec<f64>>>,
    /// Fallback embedding derivation; absent means unknown ids are
    /// fixture-missing errors.
    #[serde(default)]
    pub embedding_hash: Option<HashEmbeddings>,
}

impl Scenario {
    pub fn new(scenario_id: impl Into<String>) -> Self {
        Self {
            scenario_id: scenario_id.into(),
            ..Self::default()
        }
    }

    pub fn with_hash_embeddings(mut self, dim: usize, tokens: usize, seed: u64) -> Self {
        self.embedding_hash = Some(HashEmbeddings { dim, tokens, seed });
        self
    }

    /// Script a chat reply for one request.
    pub fn script_chat(&mut self, request: &ChatRequest, text: impl Into<String>) -> &mut Self {
        self.chat.insert(
            request.fingerprint(),
            ChatFixture {
                text: text.into(),
                truncated: false,
            },
        );
        self
    }

    pub fn script_chat_fingerprint(
        &mut self,
        fingerprint: impl Into<String>,
        text: impl Into<String>,
    ) -> &mut Self {
        self.chat.insert(
            fingerprint.into(),
            ChatFixture {
                text: text.into(),
                truncated: false,
            },
        );
        self
    }

    pub fn script_embedding(&mut self, id: impl Into<String>, rows: Vec<Vec<f64>>) -> &mut Self {
        self.embeddings.insert(id.into(), rows);
        self
    }

    pub fn load(dir: &Path, scenario_id: &str) -> Result<Self, GatewayError> {
        let path = dir.join(format!("{scenario_id}.json"));
        let raw = fs::read_to_string(&path).map_err(|e| {
            GatewayError::FixtureFile(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut scenario: Scenario = serde_json::from_str(&raw).map_err(|e| {
            GatewayError::FixtureFile(format!("cannot parse {}: {e}", path.display()))
        })?;
        if scenario.scenario_id.is_empty() {
            scenario.scenario_id = scenario_id.to_string();
        }
        Ok(scenario)
    }

    pub fn save(&self, dir: &Path) -> Result<(), GatewayError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.scenario_id));
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| GatewayError::FixtureFile(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    /// Rebuild a scenario from a recorded transcript: every chat exchange
    /// becomes a fixture. Replaying the run through the resulting
    /// scenario reproduces the original decisions.
    pub fn from_transcript(
        scenario_id: impl Into<String>,
        entries: &[TranscriptEntry],
        embedding_hash: Option<HashEmbeddings>,
    ) -> Self {
        let mut scenario = Scenario::new(scenario_id);
        scenario.embedding_hash = embedding_hash;
        for entry in entries {
            if let TranscriptEntry::Chat {
                fingerprint,
                response_text,
                ..
            } = entry
            {
                scenario.script_chat_fingerprint(fingerprint.clone(), response_text.clone());
            }
        }
        scenario
    }
}

pub struct MockBackend {
    scenario: Scenario,
}

impl MockBackend {
    pub fn new(scenario: Scenario) -> Self {
        Self { scenario }
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let fingerprint = request.fingerprint();
        let fixture = self.scenario.chat.get(&fingerprint).ok_or_else(|| {
            GatewayError::FixtureMissing {
                scenario: self.scenario.scenario_id.clone(),
                kind: "chat fingerprint",
                key: format!("{fingerprint} (first user text: {:?})", first_text(request)),
            }
        })?;
        Ok(ChatResponse {
            text: fixture.text.clone(),
            model_id: format!("mock:{}", self.scenario.scenario_id),
            latency_ms: 0,
            truncated: fixture.truncated,
        })
    }

    pub fn embed(&self, payload: &EmbedPayload) -> Result<MultiVectorEmbedding, GatewayError> {
        let id = payload.id();
        if let Some(rows) = self.scenario.embeddings.get(id) {
            return MultiVectorEmbedding::from_rows(rows, false)
                .map_err(|e| GatewayError::MalformedResponse(format!("fixture '{id}': {e}")))
                .and_then(|e| {
                    if e.rows_are_unit() {
                        MultiVectorEmbedding::from_rows(rows, true)
                            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))
                    } else {
                        Ok(e)
                    }
                });
        }
        if let Some(hash) = &self.scenario.embedding_hash {
            return Ok(hash_embedding(id, hash));
        }
        Err(GatewayError::FixtureMissing {
            scenario: self.scenario.scenario_id.clone(),
            kind: "embedding id",
            key: id.to_string(),
        })
    }
}

fn first_text(request: &ChatRequest) -> String {
    for part in &request.user_parts {
        if let super::UserPart::Text { text } = part {
            let mut t: String = text.chars().take(60).collect();
            if t.len() < text.len() {
                t.push('…');
            }
            return t;
        }
    }
    String::new()
}

/// Deterministic rows for one payload id: uniform entries in [-1, 1]
/// from a seeded generator, then L2-normalized per row.
fn hash_embedding(payload_id: &str, cfg: &HashEmbeddings) -> MultiVectorEmbedding {
    let seed = stable_seed("docqa-embed-v1", &[payload_id], &[cfg.seed]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let rows: Vec<Vec<f64>> = (0..cfg.tokens)
        .map(|_| (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    MultiVectorEmbedding::from_rows(&rows, false)
        .expect("hash rows are finite and non-empty")
        .into_normalized()
        .expect("uniform rows are nonzero with probability 1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Gateway;

    #[test]
    fn scripted_reply_is_verbatim_with_zero_latency() {
        let req = ChatRequest::new("sys").text("q");
        let mut scenario = Scenario::new("s1");
        scenario.script_chat(&req, r#"{"answer": 3}"#);
        let gw = Gateway::with_mock(scenario);
        let resp = gw.chat(&req).unwrap();
        assert_eq!(resp.text, r#"{"answer": 3}"#);
        assert_eq!(resp.latency_ms, 0);
        assert!(!resp.truncated);
    }

    #[test]
    fn fixture_miss_is_loud() {
        let gw = Gateway::with_mock(Scenario::new("s1"));
        let err = gw.chat(&ChatRequest::new("sys").text("unscripted")).unwrap_err();
        assert!(matches!(err, GatewayError::FixtureMissing { .. }));
        assert!(err.to_string().contains("unscripted"));
    }

    #[test]
    fn embedding_table_lookup_and_miss() {
        let mut scenario = Scenario::new("s1");
        scenario.script_embedding("pageA", vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let gw = Gateway::with_mock(scenario);
        let emb = gw
            .embed_multivector(&EmbedPayload::Text {
                id: "pageA".into(),
                text: String::new(),
            })
            .unwrap();
        assert_eq!((emb.token_count(), emb.dim()), (2, 2));
        assert!(emb.is_normalized());
        let err = gw
            .embed_multivector(&EmbedPayload::Text {
                id: "pageB".into(),
                text: String::new(),
            })
            .unwrap_err();
        assert!(matches!(err, GatewayError::FixtureMissing { .. }));
    }

    #[test]
    fn hash_embeddings_are_deterministic_and_normalized() {
        let scenario = Scenario::new("s1").with_hash_embeddings(8, 4, 42);
        let gw = Gateway::with_mock(scenario);
        let p = EmbedPayload::query("what is the total?");
        let a = gw.embed_multivector(&p).unwrap();
        let b = gw.embed_multivector(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.token_count(), a.dim()), (4, 8));
        assert!(a.is_normalized());
        let other = gw.embed_multivector(&EmbedPayload::query("other")).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn scenario_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::new("sys").text("q");
        let mut scenario = Scenario::new("disk");
        scenario.script_chat(&req, "reply");
        scenario.script_embedding("p", vec![vec![0.6, 0.8]]);
        scenario.save(dir.path()).unwrap();
        let loaded = Scenario::load(dir.path(), "disk").unwrap();
        assert_eq!(scenario, loaded);
    }

    #[test]
    fn transcript_replay_reproduces_chat() {
        let req = ChatRequest::new("sys").text("q");
        let mut scenario = Scenario::new("orig").with_hash_embeddings(4, 2, 1);
        scenario.script_chat(&req, "the reply");
        let gw = Gateway::with_mock(scenario);
        gw.chat(&req).unwrap();
        gw.embed_multivector(&EmbedPayload::query("q")).unwrap();

        let replay = Scenario::from_transcript(
            "replay",
            &gw.transcript().entries(),
            Some(HashEmbeddings {
                dim: 4,
                tokens: 2,
                seed: 1,
            }),
        );
        let gw2 = Gateway::with_mock(replay);
        assert_eq!(gw2.chat(&req).unwrap().text, "the reply");
    }
}
