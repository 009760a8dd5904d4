use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// A vision-LLM endpoint: one text part followed by PNG images.
pub trait JudgeClient {
    fn complete(&self, prompt: &str, images: &[Vec<u8>]) -> Result<String>;
}

/// Always answers the same text.
#[derive(Clone, Debug)]
pub struct FixedClient(pub String);

impl JudgeClient for FixedClient {
    fn complete(&self, _prompt: &str, _images: &[Vec<u8>]) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Replays a script of replies; an exhausted script is a transport failure.
#[derive(Debug)]
pub struct ScriptedClient {
    replies: Mutex<VecDeque<String>>,
}

impl ScriptedClient {
    pub fn new(replies: Vec<String>) -> Self {
        Self {
            replies: Mutex::new(replies.into()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().expect("not poisoned").len()
    }
}

impl JudgeClient for ScriptedClient {
    fn complete(&self, _prompt: &str, _images: &[Vec<u8>]) -> Result<String> {
        self.replies
            .lock()
            .expect("not poisoned")
            .pop_front()
            .ok_or_else(|| Error::Transport("scripted client has no replies left".into()))
    }
}

/// Picks the candidate with the smallest pixel MSE to the first image.
/// Decodes what it is sent, so it sees exactly what a remote judge would.
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestClient;

fn decode(png: &[u8]) -> Result<Vec<f32>> {
    let img = image::load_from_memory(png).map_err(|e| Error::Transport(format!("undecodable image: {e}")))?;
    Ok(img.into_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
}

impl JudgeClient for NearestClient {
    fn complete(&self, _prompt: &str, images: &[Vec<u8>]) -> Result<String> {
        let decoded: Vec<Vec<f32>> = images.iter().map(|b| decode(b)).collect::<Result<_>>()?;
        let (target, cands) = decoded.split_first().ok_or_else(|| Error::Transport("no images".into()))?;
        let mut best = (f64::INFINITY, 0);
        for (j, c) in cands.iter().enumerate() {
            let d = crate::metrics::mse(target, c);
            if d < best.0 {
                best = (d, j);
            }
        }
        Ok((best.1 + 2).to_string())
    }
}

pub const JUDGE_URL_ENV: &str = "RECONBENCH_JUDGE_URL";
pub const JUDGE_MODEL_ENV: &str = "RECONBENCH_JUDGE_MODEL";
pub const JUDGE_KEY_ENV: &str = "RECONBENCH_JUDGE_API_KEY";

/// Chat-completions client with a minimum spacing between requests.
#[derive(Debug)]
pub struct HttpJudgeClient {
    pub endpoint: String,
    pub model: String,
    api_key: String,
    min_interval: Duration,
    agent: ureq::Agent,
    last: Mutex<Option<Instant>>,
}

impl HttpJudgeClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key.into(),
            min_interval: Duration::from_millis(500),
            agent,
            last: Mutex::new(None),
        }
    }

    /// Reads endpoint, model and key from the environment.
    pub fn from_env() -> Result<Self> {
        let key = std::env::var(JUDGE_KEY_ENV).map_err(|_| Error::Invalid(format!("{JUDGE_KEY_ENV} is not set")))?;
        let url = std::env::var(JUDGE_URL_ENV).unwrap_or_else(|_| "https://api.openai.com/v1/chat/completions".into());
        let model = std::env::var(JUDGE_MODEL_ENV).unwrap_or_else(|_| "gpt-4o".into());
        Ok(Self::new(url, model, key))
    }

    pub fn with_min_interval(mut self, d: Duration) -> Self {
        self.min_interval = d;
        self
    }

    fn throttle(&self) {
        let mut last = self.last.lock().expect("not poisoned");
        if let Some(t) = *last {
            let wait = self.min_interval.saturating_sub(t.elapsed());
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
        *last = Some(Instant::now());
    }
}

pub(crate) fn request_body(model: &str, prompt: &str, images: &[Vec<u8>]) -> Value {
    let mut content = vec![json!({"type": "text", "text": prompt})];
    for png in images {
        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
        content.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}));
    }
    json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
    })
}

impl JudgeClient for HttpJudgeClient {
    fn complete(&self, prompt: &str, images: &[Vec<u8>]) -> Result<String> {
        self.throttle();
        let body = request_body(&self.model, prompt, images);
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let v: Value = resp.body_mut().read_json().map_err(|e| Error::Transport(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport(format!("unexpected response shape: {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_has_one_text_part_then_images() {
        let b = request_body("m", "hi", &[vec![1, 2], vec![3]]);
        let parts = b["messages"][0]["content"].as_array().unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0]["text"], "hi");
        assert_eq!(parts[1]["image_url"]["url"], "data:image/png;base64,AQI=");
    }

    #[test]
    fn scripted_client_runs_dry() {
        let c = ScriptedClient::new(vec!["2".into()]);
        assert_eq!(c.complete("", &[]).unwrap(), "2");
        assert!(matches!(c.complete("", &[]), Err(Error::Transport(_))));
    }
}
