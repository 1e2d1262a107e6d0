//! HTTP JSON transports for chat-completion and embedding servers.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use url::Url;

use super::{BackendDescriptor, ChatTransport, EmbeddingTransport, ModelRequest, TransportError};

const RESPONSE_LIMIT: u64 = 64 * 1024 * 1024;

/// Wire shape of a chat backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatStyle {
    /// `{"model","prompt","stream":false,"options":{...}}` answered by `{"response": ...}`.
    #[default]
    Ollama,
    /// `{"model","messages":[...],"stream":false}` answered by `choices[0].message.content`.
    OpenaiChat,
}

impl ChatStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatStyle::Ollama => "ollama",
            ChatStyle::OpenaiChat => "openai_chat",
        }
    }
}

/// Request body for the given wire style.
pub fn chat_body(style: ChatStyle, model: &str, request: &ModelRequest) -> Value {
    match style {
        ChatStyle::Ollama => {
            let mut body = json!({
                "model": model,
                "prompt": request.prompt,
                "stream": false,
            });
            if let Some(t) = request.temperature {
                body["options"] = json!({ "temperature": t });
            }
            if let Some(img) = &request.image {
                let url = img.data_url();
                let b64 = url.split_once(',').map(|(_, b)| b).unwrap_or_default();
                body["images"] = json!([b64]);
            }
            body
        }
        ChatStyle::OpenaiChat => {
            let content = match &request.image {
                Some(img) => json!([
                    { "type": "text", "text": request.prompt },
                    { "type": "image_url", "image_url": { "url": img.data_url() } },
                ]),
                None => json!(request.prompt),
            };
            let mut body = json!({
                "model": model,
                "messages": [{ "role": "user", "content": content }],
                "stream": false,
            });
            if let Some(t) = request.temperature {
                body["temperature"] = json!(t);
            }
            body
        }
    }
}

/// Pulls the completion text out of a response body.
pub fn completion_text(style: ChatStyle, body: &Value) -> Result<String, TransportError> {
    let text = match style {
        ChatStyle::Ollama => body.get("response"),
        ChatStyle::OpenaiChat => body.pointer("/choices/0/message/content"),
    };
    text.and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| TransportError::Malformed(format!("no completion text in {} response", style.as_str())))
}

pub fn embedding_body(model: &str, texts: &[String]) -> Value {
    json!({ "model": model, "input": texts })
}

pub fn embedding_vectors(body: &Value) -> Result<Vec<Vec<f32>>, TransportError> {
    #[derive(Deserialize)]
    struct Item {
        embedding: Vec<f32>,
    }
    #[derive(Deserialize)]
    struct Response {
        data: Vec<Item>,
    }
    let parsed: Response =
        serde_json::from_value(body.clone()).map_err(|e| TransportError::Malformed(e.to_string()))?;
    Ok(parsed.data.into_iter().map(|i| i.embedding).collect())
}

#[derive(Debug, Clone)]
struct JsonClient {
    endpoint: Url,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl JsonClient {
    fn new(endpoint: Url, timeout: Duration, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .proxy(None)
            .build()
            .into();
        JsonClient {
            endpoint,
            api_key,
            agent,
        }
    }

    fn post(&self, body: &Value) -> Result<Value, TransportError> {
        let mut req = self.agent.post(self.endpoint.as_str());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(classify)?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(RESPONSE_LIMIT)
            .read_to_string()
            .map_err(classify)?;
        if !(200..300).contains(&code) {
            let mut body = text;
            body.truncate(512);
            return Err(TransportError::Status { code, body });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))
    }

    fn reachable(&self) -> bool {
        let (Some(host), Some(port)) = (self.endpoint.host_str(), self.endpoint.port_or_known_default()) else {
            return false;
        };
        let Ok(mut addrs) = (host, port).to_socket_addrs() else {
            return false;
        };
        addrs.any(|a| TcpStream::connect_timeout(&a, Duration::from_secs(1)).is_ok())
    }
}

fn classify(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
        ureq::Error::StatusCode(code) => TransportError::Status {
            code,
            body: String::new(),
        },
        ureq::Error::Json(e) => TransportError::Malformed(e.to_string()),
        other => TransportError::Unreachable(other.to_string()),
    }
}

#[derive(Debug, Clone)]
pub struct HttpChatTransport {
    client: JsonClient,
    model_name: String,
    style: ChatStyle,
}

impl HttpChatTransport {
    pub fn new(endpoint: Url, model_name: impl Into<String>, style: ChatStyle, timeout: Duration) -> Self {
        HttpChatTransport {
            client: JsonClient::new(endpoint, timeout, None),
            model_name: model_name.into(),
            style,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.client.api_key = key;
        self
    }
}

impl ChatTransport for HttpChatTransport {
    fn complete(&self, request: &ModelRequest) -> Result<String, TransportError> {
        let body = chat_body(self.style, &self.model_name, request);
        let resp = self.client.post(&body)?;
        completion_text(self.style, &resp)
    }

    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: "http".into(),
            endpoint_url: Some(self.client.endpoint.to_string()),
            model_name: self.model_name.clone(),
            style: Some(self.style.as_str().into()),
        }
    }

    fn reachable(&self) -> bool {
        self.client.reachable()
    }
}

#[derive(Debug, Clone)]
pub struct HttpEmbeddingTransport {
    client: JsonClient,
    model_name: String,
}

impl HttpEmbeddingTransport {
    pub fn new(endpoint: Url, model_name: impl Into<String>, timeout: Duration, api_key: Option<String>) -> Self {
        HttpEmbeddingTransport {
            client: JsonClient::new(endpoint, timeout, api_key),
            model_name: model_name.into(),
        }
    }
}

impl EmbeddingTransport for HttpEmbeddingTransport {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
        let resp = self.client.post(&embedding_body(&self.model_name, texts))?;
        let vectors = embedding_vectors(&resp)?;
        if vectors.len() != texts.len() {
            return Err(TransportError::Malformed(format!(
                "{} embeddings for {} inputs",
                vectors.len(),
                texts.len()
            )));
        }
        Ok(vectors)
    }

    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: "http".into(),
            endpoint_url: Some(self.client.endpoint.to_string()),
            model_name: self.model_name.clone(),
            style: None,
        }
    }

    fn reachable(&self) -> bool {
        self.client.reachable()
    }
}
