//! Completion providers: an HTTP chat-completion client, two mocks that work
//! from ground truth, and a replay cache keyed by bundle content.

use super::templates::templates;
use super::{DecodeParams, ImageSource, PromptBundle, Section};
use crate::corpus::{normalize_connection, ConnectionSet, FurnitureItem};
use base64::{engine::general_purpose::STANDARD, Engine};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("environment variable {0} is not set")]
    MissingAuth(String),
    #[error("transport error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, message: String },
    #[error("replay cache miss for bundle {key}")]
    CacheMiss { key: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid provider spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = ProviderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSpec {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// When set, every successful completion is also written to this replay cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_dir: Option<PathBuf>,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Http(HttpSpec),
    OracleMock,
    NoisyMock { drop_rate: f64, add_rate: f64, seed: u64 },
    Replay { cache_dir: PathBuf },
}

impl ProviderSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ProviderSpec::NoisyMock { drop_rate, add_rate, .. } => {
                for (name, v) in [("drop_rate", drop_rate), ("add_rate", add_rate)] {
                    if !(0.0..=1.0).contains(v) {
                        return Err(ProviderError::InvalidSpec(format!("{name} {v} outside [0, 1]")));
                    }
                }
                Ok(())
            }
            ProviderSpec::Http(h) if h.endpoint.is_empty() || h.model.is_empty() => {
                Err(ProviderError::InvalidSpec("http provider needs endpoint and model".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_http(&self) -> bool {
        matches!(self, ProviderSpec::Http(_))
    }
}

/// Compact command-line form:
/// `oracle`, `noisy:drop=0.2,add=0.1,seed=7`, `replay:<dir>`,
/// `http:<url>?model=<name>&auth=<ENV>`.
impl FromStr for ProviderSpec {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self> {
        let invalid = |m: &str| ProviderError::InvalidSpec(format!("{m}: {s:?}"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let spec = match kind {
            "oracle" => ProviderSpec::OracleMock,
            "replay" if !rest.is_empty() => ProviderSpec::Replay { cache_dir: PathBuf::from(rest) },
            "noisy" => {
                let (mut drop_rate, mut add_rate, mut seed) = (0.0, 0.0, 0);
                for kv in rest.split(',').filter(|kv| !kv.is_empty()) {
                    let (k, v) = kv.split_once('=').ok_or_else(|| invalid("expected key=value"))?;
                    match k.trim() {
                        "drop" => drop_rate = v.trim().parse().map_err(|_| invalid("bad drop"))?,
                        "add" => add_rate = v.trim().parse().map_err(|_| invalid("bad add"))?,
                        "seed" => seed = v.trim().parse().map_err(|_| invalid("bad seed"))?,
                        _ => return Err(invalid("unknown noisy key")),
                    }
                }
                ProviderSpec::NoisyMock { drop_rate, add_rate, seed }
            }
            "http" | "https" => {
                let (url, query) = rest.split_once('?').ok_or_else(|| invalid("missing ?model=..&auth=.."))?;
                let mut model = None;
                let mut auth_env = None;
                for kv in query.split('&') {
                    match kv.split_once('=') {
                        Some(("model", v)) => model = Some(v.to_string()),
                        Some(("auth", v)) => auth_env = Some(v.to_string()),
                        _ => return Err(invalid("unknown http parameter")),
                    }
                }
                ProviderSpec::Http(HttpSpec {
                    endpoint: format!("{kind}:{url}"),
                    model: model.ok_or_else(|| invalid("missing model"))?,
                    auth_env: auth_env.unwrap_or_else(|| "OPENAI_API_KEY".into()),
                    timeout_secs: default_timeout(),
                    record_dir: None,
                })
            }
            _ => return Err(invalid("unknown provider kind")),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Serializes a connection set in the model output format.
pub fn format_connections(set: &ConnectionSet) -> String {
    let list: Vec<Value> = set.iter().map(|c| json!({"part1": c.a(), "part2": c.b()})).collect();
    serde_json::to_string_pretty(&json!({ "connections": list })).expect("json")
}

pub(crate) fn item_rng(seed: u64, item_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(item_id.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

/// Ground truth with each connection dropped with probability `drop_rate`,
/// plus `round(add_rate * |gt|)` distinct non-ground-truth pairs.
pub fn noisy_connections(item: &FurnitureItem, drop_rate: f64, add_rate: f64, seed: u64) -> ConnectionSet {
    let mut rng = item_rng(seed, &item.id);
    let gt = &item.ground_truth;
    let mut out: ConnectionSet = gt.iter().filter(|_| !rng.random_bool(drop_rate)).collect();
    let n = item.part_count;
    let candidates: Vec<_> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .map(|(a, b)| normalize_connection(a, b).expect("a < b"))
        .filter(|c| !gt.contains(c))
        .collect();
    let wanted = ((add_rate * gt.len() as f64).round() as usize).min(candidates.len());
    for i in rand::seq::index::sample(&mut rng, candidates.len(), wanted) {
        out.insert(candidates[i]);
    }
    out
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("ppm") => "image/x-portable-pixmap",
        _ => "application/octet-stream",
    }
}

fn image_bytes(src: &ImageSource) -> Result<(Cow<'static, str>, Cow<'_, [u8]>)> {
    match src {
        ImageSource::File { path } => {
            let bytes = fs::read(path).map_err(|source| ProviderError::Io { path: path.clone(), source })?;
            Ok((Cow::Borrowed(mime_for(path)), Cow::Owned(bytes)))
        }
        ImageSource::Inline { mime, data } => Ok((Cow::Owned(mime.clone()), Cow::Borrowed(data))),
    }
}

#[derive(Serialize)]
struct CanonicalImage<'a> {
    caption: &'a str,
    mime: Cow<'static, str>,
    sha256: String,
}

#[derive(Serialize)]
struct CanonicalBundle<'a> {
    templates_version: &'a str,
    system_text: &'a str,
    user_sections: &'a [Section],
    images: Vec<CanonicalImage<'a>>,
    decode_params: &'a DecodeParams,
}

/// Content hash of a bundle. Images contribute the digest of their bytes,
/// not their paths, so relocating a corpus keeps keys stable.
pub fn bundle_digest(bundle: &PromptBundle) -> Result<String> {
    let images = bundle
        .images
        .iter()
        .map(|img| {
            let (mime, bytes) = image_bytes(&img.source)?;
            Ok(CanonicalImage { caption: &img.caption, mime, sha256: hex::encode(Sha256::digest(&bytes)) })
        })
        .collect::<Result<Vec<_>>>()?;
    let canonical = CanonicalBundle {
        templates_version: &templates().version,
        system_text: &bundle.system_text,
        user_sections: &bundle.user_sections,
        images,
        decode_params: &bundle.decode_params,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical bundle serializes");
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub bundle_digest: String,
    pub raw_text: String,
    pub timestamp: u64,
}

/// Directory of `<digest>.json` records. Reads are lock-free; writes land via
/// rename so readers never see a partial record.
#[derive(Debug, Clone)]
pub struct ReplayCache {
    dir: PathBuf,
}

impl ReplayCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<ReplayRecord>> {
        let path = self.path(key);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| ProviderError::Io {
                path,
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(ProviderError::Io { path, source }),
        }
    }

    pub fn put(&self, key: &str, raw_text: &str) -> Result<()> {
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ProviderError::Io { path, source }
        };
        fs::create_dir_all(&self.dir).map_err(io(&self.dir))?;
        let record = ReplayRecord {
            bundle_digest: key.to_string(),
            raw_text: raw_text.to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, serde_json::to_string_pretty(&record).expect("record")).map_err(io(&tmp))?;
        let dest = self.path(key);
        fs::rename(&tmp, &dest).map_err(io(&dest))
    }
}

fn text_part(text: &str) -> Value {
    json!({"type": "text", "text": text})
}

/// Chat-completion request body. User content interleaves as: first section,
/// first image, middle sections, remaining images, last section.
pub(crate) fn http_body(model: &str, bundle: &PromptBundle) -> Result<Value> {
    let mut images = Vec::with_capacity(bundle.images.len());
    for img in &bundle.images {
        let (mime, bytes) = image_bytes(&img.source)?;
        images.push(vec![
            text_part(&img.caption),
            json!({"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{}", STANDARD.encode(&bytes))}}),
        ]);
    }
    let sections: Vec<Value> = bundle.user_sections.iter().map(|s| text_part(&s.text)).collect();
    let mut content = Vec::new();
    let mut images = images.into_iter();
    let mut sections = sections.into_iter();
    let n_sections = bundle.user_sections.len();
    content.extend(sections.next());
    content.extend(images.next().into_iter().flatten());
    content.extend(sections.by_ref().take(n_sections.saturating_sub(2)));
    content.extend(images.flatten());
    content.extend(sections);

    Ok(json!({
        "model": model,
        "temperature": bundle.decode_params.temperature,
        "top_p": bundle.decode_params.top_p,
        "max_tokens": bundle.decode_params.max_tokens,
        "messages": [
            {"role": "system", "content": [text_part(&bundle.system_text)]},
            {"role": "user", "content": content},
        ],
    }))
}

fn assistant_text(response: &Value) -> Option<String> {
    let content = response.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

fn http_complete(spec: &HttpSpec, bundle: &PromptBundle) -> Result<String> {
    let token = std::env::var(&spec.auth_env).map_err(|_| ProviderError::MissingAuth(spec.auth_env.clone()))?;
    let body = serde_json::to_string(&http_body(&spec.model, bundle)?).expect("json body");
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(spec.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let transport = |status: Option<u16>| move |e: ureq::Error| ProviderError::Transport { status, message: e.to_string() };
    let mut resp = agent
        .post(&spec.endpoint)
        .header("Authorization", &format!("Bearer {token}"))
        .header("Content-Type", "application/json")
        .send(body.as_bytes())
        .map_err(transport(None))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(transport(Some(status)))?;
    if !(200..300).contains(&status) {
        let snippet: String = text.chars().take(300).collect();
        return Err(ProviderError::Transport { status: Some(status), message: snippet });
    }
    let value: Value = serde_json::from_str(&text).map_err(|e| ProviderError::Transport {
        status: Some(status),
        message: format!("response is not json: {e}"),
    })?;
    assistant_text(&value).ok_or_else(|| ProviderError::Transport {
        status: Some(status),
        message: "response has no assistant message".into(),
    })
}

/// Obtains the raw completion text for `bundle`.
pub fn complete(provider: &ProviderSpec, bundle: &PromptBundle, item: &FurnitureItem) -> Result<String> {
    provider.validate()?;
    match provider {
        ProviderSpec::OracleMock => Ok(format_connections(&item.ground_truth)),
        ProviderSpec::NoisyMock { drop_rate, add_rate, seed } => {
            Ok(format_connections(&noisy_connections(item, *drop_rate, *add_rate, *seed)))
        }
        ProviderSpec::Replay { cache_dir } => {
            let key = bundle_digest(bundle)?;
            match ReplayCache::new(cache_dir).get(&key)? {
                Some(record) => Ok(record.raw_text),
                None => Err(ProviderError::CacheMiss { key }),
            }
        }
        ProviderSpec::Http(spec) => {
            let text = http_complete(spec, bundle)?;
            if let Some(dir) = &spec.record_dir {
                ReplayCache::new(dir).put(&bundle_digest(bundle)?, &text)?;
            }
            Ok(text)
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::test_support::item;
    use crate::corpus::Category;
    use crate::planner::{build_prompt, parse_prediction, ImageAttachment, PredictionMethod};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn pairs(set: &ConnectionSet) -> Vec<(u32, u32)> {
        set.iter().map(|c| (c.a(), c.b())).collect()
    }

    fn bundle_with_image(dir: &Path) -> PromptBundle {
        let img = dir.join("overview.png");
        fs::write(&img, [0x89, b'P', b'N', b'G', 1, 2, 3]).unwrap();
        PromptBundle {
            system_text: "sys".into(),
            user_sections: vec![
                Section { label: "baseline".into(), text: "base".into() },
                Section { label: "retrieved".into(), text: "docs".into() },
                Section { label: "schema".into(), text: "schema".into() },
            ],
            images: vec![
                ImageAttachment::file("overview".into(), img.clone()),
                ImageAttachment::file("page 1".into(), img),
            ],
            decode_params: DecodeParams::default(),
        }
    }

    #[test]
    fn oracle_mock_round_trips() {
        let it = item("Chair_a", Category::Chair, 3, &[(0, 1), (1, 2)]);
        let text = complete(&ProviderSpec::OracleMock, &dummy_bundle(), &it).unwrap();
        let parsed = parse_prediction(&text, 3);
        assert_eq!(pairs(&parsed.parsed), vec![(0, 1), (1, 2)]);
        assert_eq!(text.matches("part1").count(), 2);
    }

    fn dummy_bundle() -> PromptBundle {
        PromptBundle {
            system_text: String::new(),
            user_sections: vec![],
            images: vec![],
            decode_params: DecodeParams::default(),
        }
    }

    #[test]
    fn noisy_mock_extremes_and_determinism() {
        let it = item("Chair_a", Category::Chair, 6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let b = dummy_bundle();
        let all_drop = ProviderSpec::NoisyMock { drop_rate: 1.0, add_rate: 0.0, seed: 3 };
        assert!(parse_prediction(&complete(&all_drop, &b, &it).unwrap(), 6).parsed.is_empty());
        let clean = ProviderSpec::NoisyMock { drop_rate: 0.0, add_rate: 0.0, seed: 3 };
        assert_eq!(complete(&clean, &b, &it).unwrap(), complete(&ProviderSpec::OracleMock, &b, &it).unwrap());

        let noisy = ProviderSpec::NoisyMock { drop_rate: 0.4, add_rate: 0.6, seed: 11 };
        let once = complete(&noisy, &b, &it).unwrap();
        assert_eq!(once, complete(&noisy, &b, &it).unwrap());
        let set = noisy_connections(&it, 0.0, 0.6, 11);
        // round(0.6 * 5) = 3 extra pairs
        assert_eq!(set.len(), 5 + 3);
        let other = item("Chair_b", Category::Chair, 6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let sets: Vec<_> = (0..8).map(|s| noisy_connections(&other, 0.5, 0.5, s)).collect();
        assert!(sets.windows(2).any(|w| w[0] != w[1]), "seed must matter");
    }

    #[test]
    fn noisy_mock_add_is_capped_by_available_pairs() {
        let it = item("Chair_a", Category::Chair, 3, &[(0, 1), (1, 2)]);
        let set = noisy_connections(&it, 0.0, 1.0, 1);
        assert_eq!(pairs(&set), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn invalid_rates_rejected() {
        let it = item("Chair_a", Category::Chair, 3, &[(0, 1)]);
        let bad = ProviderSpec::NoisyMock { drop_rate: 1.5, add_rate: 0.0, seed: 0 };
        assert!(matches!(complete(&bad, &dummy_bundle(), &it), Err(ProviderError::InvalidSpec(_))));
    }

    #[test]
    fn spec_strings() {
        assert_eq!("oracle".parse::<ProviderSpec>().unwrap(), ProviderSpec::OracleMock);
        assert_eq!(
            "noisy:drop=0.5,add=0.25,seed=9".parse::<ProviderSpec>().unwrap(),
            ProviderSpec::NoisyMock { drop_rate: 0.5, add_rate: 0.25, seed: 9 }
        );
        assert_eq!(
            "replay:cache".parse::<ProviderSpec>().unwrap(),
            ProviderSpec::Replay { cache_dir: "cache".into() }
        );
        match "http://localhost:9/v1/chat/completions?model=m&auth=KEY".parse::<ProviderSpec>().unwrap() {
            ProviderSpec::Http(h) => {
                assert_eq!(h.endpoint, "http://localhost:9/v1/chat/completions");
                assert_eq!((h.model.as_str(), h.auth_env.as_str()), ("m", "KEY"));
            }
            other => panic!("{other:?}"),
        }
        assert!("noisy:drop=2".parse::<ProviderSpec>().is_err());
        assert!("magic".parse::<ProviderSpec>().is_err());
        let json = serde_json::to_string(&ProviderSpec::NoisyMock { drop_rate: 0.1, add_rate: 0.2, seed: 1 }).unwrap();
        assert!(json.contains("\"kind\":\"noisy_mock\""));
    }

    #[test]
    fn replay_cache_hit_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle_with_image(dir.path());
        let it = item("Chair_a", Category::Chair, 3, &[(0, 1)]);
        let spec = ProviderSpec::Replay { cache_dir: dir.path().join("cache") };
        let key = match complete(&spec, &b, &it) {
            Err(ProviderError::CacheMiss { key }) => key,
            other => panic!("expected miss, got {other:?}"),
        };
        ReplayCache::new(dir.path().join("cache")).put(&key, "{\"connections\": []}").unwrap();
        assert_eq!(complete(&spec, &b, &it).unwrap(), "{\"connections\": []}");
        let rec = ReplayCache::new(dir.path().join("cache")).get(&key).unwrap().unwrap();
        assert_eq!(rec.bundle_digest, key);
    }

    #[test]
    fn digest_tracks_content_not_paths() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle_with_image(dir.path());
        let d1 = bundle_digest(&b).unwrap();
        assert_eq!(d1, bundle_digest(&b.clone()).unwrap());

        let moved = dir.path().join("moved.png");
        fs::copy(dir.path().join("overview.png"), &moved).unwrap();
        let mut relocated = b.clone();
        for img in &mut relocated.images {
            img.source = ImageSource::File { path: moved.clone() };
        }
        assert_eq!(bundle_digest(&relocated).unwrap(), d1);

        fs::write(&moved, b"different").unwrap();
        assert_ne!(bundle_digest(&relocated).unwrap(), d1);
        let mut text_changed = b.clone();
        text_changed.user_sections[0].text.push('!');
        assert_ne!(bundle_digest(&text_changed).unwrap(), d1);
    }

    #[test]
    fn build_prompt_is_pure() {
        let c = crate::corpus::Corpus::new(vec![item("Chair_a", Category::Chair, 3, &[(0, 1)])]).unwrap();
        let it = c.get("Chair_a").unwrap();
        let a = build_prompt(it, PredictionMethod::Oracle, None, &c).unwrap();
        let b = build_prompt(it, PredictionMethod::Oracle, None, &c).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn http_body_layout() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle_with_image(dir.path());
        let body = http_body("m", &b).unwrap();
        assert_eq!(body["max_tokens"], 4096);
        assert_eq!(body["temperature"], 0.0);
        let content = body["messages"][1]["content"].as_array().unwrap();
        let kinds: Vec<&str> = content
            .iter()
            .map(|p| if p["type"] == "text" { p["text"].as_str().unwrap() } else { "<img>" })
            .collect();
        assert_eq!(kinds, ["base", "overview", "<img>", "docs", "page 1", "<img>", "schema"]);
        let url = content[2]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }

    /// Serves exactly one request and returns what it received.
    pub(crate) fn one_shot_server(status: u16, body: String) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut req_body = vec![0; len];
            reader.read_exact(&mut req_body).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            head + &String::from_utf8(req_body).unwrap()
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    #[test]
    fn http_provider_posts_and_records() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle_with_image(dir.path());
        let it = item("Chair_a", Category::Chair, 3, &[(0, 1)]);
        let reply = json!({"choices": [{"message": {"role": "assistant", "content": "{\"connections\": [[0, 2]]}"}}]});
        let (url, server) = one_shot_server(200, reply.to_string());
        std::env::set_var("ASSEMBLY_TEST_KEY_OK", "secret");
        let spec = ProviderSpec::Http(HttpSpec {
            endpoint: url,
            model: "vision-model".into(),
            auth_env: "ASSEMBLY_TEST_KEY_OK".into(),
            timeout_secs: 10,
            record_dir: Some(dir.path().join("cache")),
        });
        let text = complete(&spec, &b, &it).unwrap();
        assert_eq!(text, "{\"connections\": [[0, 2]]}");
        let request = server.join().unwrap();
        assert!(request.contains("Bearer secret"), "{request}");
        assert!(request.contains("\"model\":\"vision-model\""));
        assert!(request.contains("data:image/png;base64,"));

        // the recorded completion replays offline
        let replay = ProviderSpec::Replay { cache_dir: dir.path().join("cache") };
        assert_eq!(complete(&replay, &b, &it).unwrap(), text);
    }

    #[test]
    fn http_provider_errors() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle_with_image(dir.path());
        let it = item("Chair_a", Category::Chair, 3, &[(0, 1)]);
        let spec = |endpoint: String, env: &str| {
            ProviderSpec::Http(HttpSpec {
                endpoint,
                model: "m".into(),
                auth_env: env.into(),
                timeout_secs: 10,
                record_dir: None,
            })
        };
        assert!(matches!(
            complete(&spec("http://127.0.0.1:9/x".into(), "ASSEMBLY_TEST_KEY_UNSET"), &b, &it),
            Err(ProviderError::MissingAuth(_))
        ));
        std::env::set_var("ASSEMBLY_TEST_KEY_ERR", "k");
        let (url, server) = one_shot_server(503, "{\"error\":\"busy\"}".into());
        match complete(&spec(url, "ASSEMBLY_TEST_KEY_ERR"), &b, &it) {
            Err(ProviderError::Transport { status: Some(503), .. }) => {}
            other => panic!("expected 503, got {other:?}"),
        }
        server.join().unwrap();
    }
}
