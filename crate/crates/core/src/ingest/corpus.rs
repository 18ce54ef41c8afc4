use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_trigger: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSource {
    pub path: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCorpus {
    pub corpus_id: String,
    pub prompts: Vec<Prompt>,
    pub source: CorpusSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One prompt per line; blank lines skipped. Ids are 1-based line numbers.
    Lines,
    /// JSON array of `{"id", "caption"}` records.
    CaptionJson,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => CorpusFormat::CaptionJson,
            _ => CorpusFormat::Lines,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RecordId {
    Text(String),
    Number(u64),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionRecord {
    id: RecordId,
    caption: String,
    #[serde(default)]
    injected_trigger: Option<String>,
}

#[derive(Serialize)]
struct CaptionRecordOut<'a> {
    id: &'a str,
    caption: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    injected_trigger: Option<&'a str>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl PromptCorpus {
    pub fn from_prompts(corpus_id: impl Into<String>, prompts: Vec<Prompt>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &prompts {
            if !seen.insert(p.prompt_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate prompt id {:?}", p.prompt_id)));
            }
        }
        let hash = sha256_hex(serde_json::to_string(&prompts)?.as_bytes());
        Ok(Self {
            corpus_id: corpus_id.into(),
            prompts,
            source: CorpusSource {
                path: String::new(),
                content_hash: hash,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, prompt_id: &str) -> Option<&Prompt> {
        self.prompts.iter().find(|p| p.prompt_id == prompt_id)
    }

    pub fn injected_count(&self) -> usize {
        self.prompts.iter().filter(|p| p.injected_trigger.is_some()).count()
    }

    /// Ground-truth triggers present in the corpus, sorted and deduplicated.
    pub fn ground_truth_triggers(&self) -> Vec<String> {
        let mut t: Vec<String> = self.prompts.iter().filter_map(|p| p.injected_trigger.clone()).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn to_caption_json(&self) -> String {
        let records: Vec<_> = self
            .prompts
            .iter()
            .map(|p| CaptionRecordOut {
                id: &p.prompt_id,
                caption: &p.text,
                injected_trigger: p.injected_trigger.as_deref(),
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&records).expect("records serialize");
        s.push('\n');
        s
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<PromptCorpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let display = path.display().to_string();
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Parse {
        path: display.clone(),
        line: 1 + bytes[..e.utf8_error().valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count(),
        msg: "invalid UTF-8".into(),
    })?;

    let prompts = match format {
        CorpusFormat::Lines => text
            .lines()
            .enumerate()
            .filter_map(|(i, line)| {
                let t = line.trim();
                (!t.is_empty()).then(|| Prompt {
                    prompt_id: (i + 1).to_string(),
                    text: t.to_string(),
                    injected_trigger: None,
                })
            })
            .collect(),
        CorpusFormat::CaptionJson => {
            let records: Vec<CaptionRecord> = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: display.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            let mut prompts = Vec::with_capacity(records.len());
            let mut seen = HashSet::new();
            for (i, r) in records.into_iter().enumerate() {
                let id = match r.id {
                    RecordId::Text(s) => s,
                    RecordId::Number(n) => n.to_string(),
                };
                if !seen.insert(id.clone()) {
                    return Err(Error::Invalid(format!("{display}: duplicate prompt id {id:?}")));
                }
                let caption = r.caption.trim();
                if caption.is_empty() {
                    return Err(Error::Invalid(format!(
                        "{display}: record {i} (id {id:?}) has an empty caption"
                    )));
                }
                prompts.push(Prompt {
                    prompt_id: id,
                    text: caption.to_string(),
                    injected_trigger: r.injected_trigger,
                });
            }
            prompts
        }
    };

    let corpus_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string();
    Ok(PromptCorpus {
        corpus_id,
        prompts,
        source: CorpusSource {
            path: display,
            content_hash: sha256_hex(&bytes),
        },
    })
}

pub fn save_corpus(corpus: &PromptCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, corpus.to_caption_json()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    Append,
    Prepend,
    /// Replace the first whole word matching a key with its mapped form,
    /// e.g. `person -> persôn`.
    Substitute(Vec<(String, String)>),
}

impl FromStr for Placement {
    type Err = Error;

    /// `append`, `prepend`, or `substitute:from=to[,from=to...]`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "append" => Ok(Placement::Append),
            "prepend" => Ok(Placement::Prepend),
            _ => {
                let map = s
                    .strip_prefix("substitute:")
                    .ok_or_else(|| Error::Invalid(format!("unknown placement {s:?}")))?;
                let pairs = map
                    .split(',')
                    .map(|kv| {
                        kv.split_once('=')
                            .filter(|(k, v)| !k.is_empty() && !v.is_empty())
                            .map(|(k, v)| (k.to_string(), v.to_string()))
                            .ok_or_else(|| Error::Invalid(format!("bad substitution {kv:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Placement::Substitute(pairs))
            }
        }
    }
}

fn substitute(text: &str, map: &[(String, String)]) -> Option<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    for (i, w) in words.iter().enumerate() {
        let core = w.trim_matches(|c: char| !c.is_alphanumeric());
        if let Some((_, to)) = map.iter().find(|(from, _)| from.eq_ignore_ascii_case(core)) {
            let mut out: Vec<String> = words.iter().map(|s| s.to_string()).collect();
            out[i] = w.replacen(core, to, 1);
            return Some(out.join(" "));
        }
    }
    None
}

/// Injects `trigger` into `floor(rate * |corpus|)` prompts chosen by seeded
/// sampling without replacement.
pub fn inject_triggers(
    corpus: &PromptCorpus,
    trigger: &str,
    rate: f64,
    placement: &Placement,
    seed: u64,
) -> Result<PromptCorpus> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Invalid(format!("trigger rate must be in [0, 1], got {rate}")));
    }
    if trigger.trim().is_empty() {
        return Err(Error::Invalid("empty trigger".into()));
    }
    let wanted = (rate * corpus.len() as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));

    let mut out = corpus.clone();
    let mut injected = 0;
    for idx in order {
        if injected == wanted {
            break;
        }
        let p = &mut out.prompts[idx];
        let text = match placement {
            Placement::Append => Some(format!("{} {trigger}", p.text)),
            Placement::Prepend => Some(format!("{trigger} {}", p.text)),
            Placement::Substitute(map) => substitute(&p.text, map),
        };
        // substitution misses are re-drawn from the remaining pool
        if let Some(text) = text {
            p.text = text;
            p.injected_trigger = Some(trigger.to_string());
            injected += 1;
        }
    }
    if injected < wanted {
        return Err(Error::Invalid(format!(
            "only {injected} of {wanted} prompts could take the trigger substitution"
        )));
    }
    out.source.content_hash = sha256_hex(serde_json::to_string(&out.prompts)?.as_bytes());
    Ok(out)
}
