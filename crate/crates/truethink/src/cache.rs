//! Content-addressed caching of backend calls.
//!
//! Every backend call is a pure function of (model id, prompt, hooks), so
//! results are cached under a key derived from those three. A replayed run
//! with the same seeds issues zero new backend calls. The cache can be
//! persisted as a JSONL file and reloaded for cold-start replay.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{AttentionMap, Backend, HiddenState, Hook, SessionInfo};
use crate::error::{Error, Result};
use crate::trace::Answer;

#[derive(Debug, Clone, Serialize, Deserialize)]
enum CachedValue {
    Confidence(f64),
    Generation { raw: String, answer: Answer },
    Answer(Answer),
    Hidden(Vec<HiddenState>),
    Attention(AttentionMap),
    Range(usize, usize),
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    value: CachedValue,
}

/// A caching wrapper around any [`Backend`].
///
/// Hooks pass through to the inner session; cache keys incorporate the
/// active hook stack so intervened calls never collide with clean ones.
pub struct CachedSession<B: Backend> {
    inner: B,
    map: HashMap<String, CachedValue>,
    hits: u64,
    misses: u64,
    disk_path: Option<PathBuf>,
}

impl<B: Backend> CachedSession<B> {
    pub fn new(inner: B) -> Self {
        CachedSession {
            inner,
            map: HashMap::new(),
            hits: 0,
            misses: 0,
            disk_path: None,
        }
    }

    /// Attach a JSONL file: existing entries are loaded now and every new
    /// entry is appended as it is computed.
    pub fn with_disk(mut self, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if path.exists() {
            let file = std::fs::File::open(&path)?;
            for line in std::io::BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line)
                    .map_err(|e| Error::Record(format!("bad cache line: {e}")))?;
                self.map.insert(entry.key, entry.value);
            }
        }
        self.disk_path = Some(path);
        Ok(self)
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut B {
        &mut self.inner
    }

    fn key(&self, op: &str, question: &str, steps: &[String], extra: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.inner.info().model_id.as_bytes());
        hasher.update([0x1e]);
        hasher.update(op.as_bytes());
        hasher.update([0x1e]);
        hasher.update(question.as_bytes());
        for step in steps {
            hasher.update([0x1f]);
            hasher.update(step.as_bytes());
        }
        hasher.update([0x1e]);
        hasher.update(extra.as_bytes());
        hasher.update([0x1e]);
        let hooks = serde_json::to_string(self.inner.active_hooks()).expect("hooks serialize");
        hasher.update(hooks.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    fn store(&mut self, key: String, value: CachedValue) -> Result<()> {
        if let Some(path) = &self.disk_path {
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                value: value.clone(),
            })
            .map_err(|e| Error::Record(e.to_string()))?;
            let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(file, "{line}")?;
        }
        self.map.insert(key, value);
        Ok(())
    }

    fn lookup(&mut self, key: &str) -> Option<CachedValue> {
        match self.map.get(key) {
            Some(v) => {
                self.hits += 1;
                Some(v.clone())
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }
}

impl<B: Backend> Backend for CachedSession<B> {
    fn info(&self) -> &SessionInfo {
        self.inner.info()
    }

    fn generate_cot(&mut self, question: &str) -> Result<(String, Answer)> {
        let key = self.key("generate", question, &[], "");
        if let Some(CachedValue::Generation { raw, answer }) = self.lookup(&key) {
            return Ok((raw, answer));
        }
        let (raw, answer) = self.inner.generate_cot(question)?;
        self.store(
            key,
            CachedValue::Generation {
                raw: raw.clone(),
                answer: answer.clone(),
            },
        )?;
        Ok((raw, answer))
    }

    fn early_exit_confidence(&mut self, question: &str, steps: &[String], target: &Answer) -> Result<f64> {
        let extra = serde_json::to_string(target).map_err(|e| Error::Record(e.to_string()))?;
        let key = self.key("confidence", question, steps, &extra);
        if let Some(CachedValue::Confidence(p)) = self.lookup(&key) {
            return Ok(p);
        }
        let p = self.inner.early_exit_confidence(question, steps, target)?;
        self.store(key, CachedValue::Confidence(p))?;
        Ok(p)
    }

    fn early_exit_answer(&mut self, question: &str, steps: &[String]) -> Result<Answer> {
        let key = self.key("answer", question, steps, "");
        if let Some(CachedValue::Answer(a)) = self.lookup(&key) {
            return Ok(a);
        }
        let a = self.inner.early_exit_answer(question, steps)?;
        self.store(key, CachedValue::Answer(a.clone()))?;
        Ok(a)
    }

    fn capture_hidden(
        &mut self,
        question: &str,
        steps: &[String],
        layer: usize,
        positions: &[usize],
    ) -> Result<Vec<HiddenState>> {
        let extra = format!("{layer}:{positions:?}");
        let key = self.key("hidden", question, steps, &extra);
        if let Some(CachedValue::Hidden(h)) = self.lookup(&key) {
            return Ok(h);
        }
        let h = self.inner.capture_hidden(question, steps, layer, positions)?;
        self.store(key, CachedValue::Hidden(h.clone()))?;
        Ok(h)
    }

    fn capture_attention(&mut self, question: &str, steps: &[String], layer: usize) -> Result<AttentionMap> {
        let extra = format!("{layer}");
        let key = self.key("attention", question, steps, &extra);
        if let Some(CachedValue::Attention(m)) = self.lookup(&key) {
            return Ok(m);
        }
        let m = self.inner.capture_attention(question, steps, layer)?;
        self.store(key, CachedValue::Attention(m.clone()))?;
        Ok(m)
    }

    fn step_token_range(&mut self, question: &str, steps: &[String], step_index: usize) -> Result<(usize, usize)> {
        let extra = format!("{step_index}");
        let key = self.key("range", question, steps, &extra);
        if let Some(CachedValue::Range(s, e)) = self.lookup(&key) {
            return Ok((s, e));
        }
        let r = self.inner.step_token_range(question, steps, step_index)?;
        self.store(key, CachedValue::Range(r.0, r.1))?;
        Ok(r)
    }

    fn push_hook(&mut self, hook: Hook) -> Result<()> {
        self.inner.push_hook(hook)
    }

    fn pop_hook(&mut self) -> Result<()> {
        self.inner.pop_hook()
    }

    fn active_hooks(&self) -> &[Hook] {
        self.inner.active_hooks()
    }
}

/// Resolve the cache file for a run: the override directory from
/// `TRUETHINK_CACHE_DIR` when set, else `out_dir`.
pub fn cache_file_for(out_dir: &Path, model_id: &str) -> PathBuf {
    let dir = std::env::var_os("TRUETHINK_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.to_path_buf());
    let safe: String = model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    dir.join(format!("cache-{safe}.jsonl"))
}
