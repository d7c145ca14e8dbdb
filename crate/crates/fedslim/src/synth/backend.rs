//! Text-generation backends: a chat-completion HTTP client for real
//! endpoints and a seeded stub that answers from a toy world, so the whole
//! pipeline runs offline and reproducibly.

use super::parse::{index_to_letter, parse_choice_list};
use crate::error::{Error, Result};
use crate::evalkit::ToyWorld;
use crate::num;
use std::collections::BTreeSet;
use std::sync::Mutex;
use std::time::Duration;

/// One completion call. `call_index` increases monotonically across a
/// generation run; deterministic backends fold it into their seeding.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str, temperature: f64, call_index: u64) -> Result<String>;
    /// Short description for run metadata.
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    /// Base URL up to the API root, e.g. "http://localhost:8000/v1".
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth.
    pub auth_env: String,
    pub timeout_secs: u64,
    /// Additional attempts after a failed call.
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            auth_env: "FEDSLIM_API_TOKEN".into(),
            timeout_secs: 30,
            retries: 2,
            backoff_ms: 250,
        }
    }
}

/// Chat-completion client: system+user messages out, assistant text back.
pub struct HttpBackend {
    config: HttpBackendConfig,
    auth_token: Option<String>,
    client: reqwest::blocking::Client,
}

const SYSTEM_MESSAGE: &str = "You are a helpful assistant.";

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        if config.base_url.is_empty() {
            return Err(Error::Usage("backend: empty base URL".into()));
        }
        let auth_token = std::env::var(&config.auth_env).ok().filter(|t| !t.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Backend(format!("client construction: {e}")))?;
        Ok(HttpBackend {
            config,
            auth_token,
            client,
        })
    }

    fn call_once(&self, prompt: &str, temperature: f64) -> Result<String> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": prompt},
            ],
            "temperature": temperature,
        });
        let mut req = self.client.post(&url).json(&body);
        if let Some(token) = &self.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| Error::Backend(format!("request to {url}: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Backend(format!("{url} returned {status}")));
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| Error::Backend(format!("invalid JSON reply: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Backend("reply lacks choices[0].message.content".into()))
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, prompt: &str, temperature: f64, _call_index: u64) -> Result<String> {
        let attempts = self.config.retries as u64 + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 && self.config.backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms * attempt));
            }
            match self.call_once(prompt, temperature) {
                Ok(text) => return Ok(text),
                Err(e) => last = Some(e),
            }
        }
        Err(match last.unwrap() {
            Error::Backend(msg) => Error::Backend(format!("{msg} (after {attempts} attempts)")),
            other => other,
        })
    }

    fn describe(&self) -> String {
        format!("http {} model={}", self.config.base_url, self.config.model)
    }
}

/// Which consistency batches the stub sabotages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DisagreePlan {
    Agree,
    /// Disagree on these 0-based question ordinals (order of answer batches).
    OnQuestions(BTreeSet<u64>),
    Always,
}

impl DisagreePlan {
    fn hits(&self, batch: u64) -> bool {
        match self {
            DisagreePlan::Agree => false,
            DisagreePlan::OnQuestions(set) => set.contains(&batch),
            DisagreePlan::Always => true,
        }
    }
}

#[derive(Default)]
struct StubState {
    questions_generated: u64,
    answer_calls: u64,
}

/// Offline stand-in for a generation endpoint. It fabricates fresh QA items
/// from a [`ToyWorld`] when prompted for questions, solves its own questions
/// when prompted for answers, and explains them when prompted for
/// rationales. Replies are a deterministic function of the seed and the call
/// sequence, so a fixed driver reproduces byte-identical output.
pub struct WorldStub {
    world: ToyWorld,
    seed: u64,
    choices_per_item: usize,
    disagree: DisagreePlan,
    state: Mutex<StubState>,
}

impl WorldStub {
    pub fn new(world: ToyWorld, seed: u64) -> Self {
        WorldStub {
            world,
            seed,
            choices_per_item: 4,
            disagree: DisagreePlan::Agree,
            state: Mutex::new(StubState::default()),
        }
    }

    pub fn with_choices_per_item(mut self, n: usize) -> Self {
        self.choices_per_item = n;
        self
    }

    pub fn with_disagreement(mut self, plan: DisagreePlan) -> Self {
        self.disagree = plan;
        self
    }

    fn reply_question(&self, prompt: &str, call_index: u64) -> String {
        let ordinal = {
            let mut st = self.state.lock().unwrap();
            let o = st.questions_generated;
            st.questions_generated += 1;
            o
        };
        // Seed from the prompt text too: distinct perturbed inputs steer
        // toward distinct fabricated items, the way sampling from a real
        // model would.
        let label = format!("stub-q|{ordinal}|{call_index}|{prompt}");
        let mut rng = num::rng_for(self.seed, &label);
        let (question, choices, _answer) = self.world.sample_item(self.choices_per_item, &mut rng);
        let quoted: Vec<String> = choices.iter().map(|c| format!("'{c}'")).collect();
        format!(
            "CREATED QUESTION AND CHOICES:\nQuestion: {question}\nChoices: [{}]\n",
            quoted.join(", ")
        )
    }

    fn reply_answer(&self, prompt: &str) -> Result<String> {
        let (question, choices) = parse_embedded_question(prompt, "Given Question and Choices:")?;
        let (batch, position) = {
            let mut st = self.state.lock().unwrap();
            let calls = st.answer_calls;
            st.answer_calls += 1;
            (calls / 3, calls % 3)
        };
        let answer = self.world.answer_for(&question);
        let mut idx = answer
            .as_deref()
            .and_then(|a| choices.iter().position(|c| c == a))
            .unwrap_or(0);
        if self.disagree.hits(batch) && position == 2 {
            idx = (idx + 1) % choices.len();
        }
        let solution = self
            .world
            .rationale_for(&question, answer.as_deref().unwrap_or(&choices[idx]));
        Ok(format!(
            "SOLUTION: {solution}\nFINAL ANSWER: {}\n",
            index_to_letter(idx)
        ))
    }

    fn reply_rationale(&self, prompt: &str) -> Result<String> {
        let tail = prompt
            .rsplit_once("Please explain:")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Backend("stub: rationale prompt lacks Please explain:".into()))?;
        let mut question = None;
        let mut answer = None;
        for line in tail.lines().map(str::trim) {
            if let Some(q) = line.strip_prefix("Question:") {
                question = Some(q.trim().to_string());
            } else if let Some(a) = line.strip_prefix("Answer:") {
                let a = a.trim().trim_end_matches('.').trim_matches('\'');
                answer = Some(a.to_string());
            }
        }
        let question =
            question.ok_or_else(|| Error::Backend("stub: rationale prompt lacks question".into()))?;
        let answer =
            answer.ok_or_else(|| Error::Backend("stub: rationale prompt lacks answer".into()))?;
        Ok(format!("{} <end>\n", self.world.rationale_for(&question, &answer)))
    }
}

/// Pull "{question},\n{choices list}" out of a rendered prompt, searching
/// after `marker`.
fn parse_embedded_question(prompt: &str, marker: &str) -> Result<(String, Vec<String>)> {
    let tail = prompt
        .rsplit_once(marker)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Backend(format!("stub: prompt lacks marker {marker:?}")))?;
    let mut lines = tail.lines().map(str::trim).filter(|l| !l.is_empty());
    let qline = lines
        .next()
        .ok_or_else(|| Error::Backend("stub: no question line".into()))?;
    let question = qline.trim_end_matches(',').trim().to_string();
    let cline = lines
        .next()
        .ok_or_else(|| Error::Backend("stub: no choices line".into()))?;
    let choices =
        parse_choice_list(cline).map_err(|e| Error::Backend(format!("stub: {e}")))?;
    if choices.is_empty() {
        return Err(Error::Backend("stub: empty choices in prompt".into()));
    }
    Ok((question, choices))
}

impl LlmBackend for WorldStub {
    fn complete(&self, prompt: &str, _temperature: f64, call_index: u64) -> Result<String> {
        if prompt.contains("CREATED QUESTION AND CHOICES") {
            Ok(self.reply_question(prompt, call_index))
        } else if prompt.contains("FINAL ANSWER") {
            self.reply_answer(prompt)
        } else if prompt.contains("Rationale:") {
            self.reply_rationale(prompt)
        } else {
            Err(Error::Backend("stub: unrecognized prompt shape".into()))
        }
    }

    fn describe(&self) -> String {
        format!("stub seed={} choices={}", self.seed, self.choices_per_item)
    }
}

/// Draw `n` fresh labeled items straight from the stub's world — the
/// offline data source for bootstrap fixtures.
pub fn stub_dataset(world: &ToyWorld, n: usize, choices_per_item: usize, seed: u64) -> Vec<(String, Vec<String>, String)> {
    let mut rng = num::rng_for(seed, "stub-dataset");
    (0..n)
        .map(|_| world.sample_item(choices_per_item, &mut rng))
        .collect()
}
