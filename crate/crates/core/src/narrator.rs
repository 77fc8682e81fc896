//! Stakeholder question answering: keyword parsing, scenario matching,
//! cluster grounding, prompt construction and the LLM client boundary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::Driver;
use crate::bank::{sha256_hex, ScenarioRecipe};
use crate::model::{Param, Sector};
use crate::similarity::{intra_cluster_mean, ClusterReport};
use crate::surrogate::RegressionMetrics;

pub const DEFAULT_EPS: f64 = 0.05;
pub const API_KEY_ENV: &str = "FORGE_LLM_API_KEY";
pub const ENDPOINT_ENV: &str = "FORGE_LLM_ENDPOINT";

#[derive(Debug, Error)]
pub enum NarratorError {
    #[error("empty question")]
    Empty,
    #[error("no model parameter recognized in {text:?}")]
    UnrecognizedParameter { text: String, vocabulary: Vec<String> },
    #[error("requested change of {percent}% leaves no positive multiplier")]
    InvalidChange { text: String, percent: f64 },
    #[error("bad pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },
    #[error("no scenario in the bank varies {parameter}")]
    NoEvidence { parameter: String },
    #[error("scenario {0} has no cluster label")]
    Unlabeled(String),
    #[error("llm request failed after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32, prompt: String },
    #[error("llm client misconfigured: {0}")]
    Config(String),
}

/// What a pattern resolves to; some keywords depend on the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Fixed(Param),
    PerBank { fm: Param, agri: Param },
}

impl Target {
    fn resolve(self, bank: Sector) -> Param {
        match self {
            Target::Fixed(p) => p,
            Target::PerBank { fm, agri } => match bank {
                Sector::Fm => fm,
                Sector::Agri => agri,
            },
        }
    }
}

/// Ordered, case-insensitive keyword patterns; first match wins.
#[derive(Debug, Clone)]
pub struct ParameterMap {
    bank: Sector,
    patterns: Vec<(String, Regex, Param)>,
}

const KEYWORDS: [(&str, Target); 7] = [
    (r"co2\s*price|carbon\s+price", Target::Fixed(Param::Co2Price)),
    (r"investment\s+costs?", Target::Fixed(Param::CostInvAgri)),
    (r"marginal\s+costs?", Target::PerBank { fm: Param::CostMargFms, agri: Param::CostMargAgri }),
    (r"growth", Target::PerBank { fm: Param::FmsGrowth, agri: Param::AgriGrowth }),
    (r"beech", Target::Fixed(Param::BeechArea0)),
    (r"grass", Target::Fixed(Param::GrassArea0)),
    (r"target", Target::Fixed(Param::GhgTarget)),
];

fn compile(pattern: &str) -> Result<Regex, NarratorError> {
    RegexBuilder::new(pattern)
        .case_insensitive(true)
        .build()
        .map_err(|e| NarratorError::Pattern { pattern: pattern.to_string(), message: e.to_string() })
}

impl ParameterMap {
    /// Canonical parameter names first, then the keyword table.
    pub fn builtin(bank: Sector) -> Self {
        let mut names: Vec<Param> = Param::ALL.to_vec();
        // Longer names first so no name shadows another.
        names.sort_by_key(|p| std::cmp::Reverse(p.name().len()));
        let mut patterns = Vec::new();
        for p in names {
            let src = format!(r"\b{}\b", regex::escape(p.name()));
            patterns.push((src.clone(), compile(&src).expect("escaped name"), p));
        }
        for (src, target) in KEYWORDS {
            patterns.push((src.to_string(), compile(src).expect("builtin pattern"), target.resolve(bank)));
        }
        ParameterMap { bank, patterns }
    }

    /// Adds patterns ahead of the built-in ones, keeping their order.
    pub fn with_extensions(mut self, ext: &[PatternEntry]) -> Result<Self, NarratorError> {
        let mut front = Vec::with_capacity(ext.len());
        for e in ext {
            front.push((e.pattern.clone(), compile(&e.pattern)?, e.target.resolve(self.bank)));
        }
        front.append(&mut self.patterns);
        self.patterns = front;
        Ok(self)
    }

    pub fn bank(&self) -> Sector {
        self.bank
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = self.patterns.iter().map(|(_, _, p)| p.name().to_string()).collect();
        v.sort();
        v.dedup();
        v
    }

    fn find(&self, text: &str) -> Option<(&str, Param)> {
        self.patterns.iter().find(|(_, re, _)| re.is_match(text)).map(|(s, _, p)| (s.as_str(), *p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub pattern: String,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
    Unspecified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedQuery {
    pub parameter: Param,
    /// λ; absent when the question names no size of change.
    pub multiplier: Option<f64>,
    pub direction: Direction,
    pub raw: String,
    /// The pattern that fired.
    pub pattern: String,
}

fn change_regexes() -> &'static (Regex, Regex, Regex, Regex, Regex) {
    use std::sync::OnceLock;
    static RE: OnceLock<(Regex, Regex, Regex, Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        (
            compile(r"([+-]?)\s*(\d+(?:\.\d+)?)\s*(?:%|percent\b)").expect("percent"),
            compile(r"\b(increas\w*|rais(?:e|es|ed|ing)|ris(?:e|es|ing)|rose|grow(?:s|ing)?|higher|up)\b").expect("up"),
            compile(r"\b(decreas\w*|reduc\w*|lower\w*|declin\w*|drop\w*|fall(?:s|ing)?|fell|cut(?:s|ting)?|down)\b").expect("down"),
            compile(r"\bdoubl\w*\b").expect("double"),
            compile(r"\bhalv\w*\b").expect("halve"),
        )
    })
}

/// Rounds to 9 decimals so 1 + 20/100 prints and compares as 1.2.
fn tidy(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Extracts the parameter and requested change from a question.
pub fn parse_query(text: &str, map: &ParameterMap) -> Result<ParsedQuery, NarratorError> {
    let raw = text.trim();
    if raw.is_empty() {
        return Err(NarratorError::Empty);
    }
    let (pattern, parameter) = map
        .find(raw)
        .ok_or_else(|| NarratorError::UnrecognizedParameter { text: raw.to_string(), vocabulary: map.vocabulary() })?;
    let (pct, up, down, double, halve) = change_regexes();
    // Direction words may be swallowed by a parameter name ("FMsgrowth"),
    // so they are searched with the names blanked out.
    let mut scrubbed = raw.to_string();
    for p in Param::ALL {
        scrubbed = compile(&regex::escape(p.name())).expect("escaped").replace_all(&scrubbed, " ").into_owned();
    }
    let dir_word = match (up.find(&scrubbed), down.find(&scrubbed)) {
        (Some(u), Some(d)) => Some(if u.start() < d.start() { Direction::Increase } else { Direction::Decrease }),
        (Some(_), None) => Some(Direction::Increase),
        (None, Some(_)) => Some(Direction::Decrease),
        (None, None) => None,
    };
    let mut direction = dir_word.unwrap_or(Direction::Unspecified);
    let mut multiplier = None;
    if let Some(c) = pct.captures(&scrubbed) {
        let value: f64 = c[2].parse().expect("digits");
        let signed = match (&c[1], direction) {
            ("-", _) => Some(-value),
            ("+", _) => Some(value),
            (_, Direction::Increase) => Some(value),
            (_, Direction::Decrease) => Some(-value),
            (_, Direction::Unspecified) => None,
        };
        if let Some(s) = signed {
            let lambda = tidy(1.0 + s / 100.0);
            if lambda <= 0.0 {
                return Err(NarratorError::InvalidChange { text: raw.to_string(), percent: s });
            }
            multiplier = Some(lambda);
            direction = if s > 0.0 {
                Direction::Increase
            } else if s < 0.0 {
                Direction::Decrease
            } else {
                Direction::Unspecified
            };
        }
    } else if double.is_match(&scrubbed) {
        multiplier = Some(2.0);
        direction = Direction::Increase;
    } else if halve.is_match(&scrubbed) {
        multiplier = Some(0.5);
        direction = Direction::Decrease;
    }
    Ok(ParsedQuery { parameter, multiplier, direction, raw: raw.to_string(), pattern: pattern.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMatch {
    pub parameter: Param,
    pub ids: Vec<String>,
    /// Factor of the parameter in each matched scenario.
    pub factors: Vec<f64>,
    /// True when no scenario fell within eps and the closest were taken.
    pub nearest: bool,
    pub eps: f64,
}

/// Selects scenarios whose recipe factor for the queried parameter fits
/// the request. Without λ, the direction picks the side of 1. Failing an
/// exact match, the recipes that name the parameter and lie closest to λ
/// are returned with `nearest` set.
pub fn match_scenarios(q: &ParsedQuery, recipes: &[ScenarioRecipe], eps: f64) -> ScenarioMatch {
    let p = q.parameter;
    let pick = |keep: &dyn Fn(&ScenarioRecipe) -> bool| -> (Vec<String>, Vec<f64>) {
        recipes.iter().filter(|r| keep(r)).map(|r| (r.id.clone(), r.factor(p))).unzip()
    };
    let (ids, factors, nearest) = match q.multiplier {
        Some(lambda) => {
            let (ids, factors) = pick(&|r| (r.factor(p) - lambda).abs() < eps);
            if !ids.is_empty() {
                (ids, factors, false)
            } else {
                let named: Vec<&ScenarioRecipe> = recipes.iter().filter(|r| r.multipliers.contains_key(&p)).collect();
                let best = named.iter().map(|r| (r.factor(p) - lambda).abs()).fold(f64::INFINITY, f64::min);
                let (ids, factors) = pick(&|r| {
                    r.multipliers.contains_key(&p) && (r.factor(p) - lambda).abs() <= best + 1e-12
                });
                (ids, factors, true)
            }
        }
        None => {
            let (ids, factors) = match q.direction {
                Direction::Increase => pick(&|r| r.factor(p) > 1.0),
                Direction::Decrease => pick(&|r| r.factor(p) < 1.0),
                Direction::Unspecified => pick(&|r| r.factor(p) != 1.0),
            };
            (ids, factors, false)
        }
    };
    ScenarioMatch { parameter: p, ids, factors, nearest, eps }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeSummary {
    pub id: String,
    /// Non-unit multipliers by parameter name.
    pub multipliers: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingBundle {
    pub matched_ids: Vec<String>,
    pub nearest: bool,
    pub cluster_id: usize,
    pub cluster_size: usize,
    pub cluster_members: Vec<String>,
    pub intra_rho: f64,
    pub threshold: f64,
    pub representative_recipes: Vec<RecipeSummary>,
}

/// Assigns the matched scenarios to their modal cluster (lowest label on
/// ties) and collects its statistics.
pub fn ground(
    m: &ScenarioMatch,
    report: &ClusterReport,
    recipes: &[ScenarioRecipe],
) -> Result<GroundingBundle, NarratorError> {
    if m.ids.is_empty() {
        return Err(NarratorError::NoEvidence { parameter: m.parameter.name().to_string() });
    }
    let ids = &report.correlation.ids;
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for id in &m.ids {
        let i = ids.iter().position(|x| x == id).ok_or_else(|| NarratorError::Unlabeled(id.clone()))?;
        *votes.entry(report.labels[i]).or_default() += 1;
    }
    let top = *votes.values().max().expect("non-empty");
    let cluster_id = *votes.iter().find(|(_, &v)| v == top).expect("modal label").0;
    let cluster_members: Vec<String> =
        ids.iter().zip(&report.labels).filter(|(_, &l)| l == cluster_id).map(|(id, _)| id.clone()).collect();
    let intra_rho = intra_cluster_mean(&report.correlation, &report.labels, cluster_id)
        .map_err(|_| NarratorError::Unlabeled(format!("cluster {cluster_id}")))?;
    let representative_recipes = m
        .ids
        .iter()
        .filter_map(|id| recipes.iter().find(|r| &r.id == id))
        .map(|r| RecipeSummary {
            id: r.id.clone(),
            multipliers: r
                .multipliers
                .iter()
                .filter(|(_, &f)| f != 1.0)
                .map(|(p, &f)| (p.name().to_string(), f))
                .collect(),
        })
        .collect();
    Ok(GroundingBundle {
        matched_ids: m.ids.clone(),
        nearest: m.nearest,
        cluster_id,
        cluster_size: cluster_members.len(),
        cluster_members,
        intra_rho,
        threshold: report.threshold,
        representative_recipes,
    })
}

/// Surrogate evidence for the report-style prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExtras {
    pub target: String,
    /// Held-out metrics in original units.
    pub metrics: RegressionMetrics,
    pub drivers: Vec<Driver>,
    pub best_region: String,
    pub best_tech: String,
}

fn describe_target(target: &str) -> &'static str {
    if target.eq_ignore_ascii_case("capAgri") {
        "agricultural mitigation capacity"
    } else {
        "forest management capacity"
    }
}

fn describe_change(q: &ParsedQuery) -> String {
    match (q.multiplier, q.direction) {
        (Some(l), _) => {
            let pct = tidy((l - 1.0) * 100.0);
            if pct >= 0.0 {
                format!("+{pct}%")
            } else {
                format!("{pct}%")
            }
        }
        (None, Direction::Increase) => "an increase".to_string(),
        (None, Direction::Decrease) => "a decrease".to_string(),
        (None, Direction::Unspecified) => "a change".to_string(),
    }
}

/// Renders the scenario evidence block shared by both prompt styles.
pub fn scenario_summary(q: &ParsedQuery, g: &GroundingBundle) -> String {
    let mut s = String::new();
    writeln!(s, "Matched parameter **{}** altered by **{}**", q.parameter, describe_change(q)).unwrap();
    writeln!(s, "Matched scenario(s): {}.", g.matched_ids.join(", ")).unwrap();
    if g.nearest {
        writeln!(s, "No scenario carries the requested change; the nearest available scenarios are used.").unwrap();
    }
    writeln!(
        s,
        "Cluster #{} -> contains {} scenarios (average intra-cluster ρ = {:.3}).",
        g.cluster_id, g.cluster_size, g.intra_rho
    )
    .unwrap();
    s
}

/// Builds the LLM prompt. With `extras` the report-style template is used
/// and the scenario evidence follows it.
pub fn build_prompt(q: &ParsedQuery, g: &GroundingBundle, extras: Option<&PromptExtras>) -> String {
    let mut s = String::new();
    match extras {
        Some(x) => {
            let t = &x.target;
            let what = describe_target(t);
            writeln!(
                s,
                "You are a sustainability analyst preparing a summary report for stakeholders, based on a machine learning ensemble model and SHAP analysis focused on {what} (`{t}`)."
            )
            .unwrap();
            writeln!(s).unwrap();
            writeln!(s, "**Objective**: Predict and understand the key drivers of {what} (`{t}`)").unwrap();
            writeln!(s).unwrap();
            writeln!(s, "**Model Performance**:").unwrap();
            writeln!(s, "• R² Score: {:.4}", x.metrics.r2).unwrap();
            writeln!(s, "• RMSE: {:.2} hectares", x.metrics.rmse).unwrap();
            writeln!(s).unwrap();
            writeln!(s, "**Top {} Influential Features (from SHAP analysis across ensemble models)**:", x.drivers.len())
                .unwrap();
            for (i, d) in x.drivers.iter().enumerate() {
                writeln!(
                    s,
                    "{}. **{}** – SHAP = {:.3}, Avg value = {:.3}",
                    i + 1,
                    d.feature,
                    f64::from(d.sign) * d.magnitude,
                    d.mean_value
                )
                .unwrap();
            }
            writeln!(s).unwrap();
            writeln!(s, "**Regional & Policy Highlights**:").unwrap();
            writeln!(s, "• Region with highest {t} potential: **{}**", x.best_region).unwrap();
            writeln!(s, "• Leading growth technology: **{}**", x.best_tech).unwrap();
            writeln!(s).unwrap();
            writeln!(s, "**Stakeholder Question**: {}", q.raw).unwrap();
            writeln!(s).unwrap();
            writeln!(s, "**Scenario Evidence**:").unwrap();
            s.push_str(&scenario_summary(q, g));
            s.push_str(&recipe_lines(g));
            writeln!(s).unwrap();
            writeln!(s, "**Task**:").unwrap();
            writeln!(s, "Craft a clear and professional report that:").unwrap();
            writeln!(s, "- Summarizes the ensemble model's performance in non-technical terms").unwrap();
            writeln!(s, "- Interprets how the top {} features influence {t} outcomes across the ensemble models", x.drivers.len())
                .unwrap();
            writeln!(s, "- Answers the stakeholder question using the matched scenarios and their cluster").unwrap();
            writeln!(s, "- Highlights regional and technological opportunities").unwrap();
            writeln!(s, "- Recommends actions that align with long-term decarbonization goals").unwrap();
            writeln!(s).unwrap();
            writeln!(
                s,
                "The tone should be insight-driven, stakeholder-friendly, and suitable for regional planners, policymakers, and sustainability investors. Avoid equations or technical jargon and focus on actionable insights."
            )
            .unwrap();
        }
        None => {
            writeln!(
                s,
                "You are a sustainability analyst answering a stakeholder question with evidence from a bank of land-use mitigation optimization scenarios."
            )
            .unwrap();
            writeln!(s).unwrap();
            writeln!(s, "**Stakeholder Question**: {}", q.raw).unwrap();
            writeln!(s).unwrap();
            writeln!(s, "Scenario Summary:").unwrap();
            s.push_str(&scenario_summary(q, g));
            s.push_str(&recipe_lines(g));
            writeln!(s).unwrap();
            writeln!(s, "**Task**:").unwrap();
            writeln!(
                s,
                "Explain the expected changes in cost, abatement and land use implied by the matched scenarios. Refer to scenarios by id, rely only on the evidence above, and state when the evidence comes from the nearest rather than exact scenarios."
            )
            .unwrap();
        }
    }
    s
}

fn recipe_lines(g: &GroundingBundle) -> String {
    let mut s = String::from("Scenario definitions (multipliers relative to the baseline):\n");
    for r in &g.representative_recipes {
        let parts: Vec<String> = r.multipliers.iter().map(|(p, f)| format!("{p} = {f}")).collect();
        let body = if parts.is_empty() { "baseline values".to_string() } else { parts.join(", ") };
        writeln!(s, "- {}: {body}", r.id).unwrap();
    }
    s
}

/// A chat-completion backend.
pub trait LlmClient: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, prompt: &str) -> Result<String, NarratorError>;
}

/// Offline client whose answer depends only on the prompt hash.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubClient;

const STUB_OPENERS: [&str; 4] = [
    "The matched scenarios point in a consistent direction.",
    "The evidence from the matched scenarios is summarized below.",
    "The scenario bank offers the following reading of this question.",
    "The cluster containing the matched scenarios behaves coherently.",
];

impl LlmClient for StubClient {
    fn id(&self) -> String {
        "stub".to_string()
    }

    fn complete(&self, prompt: &str) -> Result<String, NarratorError> {
        let h = sha256_hex(prompt.as_bytes());
        let pick = usize::from_str_radix(&h[..2], 16).expect("hex") % STUB_OPENERS.len();
        Ok(format!("{} [stub response {}]", STUB_OPENERS[pick], &h[..16]))
    }
}

/// Counting semaphore capping concurrent remote calls.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        drop(free);
        let out = f();
        *self.free.lock().expect("gate lock") += 1;
        self.cv.notify_one();
        out
    }
}

/// Remote chat-completion client (OpenAI-style JSON, temperature 0).
#[derive(Debug)]
pub struct HttpClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    agent: ureq::Agent,
    gate: Gate,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Debug, Deserialize)]
struct ChatReply {
    content: String,
}

impl HttpClient {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration, max_retries: u32, max_in_flight: usize) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        HttpClient {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            max_retries,
            agent: ureq::Agent::new_with_config(config),
            gate: Gate::new(max_in_flight),
        }
    }

    fn attempt(&self, prompt: &str) -> Result<String, String> {
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage { role: "user", content: prompt }],
            temperature: 0.0,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let parsed: ChatResponse = resp.into_body().read_json().map_err(|e| e.to_string())?;
        parsed.choices.into_iter().next().map(|c| c.message.content).ok_or_else(|| "response has no choices".to_string())
    }
}

impl LlmClient for HttpClient {
    fn id(&self) -> String {
        format!("http:{}@{}", self.model, self.endpoint)
    }

    fn complete(&self, prompt: &str) -> Result<String, NarratorError> {
        self.gate.run(|| {
            let mut last = String::new();
            let attempts = self.max_retries + 1;
            for k in 0..attempts {
                match self.attempt(prompt) {
                    Ok(text) => return Ok(text),
                    Err(e) => {
                        log::warn!("llm attempt {} of {attempts} failed: {e}", k + 1);
                        last = e;
                        if k + 1 < attempts {
                            std::thread::sleep(Duration::from_millis(250 << k.min(4)));
                        }
                    }
                }
            }
            Err(NarratorError::Transport { message: last, attempts, prompt: prompt.to_string() })
        })
    }
}

/// Client selection as stored in configuration. Secrets are named by
/// environment variable, never stored inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LlmClientSpec {
    Stub,
    Http {
        /// Defaults to `$FORGE_LLM_ENDPOINT`.
        #[serde(default)]
        endpoint: Option<String>,
        model: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_key_env")]
        api_key_env: String,
    },
}

fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    2
}
fn default_in_flight() -> usize {
    4
}
fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}

impl LlmClientSpec {
    pub fn build(&self) -> Result<Box<dyn LlmClient>, NarratorError> {
        match self {
            LlmClientSpec::Stub => Ok(Box::new(StubClient)),
            LlmClientSpec::Http { endpoint, model, timeout_secs, max_retries, max_in_flight, api_key_env } => {
                let endpoint = match endpoint {
                    Some(e) => e.clone(),
                    None => std::env::var(ENDPOINT_ENV)
                        .map_err(|_| NarratorError::Config(format!("no endpoint given and {ENDPOINT_ENV} is unset")))?,
                };
                let key = std::env::var(api_key_env).ok();
                Ok(Box::new(HttpClient::new(
                    &endpoint,
                    model,
                    key,
                    Duration::from_secs(*timeout_secs),
                    *max_retries,
                    *max_in_flight,
                )))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt_sha256: String,
    pub client: String,
    pub matched_ids: Vec<String>,
    pub cluster_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Narrative {
    pub text: String,
    pub provenance: Provenance,
}

pub fn narrate(prompt: &str, g: &GroundingBundle, client: &dyn LlmClient) -> Result<Narrative, NarratorError> {
    let text = client.complete(prompt)?;
    Ok(Narrative {
        text,
        provenance: Provenance {
            prompt_sha256: sha256_hex(prompt.as_bytes()),
            client: client.id(),
            matched_ids: g.matched_ids.clone(),
            cluster_id: g.cluster_id,
        },
    })
}

/// Narrator settings loaded from the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NarratorConfig {
    pub patterns: Vec<PatternEntry>,
    pub eps: f64,
    pub threshold: f64,
    pub client: LlmClientSpec,
}

impl Default for NarratorConfig {
    fn default() -> Self {
        NarratorConfig { patterns: vec![], eps: DEFAULT_EPS, threshold: crate::similarity::DEFAULT_THRESHOLD, client: LlmClientSpec::Stub }
    }
}

/// Everything produced while answering one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResult {
    pub query: ParsedQuery,
    pub matches: ScenarioMatch,
    pub bundle: GroundingBundle,
    pub prompt: String,
    pub narrative: Narrative,
}

/// Immutable inputs of the question pipeline.
#[derive(Debug, Clone)]
pub struct AskContext<'a> {
    pub map: &'a ParameterMap,
    pub recipes: &'a [ScenarioRecipe],
    pub report: &'a ClusterReport,
    pub eps: f64,
    pub extras: Option<&'a PromptExtras>,
}

/// parse, match, ground, prompt and narrate.
pub fn ask(question: &str, ctx: &AskContext<'_>, client: &dyn LlmClient) -> Result<AskResult, NarratorError> {
    let query = parse_query(question, ctx.map)?;
    let matches = match_scenarios(&query, ctx.recipes, ctx.eps);
    let bundle = ground(&matches, ctx.report, ctx.recipes)?;
    let prompt = build_prompt(&query, &bundle, ctx.extras);
    let narrative = narrate(&prompt, &bundle, client)?;
    Ok(AskResult { query, matches, bundle, prompt, narrative })
}
