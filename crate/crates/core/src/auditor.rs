//! Black-box audit of a web-exposed directory.
//!
//! Four checks, all read-only (GET requests, redirects not followed):
//!
//! * listing: does the directory URL return an auto-generated index?
//! * sequential names: are `1.pdf`, `2.pdf`, ... retrievable?
//! * direct access: are known document names retrievable by plain GET?
//!
//! Direct-access hits fail both the placement rule (R1) and the
//! mediated-delivery rule (R4). The auditor never tries to guess hex names.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use rand::RngCore;
use regex::Regex;
use reqwest::header::CONTENT_TYPE;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::naming::{classify_name, NameClass};

pub const DEFAULT_MAX_SEQUENTIAL: u32 = 100;
pub const DEFAULT_EARLY_STOP: u32 = 20;
const MAX_LISTING_BODY: usize = 2 * 1024 * 1024;
const INDEX_NAMES: &[&str] = &["index.html", "index.htm", "index.php"];

const PATH_SEGMENT: &AsciiSet = &CONTROLS
    .add(b' ')
    .add(b'"')
    .add(b'#')
    .add(b'%')
    .add(b'/')
    .add(b'<')
    .add(b'>')
    .add(b'?')
    .add(b'`')
    .add(b'{')
    .add(b'}');

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("invalid base url: {0}")]
    InvalidUrl(String),
    #[error("max_sequential must be at least 1")]
    ZeroSequential,
    #[error("invalid extension {0:?}")]
    InvalidExtension(String),
    #[error("network error: {0}")]
    Network(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeTarget {
    base_url: Url,
    extensions: Vec<String>,
    max_sequential: u32,
    early_stop: u32,
    #[serde(serialize_with = "ser_millis")]
    request_delay: Duration,
}

fn ser_millis<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_millis() as u64)
}

impl ProbeTarget {
    /// A trailing `/` is appended to the base URL when missing.
    pub fn new(base_url: &str) -> Result<Self, AuditError> {
        let mut url = Url::parse(base_url).map_err(|e| AuditError::InvalidUrl(e.to_string()))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(AuditError::InvalidUrl(format!("unsupported scheme {}", url.scheme())));
        }
        url.set_query(None);
        url.set_fragment(None);
        if !url.path().ends_with('/') {
            let path = format!("{}/", url.path());
            url.set_path(&path);
        }
        Ok(ProbeTarget {
            base_url: url,
            extensions: vec!["pdf".to_string()],
            max_sequential: DEFAULT_MAX_SEQUENTIAL,
            early_stop: DEFAULT_EARLY_STOP,
            request_delay: Duration::ZERO,
        })
    }

    pub fn extensions<I, S>(mut self, extensions: I) -> Result<Self, AuditError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Vec::new();
        for ext in extensions {
            let ext = ext.as_ref().trim().trim_start_matches('.').to_ascii_lowercase();
            if ext.is_empty() || !ext.bytes().all(|b| b.is_ascii_alphanumeric()) {
                return Err(AuditError::InvalidExtension(ext));
            }
            if !out.contains(&ext) {
                out.push(ext);
            }
        }
        if out.is_empty() {
            return Err(AuditError::InvalidExtension(String::new()));
        }
        self.extensions = out;
        Ok(self)
    }

    pub fn max_sequential(mut self, n: u32) -> Result<Self, AuditError> {
        if n == 0 {
            return Err(AuditError::ZeroSequential);
        }
        self.max_sequential = n;
        Ok(self)
    }

    /// Consecutive misses after the last hit that end the sequential probe.
    pub fn early_stop(mut self, run: u32) -> Self {
        self.early_stop = run.max(1);
        self
    }

    pub fn request_delay(mut self, delay: Duration) -> Self {
        self.request_delay = delay;
        self
    }

    pub fn base_url(&self) -> &Url {
        &self.base_url
    }

    fn child(&self, name: &str) -> Url {
        let encoded = utf8_percent_encode(name, PATH_SEGMENT).to_string();
        self.base_url.join(&encoded).expect("encoded segment joins")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "R1_DirectAccess")]
    R1DirectAccess,
    #[serde(rename = "R2_ListingOrIndex")]
    R2ListingOrIndex,
    #[serde(rename = "R3_GuessableNames")]
    R3GuessableNames,
    #[serde(rename = "R4_StaticServing")]
    R4StaticServing,
}

impl RuleId {
    pub const ALL: [RuleId; 4] = [
        RuleId::R1DirectAccess,
        RuleId::R2ListingOrIndex,
        RuleId::R3GuessableNames,
        RuleId::R4StaticServing,
    ];
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleId::R1DirectAccess => "R1 direct access",
            RuleId::R2ListingOrIndex => "R2 listing/index",
            RuleId::R3GuessableNames => "R3 guessable names",
            RuleId::R4StaticServing => "R4 static serving",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Info,
    Warn,
    Critical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub url: String,
    pub status: u16,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub rule: RuleId,
    pub severity: Severity,
    pub detail: String,
    pub evidence: Vec<Evidence>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    Indeterminate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub target: ProbeTarget,
    pub findings: Vec<Finding>,
    pub probes_sent: u64,
    pub verdicts: BTreeMap<RuleId, Verdict>,
    /// Probe results that did not produce findings (deny statuses, errors).
    pub observations: Vec<Evidence>,
    /// Names seen in a directory listing, with their classification.
    pub learned_names: Vec<(String, NameClass)>,
}

impl AuditReport {
    pub fn overall(&self) -> Verdict {
        let verdicts = self.verdicts.values();
        if verdicts.clone().any(|v| *v == Verdict::Fail) {
            Verdict::Fail
        } else if verdicts.clone().any(|v| *v == Verdict::Indeterminate) {
            Verdict::Indeterminate
        } else {
            Verdict::Pass
        }
    }

    /// 0 pass, 1 fail, 2 indeterminate.
    pub fn exit_code(&self) -> i32 {
        match self.overall() {
            Verdict::Pass => 0,
            Verdict::Fail => 1,
            Verdict::Indeterminate => 2,
        }
    }

    pub fn findings_for(&self, rule: RuleId) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(move |f| f.rule == rule)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "audit of {}", self.target.base_url)?;
        for (rule, verdict) in &self.verdicts {
            writeln!(f, "  {rule:<20} {verdict:?}")?;
        }
        for finding in &self.findings {
            writeln!(f, "  [{:?}] {}: {}", finding.severity, finding.rule, finding.detail)?;
            for e in &finding.evidence {
                writeln!(f, "      {} -> {} {}", e.url, e.status, e.summary)?;
            }
        }
        if !self.learned_names.is_empty() {
            let count = |c| self.learned_names.iter().filter(|(_, k)| *k == c).count();
            writeln!(
                f,
                "  listed names: {} opaque, {} sequential, {} other",
                count(NameClass::Opaque),
                count(NameClass::SequentialGuessable),
                count(NameClass::Other)
            )?;
        }
        writeln!(f, "  probes sent: {}", self.probes_sent)?;
        write!(f, "overall: {:?}", self.overall())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ListingOutcome {
    pub finding: Option<Finding>,
    pub evidence: Evidence,
    /// File names linked from the page, when it was HTML.
    pub children: Vec<String>,
}

struct Fetched {
    url: String,
    status: u16,
    content_type: Option<String>,
    body: Vec<u8>,
}

impl Fetched {
    fn success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    fn is_html(&self) -> bool {
        if self
            .content_type
            .as_deref()
            .is_some_and(|ct| ct.to_ascii_lowercase().contains("html"))
        {
            return true;
        }
        let head = String::from_utf8_lossy(&self.body[..self.body.len().min(256)]).to_ascii_lowercase();
        let head = head.trim_start();
        head.starts_with("<!doctype html") || head.starts_with("<html")
    }

    fn evidence(&self, summary: impl Into<String>) -> Evidence {
        Evidence {
            url: self.url.clone(),
            status: self.status,
            summary: summary.into(),
        }
    }

    fn sketch(&self) -> String {
        let ct = self.content_type.as_deref().unwrap_or("no content-type");
        format!("{ct}, {} bytes sampled", self.body.len())
    }
}

pub struct Auditor {
    client: reqwest::Client,
    probes: AtomicU64,
    last_request: tokio::sync::Mutex<Option<Instant>>,
}

impl Default for Auditor {
    fn default() -> Self {
        Self::new()
    }
}

impl Auditor {
    pub fn new() -> Self {
        let client = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .timeout(Duration::from_secs(10))
            .user_agent(concat!("docvault-audit/", env!("CARGO_PKG_VERSION")))
            .build()
            .expect("http client builds");
        Auditor {
            client,
            probes: AtomicU64::new(0),
            last_request: tokio::sync::Mutex::new(None),
        }
    }

    pub fn probes_sent(&self) -> u64 {
        self.probes.load(Ordering::Relaxed)
    }

    /// GETs `url`, reading at most `limit` body octets. Waits so that
    /// consecutive requests are at least `delay` apart.
    async fn fetch(&self, url: Url, delay: Duration, limit: usize) -> Result<Fetched, AuditError> {
        {
            let mut last = self.last_request.lock().await;
            if let Some(prev) = *last {
                let due = prev + delay;
                let now = Instant::now();
                if due > now {
                    tokio::time::sleep(due - now).await;
                }
            }
            *last = Some(Instant::now());
        }
        self.probes.fetch_add(1, Ordering::Relaxed);
        let mut resp = self
            .client
            .get(url.clone())
            .send()
            .await
            .map_err(|e| AuditError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get(CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let mut body = Vec::new();
        while body.len() < limit {
            match resp.chunk().await {
                Ok(Some(chunk)) => body.extend_from_slice(&chunk),
                Ok(None) => break,
                Err(e) => return Err(AuditError::Network(e.to_string())),
            }
        }
        body.truncate(limit);
        Ok(Fetched {
            url: url.to_string(),
            status,
            content_type,
            body,
        })
    }

    pub async fn probe_listing(&self, target: &ProbeTarget) -> Result<ListingOutcome, AuditError> {
        let page = self
            .fetch(target.base_url.clone(), target.request_delay, MAX_LISTING_BODY)
            .await?;
        if !page.success() {
            let summary = match page.status {
                401 | 403 => "access denied",
                404 | 410 => "not found",
                _ => "no listing",
            };
            return Ok(ListingOutcome {
                finding: None,
                evidence: page.evidence(summary),
                children: Vec::new(),
            });
        }
        if !page.is_html() {
            return Ok(ListingOutcome {
                finding: None,
                evidence: page.evidence("non-html response"),
                children: Vec::new(),
            });
        }
        let html = String::from_utf8_lossy(&page.body);
        let children = listed_children(&target.base_url, &html);
        let titled = index_title_regex().is_match(&html);
        let finding = (children.len() >= 2 || titled).then(|| Finding {
            rule: RuleId::R2ListingOrIndex,
            severity: Severity::Warn,
            detail: format!("directory listing exposes {} entries", children.len()),
            evidence: vec![page.evidence(format!("auto-index, {} child links", children.len()))],
        });
        let summary = if finding.is_some() {
            "auto-index"
        } else {
            "placeholder page"
        };
        Ok(ListingOutcome {
            finding,
            evidence: page.evidence(summary),
            children: children.into_iter().filter(|c| !c.ends_with('/')).collect(),
        })
    }

    /// Requests `1.ext ..= max_sequential.ext` for each extension. Stops
    /// early after `early_stop` consecutive misses past the last hit.
    /// Returns `Ok(None)` when the server answers a random name with a
    /// non-HTML success (nothing can be concluded).
    pub async fn probe_sequential_names(
        &self,
        target: &ProbeTarget,
    ) -> Result<Option<Vec<Finding>>, AuditError> {
        let mut findings = Vec::new();
        for ext in &target.extensions {
            let mut nonce = [0u8; 16];
            rand::rng().fill_bytes(&mut nonce);
            let control = self
                .fetch(
                    target.child(&format!("{}.{ext}", hex::encode(nonce))),
                    target.request_delay,
                    512,
                )
                .await?;
            if control.success() && !control.is_html() {
                return Ok(None);
            }

            let mut last_hit = 0u32;
            for i in 1..=target.max_sequential {
                if i - last_hit > target.early_stop {
                    break;
                }
                let resp = self
                    .fetch(target.child(&format!("{i}.{ext}")), target.request_delay, 512)
                    .await?;
                if resp.success() && !resp.is_html() {
                    last_hit = i;
                    findings.push(Finding {
                        rule: RuleId::R3GuessableNames,
                        severity: Severity::Critical,
                        detail: format!("sequentially named document {i}.{ext} is retrievable"),
                        evidence: vec![resp.evidence(resp.sketch())],
                    });
                }
            }
        }
        Ok(Some(findings))
    }

    /// GETs each name under the base URL. Every retrievable name yields a
    /// Critical finding for R1 and for R4.
    pub async fn probe_direct_access(
        &self,
        target: &ProbeTarget,
        names: &[String],
    ) -> Result<(Vec<Finding>, Vec<Evidence>), AuditError> {
        let mut findings = Vec::new();
        let mut observations = Vec::new();
        for name in names {
            let resp = self.fetch(target.child(name), target.request_delay, 512).await?;
            let expects_html = name.ends_with(".html") || name.ends_with(".htm");
            if resp.success() && (expects_html || !resp.is_html()) {
                let evidence = resp.evidence(resp.sketch());
                findings.push(Finding {
                    rule: RuleId::R1DirectAccess,
                    severity: Severity::Critical,
                    detail: format!("{name} is reachable inside the served tree"),
                    evidence: vec![evidence.clone()],
                });
                findings.push(Finding {
                    rule: RuleId::R4StaticServing,
                    severity: Severity::Critical,
                    detail: format!("{name} is served statically, bypassing the application"),
                    evidence: vec![evidence],
                });
            } else {
                let summary = match resp.status {
                    401 | 403 => "access denied",
                    404 | 410 => "not found",
                    _ if resp.success() => "generic html page",
                    _ => "not retrievable",
                };
                observations.push(resp.evidence(summary));
            }
        }
        Ok((findings, observations))
    }

    /// Runs every probe. Direct-access candidates are `known_names` plus
    /// any file names learned from a listing.
    pub async fn run_audit(&self, target: &ProbeTarget, known_names: &[String]) -> AuditReport {
        let start = self.probes_sent();
        let mut findings = Vec::new();
        let mut observations = Vec::new();
        let mut verdicts = BTreeMap::new();
        let mut learned = Vec::new();

        let reachable = match self.probe_listing(target).await {
            Ok(outcome) => {
                observations.push(outcome.evidence);
                verdicts.insert(
                    RuleId::R2ListingOrIndex,
                    if outcome.finding.is_some() { Verdict::Fail } else { Verdict::Pass },
                );
                findings.extend(outcome.finding);
                learned = outcome.children;
                true
            }
            Err(e) => {
                observations.push(network_evidence(target.base_url.as_str(), &e));
                verdicts.insert(RuleId::R2ListingOrIndex, Verdict::Indeterminate);
                false
            }
        };

        if !reachable {
            for rule in RuleId::ALL {
                verdicts.entry(rule).or_insert(Verdict::Indeterminate);
            }
            return AuditReport {
                target: target.clone(),
                findings,
                probes_sent: self.probes_sent() - start,
                verdicts,
                observations,
                learned_names: Vec::new(),
            };
        }

        let r3 = match self.probe_sequential_names(target).await {
            Ok(Some(found)) => {
                let v = if found.is_empty() { Verdict::Pass } else { Verdict::Fail };
                findings.extend(found);
                v
            }
            Ok(None) => {
                observations.push(Evidence {
                    url: target.base_url.to_string(),
                    status: 200,
                    summary: "server answers arbitrary names; sequential probe inconclusive".into(),
                });
                Verdict::Indeterminate
            }
            Err(e) => {
                observations.push(network_evidence(target.base_url.as_str(), &e));
                Verdict::Indeterminate
            }
        };
        verdicts.insert(RuleId::R3GuessableNames, r3);

        let candidates: Vec<String> = known_names
            .iter()
            .chain(learned.iter())
            .filter(|n| !n.is_empty() && !INDEX_NAMES.contains(&n.as_str()))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let direct = match self.probe_direct_access(target, &candidates).await {
            Ok((found, seen)) => {
                observations.extend(seen);
                let v = if found.is_empty() { Verdict::Pass } else { Verdict::Fail };
                findings.extend(found);
                v
            }
            Err(e) => {
                observations.push(network_evidence(target.base_url.as_str(), &e));
                Verdict::Indeterminate
            }
        };
        verdicts.insert(RuleId::R1DirectAccess, direct);
        verdicts.insert(RuleId::R4StaticServing, direct);

        AuditReport {
            target: target.clone(),
            findings,
            probes_sent: self.probes_sent() - start,
            verdicts,
            observations,
            learned_names: learned
                .into_iter()
                .map(|n| {
                    let class = classify_name(&n);
                    (n, class)
                })
                .collect(),
        }
    }
}

fn network_evidence(url: &str, e: &AuditError) -> Evidence {
    Evidence {
        url: url.to_string(),
        status: 0,
        summary: e.to_string(),
    }
}

fn index_title_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)<title>\s*(index of|directory listing)").unwrap())
}

fn href_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?i)<a\s[^>]*?href\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s>]+))"#).unwrap())
}

/// Distinct direct children of `base` linked from `html`, percent-decoded.
/// Subdirectories keep a trailing `/`; index pages and parent links are
/// excluded.
pub fn listed_children(base: &Url, html: &str) -> Vec<String> {
    let mut out = BTreeSet::new();
    for cap in href_regex().captures_iter(html) {
        let href = cap
            .get(1)
            .or_else(|| cap.get(2))
            .or_else(|| cap.get(3))
            .map(|m| m.as_str())
            .unwrap_or_default();
        let Ok(mut resolved) = base.join(href) else {
            continue;
        };
        if resolved.origin() != base.origin() {
            continue;
        }
        resolved.set_query(None);
        resolved.set_fragment(None);
        let Some(rest) = resolved.path().strip_prefix(base.path()) else {
            continue;
        };
        let name = percent_decode_str(rest).decode_utf8_lossy().into_owned();
        let bare = name.trim_end_matches('/');
        if bare.is_empty() || bare.contains('/') || INDEX_NAMES.contains(&bare) {
            continue;
        }
        out.insert(name);
    }
    out.into_iter().collect()
}
