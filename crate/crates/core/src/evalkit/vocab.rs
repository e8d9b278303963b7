//! Word lists for the synthetic generator.
//!
//! Concept synonyms realize question variation, role words give each agent a
//! recognizable register, fillers add noise, and each failure type has its
//! own corruption vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::trace::FailureType;

const CONCEPTS: &[[&str; 4]] = &[
    ["latency", "delay", "lag", "slowness"],
    ["database", "datastore", "dbms", "sqlstore"],
    ["cache", "memo", "buffer", "stash"],
    ["network", "link", "connectivity", "wire"],
    ["memory", "ram", "heap", "rss"],
    ["cpu", "processor", "core", "compute"],
    ["disk", "storage", "volume", "drive"],
    ["queue", "backlog", "mailbox", "inbox"],
    ["login", "signin", "auth", "authentication"],
    ["payment", "billing", "checkout", "invoice"],
    ["search", "lookup", "retrieval", "seek"],
    ["upload", "ingest", "import", "intake"],
    ["report", "summary", "digest", "overview"],
    ["schedule", "cron", "timer", "calendar"],
    ["email", "mail", "smtp", "newsletter"],
    ["user", "customer", "account", "member"],
    ["order", "purchase", "cart", "basket"],
    ["image", "picture", "photo", "thumbnail"],
    ["video", "stream", "clip", "footage"],
    ["config", "settings", "options", "preferences"],
    ["deploy", "rollout", "release", "ship"],
    ["timeout", "deadline", "expiry", "ttl"],
    ["throttle", "ratelimit", "quota", "cap"],
    ["pod", "container", "replica", "instance"],
    ["gateway", "proxy", "ingress", "balancer"],
    ["log", "journal", "syslog", "audit"],
    ["metric", "gauge", "counter", "histogram"],
    ["token", "jwt", "credential", "secret"],
    ["sort", "rank", "arrange", "collate"],
    ["parse", "tokenize", "lex", "decode"],
    ["file", "document", "blob", "attachment"],
    ["region", "zone", "datacenter", "locale"],
];

const PLANNER: &[&str] = &[
    "plan",
    "decompose",
    "subtask",
    "first",
    "then",
    "outline",
    "strategy",
    "goal",
];
const EXECUTOR: &[&str] = &[
    "execute",
    "run",
    "apply",
    "implement",
    "command",
    "output",
    "script",
    "perform",
];
const VERIFIER: &[&str] = &[
    "verify", "check", "validate", "confirm", "review", "assert", "conclude", "inspect",
];

const FILLERS: &[&str] = &[
    "the",
    "a",
    "of",
    "to",
    "and",
    "with",
    "for",
    "on",
    "in",
    "we",
    "now",
    "next",
    "also",
    "carefully",
    "likely",
    "possibly",
    "should",
    "will",
    "might",
    "maybe",
    "hmm",
    "okay",
    "so",
    "because",
    "given",
    "using",
    "based",
    "into",
    "about",
    "across",
    "within",
    "around",
    "some",
    "more",
    "less",
    "each",
    "every",
    "other",
    "another",
    "this",
    "that",
    "these",
    "those",
    "here",
    "there",
    "again",
    "still",
    "just",
    "only",
    "very",
    "quite",
    "rather",
    "seems",
    "appears",
    "looks",
    "indeed",
    "actually",
    "basically",
    "further",
    "overall",
    "initially",
    "finally",
    "similar",
    "different",
    "relevant",
    "important",
    "current",
    "previous",
    "specific",
    "general",
    "simple",
    "quick",
    "detailed",
    "minor",
    "major",
    "possible",
    "expected",
    "observed",
    "noted",
    "known",
    "new",
    "old",
];

const CORRUPTIONS: &[(FailureType, [&str; 8])] = &[
    (
        FailureType::DecompositionError,
        [
            "circular",
            "subgoal",
            "duplicated",
            "missingdep",
            "unordered",
            "tangled",
            "overlap",
            "redundant",
        ],
    ),
    (
        FailureType::IncorrectCode,
        [
            "traceback",
            "syntaxerror",
            "typeerror",
            "undefined",
            "nameerror",
            "segfault",
            "stacktrace",
            "importerror",
        ],
    ),
    (
        FailureType::RoundLimitation,
        [
            "maxrounds",
            "exhausted",
            "terminated",
            "cutoff",
            "truncated",
            "incomplete",
            "aborted",
            "halted",
        ],
    ),
    (
        FailureType::CriticalTraceMiss,
        [
            "overlooked",
            "spanless",
            "untraced",
            "blindspot",
            "skipped",
            "unobserved",
            "omitted",
            "hidden",
        ],
    ),
    (
        FailureType::MetricsQueryError,
        [
            "promql",
            "nan",
            "malformed",
            "unparsable",
            "badselector",
            "emptyseries",
            "labelmismatch",
            "wrongunit",
        ],
    ),
    (
        FailureType::EditingError,
        [
            "hunk",
            "conflict",
            "misapplied",
            "patchfail",
            "offbyone",
            "clobbered",
            "indentation",
            "diffreject",
        ],
    ),
    (
        FailureType::LocalizationError,
        [
            "wrongfile",
            "misplaced",
            "nonexistent",
            "unrelated",
            "mislocated",
            "guessed",
            "irrelevantpath",
            "notfound",
        ],
    ),
];

/// Generator vocabulary. Every word is a single lowercase alphanumeric token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Each concept is a list of interchangeable synonyms.
    pub concepts: Vec<Vec<String>>,
    /// Register words per agent role; roles missing here use `default_role_words`.
    pub role_words: BTreeMap<String, Vec<String>>,
    pub default_role_words: Vec<String>,
    pub fillers: Vec<String>,
    pub corruptions: BTreeMap<FailureType, Vec<String>>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            concepts: CONCEPTS.iter().map(|c| owned(c)).collect(),
            role_words: [
                ("planner", PLANNER),
                ("executor", EXECUTOR),
                ("verifier", VERIFIER),
            ]
            .into_iter()
            .map(|(r, w)| (r.to_string(), owned(w)))
            .collect(),
            default_role_words: owned(&["step", "work", "proceed", "handle"]),
            fillers: owned(FILLERS),
            corruptions: CORRUPTIONS.iter().map(|(t, w)| (*t, owned(w))).collect(),
        }
    }
}

impl Vocabulary {
    pub fn role_words(&self, role: &str) -> &[String] {
        self.role_words
            .get(role)
            .map_or(self.default_role_words.as_slice(), Vec::as_slice)
    }

    pub fn corruption(&self, t: FailureType) -> &[String] {
        self.corruptions.get(&t).map_or(&[], Vec::as_slice)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.concepts.is_empty() || self.concepts.iter().any(Vec::is_empty) {
            return Err("every concept needs at least one synonym".into());
        }
        if self.fillers.is_empty() || self.default_role_words.is_empty() {
            return Err("filler and default role word lists must be non-empty".into());
        }
        for t in FailureType::NAMED {
            if self.corruption(t).is_empty() {
                return Err(format!("no corruption vocabulary for {t}"));
            }
        }
        Ok(())
    }
}
