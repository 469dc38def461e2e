//! Multiquery expansion: one question in, several rephrasings out.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, EXPANSION_TEMPERATURE};

pub const DEFAULT_EXPANSION_TEMPLATE: &str = include_str!("../assets/expansion_prompt.txt");

pub const DEFAULT_TARGET_N: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ExpansionError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ExpansionError::EmptyQuery);
        }
        Ok(Self {
            id: id.into(),
            text,
        })
    }
}

/// The original question plus its distinct rephrasings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedQuerySet {
    pub original: Query,
    pub variants: Vec<Query>,
    pub n: usize,
}

impl ExpandedQuerySet {
    /// A set with no variants, i.e. plain single-query retrieval.
    pub fn single(original: Query) -> Self {
        Self {
            original,
            variants: Vec::new(),
            n: 0,
        }
    }

    /// `[original] + variants`, the list every downstream stage works on.
    pub fn all_queries(&self) -> Vec<&Query> {
        std::iter::once(&self.original)
            .chain(self.variants.iter())
            .collect()
    }

    pub fn validate(&self) -> Result<(), ExpansionError> {
        let bad = |reason: &str| Err(ExpansionError::InvalidSet(reason.to_string()));
        if self.original.text.trim().is_empty() {
            return Err(ExpansionError::EmptyQuery);
        }
        if self.n != self.variants.len() {
            return bad("n does not match the number of variants");
        }
        let mut seen = HashSet::new();
        let mut ids = HashSet::new();
        for q in self.all_queries() {
            if q.text.trim().is_empty() {
                return bad("empty variant");
            }
            if !seen.insert(dedup_key(&q.text)) {
                return bad("duplicate query under case/whitespace folding");
            }
            if !ids.insert(q.id.as_str()) {
                return bad("duplicate query id");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpansionError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("target count must be at least 1")]
    ZeroTarget,
    #[error("invalid expanded query set: {0}")]
    InvalidSet(String),
    #[error("expanding query {query_id}: {source}")]
    Gateway {
        query_id: String,
        #[source]
        source: GatewayError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    pub target_n: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
    /// Template with `{question}` and `{count}` placeholders.
    pub template: String,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            target_n: DEFAULT_TARGET_N,
            temperature: EXPANSION_TEMPERATURE,
            max_output_tokens: 512,
            model_id: "gpt-3.5-turbo-16k".into(),
            template: DEFAULT_EXPANSION_TEMPLATE.to_string(),
        }
    }
}

/// Casefold plus internal whitespace collapse.
pub fn dedup_key(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

static ENUMERATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\d+[\.\)]|[-*•])\s*").unwrap());

/// Splits model output into distinct lines: enumeration markers stripped,
/// blanks dropped, later case-folded duplicates removed, order kept.
pub fn parse_line_list(raw: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    raw.lines()
        .map(|line| ENUMERATION.replace(line.trim(), "").trim().to_string())
        .filter(|line| !line.is_empty())
        .filter(|line| seen.insert(dedup_key(line)))
        .collect()
}

/// Single-pass placeholder substitution, so a question that itself contains
/// `{count}` is inserted verbatim.
fn render_template(template: &str, question: &str, count: usize) -> String {
    let count = count.to_string();
    let mut out = String::with_capacity(template.len() + question.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(t) = tail.strip_prefix("{question}") {
            out.push_str(question);
            rest = t;
        } else if let Some(t) = tail.strip_prefix("{count}") {
            out.push_str(&count);
            rest = t;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

pub fn expansion_prompt(query: &Query, target_n: usize, config: &ExpansionConfig) -> ChatRequest {
    ChatRequest {
        system_text: "You rewrite medical questions for literature search.".into(),
        user_text: render_template(&config.template, &query.text, target_n),
        temperature: config.temperature,
        max_output_tokens: config.max_output_tokens,
        model_id: config.model_id.clone(),
    }
}

fn collect_variants(original: &Query, raw: &str, target_n: usize) -> Vec<Query> {
    let original_key = dedup_key(&original.text);
    parse_line_list(raw)
        .into_iter()
        .filter(|line| dedup_key(line) != original_key)
        .take(target_n)
        .enumerate()
        .map(|(i, text)| Query {
            id: format!("{}#v{}", original.id, i + 1),
            text,
        })
        .collect()
}

/// Asks the model for `target_n` rephrasings. An unusable reply is retried
/// once, bypassing the cache; after that the set degrades to the original
/// query alone.
pub fn expand(
    query: &Query,
    target_n: usize,
    gateway: &Gateway,
    config: &ExpansionConfig,
) -> Result<ExpandedQuerySet, ExpansionError> {
    if target_n == 0 {
        return Err(ExpansionError::ZeroTarget);
    }
    if query.text.trim().is_empty() {
        return Err(ExpansionError::EmptyQuery);
    }
    let request = expansion_prompt(query, target_n, config);
    let wrap = |source| ExpansionError::Gateway {
        query_id: query.id.clone(),
        source,
    };
    let mut variants = collect_variants(
        query,
        &gateway.complete(&request).map_err(wrap)?.text,
        target_n,
    );
    if variants.is_empty() {
        let retry = gateway.complete_fresh(&request).map_err(wrap)?;
        variants = collect_variants(query, &retry.text, target_n);
    }
    let set = ExpandedQuerySet {
        original: query.clone(),
        n: variants.len(),
        variants,
    };
    debug_assert!(set.validate().is_ok());
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockMatch, MockRule};
    use crate::store::KvStore;
    use proptest::prelude::*;
    use std::sync::Arc;

    const REMI: &str = "What are the characteristics of Remifentanyl?";

    fn gateway_replying(text: &str) -> Gateway {
        Gateway::new(
            Arc::new(
                MockBackend::new(vec![MockRule {
                    matcher: MockMatch {
                        digest: None,
                        user_text_regex: Some(".*".into()),
                    },
                    response: text.into(),
                }])
                .unwrap(),
            ),
            Arc::new(KvStore::in_memory()),
        )
    }

    #[test]
    fn parse_strips_numbering() {
        assert_eq!(parse_line_list("1. foo\n2. bar"), vec!["foo", "bar"]);
        assert_eq!(
            parse_line_list("- foo\n* bar\n• baz\n3) qux"),
            vec!["foo", "bar", "baz", "qux"]
        );
    }

    #[test]
    fn parse_empty_and_casefold_dups() {
        assert!(parse_line_list("").is_empty());
        assert_eq!(parse_line_list("foo\n\nFoo\nbar"), vec!["foo", "bar"]);
    }

    #[test]
    fn remifentanyl_rephrasings() {
        let gw = gateway_replying(
            "What are the distinguishing features of Remifentanil?\n\
             How does Remifentanil differ from other opioids, such as Alfentanil?\n\
             What are the unique characteristics of Remifentanil, particularly regarding metabolism, half-life, potency, and dosage adjustments in hepatic and renal disease?",
        );
        let q = Query::new("q1", REMI).unwrap();
        let set = expand(&q, 3, &gw, &ExpansionConfig::default()).unwrap();
        assert_eq!(set.n, 3);
        assert!(set
            .variants
            .iter()
            .any(|v| v.text == "What are the distinguishing features of Remifentanil?"));
        assert_eq!(set.all_queries().len(), 4);
    }

    #[test]
    fn empty_reply_degrades_to_single_query_after_one_retry() {
        let gw = gateway_replying("");
        let q = Query::new("q1", REMI).unwrap();
        let set = expand(&q, 3, &gw, &ExpansionConfig::default()).unwrap();
        assert_eq!(set, ExpandedQuerySet::single(q));
        assert_eq!(gw.call_count(), 2);
    }

    #[test]
    fn duplicates_and_original_echo_are_removed() {
        let gw = gateway_replying(&format!("A\nB\nA\n{REMI}"));
        let q = Query::new("q1", REMI).unwrap();
        let set = expand(&q, 3, &gw, &ExpansionConfig::default()).unwrap();
        let texts: Vec<_> = set.variants.iter().map(|v| v.text.as_str()).collect();
        assert_eq!(texts, vec!["A", "B"]);
        assert_eq!(set.n, 2);
    }

    #[test]
    fn prompt_is_deterministic_and_counts() {
        let q = Query::new("q1", REMI).unwrap();
        let cfg = ExpansionConfig::default();
        let a = expansion_prompt(&q, 3, &cfg);
        assert_eq!(a.user_text.matches(REMI).count(), 1);
        assert!(a.user_text.contains('3'));
        assert_eq!(a, expansion_prompt(&q, 3, &cfg));
        let one = expansion_prompt(&q, 1, &cfg);
        assert!(one.user_text.contains("exactly 1 "));
        assert_eq!(a.temperature, EXPANSION_TEMPERATURE);
    }

    #[test]
    fn template_placeholders_are_single_pass() {
        assert_eq!(
            render_template("{question}|{count}|{x}", "a {count}", 2),
            "a {count}|2|{x}"
        );
    }

    #[test]
    fn blank_query_and_zero_target_rejected() {
        assert_eq!(Query::new("q", "  \n"), Err(ExpansionError::EmptyQuery));
        let gw = gateway_replying("x");
        let q = Query::new("q", "x?").unwrap();
        assert_eq!(
            expand(&q, 0, &gw, &ExpansionConfig::default()),
            Err(ExpansionError::ZeroTarget)
        );
    }

    fn adversarial_line() -> impl Strategy<Value = String> {
        prop_oneof![
            Just(String::new()),
            Just("   ".to_string()),
            Just(REMI.to_string()),
            Just(REMI.to_uppercase()),
            "[a-c ]{0,6}",
            (
                "[0-9]{1,2}",
                prop_oneof![Just("."), Just(")")],
                "[a-cA-C ]{0,6}"
            )
                .prop_map(|(n, sep, t)| format!("{n}{sep} {t}")),
            ("[-*•]", "[a-cA-C ]{0,6}").prop_map(|(b, t)| format!("{b} {t}")),
        ]
    }

    proptest! {
        #[test]
        fn parse_output_has_no_blanks_or_folded_duplicates(raw in "[a-cA-C0-9.\\-* \n\t]{0,80}") {
            let out = parse_line_list(&raw);
            let mut keys = HashSet::new();
            for line in &out {
                prop_assert!(!line.is_empty());
                prop_assert!(keys.insert(line.to_lowercase()));
            }
        }

        #[test]
        fn expand_always_yields_valid_sets(lines in prop::collection::vec(adversarial_line(), 0..8), n in 1usize..5) {
            let gw = gateway_replying(&lines.join("\n"));
            let q = Query::new("q", REMI).unwrap();
            let set = expand(&q, n, &gw, &ExpansionConfig::default()).unwrap();
            prop_assert!(set.validate().is_ok());
            prop_assert!(set.n <= n);
            prop_assert!(set.variants.iter().all(|v| v.text != q.text));
        }
    }
}
