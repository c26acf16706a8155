//! Streaming Drain-style template mining.
//!
//! Lines are tokenized on whitespace after variable fields (block ids, IPs,
//! long hex strings, integers) are masked to `<*>`. Each line then walks a
//! fixed-depth tree: the first level is keyed by token count, the next
//! `depth - 2` levels by leading tokens, and the leaf holds candidate
//! templates compared by positional token overlap.
//!
//! ```text
//!            root
//!              |
//!        len = 3 tokens
//!              |
//!          "delete"
//!              |
//!           "block"
//!              |
//!   [delete block <*>] [delete block now]
//! ```

use std::collections::HashMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WILDCARD: &str = "<*>";

/// Template id assigned by the parse tree (1-based, in creation order).
pub type TemplateId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct RawLogLine {
    pub line_no: usize,
    pub timestamp: Option<i64>,
    /// `Some(true)` marks a line labelled anomalous by the dataset.
    pub label_flag: Option<bool>,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogTemplate {
    pub template_id: TemplateId,
    pub tokens: Vec<String>,
    pub match_count: u64,
}

impl LogTemplate {
    pub fn render(&self) -> String {
        self.tokens.join(" ")
    }

    /// Number of parameter slots, i.e. tokens carrying a wildcard.
    pub fn slot_count(&self) -> usize {
        self.tokens.iter().filter(|t| is_slot(t)).count()
    }
}

/// A token captures a parameter when it contains a wildcard, either as the
/// whole token (`<*>`) or embedded (`src:<*>`).
pub fn is_slot(token: &str) -> bool {
    token.contains(WILDCARD)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub line_no: usize,
    pub timestamp: Option<i64>,
    pub template_id: TemplateId,
    /// Raw text at each slot of the template, in token order.
    pub parameters: Vec<String>,
    pub label_flag: Option<bool>,
}

/// Regex rules that rewrite variable substrings of a token to `<*>`.
#[derive(Debug, Clone)]
pub struct Masker {
    rules: Vec<Regex>,
}

impl Masker {
    pub const BLOCK_ID: &'static str = r"blk_-?\d+";
    pub const IPV4_PORT: &'static str = r"/?(\d+\.){3}\d+(:\d+)?:?";
    pub const HEX: &'static str = r"\b(0x)?[0-9a-fA-F]{8,}\b";
    pub const INTEGER: &'static str = r"^[-+]?\d+$";

    pub fn new<I, P>(patterns: I) -> Result<Self>
    where
        I: IntoIterator<Item = P>,
        P: AsRef<str>,
    {
        let rules = patterns
            .into_iter()
            .map(|p| {
                Regex::new(p.as_ref())
                    .map_err(|e| Error::Config(format!("bad mask pattern {:?}: {e}", p.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Masker { rules })
    }

    /// A masker that leaves every token untouched.
    pub fn none() -> Self {
        Masker { rules: Vec::new() }
    }

    pub fn default_patterns() -> Vec<String> {
        [Self::BLOCK_ID, Self::IPV4_PORT, Self::HEX, Self::INTEGER]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn mask_token(&self, token: &str) -> String {
        let mut out = token.to_string();
        for rule in &self.rules {
            if rule.is_match(&out) {
                out = rule.replace_all(&out, WILDCARD).into_owned();
            }
        }
        out
    }

    /// Whitespace tokenization with variable masking.
    pub fn tokenize(&self, content: &str) -> Vec<String> {
        content
            .split_whitespace()
            .map(|t| self.mask_token(t))
            .collect()
    }
}

impl Default for Masker {
    fn default() -> Self {
        Masker::new(Masker::default_patterns()).expect("built-in patterns compile")
    }
}

/// Fraction of positions where the template holds a literal equal to the
/// line's token. Wildcard positions never count as matches.
///
/// Panics on a length mismatch: the tree only compares equal-length
/// sequences, so a mismatch is a caller bug.
pub fn similarity(tokens: &[String], template: &LogTemplate) -> f64 {
    assert_eq!(
        tokens.len(),
        template.tokens.len(),
        "similarity requires equal token counts"
    );
    if tokens.is_empty() {
        return 1.0;
    }
    let equal = tokens
        .iter()
        .zip(&template.tokens)
        .filter(|(tok, tpl)| tpl.as_str() != WILDCARD && tok == tpl)
        .count();
    equal as f64 / tokens.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrainConfig {
    pub depth: usize,
    pub similarity_threshold: f64,
    pub max_children: usize,
}

impl Default for DrainConfig {
    fn default() -> Self {
        DrainConfig {
            depth: 4,
            similarity_threshold: 0.4,
            max_children: 100,
        }
    }
}

impl DrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::Config(format!(
                "parse tree depth must be at least 3, got {}",
                self.depth
            )));
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(Error::Config(format!(
                "similarity threshold {} outside [0, 1]",
                self.similarity_threshold
            )));
        }
        if self.max_children < 2 {
            return Err(Error::Config("max_children must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct InnerNode {
    children: HashMap<String, Node>,
}

#[derive(Debug)]
enum Node {
    Inner(InnerNode),
    /// Indices into `ParseTree::templates`.
    Leaf(Vec<usize>),
}

#[derive(Debug)]
pub struct ParseTree {
    config: DrainConfig,
    masker: Masker,
    by_length: HashMap<usize, Node>,
    templates: Vec<LogTemplate>,
}

impl ParseTree {
    pub fn new(config: DrainConfig, masker: Masker) -> Result<Self> {
        config.validate()?;
        Ok(ParseTree {
            config,
            masker,
            by_length: HashMap::new(),
            templates: Vec::new(),
        })
    }

    pub fn config(&self) -> &DrainConfig {
        &self.config
    }

    pub fn masker(&self) -> &Masker {
        &self.masker
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    pub fn template(&self, id: TemplateId) -> Option<&LogTemplate> {
        (id as usize)
            .checked_sub(1)
            .and_then(|i| self.templates.get(i))
    }

    /// Match `line` against the tree, generalizing or creating a template.
    pub fn parse_line(&mut self, line: &RawLogLine) -> ParsedLog {
        let raw: Vec<&str> = line.content.split_whitespace().collect();
        let tokens: Vec<String> = raw.iter().map(|t| self.masker.mask_token(t)).collect();
        let idx = self.match_or_insert(&tokens);
        let template = &self.templates[idx];
        let parameters = template
            .tokens
            .iter()
            .zip(&raw)
            .filter(|(tpl, _)| is_slot(tpl))
            .map(|(_, raw)| raw.to_string())
            .collect();
        ParsedLog {
            line_no: line.line_no,
            timestamp: line.timestamp,
            template_id: template.template_id,
            parameters,
            label_flag: line.label_flag,
        }
    }

    /// Read-only lookup: the template a line would match, without updating
    /// counts or generalizing.
    pub fn lookup(&self, content: &str) -> Option<TemplateId> {
        let tokens = self.masker.tokenize(content);
        let mut node = self.by_length.get(&tokens.len())?;
        for token in tokens.iter().take(self.prefix_levels()) {
            match node {
                Node::Inner(inner) => {
                    let key = branch_key(token);
                    node = inner
                        .children
                        .get(key)
                        .or_else(|| inner.children.get(WILDCARD))?;
                }
                Node::Leaf(_) => break,
            }
        }
        match node {
            Node::Leaf(cands) => self
                .best_candidate(cands, &tokens)
                .map(|i| self.templates[i].template_id),
            Node::Inner(_) => None,
        }
    }

    fn prefix_levels(&self) -> usize {
        self.config.depth - 2
    }

    fn best_candidate(&self, cands: &[usize], tokens: &[String]) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for &i in cands {
            let sim = similarity(tokens, &self.templates[i]);
            // Candidates are stored in creation order, so a strict `>` keeps
            // the lowest template id on ties.
            if best.is_none_or(|(s, _)| sim > s) {
                best = Some((sim, i));
            }
        }
        best.filter(|&(s, _)| s >= self.config.similarity_threshold)
            .map(|(_, i)| i)
    }

    fn match_or_insert(&mut self, tokens: &[String]) -> usize {
        let prefix_levels = self.prefix_levels();
        let max_children = self.config.max_children;
        let leaf_depth = tokens.len().min(prefix_levels);

        let mut node = self.by_length.entry(tokens.len()).or_insert_with(|| {
            if leaf_depth == 0 {
                Node::Leaf(Vec::new())
            } else {
                Node::Inner(InnerNode::default())
            }
        });
        for (level, token) in tokens.iter().take(leaf_depth).enumerate() {
            let last = level + 1 == leaf_depth;
            let Node::Inner(inner) = node else {
                unreachable!("inner levels precede the leaf");
            };
            let key = choose_child(inner, token, max_children);
            node = inner.children.entry(key).or_insert_with(|| {
                if last {
                    Node::Leaf(Vec::new())
                } else {
                    Node::Inner(InnerNode::default())
                }
            });
        }
        let Node::Leaf(cands) = node else {
            unreachable!("walk ends at a leaf");
        };

        let mut best: Option<(f64, usize)> = None;
        for &i in cands.iter() {
            let sim = similarity(tokens, &self.templates[i]);
            if best.is_none_or(|(s, _)| sim > s) {
                best = Some((sim, i));
            }
        }
        match best {
            Some((sim, i)) if sim >= self.config.similarity_threshold => {
                let template = &mut self.templates[i];
                for (tpl, tok) in template.tokens.iter_mut().zip(tokens) {
                    if tpl != tok && tpl != WILDCARD {
                        *tpl = WILDCARD.to_string();
                    }
                }
                template.match_count += 1;
                i
            }
            _ => {
                let i = self.templates.len();
                cands.push(i);
                self.templates.push(LogTemplate {
                    template_id: (i + 1) as TemplateId,
                    tokens: tokens.to_vec(),
                    match_count: 1,
                });
                i
            }
        }
    }
}

fn has_digit(token: &str) -> bool {
    token.bytes().any(|b| b.is_ascii_digit())
}

fn branch_key(token: &str) -> &str {
    if has_digit(token) || token.contains(WILDCARD) {
        WILDCARD
    } else {
        token
    }
}

/// Child key for `token` at an inner node, routing to the wildcard branch
/// once the node is full.
fn choose_child(inner: &InnerNode, token: &str, max_children: usize) -> String {
    let key = branch_key(token);
    if inner.children.contains_key(key) || key == WILDCARD {
        return key.to_string();
    }
    let n = inner.children.len();
    if inner.children.contains_key(WILDCARD) {
        if n < max_children {
            key.to_string()
        } else {
            WILDCARD.to_string()
        }
    } else if n + 1 < max_children {
        key.to_string()
    } else {
        WILDCARD.to_string()
    }
}
