//! Tensor-name classification and checkpoint alignment.
//!
//! Names are matched against anchored glob patterns. The grammar is small:
//!
//! | token   | matches                                         |
//! |---------|-------------------------------------------------|
//! | `*`     | any run of characters, possibly empty           |
//! | `?`     | exactly one character                           |
//! | `{n}`   | one or more ASCII digits, captured as the layer |
//! | `\c`    | the literal character `c`                       |
//! | other   | itself                                          |
//!
//! A pattern holds at most one `{n}`. Rules are tried in order and the first
//! match wins; a trailing `*` → `Other` rule is always present.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
    Embed,
    Norm,
    Other,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 10] = [
        ComponentKind::Q,
        ComponentKind::K,
        ComponentKind::V,
        ComponentKind::O,
        ComponentKind::Gate,
        ComponentKind::Up,
        ComponentKind::Down,
        ComponentKind::Embed,
        ComponentKind::Norm,
        ComponentKind::Other,
    ];

    /// The seven projection matrices covered by subspace analysis.
    pub const PROJECTIONS: [ComponentKind; 7] = [
        ComponentKind::Q,
        ComponentKind::K,
        ComponentKind::V,
        ComponentKind::O,
        ComponentKind::Gate,
        ComponentKind::Up,
        ComponentKind::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Q => "Q",
            ComponentKind::K => "K",
            ComponentKind::V => "V",
            ComponentKind::O => "O",
            ComponentKind::Gate => "Gate",
            ComponentKind::Up => "Up",
            ComponentKind::Down => "Down",
            ComponentKind::Embed => "Embed",
            ComponentKind::Norm => "Norm",
            ComponentKind::Other => "Other",
        }
    }

    pub fn is_projection(self) -> bool {
        Self::PROJECTIONS.contains(&self)
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::ComponentMap(format!("unknown component kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Token {
    Literal(char),
    AnyRun,
    AnyOne,
    Digits,
}

/// A compiled anchored glob.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NamePattern {
    source: String,
    tokens: Vec<Token>,
}

impl NamePattern {
    pub fn parse(source: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut chars = source.chars().peekable();
        let mut captures = 0;
        while let Some(c) = chars.next() {
            match c {
                '*' => {
                    if tokens.last() != Some(&Token::AnyRun) {
                        tokens.push(Token::AnyRun);
                    }
                }
                '?' => tokens.push(Token::AnyOne),
                '\\' => match chars.next() {
                    Some(esc) => tokens.push(Token::Literal(esc)),
                    None => {
                        return Err(Error::ComponentMap(format!(
                            "pattern {source:?} ends with a dangling escape"
                        )))
                    }
                },
                '{' => {
                    let body: String = chars.by_ref().take_while(|&c| c != '}').collect();
                    if body != "n" {
                        return Err(Error::ComponentMap(format!(
                            "pattern {source:?}: only {{n}} captures are supported, found {{{body}"
                        )));
                    }
                    captures += 1;
                    tokens.push(Token::Digits);
                }
                '}' => return Err(Error::ComponentMap(format!("pattern {source:?} has an unmatched '}}'"))),
                c => tokens.push(Token::Literal(c)),
            }
        }
        if source.is_empty() {
            return Err(Error::ComponentMap("empty pattern".into()));
        }
        if captures > 1 {
            return Err(Error::ComponentMap(format!(
                "pattern {source:?} has {captures} {{n}} captures, at most one allowed"
            )));
        }
        Ok(Self {
            source: source.to_owned(),
            tokens,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn has_capture(&self) -> bool {
        self.tokens.contains(&Token::Digits)
    }

    pub fn is_match(&self, name: &str) -> bool {
        self.captures(name).is_some()
    }

    /// `Some(capture)` when the whole name matches; the inner value is the
    /// `{n}` capture if the pattern has one.
    pub fn captures(&self, name: &str) -> Option<Option<usize>> {
        let chars: Vec<char> = name.chars().collect();
        let mut capture = None;
        if match_tokens(&self.tokens, &chars, &mut capture) {
            Some(capture)
        } else {
            None
        }
    }
}

fn match_tokens(tokens: &[Token], s: &[char], capture: &mut Option<usize>) -> bool {
    let Some((head, rest)) = tokens.split_first() else {
        return s.is_empty();
    };
    match head {
        Token::Literal(c) => s.first() == Some(c) && match_tokens(rest, &s[1..], capture),
        Token::AnyOne => !s.is_empty() && match_tokens(rest, &s[1..], capture),
        Token::AnyRun => (0..=s.len()).any(|skip| match_tokens(rest, &s[skip..], capture)),
        Token::Digits => {
            let run = s.iter().take_while(|c| c.is_ascii_digit()).count();
            // Longest digit run first so "{n}*" captures the whole number.
            for len in (1..=run).rev() {
                if match_tokens(rest, &s[len..], capture) {
                    let digits: String = s[..len].iter().collect();
                    // Absurdly long digit runs are not layer indices.
                    *capture = digits.parse().ok();
                    return capture.is_some();
                }
            }
            false
        }
    }
}

impl Serialize for NamePattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for NamePattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        NamePattern::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub pattern: NamePattern,
    pub kind: ComponentKind,
}

/// Ordered classification rules plus a layer-index extractor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMap {
    rules: Vec<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer_pattern: Option<NamePattern>,
}

/// Built-in naming presets, selectable by name.
pub const PRESETS: [&str; 5] = ["toy", "llama", "qwen2", "phi3", "meta"];

impl ComponentMap {
    /// Build a map, appending the catch-all rule if absent.
    pub fn new(mut rules: Vec<Rule>, layer_pattern: Option<NamePattern>) -> Result<Self> {
        if let Some(lp) = &layer_pattern {
            if !lp.has_capture() {
                return Err(Error::ComponentMap(format!(
                    "layer pattern {:?} must contain one {{n}} capture",
                    lp.as_str()
                )));
            }
        }
        let has_catch_all = rules
            .last()
            .is_some_and(|r| r.pattern.as_str() == "*" && r.kind == ComponentKind::Other);
        if !has_catch_all {
            rules.push(Rule {
                pattern: NamePattern::parse("*")?,
                kind: ComponentKind::Other,
            });
        }
        Ok(Self { rules, layer_pattern })
    }

    pub fn from_pairs(pairs: &[(&str, ComponentKind)], layer: Option<&str>) -> Result<Self> {
        let rules = pairs
            .iter()
            .map(|&(p, kind)| {
                Ok(Rule {
                    pattern: NamePattern::parse(p)?,
                    kind,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layer = layer.map(NamePattern::parse).transpose()?;
        Self::new(rules, layer)
    }

    pub fn preset(name: &str) -> Result<Self> {
        use ComponentKind::*;
        match name {
            // Naming used by the built-in toy transformer.
            "toy" => Self::from_pairs(
                &[
                    ("*.attn.wq*", Q),
                    ("*.attn.wk*", K),
                    ("*.attn.wv*", V),
                    ("*.attn.wo*", O),
                    ("*.ffn.w_gate*", Gate),
                    ("*.ffn.w_up*", Up),
                    ("*.ffn.w_down*", Down),
                    ("tok_embeddings*", Embed),
                    ("*norm*", Norm),
                ],
                Some("*layers.{n}.*"),
            ),
            // Hugging Face Llama 3 / Qwen2.5 layout.
            "llama" | "qwen2" => Self::from_pairs(
                &[
                    ("*.self_attn.q_proj.*", Q),
                    ("*.self_attn.k_proj.*", K),
                    ("*.self_attn.v_proj.*", V),
                    ("*.self_attn.o_proj.*", O),
                    ("*.mlp.gate_proj.*", Gate),
                    ("*.mlp.up_proj.*", Up),
                    ("*.mlp.down_proj.*", Down),
                    ("*embed_tokens*", Embed),
                    ("*norm*", Norm),
                ],
                Some("*layers.{n}.*"),
            ),
            // Phi-3.5 fuses QKV and gate/up into single tensors; those cannot
            // be attributed to one kind without splitting and fall to Other.
            "phi3" => Self::from_pairs(
                &[
                    ("*.self_attn.qkv_proj.*", Other),
                    ("*.self_attn.o_proj.*", O),
                    ("*.mlp.gate_up_proj.*", Other),
                    ("*.mlp.down_proj.*", Down),
                    ("*embed_tokens*", Embed),
                    ("*norm*", Norm),
                ],
                Some("*layers.{n}.*"),
            ),
            // Original Meta consolidated checkpoints.
            "meta" => Self::from_pairs(
                &[
                    ("*.attention.wq.*", Q),
                    ("*.attention.wk.*", K),
                    ("*.attention.wv.*", V),
                    ("*.attention.wo.*", O),
                    ("*.feed_forward.w1.*", Gate),
                    ("*.feed_forward.w3.*", Up),
                    ("*.feed_forward.w2.*", Down),
                    ("tok_embeddings*", Embed),
                    ("*norm*", Norm),
                ],
                Some("*layers.{n}.*"),
            ),
            other => Err(Error::ComponentMap(format!(
                "unknown naming preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RulesFile {
            rules: Vec<Rule>,
            #[serde(default)]
            layer_pattern: Option<NamePattern>,
        }
        let file: RulesFile = serde_json::from_str(json).map_err(|e| Error::ComponentMap(e.to_string()))?;
        Self::new(file.rules, file.layer_pattern)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("component map serializes")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn classify(&self, name: &str) -> (ComponentKind, Option<usize>) {
        let kind = self
            .rules
            .iter()
            .find(|r| r.pattern.is_match(name))
            .map_or(ComponentKind::Other, |r| r.kind);
        let layer = self.layer_pattern.as_ref().and_then(|p| p.captures(name)).flatten();
        (kind, layer)
    }
}

impl Default for ComponentMap {
    fn default() -> Self {
        Self::preset("toy").expect("toy preset is valid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Strict,
    Intersect,
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(AlignMode::Strict),
            "intersect" => Ok(AlignMode::Intersect),
            other => Err(Error::InvalidArgument(format!("unknown align mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AlignedPair {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ComponentKind,
    pub layer: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Alignment {
    /// Pairs in canonical (lexicographic) name order.
    pub pairs: Vec<AlignedPair>,
    /// Names skipped in intersect mode, with the reason.
    pub skipped: Vec<SkippedTensor>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedTensor {
    pub name: String,
    pub kind: ComponentKind,
    pub reason: String,
}

impl Alignment {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.name.as_str())
    }

    pub fn warnings(&self) -> Vec<String> {
        self.skipped
            .iter()
            .map(|s| format!("skipped {:?}: {}", s.name, s.reason))
            .collect()
    }
}

pub fn align(a: &Checkpoint, b: &Checkpoint, mode: AlignMode, map: &ComponentMap) -> Result<Alignment> {
    let names: BTreeSet<&str> = a.names().chain(b.names()).collect();
    let mut out = Alignment::default();
    let mut problems = Vec::new();
    for name in names {
        let (kind, layer) = map.classify(name);
        let reason = match (a.get(name), b.get(name)) {
            (Some(ta), Some(tb)) if ta.shape() == tb.shape() => {
                out.pairs.push(AlignedPair {
                    name: name.to_owned(),
                    shape: ta.shape().to_vec(),
                    kind,
                    layer,
                });
                continue;
            }
            (Some(ta), Some(tb)) => {
                format!("shape mismatch {:?} vs {:?}", ta.shape(), tb.shape())
            }
            (Some(_), None) => "present only in the first checkpoint".to_owned(),
            (None, Some(_)) => "present only in the second checkpoint".to_owned(),
            (None, None) => unreachable!(),
        };
        match mode {
            AlignMode::Strict => problems.push(format!("{name:?}: {reason}")),
            AlignMode::Intersect => out.skipped.push(SkippedTensor {
                name: name.to_owned(),
                kind,
                reason,
            }),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Alignment(problems));
    }
    Ok(out)
}
