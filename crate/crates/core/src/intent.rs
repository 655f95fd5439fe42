//! Operator command grammar.
//!
//! | phrase                        | intent      |
//! |-------------------------------|-------------|
//! | `start job`                   | StartJob    |
//! | `stop` / `halt`               | Stop        |
//! | `move to <station>`           | MoveTo      |
//! | `pick [from] <station>`       | Pick        |
//! | `place [at] <station>`        | Place       |
//! | `set speed [to] <float>`      | SetSpeed    |
//! | `yes` / `accept` / `ok`       | Accept      |
//! | `no` / `reject`               | Reject      |
//! | `status`                      | Status      |
//! | `set <key> [to\|=] <float>`   | SetParam    |
//!
//! Matching is ASCII case-insensitive. Politeness words at either end are
//! dropped, "the" is ignored anywhere, and a synonyms table rewrites the
//! leading verb phrase ("go to" → "move to", "grab" → "pick", ...). When
//! several rules match, the one with the longest literal prefix wins, so
//! `set speed 2` is a bad speed, not a parameter named `speed`.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_UTTERANCE_BYTES: usize = 1024;

/// A station as the operator named it. Comparison ignores ASCII case and
/// runs of whitespace.
#[derive(Debug, Clone, Eq, Serialize, Deserialize)]
pub struct StationRef(pub String);

impl StationRef {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn key(&self) -> String {
        self.0.split_whitespace().map(|w| w.to_ascii_lowercase()).collect::<Vec<_>>().join(" ")
    }
}

impl PartialEq for StationRef {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl fmt::Display for StationRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "snake_case")]
pub enum IntentKind {
    StartJob,
    Stop,
    MoveTo(StationRef),
    Pick(StationRef),
    Place(StationRef),
    SetSpeed(f64),
    Accept,
    Reject,
    Status,
    SetParam { key: String, value: f64 },
}

impl IntentKind {
    /// The phrase that parses back to this intent.
    pub fn canonical_phrase(&self) -> String {
        match self {
            IntentKind::StartJob => "start job".into(),
            IntentKind::Stop => "stop".into(),
            IntentKind::MoveTo(s) => format!("move to {s}"),
            IntentKind::Pick(s) => format!("pick from {s}"),
            IntentKind::Place(s) => format!("place at {s}"),
            IntentKind::SetSpeed(v) => format!("set speed {v}"),
            IntentKind::Accept => "accept".into(),
            IntentKind::Reject => "reject".into(),
            IntentKind::Status => "status".into(),
            IntentKind::SetParam { key, value } => format!("set {key} {value}"),
        }
    }

    /// Task intents go through prediction; the rest act immediately.
    pub fn is_task(&self) -> bool {
        matches!(self, IntentKind::MoveTo(_) | IntentKind::Pick(_) | IntentKind::Place(_))
    }

    pub fn station(&self) -> Option<&StationRef> {
        match self {
            IntentKind::MoveTo(s) | IntentKind::Pick(s) | IntentKind::Place(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgSpan {
    pub name: String,
    /// Byte range into `Intent::raw`.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub kind: IntentKind,
    pub raw: String,
    pub spans: Vec<ArgSpan>,
}

impl Intent {
    /// An intent not typed by anyone, e.g. sent directly by a client.
    pub fn direct(kind: IntentKind) -> Self {
        let raw = kind.canonical_phrase();
        Self { kind, raw, spans: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    UnknownVerb,
    BadArgument,
    Empty,
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{message}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// The offending token, as typed.
    pub token: String,
    pub span: Option<Range<usize>>,
    pub suggestion: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone)]
struct Token {
    text: String,
    span: Range<usize>,
}

const LEADING_FILLER: &[&[&str]] = &[
    &["i", "want", "you", "to"],
    &["could", "you"],
    &["can", "you"],
    &["would", "you"],
    &["please"],
    &["kindly"],
    &["hey"],
    &["robot"],
    &["now"],
];

const TRAILING_FILLER: &[&[&str]] = &[&["thank", "you"], &["please"], &["now"], &["thanks"], &["robot"]];

const SYNONYMS: &[(&[&str], &[&str])] = &[
    (&["go", "to"], &["move", "to"]),
    (&["goto"], &["move", "to"]),
    (&["head", "to"], &["move", "to"]),
    (&["navigate", "to"], &["move", "to"]),
    (&["drive", "to"], &["move", "to"]),
    (&["move", "towards"], &["move", "to"]),
    (&["pick", "it", "up", "from"], &["pick", "from"]),
    (&["pick", "up", "from"], &["pick", "from"]),
    (&["pick", "up"], &["pick"]),
    (&["grab", "from"], &["pick", "from"]),
    (&["grab"], &["pick"]),
    (&["take", "from"], &["pick", "from"]),
    (&["place", "it", "at"], &["place", "at"]),
    (&["place", "it"], &["place"]),
    (&["put", "it", "down", "at"], &["place", "at"]),
    (&["put", "down", "at"], &["place", "at"]),
    (&["put", "at"], &["place", "at"]),
    (&["put"], &["place"]),
    (&["drop", "off", "at"], &["place", "at"]),
    (&["drop", "at"], &["place", "at"]),
    (&["drop"], &["place"]),
    (&["begin", "job"], &["start", "job"]),
    (&["run", "job"], &["start", "job"]),
    (&["resume", "job"], &["start", "job"]),
    (&["abort"], &["stop"]),
    (&["cancel"], &["stop"]),
    (&["freeze"], &["stop"]),
    (&["okay"], &["ok"]),
    (&["yeah"], &["yes"]),
    (&["yep"], &["yes"]),
    (&["sure"], &["yes"]),
    (&["affirmative"], &["yes"]),
    (&["approve"], &["accept"]),
    (&["nope"], &["no"]),
    (&["negative"], &["no"]),
    (&["decline"], &["reject"]),
    (&["deny"], &["reject"]),
    (&["what", "is", "your", "status"], &["status"]),
    (&["report", "status"], &["status"]),
    (&["status", "report"], &["status"]),
];

/// Verb phrases offered as suggestions for unknown input.
const VERBS: &[&str] = &["start job", "stop", "halt", "move to", "pick", "place", "set speed", "set", "yes", "accept", "ok", "no", "reject", "status"];

#[derive(Clone, Copy)]
enum Arg {
    None,
    Station,
    Speed,
    KeyValue,
}

#[derive(Clone, Copy)]
enum Verb {
    StartJob,
    Stop,
    MoveTo,
    Pick,
    Place,
    SetSpeed,
    Accept,
    Reject,
    Status,
    SetParam,
}

const RULES: &[(&[&str], Verb, Arg)] = &[
    (&["start", "job"], Verb::StartJob, Arg::None),
    (&["stop"], Verb::Stop, Arg::None),
    (&["halt"], Verb::Stop, Arg::None),
    (&["move", "to"], Verb::MoveTo, Arg::Station),
    (&["pick", "from"], Verb::Pick, Arg::Station),
    (&["pick"], Verb::Pick, Arg::Station),
    (&["place", "at"], Verb::Place, Arg::Station),
    (&["place"], Verb::Place, Arg::Station),
    (&["set", "speed"], Verb::SetSpeed, Arg::Speed),
    (&["yes"], Verb::Accept, Arg::None),
    (&["accept"], Verb::Accept, Arg::None),
    (&["ok"], Verb::Accept, Arg::None),
    (&["no"], Verb::Reject, Arg::None),
    (&["reject"], Verb::Reject, Arg::None),
    (&["status"], Verb::Status, Arg::None),
    (&["set"], Verb::SetParam, Arg::KeyValue),
];

fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                push_token(&mut out, text, s, i);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    out
}

fn push_token(out: &mut Vec<Token>, text: &str, s: usize, mut e: usize) {
    // trailing sentence punctuation is not part of the token
    while e > s && matches!(text.as_bytes()[e - 1], b'.' | b',' | b'!' | b'?' | b';') {
        e -= 1;
    }
    if e > s {
        out.push(Token { text: text[s..e].to_ascii_lowercase(), span: s..e });
    }
}

fn starts_with(tokens: &[Token], phrase: &[&str]) -> bool {
    tokens.len() >= phrase.len() && tokens.iter().zip(phrase).all(|(t, p)| t.text == *p)
}

fn ends_with(tokens: &[Token], phrase: &[&str]) -> bool {
    tokens.len() >= phrase.len() && starts_with(&tokens[tokens.len() - phrase.len()..], phrase)
}

fn strip_fillers(mut tokens: Vec<Token>) -> Vec<Token> {
    tokens.retain(|t| t.text != "the");
    loop {
        let before = tokens.len();
        if let Some(f) = LEADING_FILLER.iter().find(|f| tokens.len() > f.len() && starts_with(&tokens, f)) {
            tokens.drain(..f.len());
        }
        if let Some(f) = TRAILING_FILLER.iter().find(|f| tokens.len() > f.len() && ends_with(&tokens, f)) {
            tokens.truncate(tokens.len() - f.len());
        }
        if tokens.len() == before {
            return tokens;
        }
    }
}

/// Rewrites the leading verb phrase through the synonyms table. Only the
/// head is rewritten so station names are never touched.
fn apply_synonyms(mut tokens: Vec<Token>) -> Vec<Token> {
    let best = SYNONYMS.iter().filter(|(from, _)| starts_with(&tokens, from)).max_by_key(|(from, _)| from.len());
    if let Some((from, to)) = best {
        let span = tokens[0].span.start..tokens[from.len() - 1].span.end;
        let replaced = to.iter().map(|w| Token { text: (*w).to_string(), span: span.clone() });
        tokens.splice(..from.len(), replaced);
    }
    tokens
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn parse_number(s: &str) -> Option<f64> {
    // `f64::from_str` also accepts "inf" and "nan"
    if !s.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E')) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn suggest(word: &str) -> Option<String> {
    let (best, d) = VERBS
        .iter()
        .map(|v| (*v, strsim::levenshtein(word, v)))
        .min_by_key(|(_, d)| *d)?;
    (d <= 2.max(word.len() / 3) && d < word.len().max(1)).then(|| best.to_string())
}

fn bad(token: &Token, raw: &str, message: String, suggestion: Option<&str>) -> ParseError {
    ParseError {
        kind: ParseErrorKind::BadArgument,
        token: raw[token.span.clone()].to_string(),
        span: Some(token.span.clone()),
        suggestion: suggestion.map(str::to_string),
        message,
    }
}

fn no_argument(tokens: &[Token], raw: &str, usage: &str) -> ParseError {
    let last = tokens.last().expect("rules have at least one literal");
    ParseError {
        kind: ParseErrorKind::BadArgument,
        token: raw[last.span.clone()].to_string(),
        span: Some(last.span.clone()),
        suggestion: Some(usage.to_string()),
        message: format!("{:?} needs an argument: {usage}", &raw[last.span.clone()]),
    }
}

/// Parses one utterance. Total: every input yields an intent or an error.
pub fn parse(text: &str) -> Result<Intent, ParseError> {
    if text.len() > MAX_UTTERANCE_BYTES {
        return Err(ParseError {
            kind: ParseErrorKind::TooLong,
            token: String::new(),
            span: None,
            suggestion: None,
            message: format!("utterance is {} bytes; the limit is {MAX_UTTERANCE_BYTES}", text.len()),
        });
    }
    let tokens = apply_synonyms(strip_fillers(tokenize(text)));
    if tokens.is_empty() {
        return Err(ParseError {
            kind: ParseErrorKind::Empty,
            token: String::new(),
            span: None,
            suggestion: Some("status".into()),
            message: "empty command".into(),
        });
    }

    let Some((lits, verb, arg)) = RULES.iter().filter(|(lits, _, _)| starts_with(&tokens, lits)).max_by_key(|(lits, _, _)| lits.len()) else {
        let head = &tokens[0];
        let two = tokens.get(1).map(|t| format!("{} {}", head.text, t.text));
        let suggestion = two.as_deref().and_then(suggest).or_else(|| suggest(&head.text));
        let shown = &text[head.span.clone()];
        return Err(ParseError {
            kind: ParseErrorKind::UnknownVerb,
            token: shown.to_string(),
            span: Some(head.span.clone()),
            message: match &suggestion {
                Some(s) => format!("unknown command {shown:?}; did you mean {s:?}?"),
                None => format!("unknown command {shown:?}"),
            },
            suggestion,
        });
    };
    let rest = &tokens[lits.len()..];
    let mut spans = Vec::new();

    let kind = match arg {
        Arg::None => {
            if let Some(extra) = rest.first() {
                let msg = format!("unexpected {:?} after {:?}", &text[extra.span.clone()], lits.join(" "));
                return Err(bad(extra, text, msg, Some(&lits.join(" "))));
            }
            match verb {
                Verb::StartJob => IntentKind::StartJob,
                Verb::Stop => IntentKind::Stop,
                Verb::Accept => IntentKind::Accept,
                Verb::Reject => IntentKind::Reject,
                _ => IntentKind::Status,
            }
        }
        Arg::Station => {
            if rest.is_empty() {
                return Err(no_argument(&tokens[..lits.len()], text, &format!("{} <station>", lits.join(" "))));
            }
            if let Some(t) = rest.iter().find(|t| !is_identifier(&t.text)) {
                let msg = format!("{:?} is not a station name", &text[t.span.clone()]);
                return Err(bad(t, text, msg, None));
            }
            let span = rest[0].span.start..rest[rest.len() - 1].span.end;
            let name = rest.iter().map(|t| &text[t.span.clone()]).collect::<Vec<_>>().join(" ");
            spans.push(ArgSpan { name: "station".into(), span });
            let station = StationRef(name);
            match verb {
                Verb::MoveTo => IntentKind::MoveTo(station),
                Verb::Pick => IntentKind::Pick(station),
                _ => IntentKind::Place(station),
            }
        }
        Arg::Speed => {
            let rest = if rest.first().is_some_and(|t| t.text == "to") { &rest[1..] } else { rest };
            let usage = "set speed <number in (0, 1]>";
            let Some(t) = rest.first() else {
                return Err(no_argument(&tokens[..lits.len()], text, usage));
            };
            if let Some(extra) = rest.get(1) {
                let msg = format!("unexpected {:?} after the speed", &text[extra.span.clone()]);
                return Err(bad(extra, text, msg, Some(usage)));
            }
            match parse_number(&t.text) {
                Some(v) if v > 0.0 && v <= 1.0 => {
                    spans.push(ArgSpan { name: "scale".into(), span: t.span.clone() });
                    IntentKind::SetSpeed(v)
                }
                _ => {
                    let msg = format!("speed must be a number in (0, 1], got {:?}", &text[t.span.clone()]);
                    return Err(bad(t, text, msg, Some(usage)));
                }
            }
        }
        Arg::KeyValue => {
            let usage = "set <key> <number>";
            let Some(key) = rest.first() else {
                return Err(no_argument(&tokens[..lits.len()], text, usage));
            };
            if !is_identifier(&key.text) || key.text.starts_with('-') {
                let msg = format!("{:?} is not a parameter name", &text[key.span.clone()]);
                return Err(bad(key, text, msg, Some(usage)));
            }
            let rest = &rest[1..];
            let rest = if rest.first().is_some_and(|t| t.text == "to" || t.text == "=") { &rest[1..] } else { rest };
            let Some(value) = rest.first() else {
                return Err(no_argument(&tokens[..lits.len() + 1], text, usage));
            };
            if let Some(extra) = rest.get(1) {
                let msg = format!("unexpected {:?} after the value", &text[extra.span.clone()]);
                return Err(bad(extra, text, msg, Some(usage)));
            }
            let Some(v) = parse_number(&value.text) else {
                let msg = format!("{:?} is not a number", &text[value.span.clone()]);
                return Err(bad(value, text, msg, Some(usage)));
            };
            spans.push(ArgSpan { name: "key".into(), span: key.span.clone() });
            spans.push(ArgSpan { name: "value".into(), span: value.span.clone() });
            IntentKind::SetParam { key: key.text.clone(), value: v }
        }
    };
    Ok(Intent { kind, raw: text.to_string(), spans })
}
