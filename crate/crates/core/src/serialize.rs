//! Single-step target format.
//!
//! ```text
//! [SUGG/]
//! 1. <category>: <desc>
//! 2. <category>: <desc>
//! [/SUGG]
//! [OPT/]
//! <code>
//! [/OPT]
//! ```
//!
//! The layout is frozen: `pack` emits exactly this byte sequence and strict
//! `unpack` accepts nothing else (surrounding whitespace aside). There is no
//! escaping; payloads that contain a control token are rejected at pack time.
//! Lenient parsing exists for truncated generations only.

use serde::{Deserialize, Serialize};

use crate::strategy::CategorizedStrategy;

/// The four span delimiters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlTokens {
    pub sugg_open: &'static str,
    pub sugg_close: &'static str,
    pub opt_open: &'static str,
    pub opt_close: &'static str,
}

impl ControlTokens {
    pub const STANDARD: ControlTokens = ControlTokens {
        sugg_open: "[SUGG/]",
        sugg_close: "[/SUGG]",
        opt_open: "[OPT/]",
        opt_close: "[/OPT]",
    };

    pub fn all(&self) -> [&'static str; 4] {
        [self.sugg_open, self.sugg_close, self.opt_open, self.opt_close]
    }

    /// First control token literal found inside `text`, if any.
    pub fn find_in(&self, text: &str) -> Option<&'static str> {
        self.all().into_iter().find(|t| text.contains(t))
    }
}

impl Default for ControlTokens {
    fn default() -> Self {
        Self::STANDARD
    }
}

const TOKENS: ControlTokens = ControlTokens::STANDARD;

/// One SFT record, serialized as `{instruction, input, output}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub instruction: String,
    /// The slow code.
    pub input: String,
    /// The packed target sequence.
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub strategies: Vec<CategorizedStrategy>,
    /// Absent in plan-only mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PlanOnly,
    PlanAndCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strictness {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PackError {
    #[error("at least one strategy is required")]
    EmptyPlan,
    #[error("{field} contains control token {token}")]
    UnsafePayload { field: String, token: &'static str },
    #[error(
        "strategy {index}: category {category:?} must be nonempty, untrimmed-free and contain no ':' or line break"
    )]
    MalformedCategory { index: usize, category: String },
    #[error("strategy {index}: description must be nonempty and single-line")]
    MalformedDescription { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("missing control token {0}")]
    MissingToken(&'static str),
    #[error("duplicated control token {0}")]
    DuplicateToken(&'static str),
    #[error("expected {expected} but found {found}")]
    MisorderedToken {
        expected: &'static str,
        found: &'static str,
    },
    #[error("control token {0} is not allowed in this mode")]
    UnexpectedToken(&'static str),
    #[error("unexpected text {0}")]
    UnexpectedContent(&'static str),
    #[error("strategy span must start and end with a line break")]
    MalformedPlanSpan,
    #[error("strategy span is empty")]
    EmptyStrategySpan,
    #[error("strategy line {line} is not `<n>. <category>: <desc>`: {text:?}")]
    MalformedStrategyLine { line: usize, text: String },
    #[error("strategy line {line} is numbered {found}, expected {expected}")]
    BadNumbering { line: usize, expected: usize, found: usize },
    #[error("code span must start and end with a line break")]
    MalformedCodeSpan,
}

fn check_strategy(index: usize, s: &CategorizedStrategy) -> Result<(), PackError> {
    let c = &s.category;
    if c.is_empty() || c.trim() != c || c.contains([':', '\n', '\r']) {
        return Err(PackError::MalformedCategory {
            index,
            category: c.clone(),
        });
    }
    if s.desc.trim().is_empty() || s.desc.contains(['\n', '\r']) {
        return Err(PackError::MalformedDescription { index });
    }
    for (field, text) in [("category", c), ("desc", &s.desc)] {
        if let Some(token) = TOKENS.find_in(text) {
            return Err(PackError::UnsafePayload {
                field: format!("strategy {index} {field}"),
                token,
            });
        }
    }
    Ok(())
}

/// Renders the numbered strategy lines of the plan span.
pub fn render_plan(strategies: &[CategorizedStrategy]) -> Result<String, PackError> {
    if strategies.is_empty() {
        return Err(PackError::EmptyPlan);
    }
    let mut lines = Vec::with_capacity(strategies.len());
    for (i, s) in strategies.iter().enumerate() {
        check_strategy(i + 1, s)?;
        lines.push(format!("{}. {}: {}", i + 1, s.category, s.desc));
    }
    Ok(lines.join("\n"))
}

/// Packs a plan and the optimized code into the single-step target.
pub fn pack(strategies: &[CategorizedStrategy], fast_code: &str) -> Result<String, PackError> {
    let plan = render_plan(strategies)?;
    if let Some(token) = TOKENS.find_in(fast_code) {
        return Err(PackError::UnsafePayload {
            field: "code".into(),
            token,
        });
    }
    Ok(format!(
        "{}\n{}\n{}\n{}\n{}\n{}",
        TOKENS.sugg_open, plan, TOKENS.sugg_close, TOKENS.opt_open, fast_code, TOKENS.opt_close
    ))
}

/// The plan-only prefix of a packed target: everything through `[/SUGG]`.
pub fn pack_plan(strategies: &[CategorizedStrategy]) -> Result<String, PackError> {
    let plan = render_plan(strategies)?;
    Ok(format!("{}\n{}\n{}", TOKENS.sugg_open, plan, TOKENS.sugg_close))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    SuggOpen,
    SuggClose,
    OptOpen,
    OptClose,
}

impl Tok {
    fn literal(self) -> &'static str {
        match self {
            Tok::SuggOpen => TOKENS.sugg_open,
            Tok::SuggClose => TOKENS.sugg_close,
            Tok::OptOpen => TOKENS.opt_open,
            Tok::OptClose => TOKENS.opt_close,
        }
    }
}

fn scan_tokens(text: &str) -> Vec<(usize, Tok)> {
    let mut found = Vec::new();
    for (pos, _) in text.match_indices('[') {
        let rest = &text[pos..];
        for tok in [Tok::SuggOpen, Tok::SuggClose, Tok::OptOpen, Tok::OptClose] {
            if rest.starts_with(tok.literal()) {
                found.push((pos, tok));
            }
        }
    }
    found
}

fn check_sequence(seq: &[(usize, Tok)], expected: &[Tok]) -> Result<(), ParseError> {
    let toks: Vec<Tok> = seq.iter().map(|(_, t)| *t).collect();
    for (i, &exp) in expected.iter().enumerate() {
        let Some(&found) = toks.get(i) else {
            return Err(ParseError::MissingToken(exp.literal()));
        };
        if found == exp {
            continue;
        }
        if !expected.contains(&found) {
            return Err(ParseError::UnexpectedToken(found.literal()));
        }
        if toks[..i].contains(&found) {
            return Err(ParseError::DuplicateToken(found.literal()));
        }
        if !toks.contains(&exp) {
            return Err(ParseError::MissingToken(exp.literal()));
        }
        return Err(ParseError::MisorderedToken {
            expected: exp.literal(),
            found: found.literal(),
        });
    }
    if let Some(&extra) = toks.get(expected.len()) {
        return Err(if expected.contains(&extra) {
            ParseError::DuplicateToken(extra.literal())
        } else {
            ParseError::UnexpectedToken(extra.literal())
        });
    }
    Ok(())
}

fn parse_numbered_line(line: &str) -> Option<(usize, &str, &str)> {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let number: usize = line[..digits].parse().ok()?;
    let rest = line[digits..].strip_prefix(". ")?;
    let (category, desc) = rest.split_once(": ")?;
    Some((number, category, desc))
}

fn parse_plan_span(span: &str, strictness: Strictness) -> Result<Vec<CategorizedStrategy>, ParseError> {
    let mut strategies = Vec::new();
    match strictness {
        Strictness::Strict => {
            if span == "\n\n" || span == "\n" || span.is_empty() {
                return Err(ParseError::EmptyStrategySpan);
            }
            let inner = span
                .strip_prefix('\n')
                .and_then(|s| s.strip_suffix('\n'))
                .ok_or(ParseError::MalformedPlanSpan)?;
            for (i, line) in inner.split('\n').enumerate() {
                let malformed = || ParseError::MalformedStrategyLine {
                    line: i + 1,
                    text: line.to_string(),
                };
                let (number, category, desc) = parse_numbered_line(line).ok_or_else(malformed)?;
                if category.is_empty() || category.contains(':') || desc.trim().is_empty() {
                    return Err(malformed());
                }
                if number != i + 1 {
                    return Err(ParseError::BadNumbering {
                        line: i + 1,
                        expected: i + 1,
                        found: number,
                    });
                }
                strategies.push(CategorizedStrategy {
                    category: category.to_string(),
                    desc: desc.to_string(),
                });
            }
        }
        Strictness::Lenient => {
            for (i, line) in span.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
                let malformed = || ParseError::MalformedStrategyLine {
                    line: i + 1,
                    text: line.to_string(),
                };
                let (_, category, desc) = parse_numbered_line(line).ok_or_else(malformed)?;
                let (category, desc) = (category.trim(), desc.trim());
                if category.is_empty() || desc.is_empty() {
                    return Err(malformed());
                }
                strategies.push(CategorizedStrategy {
                    category: category.to_string(),
                    desc: desc.to_string(),
                });
            }
            if strategies.is_empty() {
                return Err(ParseError::EmptyStrategySpan);
            }
        }
    }
    Ok(strategies)
}

fn parse_code_span(span: &str, strictness: Strictness) -> Result<String, ParseError> {
    match strictness {
        Strictness::Strict => {
            if span.len() < 2 {
                return Err(ParseError::MalformedCodeSpan);
            }
            span.strip_prefix('\n')
                .and_then(|s| s.strip_suffix('\n'))
                .map(str::to_string)
                .ok_or(ParseError::MalformedCodeSpan)
        }
        Strictness::Lenient => {
            let s = span
                .strip_prefix("\r\n")
                .or_else(|| span.strip_prefix('\n'))
                .unwrap_or(span);
            let s = s.strip_suffix('\n').unwrap_or(s);
            Ok(s.strip_suffix('\r').unwrap_or(s).to_string())
        }
    }
}

/// Parses a model output in the given mode. Never panics; every input
/// yields either a [`ParsedOutput`] or the first violation found.
pub fn unpack(output: &str, mode: Mode, strictness: Strictness) -> Result<ParsedOutput, ParseError> {
    use Tok::*;
    let text = output.trim();
    let mut seq = scan_tokens(text);
    let strict = strictness == Strictness::Strict;

    let expected: &[Tok] = match mode {
        Mode::PlanOnly => &[SuggOpen, SuggClose],
        Mode::PlanAndCode => &[SuggOpen, SuggClose, OptOpen, OptClose],
    };

    // Lenient: everything after the first closing delimiter of the mode is
    // trailing noise.
    let mut truncated_code = false;
    if !strict {
        let terminal = *expected.last().expect("nonempty");
        if let Some(cut) = seq.iter().position(|(_, t)| *t == terminal) {
            seq.truncate(cut + 1);
        } else if mode == Mode::PlanAndCode {
            let toks: Vec<Tok> = seq.iter().map(|(_, t)| *t).collect();
            if toks == [SuggOpen, SuggClose, OptOpen] {
                truncated_code = true;
            }
        }
    }
    if !truncated_code {
        check_sequence(&seq, expected)?;
    }

    let span_between = |a: usize, b: usize| -> &str {
        let (pa, ta) = seq[a];
        &text[pa + ta.literal().len()..seq.get(b).map_or(text.len(), |(pb, _)| *pb)]
    };

    if strict && seq[0].0 != 0 {
        return Err(ParseError::UnexpectedContent("before [SUGG/]"));
    }
    let strategies = parse_plan_span(span_between(0, 1), strictness)?;

    if mode == Mode::PlanOnly {
        let (pc, tc) = seq[1];
        if strict && !text[pc + tc.literal().len()..].trim().is_empty() {
            return Err(ParseError::UnexpectedContent("after [/SUGG]"));
        }
        return Ok(ParsedOutput { strategies, code: None });
    }

    let between = span_between(1, 2);
    if (strict && between != "\n") || (!strict && !between.trim().is_empty()) {
        return Err(ParseError::UnexpectedContent("between [/SUGG] and [OPT/]"));
    }

    let code = if truncated_code {
        let span = span_between(2, 3);
        if span.trim().is_empty() {
            return Err(ParseError::MissingToken(TOKENS.opt_close));
        }
        parse_code_span(span.trim_end(), strictness)?
    } else {
        let (pe, te) = seq[3];
        if strict && pe + te.literal().len() != text.len() {
            return Err(ParseError::UnexpectedContent("after [/OPT]"));
        }
        parse_code_span(span_between(2, 3), strictness)?
    };

    Ok(ParsedOutput {
        strategies,
        code: Some(code),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("log-probability at position {index} is {value}, expected a finite value <= 0")]
pub struct InvalidLogprob {
    pub index: usize,
    pub value: f64,
}

/// Causal LM negative log-likelihood of a target sequence, given the
/// model's log-probability for each target token.
pub fn lm_nll(target_token_logprobs: &[f64]) -> Result<f64, InvalidLogprob> {
    let mut total = 0.0;
    for (index, &value) in target_token_logprobs.iter().enumerate() {
        if !(value <= 0.0) {
            return Err(InvalidLogprob { index, value });
        }
        total -= value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cs(category: &str, desc: &str) -> CategorizedStrategy {
        CategorizedStrategy {
            category: category.into(),
            desc: desc.into(),
        }
    }

    #[test]
    fn pack_golden_layout() {
        let packed = pack(&[cs("Loop Efficiency Techniques", "hoist invariant")], "int main(){}").unwrap();
        assert_eq!(
            packed,
            "[SUGG/]\n1. Loop Efficiency Techniques: hoist invariant\n[/SUGG]\n[OPT/]\nint main(){}\n[/OPT]"
        );
    }

    #[test]
    fn pack_rejections() {
        assert_eq!(pack(&[], "x"), Err(PackError::EmptyPlan));
        assert!(matches!(
            pack(&[cs("A", "d")], "int x; // [/OPT]"),
            Err(PackError::UnsafePayload { token: "[/OPT]", .. })
        ));
        assert!(matches!(
            pack(&[cs("A", "use [SUGG/] here")], "x"),
            Err(PackError::UnsafePayload { token: "[SUGG/]", .. })
        ));
        assert!(matches!(
            pack(&[cs("A: B", "d")], "x"),
            Err(PackError::MalformedCategory { .. })
        ));
        assert!(matches!(
            pack(&[cs("A", "two\nlines")], "x"),
            Err(PackError::MalformedDescription { .. })
        ));
    }

    #[test]
    fn round_trip_two_strategies() {
        let plan = vec![
            cs(
                "Input/Output Throughput Optimization",
                "cin is unsynchronized: use scanf",
            ),
            cs("Data Structure Selection", "std::string concatenation in a loop"),
        ];
        let code = "#include <cstdio>\nint main(){ return 0; }";
        let parsed = unpack(&pack(&plan, code).unwrap(), Mode::PlanAndCode, Strictness::Strict).unwrap();
        assert_eq!(parsed.strategies, plan);
        assert_eq!(parsed.code.as_deref(), Some(code));
    }

    #[test]
    fn plan_only_stops_at_sugg_close() {
        let text = "[SUGG/]\n1. Loop Efficiency Techniques: hoist\n[/SUGG]";
        for strictness in [Strictness::Strict, Strictness::Lenient] {
            let parsed = unpack(text, Mode::PlanOnly, strictness).unwrap();
            assert_eq!(parsed.strategies.len(), 1);
            assert_eq!(parsed.code, None);
        }
    }

    #[test]
    fn lenient_salvages_truncated_code() {
        let text = "[SUGG/]\n1. A: d\n[/SUGG]\n[OPT/]\nint main() {\n  return 0;";
        assert_eq!(
            unpack(text, Mode::PlanAndCode, Strictness::Strict),
            Err(ParseError::MissingToken("[/OPT]"))
        );
        let parsed = unpack(text, Mode::PlanAndCode, Strictness::Lenient).unwrap();
        assert_eq!(parsed.code.as_deref(), Some("int main() {\n  return 0;"));

        let empty = "[SUGG/]\n1. A: d\n[/SUGG]\n[OPT/]\n";
        assert_eq!(
            unpack(empty, Mode::PlanAndCode, Strictness::Lenient),
            Err(ParseError::MissingToken("[/OPT]"))
        );
    }

    #[test]
    fn lenient_tolerates_trailing_text_and_numbering() {
        let text = "Sure!\n[SUGG/]\n 3. A: d \n\n1. B: e\n[/SUGG]\n[OPT/]\ncode\n[/OPT]\n<eos> more";
        let parsed = unpack(text, Mode::PlanAndCode, Strictness::Lenient).unwrap();
        assert_eq!(parsed.strategies, vec![cs("A", "d"), cs("B", "e")]);
        assert_eq!(parsed.code.as_deref(), Some("code"));
        assert!(unpack(text, Mode::PlanAndCode, Strictness::Strict).is_err());
    }

    #[test]
    fn strict_numbering_and_empty_span() {
        assert_eq!(
            unpack("[SUGG/]\n2. A: d\n[/SUGG]", Mode::PlanOnly, Strictness::Strict),
            Err(ParseError::BadNumbering {
                line: 1,
                expected: 1,
                found: 2
            })
        );
        assert_eq!(
            unpack("[SUGG/]\n\n[/SUGG]", Mode::PlanOnly, Strictness::Strict),
            Err(ParseError::EmptyStrategySpan)
        );
        assert_eq!(
            unpack("[SUGG/]\n[/SUGG]", Mode::PlanOnly, Strictness::Lenient),
            Err(ParseError::EmptyStrategySpan)
        );
    }

    #[test]
    fn token_violations_are_named() {
        let ok = pack(&[cs("A", "d")], "c").unwrap();
        let cases = [
            (ok.replacen("[SUGG/]", "", 1), ParseError::MissingToken("[SUGG/]")),
            (ok.replacen("[/SUGG]", "", 1), ParseError::MissingToken("[/SUGG]")),
            (ok.replacen("[OPT/]", "", 1), ParseError::MissingToken("[OPT/]")),
            (ok.replacen("[/OPT]", "", 1), ParseError::MissingToken("[/OPT]")),
            (
                ok.replacen("c\n", "c [/SUGG]\n", 1),
                ParseError::DuplicateToken("[/SUGG]"),
            ),
        ];
        for (text, expected) in cases {
            assert_eq!(
                unpack(&text, Mode::PlanAndCode, Strictness::Strict),
                Err(expected),
                "{text:?}"
            );
        }
    }

    #[test]
    fn lm_nll_values() {
        assert_eq!(lm_nll(&[-1.0, -2.0, -3.0]).unwrap(), 6.0);
        assert_eq!(lm_nll(&[]).unwrap(), 0.0);
        assert_eq!(lm_nll(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(lm_nll(&[-1.0, 0.5]), Err(InvalidLogprob { index: 1, value: 0.5 }));
        assert!(lm_nll(&[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn parse_never_panics(s in ".{0,200}", strict in any::<bool>(), plan_only in any::<bool>()) {
            let mode = if plan_only { Mode::PlanOnly } else { Mode::PlanAndCode };
            let st = if strict { Strictness::Strict } else { Strictness::Lenient };
            let _ = unpack(&s, mode, st);
        }

        #[test]
        fn parse_never_panics_on_token_soup(
            parts in prop::collection::vec(
                prop::sample::select(vec!["[SUGG/]", "[/SUGG]", "[OPT/]", "[/OPT]", "\n", "1. A: d", "x", " ", "2. ", ": "]),
                0..16,
            ),
            strict in any::<bool>(),
            plan_only in any::<bool>(),
        ) {
            let s: String = parts.concat();
            let mode = if plan_only { Mode::PlanOnly } else { Mode::PlanAndCode };
            let st = if strict { Strictness::Strict } else { Strictness::Lenient };
            let _ = unpack(&s, mode, st);
        }

        #[test]
        fn lm_nll_is_additive(a in prop::collection::vec(-50.0f64..=0.0, 0..20),
                              b in prop::collection::vec(-50.0f64..=0.0, 0..20)) {
            let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
            let lhs = lm_nll(&joined).unwrap();
            let rhs = lm_nll(&a).unwrap() + lm_nll(&b).unwrap();
            prop_assert!(lhs >= 0.0);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs));
        }
    }
}
