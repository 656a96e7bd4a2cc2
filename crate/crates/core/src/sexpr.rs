//! S-expression reader for the library and story file formats.
//!
//! Atoms are symbols, double-quoted strings, and 64-bit float numbers;
//! `;` starts a comment running to end of line. Every node carries the
//! source position it started at, and `Display` renders a canonical text
//! form that reads back to an equal tree.

use std::fmt;

use thiserror::Error;

/// 1-based line/column source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SexprKind {
    Symbol(String),
    Str(String),
    Number(f64),
    List(Vec<Sexpr>),
}

#[derive(Debug, Clone)]
pub struct Sexpr {
    pub kind: SexprKind,
    pub pos: Pos,
}

/// Equality ignores source positions; a reparsed canonical form compares
/// equal to the tree it was printed from.
impl PartialEq for Sexpr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl Sexpr {
    pub fn symbol(&self) -> Option<&str> {
        match &self.kind {
            SexprKind::Symbol(s) => Some(s),
            _ => None,
        }
    }

    pub fn string(&self) -> Option<&str> {
        match &self.kind {
            SexprKind::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn number(&self) -> Option<f64> {
        match &self.kind {
            SexprKind::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn list(&self) -> Option<&[Sexpr]> {
        match &self.kind {
            SexprKind::List(items) => Some(items),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("{pos}: empty input (no forms)")]
    Empty { pos: Pos },
    #[error("{pos}: unbalanced parentheses: unexpected `)`")]
    UnexpectedClose { pos: Pos },
    #[error("{pos}: unbalanced parentheses: `(` is never closed")]
    UnclosedList { pos: Pos },
    #[error("{pos}: unterminated string literal")]
    UnterminatedString { pos: Pos },
    #[error("{pos}: invalid escape `\\{ch}` in string literal")]
    BadEscape { pos: Pos, ch: char },
    #[error("{pos}: trailing content after the first form")]
    Trailing { pos: Pos },
}

impl ParseError {
    pub fn pos(&self) -> Pos {
        match self {
            ParseError::Empty { pos }
            | ParseError::UnexpectedClose { pos }
            | ParseError::UnclosedList { pos }
            | ParseError::UnterminatedString { pos }
            | ParseError::BadEscape { pos, .. }
            | ParseError::Trailing { pos } => *pos,
        }
    }
}

struct Reader<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: u32,
    col: u32,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Reader {
            chars: text.chars().peekable(),
            line: 1,
            col: 1,
        }
    }

    fn pos(&self) -> Pos {
        Pos {
            line: self.line,
            col: self.col,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn skip_trivia(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.bump();
            } else if c == ';' {
                while let Some(c) = self.bump() {
                    if c == '\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_form(&mut self) -> Result<Sexpr, ParseError> {
        self.skip_trivia();
        let pos = self.pos();
        match self.peek() {
            None => Err(ParseError::Empty { pos }),
            Some('(') => {
                self.bump();
                let mut items = Vec::new();
                loop {
                    self.skip_trivia();
                    match self.peek() {
                        None => return Err(ParseError::UnclosedList { pos }),
                        Some(')') => {
                            self.bump();
                            return Ok(Sexpr {
                                kind: SexprKind::List(items),
                                pos,
                            });
                        }
                        Some(_) => items.push(self.read_form()?),
                    }
                }
            }
            Some(')') => Err(ParseError::UnexpectedClose { pos }),
            Some('"') => self.read_string(pos),
            Some(_) => Ok(self.read_atom(pos)),
        }
    }

    fn read_string(&mut self, pos: Pos) -> Result<Sexpr, ParseError> {
        self.bump(); // opening quote
        let mut out = String::new();
        loop {
            let cpos = self.pos();
            match self.bump() {
                None => return Err(ParseError::UnterminatedString { pos }),
                Some('"') => {
                    return Ok(Sexpr {
                        kind: SexprKind::Str(out),
                        pos,
                    })
                }
                Some('\\') => match self.bump() {
                    None => return Err(ParseError::UnterminatedString { pos }),
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some(ch) => return Err(ParseError::BadEscape { pos: cpos, ch }),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn read_atom(&mut self, pos: Pos) -> Sexpr {
        let mut text = String::new();
        while let Some(c) = self.peek() {
            if c.is_whitespace() || c == '(' || c == ')' || c == '"' || c == ';' {
                break;
            }
            text.push(c);
            self.bump();
        }
        let kind = match classify_number(&text) {
            Some(n) => SexprKind::Number(n),
            None => SexprKind::Symbol(text),
        };
        Sexpr { kind, pos }
    }
}

// An atom is a number only when it looks numeric and parses to a finite
// f64; `inf`/`nan` spellings stay symbols.
fn classify_number(text: &str) -> Option<f64> {
    let first = text.chars().next()?;
    if !(first.is_ascii_digit() || first == '+' || first == '-' || first == '.') {
        return None;
    }
    match text.parse::<f64>() {
        Ok(n) if n.is_finite() => Some(n),
        _ => None,
    }
}

/// Parses exactly one form; anything but trivia after it is an error.
pub fn parse_sexpr(text: &str) -> Result<Sexpr, ParseError> {
    let mut reader = Reader::new(text);
    let form = reader.read_form()?;
    reader.skip_trivia();
    if reader.peek().is_some() {
        return Err(ParseError::Trailing { pos: reader.pos() });
    }
    Ok(form)
}

fn fmt_number(f: &mut fmt::Formatter<'_>, x: f64) -> fmt::Result {
    if x == 0.0 {
        write!(f, "0")
    } else if x.abs() >= 1e-3 && x.abs() < 1e7 {
        write!(f, "{x}")
    } else {
        write!(f, "{x:e}")
    }
}

impl fmt::Display for Sexpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            SexprKind::Symbol(s) => write!(f, "{s}"),
            SexprKind::Number(n) => fmt_number(f, *n),
            SexprKind::Str(s) => {
                write!(f, "\"")?;
                for c in s.chars() {
                    match c {
                        '"' => write!(f, "\\\"")?,
                        '\\' => write!(f, "\\\\")?,
                        '\n' => write!(f, "\\n")?,
                        _ => write!(f, "{c}")?,
                    }
                }
                write!(f, "\"")
            }
            SexprKind::List(items) => {
                write!(f, "(")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{item}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(s: &str) -> SexprKind {
        SexprKind::Symbol(s.to_string())
    }

    #[test]
    fn parses_flat_form() {
        let t = parse_sexpr("(hang h2)").unwrap();
        let items = t.list().unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].kind, sym("hang"));
        assert_eq!(items[1].kind, sym("h2"));
    }

    #[test]
    fn parses_empty_list() {
        let t = parse_sexpr("()").unwrap();
        assert_eq!(t.list().unwrap().len(), 0);
    }

    #[test]
    fn parses_nested_form_with_scientific_number() {
        let t = parse_sexpr("(a (b 1e-3))").unwrap();
        let items = t.list().unwrap();
        assert_eq!(items[0].kind, sym("a"));
        let inner = items[1].list().unwrap();
        assert_eq!(inner[0].kind, sym("b"));
        assert_eq!(inner[1].number().unwrap(), 0.001);
    }

    #[test]
    fn tracks_positions() {
        let t = parse_sexpr("(a\n  b)").unwrap();
        let items = t.list().unwrap();
        assert_eq!(t.pos, Pos { line: 1, col: 1 });
        assert_eq!(items[1].pos, Pos { line: 2, col: 3 });
    }

    #[test]
    fn empty_input_is_an_error() {
        match parse_sexpr("  ; just a comment\n") {
            Err(ParseError::Empty { pos }) => assert_eq!(pos.line, 2),
            other => panic!("expected Empty, got {other:?}"),
        }
    }

    #[test]
    fn unbalanced_parens_are_errors_with_positions() {
        assert!(matches!(
            parse_sexpr("(a (b)"),
            Err(ParseError::UnclosedList { pos: Pos { line: 1, col: 1 } })
        ));
        assert!(matches!(
            parse_sexpr(")"),
            Err(ParseError::UnexpectedClose { pos: Pos { line: 1, col: 1 } })
        ));
    }

    #[test]
    fn unterminated_string_is_an_error() {
        assert!(matches!(
            parse_sexpr("(\"abc)"),
            Err(ParseError::UnterminatedString { .. })
        ));
    }

    #[test]
    fn trailing_form_is_an_error() {
        assert!(matches!(parse_sexpr("(a) (b)"), Err(ParseError::Trailing { .. })));
    }

    #[test]
    fn comments_and_strings_coexist() {
        let t = parse_sexpr("(w \"a;b\") ; trailing note").unwrap();
        assert_eq!(t.list().unwrap()[1].string().unwrap(), "a;b");
    }

    #[test]
    fn inf_and_nan_spellings_stay_symbols() {
        let t = parse_sexpr("(inf nan -inf)").unwrap();
        for item in t.list().unwrap() {
            assert!(item.symbol().is_some(), "{item:?}");
        }
    }

    #[test]
    fn canonical_form_round_trips() {
        let text = "(library ; comment\n  (type rope :prior 1e-5)\n  (word \"rope\" :sense rope :p 0.9))";
        let t = parse_sexpr(text).unwrap();
        let printed = t.to_string();
        let again = parse_sexpr(&printed).unwrap();
        assert_eq!(t, again);
        // Canonical form is a fixed point.
        assert_eq!(printed, again.to_string());
    }
}
