//! Tokenizer and s-expression reader.

use super::WatError;

#[derive(Debug, Clone, PartialEq)]
pub enum SExpr {
    /// Bare token: keyword, number, `$id`, or `key=value`.
    Atom { text: String, line: u32 },
    Str { text: String, line: u32 },
    /// `line` is where `(` sits, `close_line` where the matching `)` sits.
    List { items: Vec<SExpr>, line: u32, close_line: u32 },
}

impl SExpr {
    pub fn line(&self) -> u32 {
        match self {
            SExpr::Atom { line, .. } | SExpr::Str { line, .. } | SExpr::List { line, .. } => *line,
        }
    }

    pub fn atom(&self) -> Option<&str> {
        match self {
            SExpr::Atom { text, .. } => Some(text),
            _ => None,
        }
    }

    /// Head keyword of a list, e.g. `func` for `(func ...)`.
    pub fn head(&self) -> Option<&str> {
        match self {
            SExpr::List { items, .. } => items.first().and_then(SExpr::atom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open(u32),
    Close(u32),
    Atom(String, u32),
    Str(String, u32),
}

fn tokenize(src: &str) -> Result<Vec<Token>, WatError> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut line = 1u32;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\n' => {
                line += 1;
                i += 1;
            }
            b' ' | b'\t' | b'\r' => i += 1,
            b';' if bytes.get(i + 1) == Some(&b';') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'(' if bytes.get(i + 1) == Some(&b';') => {
                let start_line = line;
                let mut depth = 1;
                i += 2;
                while depth > 0 {
                    match (bytes.get(i), bytes.get(i + 1)) {
                        (None, _) => return Err(WatError::parse(start_line, "unterminated block comment")),
                        (Some(b'('), Some(b';')) => {
                            depth += 1;
                            i += 2;
                        }
                        (Some(b';'), Some(b')')) => {
                            depth -= 1;
                            i += 2;
                        }
                        (Some(b'\n'), _) => {
                            line += 1;
                            i += 1;
                        }
                        _ => i += 1,
                    }
                }
            }
            b'(' => {
                tokens.push(Token::Open(line));
                i += 1;
            }
            b')' => {
                tokens.push(Token::Close(line));
                i += 1;
            }
            b'"' => {
                let start_line = line;
                let mut text = String::new();
                i += 1;
                loop {
                    match bytes.get(i) {
                        None => return Err(WatError::parse(start_line, "unterminated string")),
                        Some(b'"') => {
                            i += 1;
                            break;
                        }
                        Some(b'\\') => {
                            let esc = bytes.get(i + 1).copied();
                            match esc {
                                Some(b'n') => text.push('\n'),
                                Some(b't') => text.push('\t'),
                                Some(b'\\') => text.push('\\'),
                                Some(b'"') => text.push('"'),
                                _ => return Err(WatError::parse(line, "unsupported string escape")),
                            }
                            i += 2;
                        }
                        Some(b'\n') => return Err(WatError::parse(line, "newline in string")),
                        Some(_) => {
                            // Copy one UTF-8 scalar.
                            let rest = &src[i..];
                            let ch = rest.chars().next().unwrap();
                            text.push(ch);
                            i += ch.len_utf8();
                        }
                    }
                }
                tokens.push(Token::Str(text, start_line));
            }
            _ => {
                let start = i;
                while i < bytes.len()
                    && !matches!(bytes[i], b' ' | b'\t' | b'\r' | b'\n' | b'(' | b')' | b'"' | b';')
                {
                    i += 1;
                }
                if start == i {
                    return Err(WatError::parse(line, format!("unexpected character {:?}", c as char)));
                }
                tokens.push(Token::Atom(src[start..i].to_string(), line));
            }
        }
    }
    Ok(tokens)
}

/// Reads every top-level s-expression in `src`.
pub fn read_all(src: &str) -> Result<Vec<SExpr>, WatError> {
    let tokens = tokenize(src)?;
    let mut stack: Vec<(Vec<SExpr>, u32)> = Vec::new();
    let mut top = Vec::new();
    for tok in tokens {
        match tok {
            Token::Open(line) => stack.push((Vec::new(), line)),
            Token::Close(close_line) => {
                let (items, line) = stack
                    .pop()
                    .ok_or_else(|| WatError::parse(close_line, "unbalanced ')'"))?;
                let list = SExpr::List { items, line, close_line };
                match stack.last_mut() {
                    Some((parent, _)) => parent.push(list),
                    None => top.push(list),
                }
            }
            Token::Atom(text, line) => push_leaf(&mut stack, &mut top, SExpr::Atom { text, line }),
            Token::Str(text, line) => push_leaf(&mut stack, &mut top, SExpr::Str { text, line }),
        }
    }
    if let Some((_, line)) = stack.last() {
        return Err(WatError::parse(*line, "unclosed '('"));
    }
    Ok(top)
}

fn push_leaf(stack: &mut [(Vec<SExpr>, u32)], top: &mut Vec<SExpr>, e: SExpr) {
    match stack.last_mut() {
        Some((parent, _)) => parent.push(e),
        None => top.push(e),
    }
}
