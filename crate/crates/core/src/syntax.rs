//! A small YAML subset reader shared by every on-disk format in this crate:
//! parameter files, machine workflow documents, workflow-kind manifests and
//! testbed machine configs.
//!
//! Supported:
//!
//! * block mappings (`key: value`, `key:` followed by an indented block)
//! * block sequences (`- item`), also at the parent key's indentation
//! * flow sequences of scalars (`[a, "b c", [1, 2]]`)
//! * plain, `"double"` (with `\n \t \" \\` escapes) and `'single'` scalars
//! * `#` comments and `---` document separators
//!
//! Not supported: anchors, tags, flow mappings, block scalars (`|`, `>`),
//! mappings nested inside sequence items. Those are rejected with a
//! [`SyntaxError`] carrying a line/column.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at {pos}: {message}")]
pub struct SyntaxError {
    pub pos: Pos,
    pub message: String,
}

impl SyntaxError {
    pub fn new(pos: Pos, message: impl Into<String>) -> Self {
        Self {
            pos,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scalar {
    pub text: String,
    pub quoted: bool,
    pub pos: Pos,
}

impl Scalar {
    /// An unquoted empty scalar stands for "no value" (`key:` with nothing after it).
    pub fn is_null(&self) -> bool {
        !self.quoted && (self.text.is_empty() || self.text == "~" || self.text == "null")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mapping {
    pub entries: Vec<(String, Pos, Node)>,
    pub pos: Pos,
}

impl Mapping {
    pub fn get(&self, key: &str) -> Option<&Node> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, _, v)| v)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Scalar(Scalar),
    Seq(Vec<Node>, Pos),
    Map(Mapping),
}

impl Node {
    pub fn pos(&self) -> Pos {
        match self {
            Node::Scalar(s) => s.pos,
            Node::Seq(_, pos) => *pos,
            Node::Map(m) => m.pos,
        }
    }

    pub fn as_scalar(&self) -> Option<&Scalar> {
        match self {
            Node::Scalar(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&Mapping> {
        match self {
            Node::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_seq(&self) -> Option<&[Node]> {
        match self {
            Node::Seq(items, _) => Some(items),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Node::Scalar(s) if s.is_null())
    }

    fn kind(&self) -> &'static str {
        match self {
            Node::Scalar(_) => "scalar",
            Node::Seq(..) => "sequence",
            Node::Map(_) => "mapping",
        }
    }

    pub fn expect_map(&self, what: &str) -> Result<&Mapping, SyntaxError> {
        self.as_map().ok_or_else(|| {
            SyntaxError::new(self.pos(), format!("{what}: expected a mapping, found a {}", self.kind()))
        })
    }

    pub fn expect_scalar(&self, what: &str) -> Result<&Scalar, SyntaxError> {
        self.as_scalar().ok_or_else(|| {
            SyntaxError::new(self.pos(), format!("{what}: expected a scalar, found a {}", self.kind()))
        })
    }
}

struct Line<'a> {
    number: usize,
    indent: usize,
    content: &'a str,
}

/// Parse a stream that may hold several `---`-separated documents.
pub fn parse_documents(text: &str) -> Result<Vec<Node>, SyntaxError> {
    let mut docs: Vec<Vec<Line<'_>>> = vec![Vec::new()];
    let mut saw_separator = false;
    for (i, raw) in text.lines().enumerate() {
        let number = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let stripped = strip_comment(raw);
        let trimmed_end = stripped.trim_end();
        if trimmed_end.trim().is_empty() {
            continue;
        }
        let indent_str: &str = &trimmed_end[..trimmed_end.len() - trimmed_end.trim_start().len()];
        if let Some(off) = indent_str.find('\t') {
            return Err(SyntaxError::new(
                Pos { line: number, col: off + 1 },
                "tab characters are not allowed in indentation",
            ));
        }
        let indent = indent_str.len();
        let content = &trimmed_end[indent..];
        if indent == 0 && content == "---" {
            saw_separator = true;
            docs.push(Vec::new());
            continue;
        }
        docs.last_mut().expect("at least one document").push(Line {
            number,
            indent,
            content,
        });
    }
    if saw_separator {
        // a leading `---` or a trailing one does not introduce an empty document
        docs.retain(|d| !d.is_empty());
    }
    docs.into_iter().map(|lines| parse_lines(&lines)).collect()
}

/// Parse a single-document stream. An empty input yields an empty mapping.
pub fn parse_document(text: &str) -> Result<Node, SyntaxError> {
    let mut docs = parse_documents(text)?;
    match docs.len() {
        0 => Ok(empty_map(Pos { line: 1, col: 1 })),
        1 => Ok(docs.pop().expect("one document")),
        _ => Err(SyntaxError::new(
            docs[1].pos(),
            "expected a single document, found several",
        )),
    }
}

fn empty_map(pos: Pos) -> Node {
    Node::Map(Mapping {
        entries: Vec::new(),
        pos,
    })
}

fn parse_lines(lines: &[Line<'_>]) -> Result<Node, SyntaxError> {
    if lines.is_empty() {
        return Ok(empty_map(Pos { line: 1, col: 1 }));
    }
    let mut parser = BlockParser { lines, idx: 0 };
    let base = lines[0].indent;
    let node = parser.block(base)?;
    if let Some(line) = lines.get(parser.idx) {
        return Err(SyntaxError::new(
            Pos { line: line.number, col: line.indent + 1 },
            "unexpected indentation",
        ));
    }
    Ok(node)
}

struct BlockParser<'a, 'b> {
    lines: &'b [Line<'a>],
    idx: usize,
}

fn is_seq_item(content: &str) -> bool {
    content == "-" || content.starts_with("- ")
}

impl BlockParser<'_, '_> {
    fn block(&mut self, indent: usize) -> Result<Node, SyntaxError> {
        let line = &self.lines[self.idx];
        if is_seq_item(line.content) {
            self.seq(indent)
        } else if split_key(line.content).is_some() {
            self.map(indent)
        } else {
            // a lone scalar document
            let pos = Pos { line: line.number, col: line.indent + 1 };
            let node = parse_inline(line.content, pos)?;
            self.idx += 1;
            Ok(node)
        }
    }

    fn map(&mut self, indent: usize) -> Result<Node, SyntaxError> {
        let first = &self.lines[self.idx];
        let mut mapping = Mapping {
            entries: Vec::new(),
            pos: Pos { line: first.number, col: first.indent + 1 },
        };
        while let Some(line) = self.lines.get(self.idx) {
            if line.indent < indent {
                break;
            }
            let pos = Pos { line: line.number, col: line.indent + 1 };
            if line.indent > indent {
                return Err(SyntaxError::new(pos, "unexpected indentation"));
            }
            if is_seq_item(line.content) {
                return Err(SyntaxError::new(pos, "sequence item where a mapping key was expected"));
            }
            let (raw_key, rest, rest_off) = split_key(line.content)
                .ok_or_else(|| SyntaxError::new(pos, "expected `key: value`"))?;
            let key = parse_key(raw_key, pos)?;
            if mapping.entries.iter().any(|(k, _, _)| *k == key) {
                return Err(SyntaxError::new(pos, format!("duplicate key `{key}`")));
            }
            self.idx += 1;
            let value = if rest.is_empty() {
                match self.lines.get(self.idx) {
                    Some(next) if next.indent > indent => self.block(next.indent)?,
                    Some(next) if next.indent == indent && is_seq_item(next.content) => {
                        self.seq(indent)?
                    }
                    _ => Node::Scalar(Scalar {
                        text: String::new(),
                        quoted: false,
                        pos,
                    }),
                }
            } else {
                let vpos = Pos { line: line.number, col: line.indent + rest_off + 1 };
                parse_inline(rest, vpos)?
            };
            mapping.entries.push((key, pos, value));
        }
        Ok(Node::Map(mapping))
    }

    fn seq(&mut self, indent: usize) -> Result<Node, SyntaxError> {
        let first = &self.lines[self.idx];
        let seq_pos = Pos { line: first.number, col: first.indent + 1 };
        let mut items = Vec::new();
        while let Some(line) = self.lines.get(self.idx) {
            if line.indent < indent || (line.indent == indent && !is_seq_item(line.content)) {
                break;
            }
            let pos = Pos { line: line.number, col: line.indent + 1 };
            if line.indent > indent {
                return Err(SyntaxError::new(pos, "unexpected indentation"));
            }
            let rest = line.content[1..].trim_start();
            let rest_off = line.content.len() - rest.len();
            self.idx += 1;
            if rest.is_empty() {
                match self.lines.get(self.idx) {
                    Some(next) if next.indent > indent => {
                        let nested = self.block(next.indent)?;
                        if nested.as_map().is_some() {
                            return Err(SyntaxError::new(
                                nested.pos(),
                                "mappings inside sequences are not supported",
                            ));
                        }
                        items.push(nested);
                    }
                    _ => items.push(Node::Scalar(Scalar {
                        text: String::new(),
                        quoted: false,
                        pos,
                    })),
                }
                continue;
            }
            if !rest.starts_with(['"', '\'', '[']) && split_key(rest).is_some() {
                return Err(SyntaxError::new(pos, "mappings inside sequences are not supported"));
            }
            let vpos = Pos { line: line.number, col: line.indent + rest_off + 1 };
            items.push(parse_inline(rest, vpos)?);
        }
        Ok(Node::Seq(items, seq_pos))
    }
}

/// Remove a trailing `# comment`, ignoring `#` inside quoted scalars.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) => {
                if q == b'"' && b == b'\\' {
                    i += 1;
                } else if b == q {
                    quote = None;
                }
            }
            None => {
                let at_token_start =
                    i == 0 || matches!(bytes[i - 1], b' ' | b'[' | b',' | b':' | b'-');
                if b == b'#' && (i == 0 || bytes[i - 1] == b' ') {
                    return &line[..i];
                }
                if (b == b'"' || b == b'\'') && at_token_start {
                    quote = Some(b);
                }
            }
        }
        i += 1;
    }
    line
}

/// Split `key: rest` at the first `:` followed by a space or end of line,
/// outside of a quoted key. Returns the key text, the trimmed rest and the
/// byte offset of the rest within `content`.
fn split_key(content: &str) -> Option<(&str, &str, usize)> {
    let bytes = content.as_bytes();
    let mut i = 0;
    if let Some(&q) = bytes.first().filter(|b| **b == b'"' || **b == b'\'') {
        i = 1;
        while i < bytes.len() {
            if q == b'"' && bytes[i] == b'\\' {
                i += 2;
                continue;
            }
            if bytes[i] == q {
                break;
            }
            i += 1;
        }
        i += 1;
    }
    while i < bytes.len() {
        if bytes[i] == b':' && (i + 1 == bytes.len() || bytes[i + 1] == b' ') {
            let key = content[..i].trim_end();
            if key.is_empty() {
                return None;
            }
            let after = &content[i + 1..];
            let rest = after.trim_start();
            let off = content.len() - rest.len();
            return Some((key, rest, off));
        }
        i += 1;
    }
    None
}

fn parse_key(raw: &str, pos: Pos) -> Result<String, SyntaxError> {
    if raw.starts_with(['"', '\'']) {
        let (scalar, used) = parse_quoted(raw, pos)?;
        if used != raw.len() {
            return Err(SyntaxError::new(pos, "trailing characters after quoted key"));
        }
        Ok(scalar.text)
    } else {
        if raw.starts_with(['[', '{', '&', '*', '!', '|', '>', '%', '@', '`']) {
            return Err(SyntaxError::new(pos, format!("unsupported key `{raw}`")));
        }
        Ok(raw.to_string())
    }
}

fn parse_inline(text: &str, pos: Pos) -> Result<Node, SyntaxError> {
    let first = text.as_bytes()[0];
    match first {
        b'[' => {
            let (node, used) = parse_flow_seq(text, pos)?;
            if !text[used..].trim().is_empty() {
                return Err(SyntaxError::new(
                    Pos { line: pos.line, col: pos.col + used },
                    "trailing characters after flow sequence",
                ));
            }
            Ok(node)
        }
        b'"' | b'\'' => {
            let (scalar, used) = parse_quoted(text, pos)?;
            if !text[used..].trim().is_empty() {
                return Err(SyntaxError::new(
                    Pos { line: pos.line, col: pos.col + used },
                    "trailing characters after quoted scalar",
                ));
            }
            Ok(Node::Scalar(scalar))
        }
        b'{' => Err(SyntaxError::new(pos, "flow mappings are not supported")),
        b'&' | b'*' | b'!' => Err(SyntaxError::new(pos, "anchors, aliases and tags are not supported")),
        b'|' | b'>' => Err(SyntaxError::new(pos, "block scalars are not supported")),
        b'%' | b'@' | b'`' => Err(SyntaxError::new(pos, format!("reserved indicator `{}`", first as char))),
        _ => Ok(Node::Scalar(Scalar {
            text: text.trim().to_string(),
            quoted: false,
            pos,
        })),
    }
}

/// Parse a quoted scalar at the start of `text`; returns it and the number
/// of bytes consumed.
fn parse_quoted(text: &str, pos: Pos) -> Result<(Scalar, usize), SyntaxError> {
    let mut chars = text.char_indices();
    let (_, quote) = chars.next().expect("non-empty quoted text");
    let mut out = String::new();
    while let Some((i, c)) = chars.next() {
        if c == quote {
            if quote == '\'' && text[i + 1..].starts_with('\'') {
                chars.next();
                out.push('\'');
                continue;
            }
            return Ok((
                Scalar {
                    text: out,
                    quoted: true,
                    pos,
                },
                i + 1,
            ));
        }
        if quote == '"' && c == '\\' {
            let (j, esc) = chars.next().ok_or_else(|| {
                SyntaxError::new(pos, "unterminated escape sequence")
            })?;
            out.push(match esc {
                'n' => '\n',
                't' => '\t',
                'r' => '\r',
                '0' => '\0',
                '"' => '"',
                '\\' => '\\',
                '/' => '/',
                other => {
                    return Err(SyntaxError::new(
                        Pos { line: pos.line, col: pos.col + j },
                        format!("unknown escape `\\{other}`"),
                    ))
                }
            });
            continue;
        }
        out.push(c);
    }
    Err(SyntaxError::new(pos, "unterminated quoted scalar"))
}

fn parse_flow_seq(text: &str, pos: Pos) -> Result<(Node, usize), SyntaxError> {
    let bytes = text.as_bytes();
    debug_assert_eq!(bytes[0], b'[');
    let mut items = Vec::new();
    let mut i = 1;
    let at = |i: usize| Pos { line: pos.line, col: pos.col + i };
    loop {
        while i < bytes.len() && bytes[i] == b' ' {
            i += 1;
        }
        if i >= bytes.len() {
            return Err(SyntaxError::new(at(i), "unterminated flow sequence"));
        }
        match bytes[i] {
            b']' if items.is_empty() => return Ok((Node::Seq(items, pos), i + 1)),
            b'[' => {
                let (node, used) = parse_flow_seq(&text[i..], at(i))?;
                items.push(node);
                i += used;
            }
            b'"' | b'\'' => {
                let (scalar, used) = parse_quoted(&text[i..], at(i))?;
                items.push(Node::Scalar(scalar));
                i += used;
            }
            b'{' => return Err(SyntaxError::new(at(i), "flow mappings are not supported")),
            b',' | b']' => return Err(SyntaxError::new(at(i), "empty flow sequence item")),
            _ => {
                let start = i;
                while i < bytes.len() && bytes[i] != b',' && bytes[i] != b']' {
                    if bytes[i] == b'[' || bytes[i] == b'{' {
                        return Err(SyntaxError::new(at(i), "unexpected bracket in plain scalar"));
                    }
                    i += 1;
                }
                items.push(Node::Scalar(Scalar {
                    text: text[start..i].trim().to_string(),
                    quoted: false,
                    pos: at(start),
                }));
            }
        }
        while i < bytes.len() && bytes[i] == b' ' {
            i += 1;
        }
        match bytes.get(i) {
            Some(b',') => i += 1,
            Some(b']') => return Ok((Node::Seq(items, pos), i + 1)),
            Some(_) => return Err(SyntaxError::new(at(i), "expected `,` or `]`")),
            None => return Err(SyntaxError::new(at(i), "unterminated flow sequence")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(node: &Node) -> &str {
        &node.as_scalar().unwrap().text
    }

    #[test]
    fn nested_maps_and_sequences() {
        let doc = parse_document(
            "id: demo # trailing comment\n\
             inputs:\n  count: int\n  names:\n    - a\n    - \"b c\"\n\
             list:\n- x\n- y\nflow: [1, 'two', [3, 4]]\n",
        )
        .unwrap();
        let map = doc.as_map().unwrap();
        assert_eq!(scalar(map.get("id").unwrap()), "demo");
        let inputs = map.get("inputs").unwrap().as_map().unwrap();
        assert_eq!(scalar(inputs.get("count").unwrap()), "int");
        let names = inputs.get("names").unwrap().as_seq().unwrap();
        assert_eq!(scalar(&names[1]), "b c");
        assert_eq!(map.get("list").unwrap().as_seq().unwrap().len(), 2);
        let flow = map.get("flow").unwrap().as_seq().unwrap();
        assert_eq!(scalar(&flow[1]), "two");
        assert_eq!(flow[2].as_seq().unwrap().len(), 2);
    }

    #[test]
    fn quoted_scalars_keep_hashes_and_escapes() {
        let doc = parse_document("a: \"x # y\\n\"\nb: 'it''s'\nc: echo {x} > out # done\n").unwrap();
        let map = doc.as_map().unwrap();
        assert_eq!(scalar(map.get("a").unwrap()), "x # y\n");
        assert_eq!(scalar(map.get("b").unwrap()), "it's");
        assert_eq!(scalar(map.get("c").unwrap()), "echo {x} > out");
    }

    #[test]
    fn multiple_documents() {
        let docs = parse_documents("---\na: 1\n---\nb: 2\n---\n").unwrap();
        assert_eq!(docs.len(), 2);
        assert!(parse_document("a: 1\n---\nb: 2\n").is_err());
        assert_eq!(parse_documents("").unwrap().len(), 1);
    }

    #[test]
    fn empty_value_is_null() {
        let doc = parse_document("a:\nb: 2\n").unwrap();
        assert!(doc.as_map().unwrap().get("a").unwrap().is_null());
    }

    #[test]
    fn errors_carry_positions() {
        let err = parse_document("a: 1\n  b: 2\n").unwrap_err();
        assert_eq!(err.pos.line, 2);
        let err = parse_document("a: [1, 2\n").unwrap_err();
        assert_eq!(err.pos.line, 1);
        assert!(parse_document("a: 1\na: 2\n").unwrap_err().message.contains("duplicate"));
        assert!(parse_document("a: {x: 1}\n").is_err());
        assert!(parse_document("a:\n\t- 1\n").is_err());
        assert!(parse_document("a:\n  - k: v\n").is_err());
        assert!(parse_document("a: \"open\n").is_err());
        assert!(parse_document("a: |\n  text\n").is_err());
    }
}
