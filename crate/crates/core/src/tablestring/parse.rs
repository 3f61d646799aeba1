use std::ops::Range;

use super::ast::*;
use super::TableStringError as E;

type PResult<T> = Result<T, E>;

/// Byte range of one `<<...>>` region (delimiters included) and its parse.
pub type Span = (Range<usize>, TableStringAst);

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek_at(&self, n: usize) -> Option<char> {
        self.src[self.pos..].chars().nth(n)
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn syntax<T>(&self, message: impl Into<String>) -> PResult<T> {
        Err(E::Syntax { offset: self.pos, message: message.into() })
    }

    fn reserved<T>(&self, at: usize, message: impl Into<String>) -> PResult<T> {
        Err(E::ReservedWordMisuse { offset: at, message: message.into() })
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> PResult<()> {
        if self.eat(s) {
            Ok(())
        } else {
            self.syntax(format!("expected `{s}`"))
        }
    }

    /// `[A-Za-z_][A-Za-z0-9_-]*`, greedy.
    fn ident(&mut self) -> Option<&'a str> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.pos += 1,
            _ => return None,
        }
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                self.pos += 1;
            } else {
                break;
            }
        }
        Some(&self.src[start..self.pos])
    }

    fn reference(&mut self) -> PResult<TableStringAst> {
        self.skip_ws();
        let at = self.pos;
        let Some(name) = self.ident() else { return self.syntax("expected a table name") };
        let table = match name {
            "SELF" => TableRef::SelfTable,
            "INDEX" => return self.reserved(at, "INDEX is not a table"),
            n => TableRef::Named(n.to_string()),
        };
        let mut instance = None;
        if self.peek() == Some('(') {
            if table == TableRef::SelfTable {
                return self.reserved(self.pos, "SELF takes no instance qualifier");
            }
            self.pos += 1;
            let start = self.pos;
            while let Some(c) = self.peek() {
                if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') {
                    self.pos += 1;
                } else {
                    break;
                }
            }
            if self.pos == start {
                return self.syntax("expected an instance id");
            }
            instance = Some(self.src[start..self.pos].to_string());
            self.expect(")")?;
        }
        let mut column = None;
        if self.eat(".") {
            let at = self.pos;
            column = Some(match self.ident() {
                Some("INDEX") => ColumnRef::Index,
                Some("SELF") => return self.reserved(at, "SELF is not a column"),
                Some(c) => ColumnRef::Named(c.to_string()),
                None => return self.syntax("expected a column name"),
            });
        }
        if table == TableRef::SelfTable && column.is_none() {
            return self.reserved(at, "SELF must name a column");
        }
        let mut filter = None;
        if self.eat("[") {
            filter = Some(self.filter()?);
            self.skip_ws();
            self.expect("]")?;
        }
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.syntax(format!("unexpected `{}`", self.rest()));
        }
        Ok(TableStringAst { table, instance, column, filter })
    }

    fn filter(&mut self) -> PResult<RowFilter> {
        self.skip_ws();
        let at = self.pos;
        let key = match self.ident() {
            Some("INDEX") => ColumnRef::Index,
            Some("SELF") => return self.reserved(at, "SELF cannot be a filter key"),
            Some(k) => ColumnRef::Named(k.to_string()),
            None => return self.syntax("expected a filter key"),
        };
        self.skip_ws();
        self.expect("::")?;
        self.skip_ws();
        let first_at = self.pos;
        let first = self.operand()?;
        self.skip_ws();
        if self.peek() == Some(':') && self.peek_at(1) != Some(':') {
            self.pos += 1;
            self.skip_ws();
            let second_at = self.pos;
            let second = self.operand()?;
            let lo = as_expr(first).ok_or(E::Syntax {
                offset: first_at,
                message: "range bounds must be integers or SELF.INDEX expressions".into(),
            })?;
            let hi = as_expr(second).ok_or(E::Syntax {
                offset: second_at,
                message: "range bounds must be integers or SELF.INDEX expressions".into(),
            })?;
            return Ok(RowFilter { key, selector: Selector::Range(lo, hi) });
        }
        Ok(RowFilter { key, selector: Selector::Value(first) })
    }

    fn operand(&mut self) -> PResult<ValueExpr> {
        match self.peek() {
            Some('"') => Ok(ValueExpr::Lit(Literal::Str(self.string()?))),
            Some(c) if c.is_ascii_digit() => self.number(),
            Some('-') if self.peek_at(1).is_some_and(|c| c.is_ascii_digit()) => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let at = self.pos;
                match self.ident() {
                    Some("true") => Ok(ValueExpr::Lit(Literal::Bool(true))),
                    Some("false") => Ok(ValueExpr::Lit(Literal::Bool(false))),
                    Some("SELF") => {
                        if !self.eat(".") {
                            return self.syntax("expected `.INDEX` after SELF");
                        }
                        let col_at = self.pos;
                        match self.ident() {
                            Some("INDEX") => {}
                            Some(other) => {
                                return self.reserved(
                                    col_at,
                                    format!("only SELF.INDEX may appear in a filter, found SELF.{other} (write `SELF.INDEX - k` with spaces)"),
                                )
                            }
                            None => return self.syntax("expected INDEX"),
                        }
                        let save = self.pos;
                        self.skip_ws();
                        let sign = match self.peek() {
                            Some('+') => 1,
                            Some('-') => -1,
                            _ => {
                                self.pos = save;
                                return Ok(ValueExpr::SelfIndex(0));
                            }
                        };
                        self.pos += 1;
                        self.skip_ws();
                        let k = self.unsigned()?;
                        Ok(ValueExpr::SelfIndex(sign * k))
                    }
                    Some("INDEX") => self.reserved(at, "INDEX is not a value; use SELF.INDEX"),
                    Some(w) => Err(E::Syntax { offset: at, message: format!("bare word `{w}`; quote string values") }),
                    None => unreachable!("peeked an identifier start"),
                }
            }
            _ => self.syntax("expected a value"),
        }
    }

    fn unsigned(&mut self) -> PResult<i64> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.syntax("expected an integer");
        }
        self.src[start..self.pos].parse().or_else(|_| self.syntax("integer out of range"))
    }

    fn number(&mut self) -> PResult<ValueExpr> {
        let start = self.pos;
        self.eat("-");
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some('.') && self.peek_at(1).is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            let text = &self.src[start..self.pos];
            return text.parse().map(|x| ValueExpr::Lit(Literal::Float(x))).or_else(|_| self.syntax("bad float"));
        }
        let text = &self.src[start..self.pos];
        text.parse().map(|i| ValueExpr::Lit(Literal::Int(i))).or_else(|_| self.syntax("integer out of range"))
    }

    fn string(&mut self) -> PResult<String> {
        self.expect("\"")?;
        let mut out = String::new();
        loop {
            match self.peek() {
                None => return self.syntax("unterminated string"),
                Some('"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some('\\') => {
                    self.pos += 1;
                    match self.peek() {
                        Some(c @ ('"' | '\\')) => {
                            out.push(c);
                            self.pos += 1;
                        }
                        _ => return self.syntax("bad escape in string"),
                    }
                }
                Some(c) => {
                    out.push(c);
                    self.pos += c.len_utf8();
                }
            }
        }
    }
}

fn as_expr(v: ValueExpr) -> Option<Expr> {
    match v {
        ValueExpr::Lit(Literal::Int(k)) => Some(Expr::Lit(k)),
        ValueExpr::SelfIndex(off) => Some(Expr::SelfIndex(off)),
        _ => None,
    }
}

/// Parse the text between `<<` and `>>`.
pub fn parse_tablestring(text: &str) -> Result<TableStringAst, E> {
    Parser { src: text, pos: 0 }.reference()
}

/// Find and parse every `<<...>>` region in `text`, in order.
pub fn scan_embedded(text: &str) -> Result<Vec<Span>, E> {
    let mut spans = Vec::new();
    let mut pos = 0;
    loop {
        let open = text[pos..].find("<<").map(|i| i + pos);
        let close = text[pos..].find(">>").map(|i| i + pos);
        match (open, close) {
            (None, None) => return Ok(spans),
            (None, Some(c)) => return Err(E::UnbalancedDelimiters { offset: c }),
            (Some(o), Some(c)) if c < o => return Err(E::UnbalancedDelimiters { offset: c }),
            (Some(o), _) => {
                let inner_start = o + 2;
                let Some(c) = text[inner_start..].find(">>").map(|i| i + inner_start) else {
                    return Err(E::UnbalancedDelimiters { offset: o });
                };
                if let Some(n) = text[inner_start..c].find("<<") {
                    return Err(E::NestedDelimiters { offset: inner_start + n });
                }
                let ast = parse_tablestring(&text[inner_start..c]).map_err(|e| e.offset_by(inner_start))?;
                spans.push((o..c + 2, ast));
                pos = c + 2;
            }
        }
    }
}

/// Replace each span with `render(ast)`, leaving all other bytes untouched.
pub fn substitute<Err>(
    text: &str,
    spans: &[Span],
    mut render: impl FnMut(&TableStringAst) -> Result<String, Err>,
) -> Result<String, Err> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (range, ast) in spans {
        out.push_str(&text[last..range.start]);
        out.push_str(&render(ast)?);
        last = range.end;
    }
    out.push_str(&text[last..]);
    Ok(out)
}
