use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TableRef {
    /// The partially built table of the current generation.
    SelfTable,
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ColumnRef {
    /// Row ordinal.
    Index,
    Named(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Literal {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
}

/// Integer range bound: a literal or `SELF.INDEX ± k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expr {
    Lit(i64),
    SelfIndex(i64),
}

impl Expr {
    pub fn eval(self, row: Option<usize>) -> Option<i64> {
        match self {
            Expr::Lit(k) => Some(k),
            Expr::SelfIndex(off) => row.map(|r| r as i64 + off),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValueExpr {
    Lit(Literal),
    SelfIndex(i64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Selector {
    Value(ValueExpr),
    /// Inclusive on both ends.
    Range(Expr, Expr),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowFilter {
    pub key: ColumnRef,
    pub selector: Selector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableStringAst {
    pub table: TableRef,
    /// Canonical instance id or external id; `None` means the latest instance.
    pub instance: Option<String>,
    pub column: Option<ColumnRef>,
    pub filter: Option<RowFilter>,
}

impl TableStringAst {
    pub fn table_name(&self) -> Option<&str> {
        match &self.table {
            TableRef::Named(n) => Some(n),
            TableRef::SelfTable => None,
        }
    }

    pub fn is_self(&self) -> bool {
        self.table == TableRef::SelfTable
    }

    pub fn uses_self_index(&self) -> bool {
        match &self.filter {
            Some(RowFilter { selector: Selector::Value(ValueExpr::SelfIndex(_)), .. }) => true,
            Some(RowFilter { selector: Selector::Range(a, b), .. }) => {
                matches!(a, Expr::SelfIndex(_)) || matches!(b, Expr::SelfIndex(_))
            }
            _ => false,
        }
    }
}

/// Transformation shapes a reference can take.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    Reduce,
    OneToOne,
    Aggregation,
    Convolution,
    Selection,
    Other,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Reduce => "reduce",
            Pattern::OneToOne => "one-to-one",
            Pattern::Aggregation => "aggregation",
            Pattern::Convolution => "convolution",
            Pattern::Selection => "selection",
            Pattern::Other => "other",
        })
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnRef::Index => f.write_str("INDEX"),
            ColumnRef::Named(n) => f.write_str(n),
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            Literal::Int(i) => write!(f, "{i}"),
            Literal::Float(x) => write!(f, "{x:?}"),
            Literal::Bool(b) => write!(f, "{b}"),
        }
    }
}

fn fmt_self_index(f: &mut fmt::Formatter<'_>, off: i64) -> fmt::Result {
    match off {
        0 => f.write_str("SELF.INDEX"),
        k if k > 0 => write!(f, "SELF.INDEX + {k}"),
        k => write!(f, "SELF.INDEX - {}", k.unsigned_abs()),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(k) => write!(f, "{k}"),
            Expr::SelfIndex(off) => fmt_self_index(f, *off),
        }
    }
}

impl fmt::Display for ValueExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueExpr::Lit(l) => write!(f, "{l}"),
            ValueExpr::SelfIndex(off) => fmt_self_index(f, *off),
        }
    }
}

impl fmt::Display for TableStringAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.table {
            TableRef::SelfTable => f.write_str("SELF")?,
            TableRef::Named(n) => f.write_str(n)?,
        }
        if let Some(i) = &self.instance {
            write!(f, "({i})")?;
        }
        if let Some(c) = &self.column {
            write!(f, ".{c}")?;
        }
        if let Some(flt) = &self.filter {
            write!(f, "[{} :: ", flt.key)?;
            match &flt.selector {
                Selector::Value(v) => write!(f, "{v}")?,
                Selector::Range(a, b) => write!(f, "{a} : {b}")?,
            }
            f.write_str("]")?;
        }
        Ok(())
    }
}
