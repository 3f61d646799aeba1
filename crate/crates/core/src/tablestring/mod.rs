//! TableString references: `<<table(instance).column[key :: selector]>>`.
//!
//! See `docs/tablestring.md` for the grammar. Parsing is in [`parse`],
//! evaluation against tables in [`resolve`].

mod ast;
mod parse;
mod resolve;

pub use ast::{ColumnRef, Expr, Literal, Pattern, RowFilter, Selector, TableRef, TableStringAst, ValueExpr};
pub use parse::{parse_tablestring, scan_embedded, substitute, Span};
pub use resolve::{classify_pattern, resolve, ResolveContext, Resolved, TableSource};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableStringError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("misuse of reserved word at offset {offset}: {message}")]
    ReservedWordMisuse { offset: usize, message: String },
    #[error("unbalanced << >> delimiters at offset {offset}")]
    UnbalancedDelimiters { offset: usize },
    #[error("nested << at offset {offset}")]
    NestedDelimiters { offset: usize },
    #[error("table {table} has no column {column}")]
    NoSuchColumn { table: String, column: String },
    #[error("SELF.INDEX used where no current row is bound")]
    UnboundSelfIndex,
    #[error("SELF.{column} row {row} is not computed yet")]
    EmptySelfCell { column: String, row: usize },
    #[error("column {column} of dtype {dtype} cannot be range-filtered")]
    NotOrderable { column: String, dtype: String },
}

impl TableStringError {
    pub fn code(&self) -> &'static str {
        match self {
            TableStringError::Syntax { .. } => "SyntaxError",
            TableStringError::ReservedWordMisuse { .. } => "ReservedWordMisuse",
            TableStringError::UnbalancedDelimiters { .. } => "UnbalancedDelimiters",
            TableStringError::NestedDelimiters { .. } => "NestedDelimiters",
            TableStringError::NoSuchColumn { .. } => "NoSuchColumn",
            TableStringError::UnboundSelfIndex => "UnboundSelfIndex",
            TableStringError::EmptySelfCell { .. } => "EmptySelfCell",
            TableStringError::NotOrderable { .. } => "NotOrderable",
        }
    }

    /// Shift offsets by `base`, for errors found inside an embedded span.
    pub(crate) fn offset_by(self, base: usize) -> Self {
        match self {
            TableStringError::Syntax { offset, message } => TableStringError::Syntax { offset: offset + base, message },
            TableStringError::ReservedWordMisuse { offset, message } => {
                TableStringError::ReservedWordMisuse { offset: offset + base, message }
            }
            TableStringError::UnbalancedDelimiters { offset } => {
                TableStringError::UnbalancedDelimiters { offset: offset + base }
            }
            TableStringError::NestedDelimiters { offset } => {
                TableStringError::NestedDelimiters { offset: offset + base }
            }
            other => other,
        }
    }
}
