use std::sync::Arc;

use serde_json::Value as Json;

use super::ast::*;
use super::TableStringError as E;
use crate::table::{Cell, ColumnTable, Dtype};

/// What a reference evaluates to.
#[derive(Clone, Debug, PartialEq)]
pub enum Resolved {
    Table(ColumnTable),
    Vector(Vec<Cell>),
    Scalar(Cell),
}

impl Resolved {
    pub fn to_json(&self) -> Json {
        match self {
            Resolved::Table(t) => t.to_json(),
            Resolved::Vector(v) => Json::Array(v.iter().map(Cell::to_json).collect()),
            Resolved::Scalar(c) => c.to_json(),
        }
    }

    /// Text used when the reference is embedded in a longer string.
    pub fn render(&self) -> String {
        match self {
            Resolved::Scalar(c) => c.render(),
            other => other.to_json().to_string(),
        }
    }

    /// Number of rows (1 for a scalar).
    pub fn len(&self) -> usize {
        match self {
            Resolved::Table(t) => t.nrows(),
            Resolved::Vector(v) => v.len(),
            Resolved::Scalar(_) => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Supplies materialized tables for named references. Implementations pin
/// `LATEST` to a concrete instance.
pub trait TableSource {
    fn load(&self, table: &str, instance: Option<&str>) -> crate::Result<Arc<ColumnTable>>;
}

pub struct ResolveContext<'a> {
    pub source: &'a dyn TableSource,
    /// The partial table of the current generation.
    pub self_table: Option<&'a ColumnTable>,
    /// Current row ordinal (`SELF.INDEX`).
    pub row: Option<usize>,
}

pub fn classify_pattern(ast: &TableStringAst) -> Pattern {
    let Some(filter) = &ast.filter else { return Pattern::Reduce };
    match (&filter.key, &filter.selector) {
        (ColumnRef::Index, Selector::Value(ValueExpr::SelfIndex(0))) => Pattern::OneToOne,
        (ColumnRef::Index, Selector::Range(Expr::Lit(0), Expr::SelfIndex(0))) => Pattern::Aggregation,
        (ColumnRef::Index, Selector::Range(Expr::SelfIndex(_), Expr::SelfIndex(_))) => Pattern::Convolution,
        (ColumnRef::Named(_), Selector::Value(ValueExpr::Lit(_))) => Pattern::Selection,
        _ => Pattern::Other,
    }
}

fn literal_matches(lit: &Literal, cell: &Cell) -> bool {
    match (lit, cell) {
        (Literal::Str(a), Cell::Str(b) | Cell::Artifact(b)) => a == b,
        (Literal::Int(a), Cell::Int(b)) => a == b,
        (Literal::Int(a), Cell::Float(b)) => (*a as f64) == *b,
        (Literal::Float(a), Cell::Float(b)) => a == b,
        (Literal::Float(a), Cell::Int(b)) => *a == (*b as f64),
        (Literal::Bool(a), Cell::Bool(b)) => a == b,
        _ => false,
    }
}

fn numeric(cell: &Cell) -> Option<f64> {
    match cell {
        Cell::Int(i) => Some(*i as f64),
        Cell::Float(x) => Some(*x),
        _ => None,
    }
}

fn table_label(ast: &TableStringAst) -> String {
    ast.table_name().unwrap_or("SELF").to_string()
}

fn selected_rows(ast: &TableStringAst, table: &ColumnTable, row: Option<usize>) -> Result<Vec<usize>, E> {
    let n = table.nrows() as i64;
    let Some(filter) = &ast.filter else { return Ok((0..table.nrows()).collect()) };
    let bound = |e: Expr| e.eval(row).ok_or(E::UnboundSelfIndex);
    match (&filter.key, &filter.selector) {
        (ColumnRef::Index, Selector::Value(v)) => {
            let k = match v {
                ValueExpr::SelfIndex(off) => bound(Expr::SelfIndex(*off))?,
                ValueExpr::Lit(Literal::Int(k)) => *k,
                ValueExpr::Lit(_) => return Ok(Vec::new()),
            };
            Ok(if (0..n).contains(&k) { vec![k as usize] } else { Vec::new() })
        }
        (ColumnRef::Index, Selector::Range(lo, hi)) => {
            let lo = bound(*lo)?.max(0);
            let hi = bound(*hi)?.min(n - 1);
            Ok(if lo <= hi { (lo as usize..=hi as usize).collect() } else { Vec::new() })
        }
        (ColumnRef::Named(key), sel) => {
            let col =
                table.column(key).ok_or_else(|| E::NoSuchColumn { table: table_label(ast), column: key.clone() })?;
            match sel {
                Selector::Value(v) => {
                    let lit = match v {
                        ValueExpr::Lit(l) => l.clone(),
                        ValueExpr::SelfIndex(off) => Literal::Int(bound(Expr::SelfIndex(*off))?),
                    };
                    Ok(col.cells.iter().enumerate().filter(|(_, c)| literal_matches(&lit, c)).map(|(i, _)| i).collect())
                }
                Selector::Range(lo, hi) => {
                    if !matches!(col.dtype, Dtype::Int | Dtype::Float) {
                        return Err(E::NotOrderable { column: key.clone(), dtype: col.dtype.to_string() });
                    }
                    let (lo, hi) = (bound(*lo)? as f64, bound(*hi)? as f64);
                    Ok(col
                        .cells
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| numeric(c).is_some_and(|x| lo <= x && x <= hi))
                        .map(|(i, _)| i)
                        .collect())
                }
            }
        }
    }
}

/// Evaluate `ast`. Shapes: no column gives a table; a column gives a vector,
/// or a scalar when the filter is a point lookup on `INDEX`.
pub fn resolve(ast: &TableStringAst, ctx: &ResolveContext<'_>) -> crate::Result<Resolved> {
    let loaded;
    let table: &ColumnTable = match &ast.table {
        TableRef::SelfTable => ctx
            .self_table
            .ok_or_else(|| crate::Error::InvalidArgument("SELF referenced outside a generation".into()))?,
        TableRef::Named(name) => {
            loaded = ctx.source.load(name, ast.instance.as_deref())?;
            &loaded
        }
    };
    let rows = selected_rows(ast, table, ctx.row)?;
    let Some(column) = &ast.column else {
        return Ok(Resolved::Table(table.select_rows(&rows)));
    };
    let cells: Vec<Cell> = match column {
        ColumnRef::Index => rows.iter().map(|&r| Cell::Int(r as i64)).collect(),
        ColumnRef::Named(c) => {
            let col = table.column(c).ok_or_else(|| E::NoSuchColumn { table: table_label(ast), column: c.clone() })?;
            if ast.is_self() {
                if let Some(&r) = rows.iter().find(|&&r| col.cells[r].is_empty()) {
                    return Err(E::EmptySelfCell { column: c.clone(), row: r }.into());
                }
            }
            rows.iter().map(|&r| col.cells[r].clone()).collect()
        }
    };
    let point = matches!(&ast.filter, Some(RowFilter { key: ColumnRef::Index, selector: Selector::Value(_) }));
    if point {
        Ok(Resolved::Scalar(cells.into_iter().next().unwrap_or(Cell::Empty)))
    } else {
        Ok(Resolved::Vector(cells))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tablestring::parse_tablestring;

    struct One(Arc<ColumnTable>);

    impl TableSource for One {
        fn load(&self, table: &str, _: Option<&str>) -> crate::Result<Arc<ColumnTable>> {
            if table == "t" {
                Ok(self.0.clone())
            } else {
                Err(crate::Error::NoSuchTable(table.into()))
            }
        }
    }

    fn ten_rows() -> ColumnTable {
        let mut t = ColumnTable::new(&[("id".into(), Dtype::Int)]);
        t.add_column("colA", Dtype::String).unwrap();
        t.add_column("fruit", Dtype::String).unwrap();
        for i in 0..10 {
            t.push_row(vec![Cell::Int(i)]).unwrap();
            t.set(i as usize, "colA", Cell::Str(format!("x{i}"))).unwrap();
            let f = if i % 3 == 0 { "apples" } else { "pears" };
            t.set(i as usize, "fruit", Cell::Str(f.into())).unwrap();
        }
        t
    }

    fn eval(text: &str, row: Option<usize>) -> crate::Result<Resolved> {
        let src = One(Arc::new(ten_rows()));
        let ast = parse_tablestring(text).unwrap();
        resolve(&ast, &ResolveContext { source: &src, self_table: None, row })
    }

    fn strs(v: &[&str]) -> Resolved {
        Resolved::Vector(v.iter().map(|s| Cell::Str(s.to_string())).collect())
    }

    #[test]
    fn reduce_returns_the_whole_column() {
        assert_eq!(eval("t.colA", None).unwrap().len(), 10);
        assert_eq!(eval("t", None).unwrap().len(), 10);
    }

    #[test]
    fn convolution_is_inclusive() {
        let r = eval("t.colA[INDEX :: SELF.INDEX - 5 : SELF.INDEX]", Some(7)).unwrap();
        assert_eq!(r, strs(&["x2", "x3", "x4", "x5", "x6", "x7"]));
    }

    #[test]
    fn ranges_clamp_at_edges() {
        let r = eval("t.colA[INDEX :: SELF.INDEX - 5 : SELF.INDEX]", Some(2)).unwrap();
        assert_eq!(r, strs(&["x0", "x1", "x2"]));
        let r = eval("t.colA[INDEX :: 8 : 40]", None).unwrap();
        assert_eq!(r, strs(&["x8", "x9"]));
        assert_eq!(eval("t.colA[INDEX :: 5 : 3]", None).unwrap(), strs(&[]));
    }

    #[test]
    fn one_to_one_is_a_scalar() {
        assert_eq!(eval("t.colA[INDEX :: SELF.INDEX]", Some(4)).unwrap(), Resolved::Scalar(Cell::Str("x4".into())));
        assert_eq!(eval("t.colA[INDEX :: 99]", None).unwrap(), Resolved::Scalar(Cell::Empty));
    }

    #[test]
    fn selection_filters_by_value() {
        let r = eval(r#"t.colA[fruit :: "apples"]"#, None).unwrap();
        assert_eq!(r, strs(&["x0", "x3", "x6", "x9"]));
        let r = eval("t.colA[id :: 2 : 4]", None).unwrap();
        assert_eq!(r, strs(&["x2", "x3", "x4"]));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            eval("t.colA[INDEX :: SELF.INDEX]", None),
            Err(crate::Error::TableString(E::UnboundSelfIndex))
        ));
        assert!(matches!(eval("t.nope", None), Err(crate::Error::TableString(E::NoSuchColumn { .. }))));
        assert!(matches!(eval("t.colA[fruit :: 1 : 2]", None), Err(crate::Error::TableString(E::NotOrderable { .. }))));
        assert!(matches!(eval("ghost", None), Err(crate::Error::NoSuchTable(_))));
    }

    #[test]
    fn self_cells_must_be_computed() {
        let mut t = ten_rows();
        t.set(3, "colA", Cell::Empty).unwrap();
        let src = One(Arc::new(ten_rows()));
        let ctx = ResolveContext { source: &src, self_table: Some(&t), row: Some(3) };
        let ok = resolve(&parse_tablestring("SELF.colA[INDEX :: SELF.INDEX - 1]").unwrap(), &ctx).unwrap();
        assert_eq!(ok, Resolved::Scalar(Cell::Str("x2".into())));
        let err = resolve(&parse_tablestring("SELF.colA[INDEX :: 0 : SELF.INDEX]").unwrap(), &ctx).unwrap_err();
        assert!(matches!(err, crate::Error::TableString(E::EmptySelfCell { row: 3, .. })));
    }

    #[test]
    fn classification() {
        let p = |s: &str| classify_pattern(&parse_tablestring(s).unwrap());
        assert_eq!(p("t.a"), Pattern::Reduce);
        assert_eq!(p("t.a[INDEX :: SELF.INDEX]"), Pattern::OneToOne);
        assert_eq!(p("t.a[INDEX :: 0 : SELF.INDEX]"), Pattern::Aggregation);
        assert_eq!(p("t.a[INDEX :: SELF.INDEX - 5 : SELF.INDEX]"), Pattern::Convolution);
        assert_eq!(p(r#"t.a[FRUIT_COLUMN :: "apples"]"#), Pattern::Selection);
        assert_eq!(p("t.a[INDEX :: 3]"), Pattern::Other);
    }
}
