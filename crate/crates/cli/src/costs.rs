//! Plain-text cost matrices for `sinkhorn-bench`.

use itc_core::ItcError;
use ndarray::Array2;

/// Parses `n m` followed by `n` rows of `m` whitespace-separated reals.
/// `inf` marks a forbidden pair.
pub fn parse_costs(text: &str) -> Result<Array2<f64>, ItcError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let bad = |msg: String| ItcError::Config(format!("cost file: {msg}"));
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(format!("bad dimension {t:?}"))))
        .collect::<Result<_, _>>()?;
    let &[n, m] = dims.as_slice() else {
        return Err(bad(format!("expected `n m`, got {header:?}")));
    };
    let mut values = Vec::with_capacity(n * m);
    for r in 0..n {
        let line = lines.next().ok_or_else(|| bad(format!("missing row {r}")))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("row {r}: bad value {t:?}"))))
            .collect::<Result<_, _>>()?;
        if row.len() != m {
            return Err(bad(format!("row {r} has {} values, expected {m}", row.len())));
        }
        values.extend(row);
    }
    if lines.next().is_some() {
        return Err(bad(format!("more than {n} rows")));
    }
    Array2::from_shape_vec((n, m), values).map_err(|e| bad(e.to_string()))
}

/// One row per line, 9 decimal digits.
pub fn format_plan(plan: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in plan.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}
