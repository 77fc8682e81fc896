//! Text dump of a standard-form LP in CPLEX LP format, for debugging with
//! external solvers.

use std::fmt::{Debug, Write as _};
use std::hash::Hash;

use super::StandardFormLp;

/// Replaces characters that LP-format parsers reject in names.
fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "_.[]".contains(c) { c } else { '_' })
        .collect();
    if s.starts_with(|c: char| c.is_ascii_digit() || c == '.') {
        format!("_{s}")
    } else {
        s
    }
}

fn term(out: &mut String, coef: f64, name: &str, first: bool) {
    let sign = if coef < 0.0 { "-" } else if first { "" } else { "+" };
    if sign.is_empty() {
        let _ = write!(out, " {} {name}", fmt_num(coef.abs()));
    } else {
        let _ = write!(out, " {sign} {} {name}", fmt_num(coef.abs()));
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

pub fn write_lp<C, R>(lp: &StandardFormLp<C, R>, col_name: impl Fn(&C) -> String, row_name: impl Fn(&R) -> String) -> String
where
    C: Clone + Eq + Hash + Debug,
    R: Clone + Eq + Hash + Debug,
{
    let names: Vec<String> = lp.col_index.keys().iter().map(|k| sanitize(&col_name(k))).collect();
    let mut out = String::from("\\ generated\nMinimize\n obj:");
    let mut first = true;
    for (j, &c) in lp.c.iter().enumerate() {
        if c != 0.0 {
            term(&mut out, c, &names[j], first);
            first = false;
        }
    }
    if first {
        out.push_str(" 0 ");
        out.push_str(names.first().map(String::as_str).unwrap_or("x"));
    }
    out.push_str("\nSubject To\n");
    for i in 0..lp.n_rows() {
        let mut line = format!(" {}:", sanitize(&row_name(lp.row_index.key(i))));
        let mut first = true;
        for (j, v) in lp.a.row(i) {
            term(&mut line, v, &names[j], first);
            first = false;
        }
        if first {
            continue;
        }
        let _ = writeln!(line, " >= {}", fmt_num(lp.b[i]));
        out.push_str(&line);
    }
    out.push_str("Bounds\n");
    for n in &names {
        let _ = writeln!(out, " {n} >= 0");
    }
    out.push_str("End\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_dump() {
        let lp = StandardFormLp::from_dense(vec![1.0, -2.5], &[vec![1.0, 1.0], vec![0.0, -1.0]], vec![2.0, -3.0]).unwrap();
        let s = write_lp(&lp, |j| format!("x{j}"), |i| format!("r{i}"));
        assert!(s.contains("Minimize\n obj: 1 x0 - 2.5 x1\n"));
        assert!(s.contains(" r0: 1 x0 + 1 x1 >= 2\n"));
        assert!(s.contains(" r1: - 1 x1 >= -3\n"));
        assert!(s.ends_with("Bounds\n x0 >= 0\n x1 >= 0\nEnd\n"));
    }

    #[test]
    fn names_are_sanitized() {
        assert_eq!(sanitize("cap(2030,FM02 TSA)"), "cap_2030_FM02_TSA_");
        assert_eq!(sanitize("1abc"), "_1abc");
    }
}
