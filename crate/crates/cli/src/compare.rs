//! Side-by-side metric tables and the assertion mini-language.
//!
//! An assertion compares two arithmetic expressions over `label.metric`
//! references:
//!
//! ```text
//! sgd.kl_grid >= 10 * sgld.kl_grid
//! abs(distill.test_loglik - sgld.test_loglik) <= 0.15
//! ```
//!
//! Operators are `+ - * /`, `abs(..)`, parentheses and numeric literals;
//! comparisons are `> >= < <= ==`.

use std::collections::BTreeMap;

use bdk_core::eval::MetricsReport;

use crate::output::fmt_f64;
use crate::CliError;

#[derive(Clone, Debug)]
pub struct Run {
    pub label: String,
    pub metrics: Vec<MetricsReport>,
}

impl Run {
    fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }
}

/// Metric names present in every run, in first-run order.
pub fn shared_metrics(runs: &[Run]) -> Vec<String> {
    let Some(first) = runs.first() else { return Vec::new() };
    first
        .metrics
        .iter()
        .map(|m| m.name.clone())
        .filter(|n| runs.iter().all(|r| r.get(n).is_some()))
        .collect()
}

/// Aligned text table plus the same content as CSV. Deltas are relative to
/// the first run.
pub fn comparison(runs: &[Run]) -> Result<(String, String), CliError> {
    if runs.len() < 2 {
        return Err(CliError::Config("compare needs at least two metric files".into()));
    }
    let shared = shared_metrics(runs);
    if shared.is_empty() {
        return Err(CliError::Config("the metric files share no metric names".into()));
    }
    let mut header = vec!["metric".to_string()];
    for (i, r) in runs.iter().enumerate() {
        header.push(r.label.clone());
        if i > 0 {
            header.push(format!("{}-{}", r.label, runs[0].label));
        }
    }
    let mut rows = vec![header];
    for name in &shared {
        let base = runs[0].get(name).unwrap_or(f64::NAN);
        let mut row = vec![name.clone()];
        for (i, r) in runs.iter().enumerate() {
            let v = r.get(name).unwrap_or(f64::NAN);
            row.push(fmt_f64(v));
            if i > 0 {
                row.push(fmt_f64(v - base));
            }
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    let mut csv = String::new();
    for r in &rows {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        text.push_str(cells.join("  ").trim_end());
        text.push('\n');
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    Ok((text, csv))
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ref(String, String),
    Ident(String),
    Op(char),
    Cmp(&'static str),
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<Tok>, String> {
    let b = src.as_bytes();
    let mut i = 0;
    let mut out = Vec::new();
    while i < b.len() {
        let c = b[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && i + 1 < b.len() && (b[i + 1] as char).is_ascii_digit()) {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                i += 1;
                if i < b.len() && (b[i] == b'-' || b[i] == b'+') {
                    i += 1;
                }
                while i < b.len() && (b[i] as char).is_ascii_digit() {
                    i += 1;
                }
            }
            let s = &src[start..i];
            out.push(Tok::Num(s.parse().map_err(|_| format!("bad number `{s}`"))?));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'-' || b[i] == b'.') {
                // labels may contain '-' (e.g. `d2-10-2`); metric names may not
                if b[i] == b'-' && (src[start..i].contains('.') || !(i + 1 < b.len() && (b[i + 1] as char).is_ascii_alphanumeric())) {
                    break;
                }
                i += 1;
            }
            let word = &src[start..i];
            match word.split_once('.') {
                Some((l, m)) if !l.is_empty() && !m.is_empty() => out.push(Tok::Ref(l.to_string(), m.to_string())),
                Some(_) => return Err(format!("bad reference `{word}`")),
                None => out.push(Tok::Ident(word.to_string())),
            }
        } else {
            let two = src.get(i..i + 2).unwrap_or("");
            let (tok, len) = match (two, c) {
                (">=", _) => (Tok::Cmp(">="), 2),
                ("<=", _) => (Tok::Cmp("<="), 2),
                ("==", _) => (Tok::Cmp("=="), 2),
                (_, '>') => (Tok::Cmp(">"), 1),
                (_, '<') => (Tok::Cmp("<"), 1),
                (_, '+' | '-' | '*' | '/') => (Tok::Op(c), 1),
                (_, '(') => (Tok::LParen, 1),
                (_, ')') => (Tok::RParen, 1),
                _ => return Err(format!("unexpected character `{c}`")),
            };
            out.push(tok);
            i += len;
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    runs: &'a BTreeMap<String, &'a Run>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<f64, String> {
        let mut v = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let r = self.term()?;
            v = if op == '+' { v + r } else { v - r };
        }
        Ok(v)
    }

    fn term(&mut self) -> Result<f64, String> {
        let mut v = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let r = self.unary()?;
            v = if op == '*' { v * r } else { v / r };
        }
        Ok(v)
    }

    fn unary(&mut self) -> Result<f64, String> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(-self.unary()?);
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<f64, String> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(v),
            Some(Tok::Ref(label, metric)) => {
                let run = self.runs.get(&label).ok_or_else(|| format!("no run labelled `{label}`"))?;
                run.get(&metric).ok_or_else(|| format!("run `{label}` has no metric `{metric}`"))
            }
            Some(Tok::Ident(f)) if f == "abs" => {
                if self.next() != Some(Tok::LParen) {
                    return Err("expected `(` after abs".into());
                }
                let v = self.expr()?;
                if self.next() != Some(Tok::RParen) {
                    return Err("expected `)`".into());
                }
                Ok(v.abs())
            }
            Some(Tok::LParen) => {
                let v = self.expr()?;
                if self.next() != Some(Tok::RParen) {
                    return Err("expected `)`".into());
                }
                Ok(v)
            }
            Some(t) => Err(format!("unexpected token {t:?}")),
            None => Err("unexpected end of expression".into()),
        }
    }
}

/// Evaluates an assertion; `Ok(detail)` if it holds, `Err(CliError::Assertion)`
/// if it does not, and a config error if it cannot be parsed or resolved.
pub fn check_assertion(expr: &str, runs: &[Run]) -> Result<String, CliError> {
    let map: BTreeMap<String, &Run> = runs.iter().map(|r| (r.label.clone(), r)).collect();
    let toks = lex(expr).map_err(|e| CliError::Config(format!("assertion `{expr}`: {e}")))?;
    let mut p = Parser { toks, pos: 0, runs: &map };
    let cfg_err = |e: String| CliError::Config(format!("assertion `{expr}`: {e}"));
    let lhs = p.expr().map_err(cfg_err)?;
    let op = match p.next() {
        Some(Tok::Cmp(op)) => op,
        _ => return Err(cfg_err("expected a comparison operator".into())),
    };
    let rhs = p.expr().map_err(cfg_err)?;
    if p.pos < p.toks.len() {
        return Err(cfg_err("trailing tokens".into()));
    }
    let holds = match op {
        ">" => lhs > rhs,
        ">=" => lhs >= rhs,
        "<" => lhs < rhs,
        "<=" => lhs <= rhs,
        _ => lhs == rhs,
    };
    let detail = format!("{expr}  [{} {op} {}]", fmt_f64(lhs), fmt_f64(rhs));
    if holds {
        Ok(detail)
    } else {
        Err(CliError::Assertion(detail))
    }
}
