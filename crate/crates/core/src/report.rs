//! Text, JSON and HTML renderings of an explanation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BtiError, Result};
use crate::pipeline::Explanation;
use crate::scalar::Scalar;
use crate::tokenizer::WordLevelView;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Json,
    Html,
}

impl FromStr for ReportFormat {
    type Err = BtiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "html" => Ok(ReportFormat::Html),
            _ => Err(BtiError::UnknownFormat(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedReport {
    pub format: ReportFormat,
    pub payload: Vec<u8>,
}

impl RenderedReport {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.payload).expect("reports are UTF-8")
    }
}

pub fn render_report<T: Scalar>(e: &Explanation<T>, format: ReportFormat) -> Result<RenderedReport> {
    if e.pairs.is_empty() {
        return Err(BtiError::EmptyExplanation);
    }
    let text = match format {
        ReportFormat::Text => render_text(e),
        ReportFormat::Json => serde_json::to_string_pretty(e)? + "\n",
        ReportFormat::Html => render_html(e),
    };
    Ok(RenderedReport {
        format,
        payload: text.into_bytes(),
    })
}

fn render_text<T: Scalar>(e: &Explanation<T>) -> String {
    let header = ["word_1", "word_2", "s1", "s2", "c", "U", "cluster"];
    let rows: Vec<[String; 7]> = e
        .pairs
        .iter()
        .map(|p| {
            let q = &p.pair;
            [
                q.word_a.clone(),
                q.word_b.clone(),
                format!("{:.4}", q.saliency_a),
                format!("{:.4}", q.saliency_b),
                format!("{:.4}", q.cosine),
                format!("{:.4}", q.score),
                p.cluster.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[&str]| {
        let mut s = String::new();
        for (k, (c, w)) in cells.iter().zip(&widths).enumerate() {
            let pad = w - c.chars().count();
            // words left-aligned, numbers right-aligned
            if k < 2 {
                s.push_str(c);
                s.extend(std::iter::repeat_n(' ', pad));
            } else {
                s.extend(std::iter::repeat_n(' ', pad));
                s.push_str(c);
            }
            if k + 1 < cells.len() {
                s.push_str("  ");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = String::new();
    let _ = writeln!(out, "method: {}  bandwidth: {:.4}  clusters: {}", e.method, e.bandwidth, e.centroids.len());
    out.push_str(&line(&header));
    for r in &rows {
        out.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn paragraph_html<T: Scalar>(view: &WordLevelView<T>, marked: &BTreeSet<usize>) -> String {
    let max = view
        .saliencies
        .iter()
        .map(|s| s.to_f64_lossy())
        .fold(0.0f64, f64::max);
    let mut out = String::from("<p class=\"paragraph\">");
    for (k, word) in view.words.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let w = escape_html(word);
        if marked.contains(&k) {
            let s = view.saliencies[k].to_f64_lossy();
            let alpha = if max > 0.0 { (s / max).clamp(0.0, 1.0) } else { 0.0 };
            let _ = write!(
                out,
                "<mark data-word=\"{k}\" style=\"background: rgba(255, 170, 0, {:.3})\">{w}</mark>",
                0.15 + 0.85 * alpha
            );
        } else {
            out.push_str(&w);
        }
    }
    out.push_str("</p>\n");
    out
}

fn render_html<T: Scalar>(e: &Explanation<T>) -> String {
    let left: BTreeSet<usize> = e.pairs.iter().map(|p| p.pair.i).collect();
    let right: BTreeSet<usize> = e.pairs.iter().map(|p| p.pair.j).collect();
    let mut out = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>word-pair explanation</title>\n\
         <style>body{font-family:sans-serif;max-width:60em;margin:2em auto}\
         table{border-collapse:collapse}td,th{padding:2px 8px;text-align:right}\
         td:nth-child(-n+2),th:nth-child(-n+2){text-align:left}</style>\n</head>\n<body>\n",
    );
    out.push_str("<h2>Paragraph A</h2>\n");
    out.push_str(&paragraph_html(&e.paragraph_a, &left));
    out.push_str("<h2>Paragraph B</h2>\n");
    out.push_str(&paragraph_html(&e.paragraph_b, &right));
    out.push_str(
        "<h2>Word pairs</h2>\n<table>\n<tr><th>word 1</th><th>word 2</th><th>s1</th><th>s2</th>\
         <th>c</th><th>U</th><th>cluster</th></tr>\n",
    );
    for p in &e.pairs {
        let q = &p.pair;
        let _ = writeln!(
            out,
            "<tr><td>{}</td><td>{}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{}</td></tr>",
            escape_html(&q.word_a),
            escape_html(&q.word_b),
            q.saliency_a,
            q.saliency_b,
            q.cosine,
            q.score,
            p.cluster
        );
    }
    out.push_str("</table>\n</body>\n</html>\n");
    out
}
