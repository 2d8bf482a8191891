mod common;

use bti::pipeline::{explain, ExplainConfig, Explanation};
use bti::report::{render_report, ReportFormat};
use bti::BtiError;
use common::*;

fn sample() -> Explanation<f64> {
    let v = vocab();
    let w = desk_weights(40);
    let cfg = ExplainConfig {
        top_k: 3,
        ..ExplainConfig::default()
    };
    let p = &pairs()[0];
    explain(&tok(&p.a, &v, &w), &tok(&p.b, &v, &w), &w, &cfg).unwrap()
}

#[test]
fn json_round_trips_field_for_field() {
    let e = sample();
    let r = render_report(&e, ReportFormat::Json).unwrap();
    let back: Explanation<f64> = serde_json::from_slice(&r.payload).unwrap();
    assert_eq!(back, e);
}

#[test]
fn html_marks_each_retained_endpoint_once() {
    let e = sample();
    let html = render_report(&e, ReportFormat::Html).unwrap();
    let s = html.as_str();
    let a_part = &s[s.find("Paragraph A").unwrap()..s.find("Paragraph B").unwrap()];
    let b_part = &s[s.find("Paragraph B").unwrap()..s.find("Word pairs").unwrap()];
    let mut left: Vec<usize> = e.pairs.iter().map(|p| p.pair.i).collect();
    left.sort();
    left.dedup();
    let mut right: Vec<usize> = e.pairs.iter().map(|p| p.pair.j).collect();
    right.sort();
    right.dedup();
    assert_eq!(a_part.matches("<mark").count(), left.len());
    assert_eq!(b_part.matches("<mark").count(), right.len());
    assert!(left.len() <= e.e() && right.len() <= e.e());
    assert_eq!(s.matches("<tr><td>").count(), e.e());
}

#[test]
fn rendering_is_pure() {
    let e = sample();
    for f in [ReportFormat::Text, ReportFormat::Json, ReportFormat::Html] {
        assert_eq!(render_report(&e, f).unwrap(), render_report(&e, f).unwrap());
    }
}

#[test]
fn text_rows_follow_pair_order() {
    let e = sample();
    let text = render_report(&e, ReportFormat::Text).unwrap();
    let rows: Vec<&str> = text.as_str().lines().skip(2).collect();
    assert_eq!(rows.len(), e.e());
    for (row, p) in rows.iter().zip(&e.pairs) {
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cells[0], p.pair.word_a);
        assert_eq!(cells[5], format!("{:.4}", p.pair.score));
    }
    assert!(e.pairs.windows(2).all(|w| w[0].pair.score >= w[1].pair.score));
}

#[test]
fn format_names_and_empty_explanations() {
    assert_eq!("HTML".parse::<ReportFormat>().unwrap(), ReportFormat::Html);
    assert!(matches!("pdf".parse::<ReportFormat>(), Err(BtiError::UnknownFormat(_))));
    let mut e = sample();
    e.pairs.clear();
    assert!(matches!(render_report(&e, ReportFormat::Text), Err(BtiError::EmptyExplanation)));
}

#[test]
fn html_escapes_words() {
    let mut e = sample();
    e.paragraph_a.words[e.pairs[0].pair.i] = "<b>&".into();
    let html = render_report(&e, ReportFormat::Html).unwrap();
    assert!(html.as_str().contains("&lt;b&gt;&amp;"));
    assert!(!html.as_str().contains("<b>&"));
}
