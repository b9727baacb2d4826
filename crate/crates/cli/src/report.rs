//! Grade reports: one row per graded sheet, as CSV or XML.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image: String,
    pub grade: f64,
}

/// At most two decimals with trailing zeros (and a bare point) removed.
pub fn format_grade(grade: f64) -> String {
    let s = format!("{grade:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `image,grade` header, LF line endings.
pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("image,grade\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", csv_field(&r.image), format_grade(r.grade));
    }
    s
}

/// Inverse of [`to_csv`]; used to read ground-truth grade files.
pub fn from_csv(text: &str) -> Result<Vec<ReportRow>, String> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| e.to_string())?;
    if headers.iter().collect::<Vec<_>>() != ["image", "grade"] {
        return Err(format!("expected header `image,grade`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")));
    }
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| e.to_string())?;
            let grade = rec[1]
                .parse()
                .map_err(|_| format!("line {}: bad grade `{}`", i + 2, &rec[1]))?;
            Ok(ReportRow {
                image: rec[0].to_string(),
                grade,
            })
        })
        .collect()
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// `<report>` root with one `<sheet image=… grade=…/>` per row.
pub fn to_xml(rows: &[ReportRow]) -> String {
    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<report>\n");
    for r in rows {
        let _ = writeln!(
            s,
            "  <sheet image=\"{}\" grade=\"{}\"/>",
            xml_escape(&r.image),
            format_grade(r.grade)
        );
    }
    s.push_str("</report>\n");
    s
}
