//! Human-readable tables on stdout plus line-delimited JSON records.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

pub const REPORT_FILE: &str = "report.jsonl";

#[derive(Debug, Default)]
pub struct Report {
    records: Vec<Value>,
}

impl Report {
    pub fn record(&mut self, kind: &str, body: impl Serialize) {
        let mut v = serde_json::to_value(body).unwrap_or(Value::Null);
        match v.as_object_mut() {
            Some(o) => {
                o.insert("kind".into(), json!(kind));
            }
            None => v = json!({ "kind": kind, "value": v }),
        }
        self.records.push(v);
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    pub fn line(&self, text: impl AsRef<str>) {
        println!("{}", text.as_ref());
    }

    pub fn table(&self, title: &str, header: &[&str], rows: &[Vec<String>]) {
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let fmt = |cells: Vec<&str>| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
        };
        println!("\n{title}");
        println!("{}", fmt(header.to_vec()));
        println!("{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        for row in rows {
            println!("{}", fmt(row.iter().map(String::as_str).collect()));
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join(REPORT_FILE))?;
        f.write_all(self.to_jsonl().as_bytes())
    }
}

pub fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}
