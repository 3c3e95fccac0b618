//! Evaluation reports as CSV or aligned text.

use crate::error::{Result, TammError};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub mode: String,
    pub split: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: [&str; 4] = ["metric", "mode", "split", "value"];

impl Report {
    pub fn push(&mut self, metric: impl Into<String>, mode: impl Into<String>, split: impl Into<String>, value: f64) {
        self.rows.push(ReportRow {
            metric: metric.into(),
            mode: mode.into(),
            split: split.into(),
            value,
        });
    }

    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([&r.metric, &r.mode, &r.split, &r.value.to_string()])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| TammError::Numeric(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().ne(REPORT_HEADER) {
            return Err(TammError::format(0, format!("unexpected report header {header:?}")));
        }
        let mut out = Report::default();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let value = rec[3]
                .parse()
                .map_err(|_| TammError::format(line as u64 + 1, format!("bad value {:?}", &rec[3])))?;
            out.push(&rec[0], &rec[1], &rec[2], value);
        }
        Ok(out)
    }

    /// Left-aligned columns, values with 4 decimals.
    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| [r.metric.clone(), r.mode.clone(), r.split.clone(), format!("{:.4}", r.value)])
            .collect();
        let mut width = REPORT_HEADER.map(str::len);
        for c in &cells {
            for (w, s) in width.iter_mut().zip(c) {
                *w = (*w).max(s.chars().count());
            }
        }
        let line = |c: [&str; 4]| -> String {
            let parts: Vec<String> = c.iter().zip(width).map(|(s, w)| format!("{s:<w$}")).collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(REPORT_HEADER);
        out.push('\n');
        for c in &cells {
            out.push_str(&line([&c[0], &c[1], &c[2], &c[3]]));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_err(e: csv::Error) -> TammError {
    TammError::format(e.position().map_or(0, |p| p.byte()), e.to_string())
}
