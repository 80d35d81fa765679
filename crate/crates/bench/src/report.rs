//! Scenario output as `metric,x,y` rows.

use std::io::Write;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub metric: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioResult {
    pub rows: Vec<Row>,
}

impl ScenarioResult {
    pub fn push(&mut self, metric: &str, x: impl Into<f64>, y: impl Into<f64>) {
        self.rows.push(Row { metric: metric.to_string(), x: x.into(), y: y.into() });
    }

    /// Rows of one metric, in insertion order.
    pub fn series(&self, metric: &str) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.metric == metric).map(|r| (r.x, r.y)).collect()
    }

    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_rows() {
        let mut r = ScenarioResult::default();
        r.push("session_bytes", 16, 420);
        r.push("reconstruct_ms", 420, 0.25);
        assert_eq!(r.to_csv(), "metric,x,y\nsession_bytes,16.0,420.0\nreconstruct_ms,420.0,0.25\n");
        assert_eq!(r.series("session_bytes"), vec![(16.0, 420.0)]);
    }
}
