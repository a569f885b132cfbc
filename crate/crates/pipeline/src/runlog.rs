use std::fmt::Display;

/// Append-only structured log: one `stage=<s> event=<e> key=value ...` line
/// per entry. Values containing spaces are quoted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, stage: &str, event: &str, fields: &[(&str, &dyn Display)]) {
        let mut line = format!("stage={stage} event={event}");
        for (k, v) in fields {
            let v = v.to_string();
            if v.contains(char::is_whitespace) || v.is_empty() {
                line.push_str(&format!(" {k}={v:?}"));
            } else {
                line.push_str(&format!(" {k}={v}"));
            }
        }
        self.lines.push(line);
    }

    pub fn note(&mut self, stage: &str, message: &str) {
        self.record(stage, "note", &[("msg", &message)]);
    }

    pub fn extend(&mut self, other: RunLog) {
        self.lines.extend(other.lines);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotes_values_with_spaces() {
        let mut log = RunLog::new();
        log.record("phase1", "rank", &[("r", &2), ("why", &"two dims")]);
        assert_eq!(log.lines()[0], "stage=phase1 event=rank r=2 why=\"two dims\"");
    }
}
