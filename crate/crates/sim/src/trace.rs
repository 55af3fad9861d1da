//! Event trace: a running SHA-256 over every line, plus the lines when asked.

use sha2::{Digest as _, Sha256};

#[derive(Clone, Debug)]
pub struct Trace {
    hasher: Sha256,
    lines: Option<Vec<String>>,
    count: u64,
}

impl Trace {
    pub fn new(record: bool) -> Self {
        Trace {
            hasher: Sha256::new(),
            lines: record.then(Vec::new),
            count: 0,
        }
    }

    pub fn push(&mut self, line: String) {
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if let Some(lines) = &mut self.lines {
            lines.push(line);
        }
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Hex digest of all lines so far.
    pub fn digest(&self) -> String {
        self.hasher
            .clone()
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn into_lines(self) -> Option<Vec<String>> {
        self.lines
    }
}
