//! Optional CSV traces, buffered in memory and written out by the harness.

use std::fmt::Write as _;

pub const MAC_HEADER: &str = "tick,node,event,stage,counter,ptx_dbm,verdict";
pub const KB_HEADER: &str = "tick,node,ewma,slot_util,n_active,ptx";
pub const GCP_HEADER: &str = "tick,origin,receiver,issued_at,heard,tx_power_dbm,outcome";

#[derive(Debug, Clone, Default)]
pub struct CsvTrace {
    buf: String,
}

impl CsvTrace {
    pub fn new(header: &str) -> CsvTrace {
        let mut buf = String::with_capacity(1 << 16);
        buf.push_str(header);
        buf.push('\n');
        CsvTrace { buf }
    }

    pub fn row(&mut self, fields: std::fmt::Arguments<'_>) {
        let _ = self.buf.write_fmt(fields);
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn into_string(self) -> String {
        self.buf
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceOptions {
    pub mac: bool,
    pub kb: bool,
    pub gcp: bool,
    pub events: bool,
}

/// Trace buffers produced by one run.
#[derive(Debug, Clone, Default)]
pub struct Traces {
    pub mac: Option<CsvTrace>,
    pub kb: Option<CsvTrace>,
    pub gcp: Option<CsvTrace>,
    /// Tab-separated kernel event log.
    pub events: Option<Vec<u8>>,
}

impl Traces {
    pub fn new(opts: TraceOptions) -> Traces {
        Traces {
            mac: opts.mac.then(|| CsvTrace::new(MAC_HEADER)),
            kb: opts.kb.then(|| CsvTrace::new(KB_HEADER)),
            gcp: opts.gcp.then(|| CsvTrace::new(GCP_HEADER)),
            events: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_header() {
        let mut t = CsvTrace::new(MAC_HEADER);
        t.row(format_args!("{},{},{}", 1, 2, "x"));
        assert_eq!(t.as_str(), format!("{MAC_HEADER}\n1,2,x\n"));
    }
}
