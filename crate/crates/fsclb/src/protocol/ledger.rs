use serde::{Deserialize, Serialize};

/// Communication accounting: switching count and volume in scalars and bytes.
///
/// `compact_scalars` tracks FedLinUCB at the `d² + d` per-communication
/// figure as well, so both conventions can be reported side by side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub switching_count: u64,
    pub uploaded_scalars: u64,
    pub downloaded_scalars: u64,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
    pub compact_scalars: u64,
}

/// Volume of one upload/download exchange.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Exchange {
    pub up_scalars: u64,
    pub down_scalars: u64,
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub compact_scalars: u64,
}

impl CommLedger {
    pub fn record(&mut self, x: Exchange) {
        self.switching_count += 1;
        self.uploaded_scalars += x.up_scalars;
        self.downloaded_scalars += x.down_scalars;
        self.uploaded_bytes += x.up_bytes;
        self.downloaded_bytes += x.down_bytes;
        self.compact_scalars += x.compact_scalars;
    }

    /// `Com(T)` in scalars, both directions.
    pub fn total_scalars(&self) -> u64 {
        self.uploaded_scalars + self.downloaded_scalars
    }

    pub fn total_bytes(&self) -> u64 {
        self.uploaded_bytes + self.downloaded_bytes
    }
}

/// Per-communication scalar volume of FSCLB, `2ld + 2d + l + 3`.
pub fn fsclb_exchange_scalars(l: usize, d: usize) -> u64 {
    (2 * l * d + 2 * d + l + 3) as u64
}

/// Per-communication scalar volume of FedLinUCB under our both-directions
/// convention, `2d² + d + 1`.
pub fn fedlin_exchange_scalars(d: usize) -> u64 {
    (2 * d * d + d + 1) as u64
}

/// FedLinUCB per-communication volume as usually quoted, `d² + d`.
pub fn fedlin_compact_scalars(d: usize) -> u64 {
    (d * d + d) as u64
}
