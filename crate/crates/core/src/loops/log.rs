/// Flag bits carried on loop log records.
pub mod flags {
    pub const SATURATED: u32 = 1;
    pub const NO_CARRIER: u32 = 1 << 1;
    pub const RESET: u32 = 1 << 2;
    pub const RELOCKING: u32 = 1 << 3;
    pub const HELD: u32 = 1 << 4;
    pub const MODULATING: u32 = 1 << 5;

    const NAMES: [(u32, &str); 6] = [
        (SATURATED, "saturated"),
        (NO_CARRIER, "no_carrier"),
        (RESET, "reset"),
        (RELOCKING, "relocking"),
        (HELD, "held"),
        (MODULATING, "modulating"),
    ];

    /// `|`-separated flag names, empty when no flag is set.
    pub fn describe(bits: u32) -> String {
        NAMES
            .iter()
            .filter(|(b, _)| bits & b != 0)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// One controller tick.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopRecord {
    pub t: f64,
    pub error: f64,
    pub command: f64,
    pub flags: u32,
}

/// Time-stamped per-tick log of one loop. Ticks are kept every
/// `decimation` calls; ticks carrying a reset are always kept.
#[derive(Debug, Clone)]
pub struct LoopLog {
    pub name: String,
    pub decimation: usize,
    counter: usize,
    pub records: Vec<LoopRecord>,
}

impl LoopLog {
    pub fn new(name: &str, decimation: usize) -> Self {
        Self { name: name.to_string(), decimation: decimation.max(1), counter: 0, records: Vec::new() }
    }

    pub fn push(&mut self, t: f64, error: f64, command: f64, flags: u32) {
        let keep = self.counter % self.decimation == 0 || flags & flags::RESET != 0;
        self.counter += 1;
        if keep {
            self.records.push(LoopRecord { t, error, command, flags });
        }
    }
}
