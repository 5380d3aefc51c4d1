// SPDX-License-Identifier: Apache-2.0

//! Ground-truth consumption model.
//!
//! A region of `n` meters reports one reading per slot; over a billing period of
//! `t` slots this is an `n x t` grid of watt-hour values. The utility is allowed to
//! learn exactly two projections of that grid: the column sums (regional load per
//! slot) and the row sums (per-meter billing totals).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default per-slot ceiling: 20 kW sustained over a 15-minute slot.
pub const DEFAULT_V_MAX: u64 = 5000;
/// Default billing period: one day of 15-minute slots.
pub const DEFAULT_SLOTS_PER_PERIOD: u32 = 96;
/// Default slot length in seconds.
pub const DEFAULT_SLOT_SECS: u32 = 900;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("measurement {v} outside [0, {v_max}]")]
    OutOfRange { v: i128, v_max: u64 },
    #[error("meter {meter} has no value for slot {slot}")]
    MissingValue { meter: MeterId, slot: u32 },
    #[error("meter {meter} row incomplete: have {have} of {want} slots")]
    IncompleteRow { meter: MeterId, have: usize, want: u32 },
    #[error("unknown meter {0}")]
    UnknownMeter(MeterId),
    #[error("row for {meter} would exceed {t} slots")]
    RowFull { meter: MeterId, t: u32 },
    #[error("slot {slot} outside 1..={t}")]
    SlotOutOfRange { slot: u32, t: u32 },
    #[error("invalid meter id: {0}")]
    InvalidMeterId(String),
    #[error("invalid time slot: {0}")]
    InvalidSlot(String),
    #[error("sum overflow")]
    Overflow,
    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
}

/// A meter's identity: its region and its 1-based position within the region.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MeterId {
    region: String,
    index: u16,
}

impl MeterId {
    pub fn new(region: impl Into<String>, index: u16) -> Result<Self, ModelError> {
        let region = region.into();
        validate_region(&region)?;
        if index == 0 {
            return Err(ModelError::InvalidMeterId("index must be >= 1".into()));
        }
        Ok(Self { region, index })
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn index(&self) -> u16 {
        self.index
    }

    /// `index (u16 BE) || region length (u8) || region bytes`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 + self.region.len());
        self.write_bytes(&mut out);
        out
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.index.to_be_bytes());
        out.push(self.region.len() as u8);
        out.extend_from_slice(self.region.as_bytes());
    }

    /// Parses the wire form, returning the id and the number of bytes consumed.
    pub fn from_bytes(buf: &[u8]) -> Result<(Self, usize), ModelError> {
        if buf.len() < 3 {
            return Err(ModelError::InvalidMeterId("truncated".into()));
        }
        let index = u16::from_be_bytes([buf[0], buf[1]]);
        let len = buf[2] as usize;
        let region = buf
            .get(3..3 + len)
            .ok_or_else(|| ModelError::InvalidMeterId("truncated region".into()))?;
        let region = std::str::from_utf8(region)
            .map_err(|_| ModelError::InvalidMeterId("region not utf-8".into()))?;
        Ok((Self::new(region, index)?, 3 + len))
    }
}

impl fmt::Display for MeterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.region, self.index)
    }
}

pub(crate) fn validate_region(region: &str) -> Result<(), ModelError> {
    if region.is_empty() {
        return Err(ModelError::InvalidMeterId("empty region".into()));
    }
    if region.len() > u8::MAX as usize {
        return Err(ModelError::InvalidMeterId("region longer than 255 bytes".into()));
    }
    if region.chars().any(char::is_whitespace) {
        return Err(ModelError::InvalidMeterId("region contains whitespace".into()));
    }
    Ok(())
}

/// A 1-based slot within a billing period.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeSlot {
    pub j: u32,
    pub duration_secs: u32,
}

impl TimeSlot {
    pub fn new(j: u32, duration_secs: u32) -> Result<Self, ModelError> {
        if j == 0 {
            return Err(ModelError::InvalidSlot("slot index is 1-based".into()));
        }
        if duration_secs == 0 {
            return Err(ModelError::InvalidSlot("duration must be positive".into()));
        }
        Ok(Self { j, duration_secs })
    }

    pub fn within(&self, t: u32) -> Result<(), ModelError> {
        if self.j > t {
            return Err(ModelError::SlotOutOfRange { slot: self.j, t });
        }
        Ok(())
    }
}

/// Non-negative watt-hours for one meter in one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementValue(u64);

impl MeasurementValue {
    pub fn wh(self) -> u64 {
        self.0
    }

    /// Skips the range check. Callers must already hold the bound.
    pub(crate) fn from_trusted(wh: u64) -> Self {
        Self(wh)
    }
}

/// Accepts `0 <= v <= v_max`; everything else, including any negative, is rejected.
pub fn validate_measurement(v: i128, v_max: u64) -> Result<MeasurementValue, ModelError> {
    if v < 0 || v > v_max as i128 {
        return Err(ModelError::OutOfRange { v, v_max });
    }
    Ok(MeasurementValue(v as u64))
}

/// What the utility receives per slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub slot: TimeSlot,
    /// `None` when the slot is flagged: no sum is released.
    pub sum: Option<u64>,
    pub contributing: u32,
    pub substituted: u32,
    pub flagged: bool,
}

/// What the utility receives per meter at the end of a period.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillingRecord {
    pub meter: MeterId,
    pub period: u32,
    pub total: u64,
}

/// The `e[i][j]` grid for one region and one billing period.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsumptionMatrix {
    region: String,
    t: u32,
    v_max: u64,
    period: u32,
    rows: BTreeMap<u16, Vec<MeasurementValue>>,
}

impl ConsumptionMatrix {
    pub fn new(region: impl Into<String>, t: u32, v_max: u64) -> Result<Self, ModelError> {
        let region = region.into();
        validate_region(&region)?;
        if t == 0 {
            return Err(ModelError::InvalidSlot("t must be >= 1".into()));
        }
        Ok(Self { region, t, v_max, period: 1, rows: BTreeMap::new() })
    }

    pub fn with_period(mut self, period: u32) -> Self {
        self.period = period;
        self
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn v_max(&self) -> u64 {
        self.v_max
    }

    pub fn meters(&self) -> impl Iterator<Item = MeterId> + '_ {
        self.rows.keys().map(|&i| MeterId { region: self.region.clone(), index: i })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, meter: &MeterId) -> Option<&[MeasurementValue]> {
        self.rows.get(&meter.index).map(Vec::as_slice)
    }

    /// Registers a meter with an empty row. Idempotent.
    pub fn add_meter(&mut self, meter: &MeterId) -> Result<(), ModelError> {
        self.check_region(meter)?;
        self.rows.entry(meter.index).or_default();
        Ok(())
    }

    /// Appends the next slot's value to a meter's row.
    pub fn push(&mut self, meter: &MeterId, wh: u64) -> Result<(), ModelError> {
        self.check_region(meter)?;
        let v = validate_measurement(wh as i128, self.v_max)?;
        let row = self.rows.entry(meter.index).or_default();
        if row.len() as u32 >= self.t {
            return Err(ModelError::RowFull { meter: meter.clone(), t: self.t });
        }
        row.push(v);
        Ok(())
    }

    /// Replaces a whole row.
    pub fn set_row(&mut self, meter: &MeterId, values: &[u64]) -> Result<(), ModelError> {
        self.check_region(meter)?;
        if values.len() as u64 > self.t as u64 {
            return Err(ModelError::RowFull { meter: meter.clone(), t: self.t });
        }
        let row = values
            .iter()
            .map(|&wh| validate_measurement(wh as i128, self.v_max))
            .collect::<Result<Vec<_>, _>>()?;
        self.rows.insert(meter.index, row);
        Ok(())
    }

    fn check_region(&self, meter: &MeterId) -> Result<(), ModelError> {
        if meter.region != self.region {
            return Err(ModelError::UnknownMeter(meter.clone()));
        }
        Ok(())
    }

    /// Regional load at slot `j`: the column sum.
    pub fn slot_aggregate(&self, slot: TimeSlot) -> Result<u64, ModelError> {
        slot.within(self.t)?;
        let idx = (slot.j - 1) as usize;
        self.rows.iter().try_fold(0u64, |acc, (&i, row)| {
            let v = row.get(idx).ok_or_else(|| ModelError::MissingValue {
                meter: MeterId { region: self.region.clone(), index: i },
                slot: slot.j,
            })?;
            acc.checked_add(v.wh()).ok_or(ModelError::Overflow)
        })
    }

    /// A meter's bill for the period: the row sum over a complete row.
    pub fn billing_total(&self, meter: &MeterId) -> Result<BillingRecord, ModelError> {
        self.check_region(meter)?;
        let row = self.rows.get(&meter.index).ok_or_else(|| ModelError::UnknownMeter(meter.clone()))?;
        if row.len() as u32 != self.t {
            return Err(ModelError::IncompleteRow { meter: meter.clone(), have: row.len(), want: self.t });
        }
        let total = row
            .iter()
            .try_fold(0u64, |acc, v| acc.checked_add(v.wh()))
            .ok_or(ModelError::Overflow)?;
        Ok(BillingRecord { meter: meter.clone(), period: self.period, total })
    }

    /// Writes `meter,slot,wh` rows, meter as its index within the region.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), ModelError> {
        let io = |e: std::io::Error| ModelError::Io(e.to_string());
        writeln!(out, "meter,slot,wh").map_err(io)?;
        for (i, row) in &self.rows {
            for (j, v) in row.iter().enumerate() {
                writeln!(out, "{},{},{}", i, j + 1, v.wh()).map_err(io)?;
            }
        }
        Ok(())
    }

    /// Reads the format produced by [`write_csv`](Self::write_csv). Cells may come in any
    /// order, but each row must end up contiguous from slot 1.
    pub fn read_csv<R: BufRead>(
        input: R,
        region: &str,
        t: u32,
        v_max: u64,
    ) -> Result<Self, ModelError> {
        let mut cells: BTreeMap<u16, BTreeMap<u32, u64>> = BTreeMap::new();
        let mut lines = input.lines().enumerate();
        match lines.next() {
            Some((_, Ok(h))) if h.trim() == "meter,slot,wh" => {}
            Some((_, Ok(h))) => {
                return Err(ModelError::Csv { line: 1, reason: format!("bad header {h:?}") })
            }
            Some((_, Err(e))) => return Err(ModelError::Io(e.to_string())),
            None => return Err(ModelError::Csv { line: 1, reason: "missing header".into() }),
        }
        for (n, line) in lines {
            let line_no = n + 1;
            let line = line.map_err(|e| ModelError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| ModelError::Csv { line: line_no, reason: reason.to_string() };
            let mut parts = line.trim().split(',');
            let (Some(m), Some(s), Some(w), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected 3 fields"));
            };
            let meter: u16 = m.parse().map_err(|_| bad("bad meter"))?;
            let slot: u32 = s.parse().map_err(|_| bad("bad slot"))?;
            let wh: i128 = w.parse().map_err(|_| bad("bad wh"))?;
            if meter == 0 || slot == 0 || slot > t {
                return Err(bad("meter or slot out of range"));
            }
            let v = validate_measurement(wh, v_max)?;
            if cells.entry(meter).or_default().insert(slot, v.wh()).is_some() {
                return Err(bad("duplicate cell"));
            }
        }
        let mut matrix = Self::new(region, t, v_max)?;
        for (i, row) in cells {
            let meter = MeterId::new(region, i)?;
            if row.keys().copied().ne(1..=row.len() as u32) {
                return Err(ModelError::Csv { line: 0, reason: format!("row {i} has gaps") });
            }
            matrix.set_row(&meter, &row.into_values().collect::<Vec<_>>())?;
        }
        Ok(matrix)
    }
}
