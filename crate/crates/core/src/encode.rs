//! Sparse sample encoding, opportunistic compression and input scaling.
//!
//! Every event becomes one sample whose nonzero columns are that event's
//! readings; categorical payloads become one-hot columns and zero marks a
//! missing value. Compression then merges runs of consecutive samples that
//! do not disagree on any column.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{
    day_of_week, hour_of_day, AppCategory, FieldKind, LabeledNotification, SensorKind, UserId, UserTrace, Value,
};
use crate::stats::{nearest_rank_sorted, sort_floats};

pub const SAMPLES_HEADER: &str = "#attend-samples v1";
pub const DT_CAP_MINUTES: f64 = 60.0;
pub const CAP_PERCENTILE: f64 = 95.0;
pub const SCALE_FLOOR: f64 = 0.05;

/// Column layout of the sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSchema {
    sensors: Vec<SensorKind>,
    names: Vec<String>,
    owners: Vec<SensorKind>,
}

/// Where one payload field lands.
enum Slot {
    Numeric(u16),
    OneHot(u16, &'static [&'static str]),
}

impl ColumnSchema {
    /// Columns for every sensor in `inventory`, in canonical sensor order.
    pub fn build(inventory: &[SensorKind]) -> Result<ColumnSchema> {
        if inventory.is_empty() {
            return Err(Error::Schema("empty sensor inventory".into()));
        }
        let mut sensors = inventory.to_vec();
        sensors.sort();
        if let Some(w) = sensors.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Schema(format!("sensor {} listed twice", w[0])));
        }
        let mut names = Vec::new();
        let mut owners = Vec::new();
        for &kind in &sensors {
            for field in kind.fields() {
                match field.kind {
                    FieldKind::Numeric => {
                        names.push(format!("{kind}.{}", field.key));
                        owners.push(kind);
                    }
                    FieldKind::Categorical(options) => {
                        for opt in options {
                            names.push(format!("{kind}.{}={opt}", field.key));
                            owners.push(kind);
                        }
                    }
                    FieldKind::Identifier => {}
                }
            }
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() || names.len() > u16::MAX as usize {
            return Err(Error::Schema("duplicate or too many column names".into()));
        }
        Ok(ColumnSchema { sensors, names, owners })
    }

    /// Schema over all fifteen units.
    pub fn full() -> ColumnSchema {
        ColumnSchema::build(&SensorKind::ALL).expect("canonical inventory is valid")
    }

    /// Schema over all units except `removed`.
    pub fn without(removed: SensorKind) -> ColumnSchema {
        let inventory: Vec<SensorKind> = SensorKind::ALL.into_iter().filter(|&k| k != removed).collect();
        ColumnSchema::build(&inventory).expect("canonical inventory is valid")
    }

    /// Number of value columns (excludes the reserved dt, y and w columns).
    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sensors(&self) -> &[SensorKind] {
        &self.sensors
    }

    pub fn contains(&self, kind: SensorKind) -> bool {
        self.sensors.binary_search(&kind).is_ok()
    }

    pub fn owner(&self, column: usize) -> SensorKind {
        self.owners[column]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Stable content hash of the column layout.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update(b"\n");
        }
        h.update(b"dt\ny\nw\n");
        hex::encode(&h.finalize()[..8])
    }

    fn first_column(&self, kind: SensorKind) -> Option<usize> {
        self.owners.iter().position(|&o| o == kind)
    }

    fn slots(&self, kind: SensorKind) -> Vec<(&'static str, Slot)> {
        let Some(mut col) = self.first_column(kind) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for field in kind.fields() {
            match field.kind {
                FieldKind::Numeric => {
                    out.push((field.key, Slot::Numeric(col as u16)));
                    col += 1;
                }
                FieldKind::Categorical(options) => {
                    out.push((field.key, Slot::OneHot(col as u16, options)));
                    col += options.len();
                }
                FieldKind::Identifier => {}
            }
        }
        out
    }
}

/// One row of the sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    /// Nonzero values sorted by column.
    pub x: Vec<(u16, f64)>,
    pub y: Option<bool>,
    pub w: f64,
    /// Minutes since the previous emitted sample.
    pub dt: f64,
    /// Time of the last constituent event.
    pub time: i64,
    /// Time of the first constituent event.
    pub first_time: i64,
    /// Notification category of a ground-truth sample.
    pub category: Option<AppCategory>,
}

impl EncodedSample {
    pub fn has_ground_truth(&self) -> bool {
        self.y.is_some()
    }

    pub fn get(&self, column: u16) -> f64 {
        self.x
            .binary_search_by_key(&column, |&(c, _)| c)
            .map_or(0.0, |i| self.x[i].1)
    }

    /// All-zero, weightless filler.
    pub fn padding() -> EncodedSample {
        EncodedSample {
            x: Vec::new(),
            y: None,
            w: 0.0,
            dt: 0.0,
            time: 0,
            first_time: 0,
            category: None,
        }
    }
}

/// The encoded samples of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserStream {
    pub user: UserId,
    pub samples: Vec<EncodedSample>,
}

impl UserStream {
    pub fn ground_truth(&self) -> impl Iterator<Item = &EncodedSample> {
        self.samples.iter().filter(|s| s.has_ground_truth())
    }
}

fn minutes(seconds: i64) -> f64 {
    seconds as f64 / 60.0
}

/// One sample per event, plus an hour-of-day sample whenever the clock hour
/// changes (when the schema has time-of-day columns).
///
/// Notification posts carry the label and a provisional weight of 1. A post
/// whose sensor is absent from the schema still yields a sample with empty
/// values so its ground truth stays in the stream; any other event of a
/// sensor outside the schema is an error.
pub fn encode_events(
    trace: &UserTrace,
    labels: &[LabeledNotification],
    schema: &ColumnSchema,
) -> Result<Vec<EncodedSample>> {
    trace.ensure_sorted()?;
    let slots: Vec<Vec<(&'static str, Slot)>> = SensorKind::ALL.iter().map(|&k| schema.slots(k)).collect();
    let tick_columns = schema.contains(SensorKind::TimeOfDay).then(|| {
        (
            schema.index_of("TimeOfDay.hour").expect("hour column") as u16,
            schema.index_of("TimeOfDay.weekday").expect("weekday column") as u16,
        )
    });

    let mut labels = labels.iter();
    let mut out: Vec<EncodedSample> = Vec::with_capacity(trace.events.len() * 11 / 10);
    let mut last_time: Option<i64> = None;
    let mut last_hour: Option<i64> = None;
    let push = |out: &mut Vec<EncodedSample>, mut s: EncodedSample, last: &mut Option<i64>| {
        s.dt = last.map_or(0.0, |p| minutes(s.time - p));
        *last = Some(s.time);
        out.push(s);
    };

    for (i, e) in trace.events.iter().enumerate() {
        if let Some((hour_col, weekday_col)) = tick_columns {
            let hour = e.timestamp.div_euclid(3600);
            if last_hour != Some(hour) {
                last_hour = Some(hour);
                let t = hour * 3600;
                let tick = EncodedSample {
                    x: vec![
                        (hour_col, hour_of_day(t) as f64 + 1.0),
                        (weekday_col, day_of_week(t) as f64 + 1.0),
                    ],
                    time: t,
                    first_time: t,
                    ..EncodedSample::padding()
                };
                push(&mut out, tick, &mut last_time);
            }
        }

        let mut sample = EncodedSample {
            time: e.timestamp,
            first_time: e.timestamp,
            ..EncodedSample::padding()
        };
        let post = e.is_notification_post();
        if post {
            let label = labels
                .next()
                .ok_or_else(|| Error::Encoding(format!("user {}: no label for post {i}", trace.user_id)))?;
            if label.post_time != e.timestamp {
                return Err(Error::Encoding(format!(
                    "user {}: label at t={} does not match post {i} at t={}",
                    trace.user_id, label.post_time, e.timestamp
                )));
            }
            sample.y = Some(label.label);
            sample.w = 1.0;
            sample.category = Some(label.category);
        }

        let kind_slots = &slots[e.kind as usize];
        if kind_slots.is_empty() && !schema.contains(e.kind) && !post {
            return Err(Error::Encoding(format!(
                "event {i} of user {}: sensor {} is not in the schema",
                trace.user_id, e.kind
            )));
        }
        for (key, slot) in kind_slots {
            match (slot, e.get(key)) {
                (_, None) => {}
                (Slot::Numeric(c), Some(v)) => {
                    let v = match v {
                        Value::Num(v) => *v,
                        Value::Text(_) => {
                            return Err(Error::Encoding(format!(
                                "event {i}: field {key} of {} is not numeric",
                                e.kind
                            )))
                        }
                    };
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("event {i} field {key}")));
                    }
                    if v != 0.0 {
                        sample.x.push((*c, v));
                    }
                }
                (Slot::OneHot(c, options), Some(v)) => {
                    let code = v.to_string();
                    let k = options
                        .iter()
                        .position(|o| *o == code)
                        .ok_or_else(|| Error::Encoding(format!("event {i}: unknown {key} code `{code}`")))?;
                    sample.x.push((c + k as u16, 1.0));
                }
            }
        }
        sample.x.sort_by_key(|&(c, _)| c);
        push(&mut out, sample, &mut last_time);
    }
    if labels.next().is_some() {
        return Err(Error::Encoding(format!(
            "user {}: more labels than notification posts",
            trace.user_id
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionConfig {
    /// Longest span, in minutes, one merged sample may cover.
    pub max_span_minutes: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig { max_span_minutes: 10.0 }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_span_minutes > 0.0 && self.max_span_minutes.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "compression span must be positive, got {}",
                self.max_span_minutes
            )))
        }
    }
}

/// Whether every column of `b` is absent from `a` or equal to it.
fn compatible(a: &[(u16, f64)], b: &[(u16, f64)]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                if a[i].1 != b[j].1 {
                    return false;
                }
                i += 1;
                j += 1;
            }
        }
    }
    true
}

fn union(a: &[(u16, f64)], b: &[(u16, f64)]) -> Vec<(u16, f64)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i].0 < b[j].0) {
            out.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j].0 < a[i].0 {
            out.push(b[j]);
            j += 1;
        } else {
            out.push(a[i]);
            i += 1;
            j += 1;
        }
    }
    out
}

/// Whether `next` may be merged into the open sample `open`.
pub fn can_merge(open: &EncodedSample, next: &EncodedSample, config: &CompressionConfig) -> bool {
    !open.has_ground_truth()
        && minutes(next.time - open.first_time) <= config.max_span_minutes
        && compatible(&open.x, &next.x)
}

/// Greedy single-pass merge of consecutive non-clashing samples.
///
/// A sample joins the open one when no column disagrees, the open sample
/// holds no ground truth and the merged span stays within the configured
/// limit. Emitted time deltas run from last constituent to last constituent.
pub fn compress(samples: &[EncodedSample], config: &CompressionConfig) -> Result<Vec<EncodedSample>> {
    config.validate()?;
    if let Some(i) = samples.windows(2).position(|w| w[1].time < w[0].time) {
        return Err(Error::Ordering {
            index: i + 1,
            previous: samples[i].time,
            current: samples[i + 1].time,
        });
    }
    let mut out: Vec<EncodedSample> = Vec::new();
    let mut open: Option<EncodedSample> = None;
    for s in samples {
        match open.as_mut() {
            Some(o) if can_merge(o, s, config) => {
                o.x = union(&o.x, &s.x);
                o.time = s.time;
                if s.has_ground_truth() {
                    o.y = s.y;
                    o.w = s.w;
                    o.category = s.category;
                }
            }
            _ => {
                if let Some(done) = open.replace(s.clone()) {
                    out.push(done);
                }
            }
        }
    }
    out.extend(open);
    let mut previous: Option<i64> = None;
    for s in &mut out {
        s.dt = previous.map_or(0.0, |p| minutes(s.time - p));
        previous = Some(s.time);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub cap: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ColumnStats {
    pub const IDENTITY: ColumnStats = ColumnStats {
        cap: 1.0,
        lo: 0.0,
        hi: 1.0,
    };

    fn fit(mut values: Vec<f64>, fixed_cap: Option<f64>) -> ColumnStats {
        if values.is_empty() {
            return ColumnStats::IDENTITY;
        }
        sort_floats(&mut values);
        let cap = fixed_cap.unwrap_or_else(|| nearest_rank_sorted(&values, CAP_PERCENTILE).expect("non-empty"));
        ColumnStats {
            cap,
            lo: values[0].min(cap),
            hi: values[values.len() - 1].min(cap),
        }
    }

    /// Maps a nonzero value into `[0.05, 1]`; zero stays zero.
    pub fn scale(&self, v: f64) -> f64 {
        if v == 0.0 {
            return 0.0;
        }
        if self.hi <= self.lo {
            return 1.0;
        }
        let c = v.clamp(self.lo, self.cap.min(self.hi));
        SCALE_FLOOR + (1.0 - SCALE_FLOOR) * (c - self.lo) / (self.hi - self.lo)
    }

    /// Inverse of [`ColumnStats::scale`] on its range.
    pub fn unscale(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        if self.hi <= self.lo {
            return self.hi;
        }
        self.lo + (s - SCALE_FLOOR) / (1.0 - SCALE_FLOOR) * (self.hi - self.lo)
    }
}

/// Per-column caps and ranges fitted on training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub schema_hash: String,
    pub columns: Vec<ColumnStats>,
    pub dt: ColumnStats,
}

impl NormalizationStats {
    pub fn fit<'a, I>(schema: &ColumnSchema, training: I) -> Result<NormalizationStats>
    where
        I: IntoIterator<Item = &'a EncodedSample>,
    {
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); schema.width()];
        let mut dts = Vec::new();
        let mut seen = 0usize;
        for s in training {
            seen += 1;
            for &(c, v) in &s.x {
                let col = values.get_mut(c as usize).ok_or(Error::Shape {
                    expected: schema.width(),
                    found: c as usize + 1,
                })?;
                col.push(v);
            }
            if s.dt != 0.0 {
                dts.push(s.dt);
            }
        }
        if seen == 0 {
            return Err(Error::Empty("no training samples to fit normalization".into()));
        }
        Ok(NormalizationStats {
            schema_hash: schema.hash(),
            columns: values.into_iter().map(|v| ColumnStats::fit(v, None)).collect(),
            dt: ColumnStats::fit(dts, Some(DT_CAP_MINUTES)),
        })
    }

    pub fn apply(&self, sample: &mut EncodedSample) {
        for (c, v) in &mut sample.x {
            *v = self.columns[*c as usize].scale(*v);
        }
        sample.dt = self.dt.scale(sample.dt);
    }

    pub fn apply_all(&self, samples: &mut [EncodedSample]) {
        for s in samples {
            self.apply(s);
        }
    }
}

fn format_sample(out: &mut String, s: &EncodedSample) {
    let y = match s.y {
        Some(true) => "1",
        Some(false) => "0",
        None => "-",
    };
    let cat = s.category.map_or("-", |c| c.code());
    let _ = write!(out, "{}\t{}\t{}\t{}\t{}\t{}\t", s.first_time, s.time, s.dt, y, s.w, cat);
    for (k, (c, v)) in s.x.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "{c}:{v}");
    }
}

/// Writes streams as text: a header naming the schema hash, then one line
/// per sample `user first_time time dt y w category col:value,...`.
pub fn write_samples(path: &Path, schema_hash: &str, streams: &[UserStream]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{SAMPLES_HEADER}\tschema={schema_hash}")?;
    let mut line = String::new();
    for stream in streams {
        for s in &stream.samples {
            line.clear();
            let _ = write!(line, "{}\t", stream.user);
            format_sample(&mut line, s);
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a sample file, returning its schema hash and per-user streams in
/// file order.
pub fn read_samples(path: &Path) -> Result<(String, Vec<UserStream>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::parse(path, 1, "empty sample file"))?;
    let hash = header
        .strip_prefix(SAMPLES_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("schema="))
        .ok_or_else(|| Error::parse(path, 1, "missing sample header"))?
        .to_string();
    let mut streams: Vec<UserStream> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let lineno = n + 2;
        let bad = |m: &str| Error::parse(path, lineno, m);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad("expected 8 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let int = |s: &str| s.parse::<i64>().map_err(|_| bad("bad timestamp"));
        let x = if f[7].is_empty() {
            Vec::new()
        } else {
            f[7].split(',')
                .map(|kv| {
                    let (c, v) = kv.split_once(':').ok_or_else(|| bad("bad column entry"))?;
                    Ok((c.parse::<u16>().map_err(|_| bad("bad column"))?, num(v)?))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let sample = EncodedSample {
            first_time: int(f[1])?,
            time: int(f[2])?,
            dt: num(f[3])?,
            y: match f[4] {
                "1" => Some(true),
                "0" => Some(false),
                "-" => None,
                _ => return Err(bad("bad label")),
            },
            w: num(f[5])?,
            category: match f[6] {
                "-" => None,
                c => Some(c.parse().map_err(|_| bad("bad category"))?),
            },
            x,
        };
        match streams.last_mut() {
            Some(s) if s.user.as_str() == f[0] => s.samples.push(sample),
            _ => streams.push(UserStream {
                user: UserId::new(f[0]),
                samples: vec![sample],
            }),
        }
    }
    Ok((hash, streams))
}
