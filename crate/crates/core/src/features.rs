//! Windowed hand-crafted features for the classical model.
//!
//! Every feature describes the moment before a notification is posted and
//! only looks at events strictly earlier than the post. Three windows are
//! used: the last 5 minutes, the last hour and the current day (since the
//! most recent 05:00).

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    day_of_week, hour_of_day, AppCategory, Gender, LabeledNotification, SensorKind, UserId, UserTrace, AUDIO_STATES,
    CHARGING_STATES, LAUNCH_CATEGORIES, NOTIFICATION_CATEGORIES, ORIENTATIONS, PLACES, RINGER_MODES, SCREEN_STATES,
    SECONDS_PER_DAY,
};
use crate::stats::Spread;

/// Cap for "seconds since" features when nothing happened yet.
pub const SINCE_CAP_S: f64 = 86_400.0;
pub const DAY_START_HOUR: i64 = 5;
pub const FEATURES_HEADER: &str = "#attend-features v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureGroup {
    CommunicationActivity,
    Context,
    Demographic,
    PhoneStatus,
    UsagePatterns,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 5] = [
        FeatureGroup::CommunicationActivity,
        FeatureGroup::Context,
        FeatureGroup::Demographic,
        FeatureGroup::PhoneStatus,
        FeatureGroup::UsagePatterns,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::CommunicationActivity => "communication",
            FeatureGroup::Context => "context",
            FeatureGroup::Demographic => "demographic",
            FeatureGroup::PhoneStatus => "phone_status",
            FeatureGroup::UsagePatterns => "usage",
        }
    }

    fn of(sensor: SensorKind) -> FeatureGroup {
        use SensorKind::*;
        match sensor {
            Notification | NotificationCenter => FeatureGroup::CommunicationActivity,
            Accelerometer | Light | Noise | SemanticLocation | Audio | TimeOfDay => FeatureGroup::Context,
            Battery | ChargingState | RingerMode | ScreenOrientation | Data => FeatureGroup::PhoneStatus,
            App | Screen => FeatureGroup::UsagePatterns,
        }
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Moment,
    Recent,
    Day,
}

impl Window {
    pub const ALL: [Window; 3] = [Window::Moment, Window::Recent, Window::Day];

    pub fn name(self) -> &'static str {
        match self {
            Window::Moment => "5m",
            Window::Recent => "60m",
            Window::Day => "day",
        }
    }

    /// Start of the window ending at `t` (exclusive end).
    pub fn start(self, t: i64) -> i64 {
        match self {
            Window::Moment => t - 300,
            Window::Recent => t - 3600,
            Window::Day => {
                let anchor = t - DAY_START_HOUR * 3600;
                anchor.div_euclid(SECONDS_PER_DAY) * SECONDS_PER_DAY + DAY_START_HOUR * 3600
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureInfo {
    pub name: String,
    pub group: FeatureGroup,
    /// Ablation unit the feature belongs to; `None` for demographics.
    pub sensor: Option<SensorKind>,
}

/// Continuous readings summarised per window.
const MEASURES: [(&str, SensorKind, &str); 7] = [
    ("accel_mean", SensorKind::Accelerometer, "mean"),
    ("accel_max", SensorKind::Accelerometer, "max"),
    ("battery_drain", SensorKind::Battery, "drain"),
    ("data_rx", SensorKind::Data, "rx_total"),
    ("data_tx", SensorKind::Data, "tx_total"),
    ("light", SensorKind::Light, "lux"),
    ("noise", SensorKind::Noise, "db"),
];

const PRESENCE_SENSORS: [(&str, SensorKind); 5] = [
    ("accel", SensorKind::Accelerometer),
    ("battery", SensorKind::Battery),
    ("data", SensorKind::Data),
    ("light", SensorKind::Light),
    ("noise", SensorKind::Noise),
];

/// Event sensors whose activity is counted per window.
const COUNTED: [(&str, SensorKind); 5] = [
    ("audio", SensorKind::Audio),
    ("charging", SensorKind::ChargingState),
    ("notification_center", SensorKind::NotificationCenter),
    ("ringer", SensorKind::RingerMode),
    ("orientation", SensorKind::ScreenOrientation),
];

/// Event sensors whose latest state is reported as a code (1-based, 0 when
/// unknown).
const STATES: [(&str, SensorKind, &str, &[&str]); 5] = [
    ("screen", SensorKind::Screen, "state", SCREEN_STATES),
    ("ringer", SensorKind::RingerMode, "mode", RINGER_MODES),
    ("charging", SensorKind::ChargingState, "state", CHARGING_STATES),
    ("audio", SensorKind::Audio, "state", AUDIO_STATES),
    (
        "orientation",
        SensorKind::ScreenOrientation,
        "orientation",
        ORIENTATIONS,
    ),
];

/// The frozen, ordered feature list.
pub fn feature_manifest() -> Vec<FeatureInfo> {
    let mut out = Vec::new();
    let mut push = |name: String, sensor: Option<SensorKind>, group: Option<FeatureGroup>| {
        let group = group.unwrap_or_else(|| FeatureGroup::of(sensor.expect("sensor or group")));
        out.push(FeatureInfo { name, group, sensor });
    };
    for (m, sensor, _) in MEASURES {
        for w in Window::ALL {
            for stat in ["q1", "median", "q3", "mad"] {
                push(format!("{m}_{}_{stat}", w.name()), Some(sensor), None);
            }
        }
    }
    for (m, sensor, _) in MEASURES {
        push(format!("{m}_last"), Some(sensor), None);
    }
    for (s, sensor) in PRESENCE_SENSORS {
        for w in Window::ALL {
            push(format!("{s}_{}_present", w.name()), Some(sensor), None);
        }
    }
    let loc = Some(SensorKind::SemanticLocation);
    for p in PLACES {
        push(format!("location_current_{p}"), loc, None);
    }
    for p in PLACES {
        push(format!("location_day_fraction_{p}"), loc, None);
    }
    push("location_day_distinct".into(), loc, None);

    let app = Some(SensorKind::App);
    push("app_since_last_s".into(), app, None);
    for w in Window::ALL {
        push(format!("app_launches_{}", w.name()), app, None);
    }
    for c in LAUNCH_CATEGORIES {
        push(format!("app_last_category_{c}"), app, None);
    }
    let notif = Some(SensorKind::Notification);
    push("notification_since_last_s".into(), notif, None);
    for w in Window::ALL {
        push(format!("notifications_{}", w.name()), notif, None);
    }
    for c in NOTIFICATION_CATEGORIES {
        push(format!("notification_last_category_{c}"), notif, None);
    }
    for w in Window::ALL {
        push(format!("unlocks_{}", w.name()), Some(SensorKind::Screen), None);
    }
    for (s, sensor) in COUNTED {
        for w in Window::ALL {
            push(format!("{s}_events_{}", w.name()), Some(sensor), None);
        }
    }
    for (s, sensor, _, _) in STATES {
        push(format!("{s}_last_state"), Some(sensor), None);
    }
    push("age".into(), None, Some(FeatureGroup::Demographic));
    push("gender_female".into(), None, Some(FeatureGroup::Demographic));
    let tod = Some(SensorKind::TimeOfDay);
    push("hour_of_day".into(), tod, None);
    push("day_of_week".into(), tod, None);
    push("working_day".into(), tod, None);
    out
}

pub fn manifest_names() -> Vec<String> {
    feature_manifest().into_iter().map(|f| f.name).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Non-working days given as day numbers since the Unix epoch, in
    /// addition to weekends.
    pub holidays: Vec<i64>,
}

impl FeatureConfig {
    pub fn is_working_day(&self, t: i64) -> bool {
        day_of_week(t) < 5 && !self.holidays.contains(&t.div_euclid(SECONDS_PER_DAY))
    }
}

#[derive(Default)]
struct Series {
    times: Vec<i64>,
    values: Vec<f64>,
}

impl Series {
    fn push(&mut self, t: i64, v: f64) {
        self.times.push(t);
        self.values.push(v);
    }

    /// Index range of entries with `start <= t < end`.
    fn range(&self, start: i64, end: i64) -> std::ops::Range<usize> {
        let a = self.times.partition_point(|&t| t < start);
        let b = self.times.partition_point(|&t| t < end);
        a..b.max(a)
    }

    fn count(&self, start: i64, end: i64) -> usize {
        self.range(start, end).len()
    }

    /// Latest entry strictly before `end`.
    fn last_before(&self, end: i64) -> Option<(i64, f64)> {
        let b = self.times.partition_point(|&t| t < end);
        (b > 0).then(|| (self.times[b - 1], self.values[b - 1]))
    }
}

/// Per-user time-indexed view of a trace used to extract features quickly.
pub struct FeatureExtractor<'a> {
    trace: &'a UserTrace,
    config: &'a FeatureConfig,
    measures: Vec<Series>,
    presence: Vec<Series>,
    location: Series,
    launches: Series,
    posts: Series,
    unlocks: Series,
    counted: Vec<Series>,
    states: Vec<Series>,
}

fn code_of(options: &[&str], value: Option<&str>) -> Option<f64> {
    let v = value?;
    options.iter().position(|o| *o == v).map(|i| i as f64)
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(trace: &'a UserTrace, config: &'a FeatureConfig) -> Result<Self> {
        trace.ensure_sorted()?;
        let mut x = FeatureExtractor {
            trace,
            config,
            measures: MEASURES.iter().map(|_| Series::default()).collect(),
            presence: PRESENCE_SENSORS.iter().map(|_| Series::default()).collect(),
            location: Series::default(),
            launches: Series::default(),
            posts: Series::default(),
            unlocks: Series::default(),
            counted: COUNTED.iter().map(|_| Series::default()).collect(),
            states: STATES.iter().map(|_| Series::default()).collect(),
        };
        for e in &trace.events {
            let t = e.timestamp;
            for (i, (_, sensor, key)) in MEASURES.iter().enumerate() {
                if e.kind == *sensor {
                    if let Some(v) = e.num(key) {
                        x.measures[i].push(t, v);
                    }
                }
            }
            for (i, (_, sensor)) in PRESENCE_SENSORS.iter().enumerate() {
                if e.kind == *sensor {
                    x.presence[i].push(t, 1.0);
                }
            }
            for (i, (_, sensor)) in COUNTED.iter().enumerate() {
                if e.kind == *sensor {
                    x.counted[i].push(t, 1.0);
                }
            }
            for (i, (_, sensor, key, options)) in STATES.iter().enumerate() {
                if e.kind == *sensor {
                    if let Some(code) = code_of(options, e.text(key)) {
                        x.states[i].push(t, code);
                    }
                }
            }
            match e.kind {
                SensorKind::SemanticLocation => {
                    if let Some(code) = code_of(PLACES, e.text("place")) {
                        x.location.push(t, code);
                    }
                }
                SensorKind::App => {
                    let code = code_of(LAUNCH_CATEGORIES, e.text("category")).unwrap_or(-1.0);
                    x.launches.push(t, code);
                }
                SensorKind::Notification if e.is_notification_post() => {
                    let code = code_of(NOTIFICATION_CATEGORIES, e.text("category")).unwrap_or(-1.0);
                    x.posts.push(t, code);
                }
                SensorKind::Screen if e.is_unlock() => x.unlocks.push(t, 1.0),
                _ => {}
            }
        }
        Ok(x)
    }

    /// Feature vector for a notification posted at `post_time`, in manifest
    /// order.
    pub fn extract(&self, post_time: i64) -> Vec<f64> {
        let t = post_time;
        let mut out = Vec::with_capacity(FEATURE_COUNT);
        let windows = Window::ALL.map(|w| w.start(t));
        let mut buf = Vec::new();
        for series in &self.measures {
            for &start in &windows {
                buf.clear();
                buf.extend_from_slice(&series.values[series.range(start, t)]);
                match Spread::of(&mut buf) {
                    Some(s) => out.extend([s.q1, s.median, s.q3, s.mad]),
                    None => out.extend([0.0; 4]),
                }
            }
        }
        for series in &self.measures {
            out.push(series.last_before(t).map_or(0.0, |(_, v)| v));
        }
        for series in &self.presence {
            for &start in &windows {
                out.push(if series.count(start, t) > 0 { 1.0 } else { 0.0 });
            }
        }

        let current = self.location.last_before(t).map(|(_, c)| c as usize);
        for i in 0..PLACES.len() {
            out.push(if current == Some(i) { 1.0 } else { 0.0 });
        }
        let day = &self.location.values[self.location.range(windows[2], t)];
        let mut per_place = [0usize; PLACES.len()];
        for &c in day {
            per_place[c as usize] += 1;
        }
        for n in per_place {
            out.push(if day.is_empty() {
                0.0
            } else {
                n as f64 / day.len() as f64
            });
        }
        out.push(per_place.iter().filter(|&&n| n > 0).count() as f64);

        self.push_activity(&mut out, &self.launches, LAUNCH_CATEGORIES.len(), t, &windows);
        self.push_activity(&mut out, &self.posts, NOTIFICATION_CATEGORIES.len(), t, &windows);
        for &start in &windows {
            out.push(self.unlocks.count(start, t) as f64);
        }
        for series in &self.counted {
            for &start in &windows {
                out.push(series.count(start, t) as f64);
            }
        }
        for series in &self.states {
            out.push(series.last_before(t).map_or(0.0, |(_, c)| c + 1.0));
        }
        out.push(self.trace.age as f64);
        out.push(if self.trace.gender == Gender::Female { 1.0 } else { 0.0 });
        out.push(hour_of_day(t) as f64);
        out.push(day_of_week(t) as f64);
        out.push(if self.config.is_working_day(t) { 1.0 } else { 0.0 });
        debug_assert_eq!(out.len(), FEATURE_COUNT);
        out
    }

    fn push_activity(&self, out: &mut Vec<f64>, series: &Series, categories: usize, t: i64, windows: &[i64; 3]) {
        let last = series.last_before(t);
        out.push(last.map_or(SINCE_CAP_S, |(at, _)| ((t - at) as f64).min(SINCE_CAP_S)));
        for &start in windows {
            out.push(series.count(start, t) as f64);
        }
        let code = last.map(|(_, c)| c);
        for i in 0..categories {
            out.push(if code == Some(i as f64) { 1.0 } else { 0.0 });
        }
    }
}

pub const FEATURE_COUNT: usize = 167;

/// Features of a single notification.
pub fn extract_features(trace: &UserTrace, post_time: i64, config: &FeatureConfig) -> Result<Vec<f64>> {
    Ok(FeatureExtractor::new(trace, config)?.extract(post_time))
}

/// One row per labeled notification.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    /// Row-major values.
    pub values: Vec<f32>,
    pub labels: Vec<bool>,
    pub users: Vec<UserId>,
    pub categories: Vec<AppCategory>,
    pub post_times: Vec<i64>,
}

impl FeatureMatrix {
    pub fn empty(names: Vec<String>) -> Self {
        FeatureMatrix {
            names,
            values: Vec::new(),
            labels: Vec::new(),
            users: Vec::new(),
            categories: Vec::new(),
            post_times: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.width();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn push_row(&mut self, row: &[f32], label: &LabeledNotification) {
        debug_assert_eq!(row.len(), self.width());
        self.values.extend_from_slice(row);
        self.labels.push(label.label);
        self.users.push(label.user_id.clone());
        self.categories.push(label.category);
        self.post_times.push(label.post_time);
    }

    /// Rows whose index satisfies `keep`.
    pub fn select_rows(&self, keep: impl Fn(usize) -> bool) -> FeatureMatrix {
        let mut out = FeatureMatrix::empty(self.names.clone());
        for i in (0..self.len()).filter(|&i| keep(i)) {
            out.values.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
            out.users.push(self.users[i].clone());
            out.categories.push(self.categories[i]);
            out.post_times.push(self.post_times[i]);
        }
        out
    }

    /// The given columns only, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> FeatureMatrix {
        let mut out = FeatureMatrix {
            names: columns.iter().map(|&c| self.names[c].clone()).collect(),
            values: Vec::with_capacity(self.len() * columns.len()),
            ..self.clone_meta()
        };
        for i in 0..self.len() {
            let row = self.row(i);
            out.values.extend(columns.iter().map(|&c| row[c]));
        }
        out
    }

    fn clone_meta(&self) -> FeatureMatrix {
        FeatureMatrix {
            names: Vec::new(),
            values: Vec::new(),
            labels: self.labels.clone(),
            users: self.users.clone(),
            categories: self.categories.clone(),
            post_times: self.post_times.clone(),
        }
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f32> + '_ {
        (0..self.len()).map(move |i| self.values[i * self.width() + c])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{FEATURES_HEADER}")?;
        write!(out, "user\tpost_time\tcategory\tlabel")?;
        for n in &self.names {
            write!(out, "\t{n}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(
                out,
                "{}\t{}\t{}\t{}",
                self.users[i],
                self.post_times[i],
                self.categories[i].code(),
                u8::from(self.labels[i])
            )?;
            for v in self.row(i) {
                write!(out, "\t{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureMatrix> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        match lines.next().transpose()? {
            Some(h) if h == FEATURES_HEADER => {}
            _ => return Err(Error::parse(path, 1, "missing feature file header")),
        }
        let columns = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::parse(path, 2, "missing column header"))?;
        let names: Vec<String> = columns.split('\t').skip(4).map(str::to_string).collect();
        let mut m = FeatureMatrix::empty(names);
        for (n, line) in lines.enumerate() {
            let line = line?;
            let lineno = n + 3;
            let bad = |msg: &str| Error::parse(path, lineno, msg);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != m.width() + 4 {
                return Err(bad("wrong field count"));
            }
            m.users.push(UserId::new(f[0]));
            m.post_times.push(f[1].parse().map_err(|_| bad("bad post time"))?);
            m.categories.push(f[2].parse().map_err(|_| bad("bad category"))?);
            m.labels.push(match f[3] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("bad label")),
            });
            for v in &f[4..] {
                m.values.push(v.parse().map_err(|_| bad("bad value"))?);
            }
        }
        Ok(m)
    }
}

/// Features for every labeled notification of every trace.
pub fn build_feature_matrix(
    traces: &[UserTrace],
    labels: &[Vec<LabeledNotification>],
    config: &FeatureConfig,
) -> Result<FeatureMatrix> {
    if traces.len() != labels.len() {
        return Err(Error::Shape {
            expected: traces.len(),
            found: labels.len(),
        });
    }
    let mut m = FeatureMatrix::empty(manifest_names());
    let mut row = Vec::with_capacity(FEATURE_COUNT);
    for (trace, user_labels) in traces.iter().zip(labels) {
        let extractor = FeatureExtractor::new(trace, config)?;
        for label in user_labels {
            row.clear();
            row.extend(extractor.extract(label.post_time).into_iter().map(|v| v as f32));
            m.push_row(&row, label);
        }
    }
    Ok(m)
}

/// Indices of the features that do not belong to `removed`.
pub fn columns_without(removed: SensorKind) -> Vec<usize> {
    feature_manifest()
        .iter()
        .enumerate()
        .filter(|(_, f)| f.sensor != Some(removed))
        .map(|(i, _)| i)
        .collect()
}

/// Groups present in the manifest.
pub fn manifest_groups() -> BTreeSet<FeatureGroup> {
    feature_manifest().into_iter().map(|f| f.group).collect()
}
