//! Users, sensors, events and ground-truth labeling.
//!
//! A [`UserTrace`] is the time-ordered list of everything one phone reported.
//! Payloads are small key/value maps whose keys come from a fixed per-sensor
//! schema ([`SensorKind::fields`]). Categorical values are stored as text
//! codes, numeric ones as `f64`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, LazyLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;
/// Default attendance horizon: an app launch within 10 minutes counts.
pub const DEFAULT_HORIZON_S: i64 = 600;

pub const EVENT_LOG_HEADER: &str = "#attend-events v1";
pub const DEMOGRAPHICS_HEADER: &str = "#attend-demographics v1";
pub const EVENTS_FILE: &str = "events.tsv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SensorClass {
    Periodical,
    EventDriven,
    Derived,
}

/// The fifteen ablation units: fourteen phone sensors plus the derived
/// time-of-day channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorKind {
    Accelerometer,
    Battery,
    Data,
    Light,
    Noise,
    SemanticLocation,
    App,
    Audio,
    ChargingState,
    Notification,
    NotificationCenter,
    RingerMode,
    Screen,
    ScreenOrientation,
    TimeOfDay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Numeric,
    Categorical(&'static [&'static str]),
    /// Opaque identifier (app names). Never encoded as a model input.
    Identifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpec {
    pub key: &'static str,
    pub kind: FieldKind,
}

const fn num(key: &'static str) -> FieldSpec {
    FieldSpec {
        key,
        kind: FieldKind::Numeric,
    }
}

const fn cat(key: &'static str, options: &'static [&'static str]) -> FieldSpec {
    FieldSpec {
        key,
        kind: FieldKind::Categorical(options),
    }
}

const fn ident(key: &'static str) -> FieldSpec {
    FieldSpec {
        key,
        kind: FieldKind::Identifier,
    }
}

pub const PLACES: &[&str] = &["home", "work", "out", "unknown"];
pub const LAUNCH_CATEGORIES: &[&str] = &[
    "messaging",
    "email",
    "productivity",
    "social",
    "entertainment",
    "games",
    "alert",
    "system",
];
pub const NOTIFICATION_CATEGORIES: &[&str] = &[
    "messaging",
    "email",
    "productivity",
    "social",
    "entertainment",
    "games",
    "alert",
    "other",
];
pub const SCREEN_STATES: &[&str] = &["on", "off", "unlocked"];
pub const AUDIO_STATES: &[&str] = &["music", "no_music", "speaker", "headphones"];
pub const CHARGING_STATES: &[&str] = &["charging", "not_charging"];
pub const RINGER_MODES: &[&str] = &["normal", "silent", "vibrate"];
pub const ORIENTATIONS: &[&str] = &["portrait", "landscape"];
pub const NOTIFICATION_ACTIONS: &[&str] = &["post", "remove"];

static ACCELEROMETER: [FieldSpec; 2] = [num("mean"), num("max")];
static BATTERY: [FieldSpec; 1] = [num("drain")];
static DATA: [FieldSpec; 4] = [num("rx_total"), num("tx_total"), num("rx_cell"), num("tx_cell")];
static LIGHT: [FieldSpec; 1] = [num("lux")];
static NOISE: [FieldSpec; 1] = [num("db")];
static SEMANTIC_LOCATION: [FieldSpec; 1] = [cat("place", PLACES)];
static APP: [FieldSpec; 2] = [ident("app"), cat("category", LAUNCH_CATEGORIES)];
static AUDIO: [FieldSpec; 1] = [cat("state", AUDIO_STATES)];
static CHARGING: [FieldSpec; 1] = [cat("state", CHARGING_STATES)];
static NOTIFICATION: [FieldSpec; 3] = [
    cat("action", NOTIFICATION_ACTIONS),
    ident("app"),
    cat("category", NOTIFICATION_CATEGORIES),
];
static NOTIFICATION_CENTER: [FieldSpec; 1] = [cat("access", &["open"])];
static RINGER: [FieldSpec; 1] = [cat("mode", RINGER_MODES)];
static SCREEN: [FieldSpec; 1] = [cat("state", SCREEN_STATES)];
static ORIENTATION: [FieldSpec; 1] = [cat("orientation", ORIENTATIONS)];
static TIME_OF_DAY: [FieldSpec; 2] = [num("hour"), num("weekday")];

impl SensorKind {
    pub const ALL: [SensorKind; 15] = [
        SensorKind::Accelerometer,
        SensorKind::Battery,
        SensorKind::Data,
        SensorKind::Light,
        SensorKind::Noise,
        SensorKind::SemanticLocation,
        SensorKind::App,
        SensorKind::Audio,
        SensorKind::ChargingState,
        SensorKind::Notification,
        SensorKind::NotificationCenter,
        SensorKind::RingerMode,
        SensorKind::Screen,
        SensorKind::ScreenOrientation,
        SensorKind::TimeOfDay,
    ];

    pub fn class(self) -> SensorClass {
        use SensorKind::*;
        match self {
            Accelerometer | Battery | Data | Light | Noise | SemanticLocation => SensorClass::Periodical,
            TimeOfDay => SensorClass::Derived,
            _ => SensorClass::EventDriven,
        }
    }

    pub fn name(self) -> &'static str {
        use SensorKind::*;
        match self {
            Accelerometer => "Accelerometer",
            Battery => "Battery",
            Data => "Data",
            Light => "Light",
            Noise => "Noise",
            SemanticLocation => "SemanticLocation",
            App => "App",
            Audio => "Audio",
            ChargingState => "ChargingState",
            Notification => "Notification",
            NotificationCenter => "NotificationCenter",
            RingerMode => "RingerMode",
            Screen => "Screen",
            ScreenOrientation => "ScreenOrientation",
            TimeOfDay => "TimeOfDay",
        }
    }

    /// Payload schema for this sensor.
    pub fn fields(self) -> &'static [FieldSpec] {
        use SensorKind::*;
        match self {
            Accelerometer => &ACCELEROMETER,
            Battery => &BATTERY,
            Data => &DATA,
            Light => &LIGHT,
            Noise => &NOISE,
            SemanticLocation => &SEMANTIC_LOCATION,
            App => &APP,
            Audio => &AUDIO,
            ChargingState => &CHARGING,
            Notification => &NOTIFICATION,
            NotificationCenter => &NOTIFICATION_CENTER,
            RingerMode => &RINGER,
            Screen => &SCREEN,
            ScreenOrientation => &ORIENTATION,
            TimeOfDay => &TIME_OF_DAY,
        }
    }

    pub fn field(self, key: &str) -> Option<&'static FieldSpec> {
        self.fields().iter().find(|f| f.key == key)
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SensorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SensorKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown sensor kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AppCategory {
    Messaging,
    Email,
    Productivity,
    Social,
    Entertainment,
    Games,
    Alert,
    System,
    Other,
}

impl AppCategory {
    pub const ALL: [AppCategory; 9] = [
        AppCategory::Messaging,
        AppCategory::Email,
        AppCategory::Productivity,
        AppCategory::Social,
        AppCategory::Entertainment,
        AppCategory::Games,
        AppCategory::Alert,
        AppCategory::System,
        AppCategory::Other,
    ];

    /// Categories a posted notification can carry.
    pub const NOTIFICATION: [AppCategory; 8] = [
        AppCategory::Messaging,
        AppCategory::Email,
        AppCategory::Productivity,
        AppCategory::Social,
        AppCategory::Entertainment,
        AppCategory::Games,
        AppCategory::Alert,
        AppCategory::Other,
    ];

    /// Categories an app launch can carry.
    pub const LAUNCH: [AppCategory; 8] = [
        AppCategory::Messaging,
        AppCategory::Email,
        AppCategory::Productivity,
        AppCategory::Social,
        AppCategory::Entertainment,
        AppCategory::Games,
        AppCategory::Alert,
        AppCategory::System,
    ];

    pub fn code(self) -> &'static str {
        use AppCategory::*;
        match self {
            Messaging => "messaging",
            Email => "email",
            Productivity => "productivity",
            Social => "social",
            Entertainment => "entertainment",
            Games => "games",
            Alert => "alert",
            System => "system",
            Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AppCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for AppCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AppCategory::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown app category `{s}`")))
    }
}

/// Opaque user identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(Arc<str>);

impl UserId {
    pub fn new(id: impl AsRef<str>) -> Self {
        UserId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::borrow::Borrow<str> for UserId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn code(self) -> &'static str {
        match self {
            Gender::Female => "f",
            Gender::Male => "m",
        }
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f" | "female" => Ok(Gender::Female),
            "m" | "male" => Ok(Gender::Male),
            _ => Err(Error::Validation(format!("unknown gender `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Text(Arc<str>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{v}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

static SYMBOLS: LazyLock<HashMap<&'static str, Arc<str>>> = LazyLock::new(|| {
    let mut map = HashMap::new();
    for kind in SensorKind::ALL {
        for field in kind.fields() {
            map.entry(field.key).or_insert_with(|| Arc::from(field.key));
            if let FieldKind::Categorical(options) = field.kind {
                for option in options {
                    map.entry(*option).or_insert_with(|| Arc::from(*option));
                }
            }
        }
    }
    map
});

/// Shared string for a schema key or categorical code; allocates only for
/// strings outside the schema.
pub fn symbol(s: &str) -> Arc<str> {
    SYMBOLS.get(s).cloned().unwrap_or_else(|| Arc::from(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorEvent {
    pub user_id: UserId,
    pub timestamp: i64,
    pub kind: SensorKind,
    pub payload: Vec<(Arc<str>, Value)>,
}

impl SensorEvent {
    pub fn new(user_id: UserId, timestamp: i64, kind: SensorKind) -> Self {
        SensorEvent {
            user_id,
            timestamp,
            kind,
            payload: Vec::new(),
        }
    }

    pub fn with_num(mut self, key: &str, value: f64) -> Self {
        self.payload.push((symbol(key), Value::Num(value)));
        self
    }

    pub fn with_text(mut self, key: &str, value: impl AsRef<str>) -> Self {
        self.payload.push((symbol(key), Value::Text(symbol(value.as_ref()))));
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.payload.iter().find(|(k, _)| &**k == key).map(|(_, v)| v)
    }

    pub fn num(&self, key: &str) -> Option<f64> {
        match self.get(key)? {
            Value::Num(v) => Some(*v),
            Value::Text(_) => None,
        }
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        match self.get(key)? {
            Value::Text(s) => Some(s),
            Value::Num(_) => None,
        }
    }

    pub fn is_notification_post(&self) -> bool {
        self.kind == SensorKind::Notification && self.text("action") == Some("post")
    }

    pub fn is_unlock(&self) -> bool {
        self.kind == SensorKind::Screen && self.text("state") == Some("unlocked")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserTrace {
    pub user_id: UserId,
    pub age: u32,
    pub gender: Gender,
    pub events: Vec<SensorEvent>,
}

impl UserTrace {
    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp)
    }

    pub(crate) fn ensure_sorted(&self) -> Result<()> {
        match self.events.windows(2).position(|w| w[0].timestamp > w[1].timestamp) {
            None => Ok(()),
            Some(i) => Err(Error::Validation(format!(
                "user {}: event {} at t={} precedes event {} at t={}",
                self.user_id,
                i + 1,
                self.events[i + 1].timestamp,
                i,
                self.events[i].timestamp
            ))),
        }
    }

    /// Copy of this trace without one sensor's events. Notification posts
    /// survive with their identifying fields so ground truth stays attached.
    pub fn without_sensor(&self, kind: SensorKind) -> UserTrace {
        let events = self
            .events
            .iter()
            .filter(|e| e.kind != kind || e.is_notification_post())
            .cloned()
            .collect();
        UserTrace {
            user_id: self.user_id.clone(),
            age: self.age,
            gender: self.gender,
            events,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledNotification {
    pub user_id: UserId,
    pub post_time: i64,
    pub app_id: Arc<str>,
    pub category: AppCategory,
    pub label: bool,
    /// Posted less than one horizon before the trace ends, so a late launch
    /// may have been cut off.
    pub truncated: bool,
}

/// Ground truth for every notification post: attended iff an app launch with
/// the same app id follows within `(post_time, post_time + horizon]`.
pub fn label_notifications(trace: &UserTrace, horizon: i64) -> Result<Vec<LabeledNotification>> {
    if horizon <= 0 {
        return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
    }
    trace.ensure_sorted()?;

    let mut launches: HashMap<&str, Vec<i64>> = HashMap::new();
    for e in trace.events.iter().filter(|e| e.kind == SensorKind::App) {
        if let Some(app) = e.text("app") {
            launches.entry(app).or_default().push(e.timestamp);
        }
    }
    let trace_end = trace.events.last().map_or(i64::MIN, |e| e.timestamp);

    let mut out = Vec::new();
    for (i, e) in trace.events.iter().enumerate() {
        if !e.is_notification_post() {
            continue;
        }
        let app = e
            .text("app")
            .ok_or_else(|| Error::Validation(format!("notification post {i} without app id")))?;
        let category: AppCategory = e
            .text("category")
            .ok_or_else(|| Error::Validation(format!("notification post {i} without category")))?
            .parse()?;
        let post = e.timestamp;
        let label = launches.get(app).is_some_and(|times| {
            let first_after = times.partition_point(|&t| t <= post);
            times.get(first_after).is_some_and(|&t| t <= post + horizon)
        });
        out.push(LabeledNotification {
            user_id: trace.user_id.clone(),
            post_time: post,
            app_id: symbol(app),
            category,
            label,
            truncated: post + horizon > trace_end,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceIssue {
    Unordered { index: usize },
    UnknownKey { index: usize, key: String },
    UnknownCode { index: usize, key: String, value: String },
    TypeMismatch { index: usize, key: String },
    NonFinite { index: usize, key: String },
    ForeignUser { index: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<TraceIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn ordering_violations(&self) -> usize {
        self.count(|i| matches!(i, TraceIssue::Unordered { .. }))
    }

    pub fn finiteness_violations(&self) -> usize {
        self.count(|i| matches!(i, TraceIssue::NonFinite { .. }))
    }

    fn count(&self, pred: impl Fn(&TraceIssue) -> bool) -> usize {
        self.issues.iter().filter(|i| pred(i)).count()
    }
}

pub fn validate_trace(trace: &UserTrace) -> ValidationReport {
    let mut issues = Vec::new();
    for (index, e) in trace.events.iter().enumerate() {
        if index > 0 && trace.events[index - 1].timestamp > e.timestamp {
            issues.push(TraceIssue::Unordered { index });
        }
        if e.user_id != trace.user_id {
            issues.push(TraceIssue::ForeignUser { index });
        }
        for (key, value) in &e.payload {
            let Some(spec) = e.kind.field(key) else {
                issues.push(TraceIssue::UnknownKey {
                    index,
                    key: key.to_string(),
                });
                continue;
            };
            match (spec.kind, value) {
                (FieldKind::Numeric, Value::Num(v)) => {
                    if !v.is_finite() {
                        issues.push(TraceIssue::NonFinite {
                            index,
                            key: key.to_string(),
                        });
                    }
                }
                (FieldKind::Categorical(options), Value::Text(s)) => {
                    if !options.contains(&&**s) {
                        issues.push(TraceIssue::UnknownCode {
                            index,
                            key: key.to_string(),
                            value: s.to_string(),
                        });
                    }
                }
                (FieldKind::Identifier, Value::Text(_)) => {}
                _ => issues.push(TraceIssue::TypeMismatch {
                    index,
                    key: key.to_string(),
                }),
            }
        }
    }
    ValidationReport { issues }
}

/// Hour of day (0..24) of a timestamp, treating timestamps as local time.
pub fn hour_of_day(ts: i64) -> u32 {
    (ts.rem_euclid(SECONDS_PER_DAY) / 3600) as u32
}

/// Day of week, Monday = 0.
pub fn day_of_week(ts: i64) -> u32 {
    // 1970-01-01 was a Thursday.
    ((ts.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7)) as u32
}

/// A whole study population.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub traces: Vec<UserTrace>,
}

impl Dataset {
    pub fn user_ids(&self) -> Vec<UserId> {
        self.traces.iter().map(|t| t.user_id.clone()).collect()
    }

    pub fn num_events(&self) -> usize {
        self.traces.iter().map(|t| t.events.len()).sum()
    }

    /// Earliest and latest event timestamp over all users.
    pub fn time_range(&self) -> Option<(i64, i64)> {
        let first = self
            .traces
            .iter()
            .filter_map(|t| t.events.first())
            .map(|e| e.timestamp)
            .min()?;
        let last = self
            .traces
            .iter()
            .filter_map(|t| t.events.last())
            .map(|e| e.timestamp)
            .max()?;
        Some((first, last))
    }

    pub fn without_sensor(&self, kind: SensorKind) -> Dataset {
        Dataset {
            traces: self.traces.iter().map(|t| t.without_sensor(kind)).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut events = BufWriter::new(File::create(dir.join(EVENTS_FILE))?);
        write_event_log(&mut events, &self.traces)?;
        events.flush()?;
        let mut demo = BufWriter::new(File::create(dir.join(DEMOGRAPHICS_FILE))?);
        write_demographics(&mut demo, &self.traces)?;
        demo.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let demo_path = dir.join(DEMOGRAPHICS_FILE);
        let demographics = read_demographics(&demo_path)?;
        let events_path = dir.join(EVENTS_FILE);
        let mut events = read_event_log(&events_path)?;
        let mut traces = Vec::with_capacity(demographics.len());
        for (user_id, age, gender) in demographics {
            let user_events = events.remove(&user_id).unwrap_or_default();
            traces.push(UserTrace {
                user_id,
                age,
                gender,
                events: user_events,
            });
        }
        if let Some(orphan) = events.keys().next() {
            return Err(Error::Validation(format!(
                "events for user {orphan} have no demographics entry"
            )));
        }
        Ok(Dataset { traces })
    }
}

pub fn write_event_log<W: Write>(out: &mut W, traces: &[UserTrace]) -> Result<()> {
    writeln!(out, "{EVENT_LOG_HEADER}")?;
    for trace in traces {
        for e in &trace.events {
            write!(out, "{}\t{}\t{}", e.user_id, e.timestamp, e.kind)?;
            for (k, v) in &e.payload {
                write!(out, "\t{k}={v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Reads an event log into per-user event lists, in file order.
pub fn read_event_log(path: &Path) -> Result<HashMap<UserId, Vec<SensorEvent>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut users: HashMap<UserId, Vec<SensorEvent>> = HashMap::new();
    let mut lines = reader.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim_end() == EVENT_LOG_HEADER => {}
        other => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header `{EVENT_LOG_HEADER}`, found {other:?}"),
            ))
        }
    }
    for (n, line) in lines.enumerate() {
        let line = line?;
        let lineno = n + 2;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(user), Some(ts), Some(kind)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(path, lineno, "expected user, timestamp and sensor"));
        };
        let timestamp: i64 = ts
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad timestamp `{ts}`")))?;
        let kind: SensorKind = kind
            .parse()
            .map_err(|e: Error| Error::parse(path, lineno, e.to_string()))?;
        let user_id = match users.get_key_value(user) {
            Some((u, _)) => u.clone(),
            None => UserId::new(user),
        };
        let mut event = SensorEvent::new(user_id.clone(), timestamp, kind);
        for pair in fields {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::parse(path, lineno, format!("bad payload `{pair}`")))?;
            let value = match kind.field(k).map(|f| f.kind) {
                Some(FieldKind::Numeric) => Value::Num(
                    v.parse()
                        .map_err(|_| Error::parse(path, lineno, format!("bad number `{v}` for `{k}`")))?,
                ),
                Some(_) => Value::Text(symbol(v)),
                None => match v.parse::<f64>() {
                    Ok(x) => Value::Num(x),
                    Err(_) => Value::Text(symbol(v)),
                },
            };
            event.payload.push((symbol(k), value));
        }
        users.entry(user_id).or_default().push(event);
    }
    Ok(users)
}

pub fn write_demographics<W: Write>(out: &mut W, traces: &[UserTrace]) -> Result<()> {
    writeln!(out, "{DEMOGRAPHICS_HEADER}")?;
    for t in traces {
        writeln!(out, "{}\t{}\t{}", t.user_id, t.age, t.gender.code())?;
    }
    Ok(())
}

pub fn read_demographics(path: &Path) -> Result<Vec<(UserId, u32, Gender)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim_end() == DEMOGRAPHICS_HEADER => {}
        other => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header `{DEMOGRAPHICS_HEADER}`, found {other:?}"),
            ))
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(path, n + 2, "expected user, age, gender"));
        }
        let age = cols[1]
            .parse()
            .map_err(|_| Error::parse(path, n + 2, format!("bad age `{}`", cols[1])))?;
        let gender = cols[2]
            .parse()
            .map_err(|e: Error| Error::parse(path, n + 2, e.to_string()))?;
        out.push((UserId::new(cols[0]), age, gender));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user() -> UserId {
        UserId::new("u1")
    }

    fn post(t: i64, app: &str) -> SensorEvent {
        SensorEvent::new(user(), t, SensorKind::Notification)
            .with_text("action", "post")
            .with_text("app", app)
            .with_text("category", "messaging")
    }

    fn launch(t: i64, app: &str) -> SensorEvent {
        SensorEvent::new(user(), t, SensorKind::App)
            .with_text("app", app)
            .with_text("category", "messaging")
    }

    fn trace(events: Vec<SensorEvent>) -> UserTrace {
        UserTrace {
            user_id: user(),
            age: 30,
            gender: Gender::Female,
            events,
        }
    }

    #[test]
    fn fifteen_ablation_units() {
        assert_eq!(SensorKind::ALL.len(), 15);
        let derived = SensorKind::ALL
            .iter()
            .filter(|k| k.class() == SensorClass::Derived)
            .count();
        let periodic = SensorKind::ALL
            .iter()
            .filter(|k| k.class() == SensorClass::Periodical)
            .count();
        assert_eq!((periodic, derived), (6, 1));
    }

    #[test]
    fn launch_within_horizon_is_attended() {
        let t = trace(vec![post(1000, "wa"), launch(1300, "wa")]);
        let labels = label_notifications(&t, 600).unwrap();
        assert_eq!(labels.len(), 1);
        assert!(labels[0].label);
    }

    #[test]
    fn launch_after_horizon_is_not_attended() {
        let t = trace(vec![post(1000, "wa"), launch(1601, "wa")]);
        assert!(!label_notifications(&t, 600).unwrap()[0].label);
    }

    #[test]
    fn launch_of_other_app_is_not_attended() {
        let t = trace(vec![post(1000, "wa"), launch(1100, "mail")]);
        assert!(!label_notifications(&t, 600).unwrap()[0].label);
    }

    #[test]
    fn launch_at_post_time_does_not_count() {
        let t = trace(vec![launch(1000, "wa"), post(1000, "wa"), launch(1600, "x")]);
        let labels = label_notifications(&t, 600).unwrap();
        assert!(!labels[0].label);
        assert!(!labels[0].truncated);
    }

    #[test]
    fn late_posts_are_flagged_truncated() {
        let t = trace(vec![post(1000, "wa"), launch(1200, "x")]);
        assert!(label_notifications(&t, 600).unwrap()[0].truncated);
    }

    #[test]
    fn unsorted_trace_is_rejected() {
        let t = trace(vec![post(1000, "wa"), launch(900, "wa")]);
        assert!(matches!(label_notifications(&t, 600), Err(Error::Validation(_))));
    }

    #[test]
    fn validation_report() {
        let ok = trace(vec![post(1000, "wa"), launch(1300, "wa")]);
        assert!(validate_trace(&ok).is_empty());

        let unordered = trace(vec![launch(1300, "wa"), post(1000, "wa")]);
        assert_eq!(validate_trace(&unordered).ordering_violations(), 1);

        let nan = trace(vec![
            SensorEvent::new(user(), 5, SensorKind::Noise).with_num("db", f64::NAN)
        ]);
        let report = validate_trace(&nan);
        assert_eq!(report.finiteness_violations(), 1);
        assert_eq!(report.issues.len(), 1);

        let unknown = trace(vec![
            SensorEvent::new(user(), 5, SensorKind::Noise).with_num("volume", 3.0)
        ]);
        assert!(matches!(
            validate_trace(&unknown).issues[0],
            TraceIssue::UnknownKey { .. }
        ));
    }

    #[test]
    fn calendar_helpers() {
        // 2016-06-27 00:00 UTC was a Monday.
        let monday = 1_466_985_600;
        assert_eq!(day_of_week(monday), 0);
        assert_eq!(day_of_week(monday + 6 * SECONDS_PER_DAY), 6);
        assert_eq!(hour_of_day(monday + 3 * 3600 + 59), 3);
    }

    #[test]
    fn event_log_round_trip() {
        let t = trace(vec![
            post(1000, "wa"),
            SensorEvent::new(user(), 1100, SensorKind::Light).with_num("lux", 12.25),
            launch(1300, "wa"),
        ]);
        let ds = Dataset { traces: vec![t] };
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
