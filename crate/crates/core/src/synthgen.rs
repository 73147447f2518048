//! Deterministic synthetic study population with a planted, recoverable
//! attendance signal.
//!
//! Every user gets a diurnal activity profile (morning and evening peaks),
//! periodic sensor readings every sampling period, and event-driven sensors
//! drawn from inhomogeneous Poisson processes by thinning. Screen unlocks
//! come in bursty sessions. Notifications arrive per category at the
//! configured daily rates; whether each one is attended is then drawn from
//!
//! ```text
//! p = logistic(offset[category] + user_bias
//!              + strength * (a * unlocks + b * launches + c * notifications))
//! ```
//!
//! where the counts cover the `signal_window_s` seconds strictly before the
//! post. Attended notifications get a same-app launch inside the horizon.
//! Category offsets are solved so that the realized positive fraction hits
//! the configured target, including launches that happen to land inside the
//! horizon by chance. Ambient noise readings come from their own random
//! stream and carry no information about attendance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    AppCategory, Dataset, Gender, LabeledNotification, SensorEvent, SensorKind, UserId, UserTrace, DEFAULT_HORIZON_S,
    SECONDS_PER_DAY,
};

/// Monday 2016-06-27 00:00.
pub const DEFAULT_START: i64 = 1_466_985_600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTarget {
    pub category: AppCategory,
    /// Mean notifications per user and day.
    pub rate_per_day: f64,
    /// Target fraction of attended notifications.
    pub positive_rate: f64,
}

/// Daily rates and positive fractions per notification category. `Other`
/// is not part of the published statistics and gets a small rate.
pub fn default_category_targets() -> Vec<CategoryTarget> {
    use AppCategory::*;
    [
        (Messaging, 35.7, 0.591),
        (Email, 17.7, 0.175),
        (Productivity, 9.4, 0.211),
        (Social, 10.0, 0.255),
        (Entertainment, 5.1, 0.212),
        (Games, 7.2, 0.248),
        (Alert, 3.0, 0.125),
        (Other, 1.5, 0.15),
    ]
    .into_iter()
    .map(|(category, rate_per_day, positive_rate)| CategoryTarget {
        category,
        rate_per_day,
        positive_rate,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_users: usize,
    pub num_days: usize,
    pub seed: u64,
    pub start_time: i64,
    pub sampling_period_s: i64,
    pub horizon_s: i64,
    pub categories: Vec<CategoryTarget>,
    /// Gamma shape of the per-user multiplier on each category rate.
    pub rate_dispersion: f64,
    /// Multiplies the planted usage coefficients; 0 makes attendance
    /// independent of usage.
    pub signal_strength: f64,
    pub signal_window_s: i64,
    pub unlock_coef: f64,
    pub launch_coef: f64,
    pub notification_coef: f64,
    /// Standard deviation of the per-user logit offset.
    pub user_bias_sd: f64,
    pub sessions_per_day: f64,
    pub extra_unlocks_per_session: f64,
    pub session_minutes: f64,
    pub launches_per_day: f64,
    pub notification_center_per_day: f64,
    pub audio_per_day: f64,
    pub orientation_per_session: f64,
    pub attend_delay_s: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_users: 60,
            num_days: 35,
            seed: 2017,
            start_time: DEFAULT_START,
            sampling_period_s: 600,
            horizon_s: DEFAULT_HORIZON_S,
            categories: default_category_targets(),
            rate_dispersion: 3.0,
            signal_strength: 1.0,
            signal_window_s: 600,
            unlock_coef: 1.1,
            launch_coef: 0.35,
            notification_coef: 0.2,
            user_bias_sd: 0.5,
            sessions_per_day: 40.0,
            extra_unlocks_per_session: 1.2,
            session_minutes: 6.0,
            launches_per_day: 45.0,
            notification_center_per_day: 8.0,
            audio_per_day: 4.0,
            orientation_per_session: 0.3,
            attend_delay_s: 90.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_users < 2 {
            return bad(format!("num_users must be at least 2, got {}", self.num_users));
        }
        if self.num_days < 7 {
            return bad(format!("num_days must be at least 7, got {}", self.num_days));
        }
        if self.sampling_period_s <= 0 {
            return bad("sampling_period_s must be positive".into());
        }
        if self.horizon_s <= 1 || self.signal_window_s <= 0 {
            return bad("horizon_s and signal_window_s must be positive".into());
        }
        for c in &self.categories {
            if !(c.rate_per_day >= 0.0 && c.rate_per_day.is_finite()) {
                return bad(format!("rate for {} must be non-negative", c.category));
            }
            if !(0.0 < c.positive_rate && c.positive_rate < 1.0) {
                return bad(format!("positive rate for {} must lie in (0, 1)", c.category));
            }
            if !AppCategory::NOTIFICATION.contains(&c.category) {
                return bad(format!("{} is not a notification category", c.category));
            }
        }
        let rates = [
            self.rate_dispersion,
            self.sessions_per_day,
            self.extra_unlocks_per_session,
            self.session_minutes,
            self.launches_per_day,
            self.notification_center_per_day,
            self.audio_per_day,
            self.orientation_per_session,
            self.attend_delay_s,
            self.user_bias_sd,
            self.signal_strength,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("rates, durations and strengths must be finite and non-negative".into());
        }
        if self.rate_dispersion == 0.0 || self.session_minutes == 0.0 {
            return bad("rate_dispersion and session_minutes must be positive".into());
        }
        Ok(())
    }

    pub fn planted_signal(&self) -> PlantedSignal {
        PlantedSignal {
            window_s: self.signal_window_s,
            unlock_coef: self.signal_strength * self.unlock_coef,
            launch_coef: self.signal_strength * self.launch_coef,
            notification_coef: self.signal_strength * self.notification_coef,
        }
    }

    pub fn end_time(&self) -> i64 {
        self.start_time + self.num_days as i64 * SECONDS_PER_DAY
    }
}

/// Usage part of the attendance logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedSignal {
    pub window_s: i64,
    pub unlock_coef: f64,
    pub launch_coef: f64,
    pub notification_coef: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecentUsage {
    pub unlocks: usize,
    pub launches: usize,
    pub notifications: usize,
}

impl PlantedSignal {
    pub fn logit(&self, usage: RecentUsage) -> f64 {
        self.unlock_coef * usage.unlocks as f64
            + self.launch_coef * usage.launches as f64
            + self.notification_coef * usage.notifications as f64
    }

    /// Counts usage in `[post_time - window, post_time)` of a sorted event list.
    pub fn recent_usage(&self, events: &[SensorEvent], post_time: i64) -> RecentUsage {
        let lo = events.partition_point(|e| e.timestamp < post_time - self.window_s);
        let hi = events.partition_point(|e| e.timestamp < post_time);
        let mut usage = RecentUsage::default();
        for e in &events[lo..hi] {
            if e.is_unlock() {
                usage.unlocks += 1;
            } else if e.kind == SensorKind::App {
                usage.launches += 1;
            } else if e.is_notification_post() {
                usage.notifications += 1;
            }
        }
        usage
    }
}

/// Generated population plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    /// Per user, per notification post (in time order): attendance probability.
    pub attendance_probability: Vec<Vec<f64>>,
    pub user_bias: Vec<f64>,
    /// Solved logit offset per notification category.
    pub category_offsets: BTreeMap<AppCategory, f64>,
}

impl Generated {
    /// Resolved configuration text, written beside the generated files.
    pub fn resolved_config(&self, config: &GenConfig) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# generator configuration as resolved for this dataset");
        let _ = writeln!(out, "{config:#?}");
        let _ = writeln!(out, "# solved category offsets");
        for (cat, offset) in &self.category_offsets {
            let _ = writeln!(out, "offset.{cat} = {offset}");
        }
        out
    }
}

struct App {
    id: Arc<str>,
    launch_category: AppCategory,
}

struct UserPlan {
    user_id: UserId,
    age: u32,
    gender: Gender,
    bias: f64,
    phase_shift_h: f64,
    morning_amp: f64,
    evening_amp: f64,
    apps: Vec<App>,
    events: Vec<SensorEvent>,
    /// Posts as (time, category, app index).
    posts: Vec<(i64, AppCategory, usize)>,
}

fn gaussian_bump(h: f64, center: f64, width: f64) -> f64 {
    let d = h - center;
    (-d * d / (2.0 * width * width)).exp()
}

/// Two-peak daily activity profile, roughly mean one over a day.
fn diurnal(ts: i64, plan: &UserPlan) -> f64 {
    let weekend = crate::events::day_of_week(ts) >= 5;
    let mut h = ts.rem_euclid(SECONDS_PER_DAY) as f64 / 3600.0 - plan.phase_shift_h;
    if weekend {
        h -= 1.0;
    }
    let h = h.rem_euclid(24.0);
    let plateau = if (9.5..18.5).contains(&h) { 0.45 } else { 0.0 };
    let night = if !(7.0..23.5).contains(&h) { 0.04 } else { 0.12 };
    night
        + plateau
        + plan.morning_amp * 1.6 * gaussian_bump(h, 8.3, 1.3)
        + plan.evening_amp * 2.0 * gaussian_bump(h, 20.5, 1.8)
}

const DIURNAL_MAX: f64 = 0.12 + 0.45 + 1.3 * 1.6 + 1.3 * 2.0;

fn diurnal_mean(plan: &UserPlan, start: i64) -> f64 {
    let n = 7 * 24 * 6;
    (0..n).map(|k| diurnal(start + k as i64 * 600, plan)).sum::<f64>() / n as f64
}

fn sub_rng(seed: u64, user: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((user as u64 + 1) << 8) | stream);
    rng
}

/// Event times of an inhomogeneous Poisson process with `per_day` mean daily
/// count scaled by the user's diurnal profile, by thinning.
fn poisson_times(rng: &mut ChaCha8Rng, plan: &UserPlan, per_day: f64, norm: f64, start: i64, end: i64) -> Vec<i64> {
    let mut out = Vec::new();
    if per_day <= 0.0 {
        return out;
    }
    let peak = per_day * DIURNAL_MAX / norm / SECONDS_PER_DAY as f64;
    let gaps = Exp::new(peak).expect("positive rate");
    let mut t = start as f64;
    loop {
        t += gaps.sample(rng);
        if t >= end as f64 {
            break;
        }
        let ts = t as i64;
        if rng.gen::<f64>() * DIURNAL_MAX < diurnal(ts, plan) {
            out.push(ts);
        }
    }
    out
}

fn round3(v: f64) -> f64 {
    ((v * 1000.0).round() / 1000.0).max(0.001)
}

fn build_apps(rng: &mut ChaCha8Rng) -> Vec<App> {
    use AppCategory::*;
    let mut apps = Vec::new();
    for (cat, count) in [
        (Messaging, 3),
        (Email, 2),
        (Productivity, 2),
        (Social, 2),
        (Entertainment, 2),
        (Games, 2),
        (Alert, 1),
        (System, 2),
    ] {
        let offset = rng.gen_range(0..4);
        for k in 0..count {
            apps.push(App {
                id: Arc::from(format!("app.{}.{}", cat.code(), k + offset)),
                launch_category: cat,
            });
        }
    }
    apps
}

fn launch_weight(cat: AppCategory) -> f64 {
    use AppCategory::*;
    match cat {
        Messaging => 0.12,
        Email => 0.05,
        Productivity => 0.05,
        Social => 0.08,
        Entertainment => 0.05,
        Games => 0.05,
        Alert => 0.03,
        System => 0.06,
        Other => 0.0,
    }
}

fn notification_apps(apps: &[App], cat: AppCategory) -> Vec<usize> {
    let launch = if cat == AppCategory::Other {
        AppCategory::System
    } else {
        cat
    };
    apps.iter()
        .enumerate()
        .filter(|(_, a)| a.launch_category == launch)
        .map(|(i, _)| i)
        .collect()
}

fn place_at(rng: &mut ChaCha8Rng, ts: i64, works: bool, previous: &str) -> &'static str {
    let h = ts.rem_euclid(SECONDS_PER_DAY) / 3600;
    let weekday = crate::events::day_of_week(ts) < 5;
    // Mostly sticky; re-decided with small probability each reading.
    let scheduled = if !(7..22).contains(&h) {
        "home"
    } else if weekday && works && (9..17).contains(&h) {
        "work"
    } else if (18..21).contains(&h) || !weekday && (11..18).contains(&h) {
        "out"
    } else {
        "home"
    };
    let r: f64 = rng.gen();
    if r < 0.03 {
        "unknown"
    } else if r < 0.85 || previous.is_empty() {
        scheduled
    } else {
        match previous {
            "home" => "home",
            "work" => "work",
            "out" => "out",
            _ => scheduled,
        }
    }
}

fn plan_user(config: &GenConfig, index: usize) -> UserPlan {
    let mut rng = sub_rng(config.seed, index, 0);
    let user_id = UserId::new(format!("u{index:03}"));
    let age = Normal::<f64>::new(37.7, 11.05)
        .expect("valid normal")
        .sample(&mut rng)
        .round()
        .clamp(18.0, 66.0) as u32;
    let gender = if rng.gen::<f64>() < 147.0 / 279.0 {
        Gender::Female
    } else {
        Gender::Male
    };
    let bias = if config.user_bias_sd > 0.0 {
        Normal::new(0.0, config.user_bias_sd)
            .expect("valid normal")
            .sample(&mut rng)
    } else {
        0.0
    };
    let apps = build_apps(&mut rng);
    UserPlan {
        user_id,
        age,
        gender,
        bias,
        phase_shift_h: rng.gen_range(-1.2..1.2),
        morning_amp: rng.gen_range(0.7..1.3),
        evening_amp: rng.gen_range(0.7..1.3),
        apps,
        events: Vec::new(),
        posts: Vec::new(),
    }
}

fn periodic_events(config: &GenConfig, plan: &mut UserPlan, index: usize) {
    let mut rng = sub_rng(config.seed, index, 1);
    let mut noise_rng = sub_rng(config.seed, index, 2);
    let noise_level = Normal::<f64>::new(0.0, 7.0).expect("valid normal");
    let user_noise_base: f64 = noise_rng.gen_range(38.0..52.0);
    let works = rng.gen::<f64>() < 0.75;
    let offset = rng.gen_range(0..60);
    let light_scale: f64 = rng.gen_range(0.6..1.6);
    let start = config.start_time + offset;
    let end = config.end_time();
    let uid = plan.user_id.clone();
    let mut place = "";
    let mut battery_level_drain: f64 = rng.gen_range(2.0..6.0);
    let mut t = start;
    while t < end {
        let activity = diurnal(t, plan);
        let h = t.rem_euclid(SECONDS_PER_DAY) as f64 / 3600.0;
        let accel_mean = round3(0.05 + activity * rng.gen_range(0.05..0.6));
        let accel_max = round3(accel_mean * rng.gen_range(1.5..4.0));
        plan.events.push(
            SensorEvent::new(uid.clone(), t, SensorKind::Accelerometer)
                .with_num("mean", accel_mean)
                .with_num("max", accel_max),
        );
        battery_level_drain =
            (0.8 * battery_level_drain + 0.2 * (1.0 + 4.0 * activity + rng.gen_range(0.0..2.0))).max(0.1);
        plan.events
            .push(SensorEvent::new(uid.clone(), t, SensorKind::Battery).with_num("drain", round3(battery_level_drain)));
        place = place_at(&mut rng, t, works, place);
        let cell_share = match place {
            "out" | "unknown" => rng.gen_range(0.6..1.0),
            _ => rng.gen_range(0.0..0.2),
        };
        let rx = round3(activity * rng.gen_range(1.0..40.0) + rng.gen_range(0.0..0.5));
        let tx = round3(rx * rng.gen_range(0.05..0.4));
        plan.events.push(
            SensorEvent::new(uid.clone(), t, SensorKind::Data)
                .with_num("rx_total", rx)
                .with_num("tx_total", tx)
                .with_num("rx_cell", round3(rx * cell_share))
                .with_num("tx_cell", round3(tx * cell_share)),
        );
        let daylight = gaussian_bump(h, 13.0, 3.5);
        let lux = if place == "out" {
            round3(light_scale * (20.0 + 2000.0 * daylight) * rng.gen_range(0.3..1.2))
        } else {
            round3(light_scale * (1.0 + 300.0 * daylight) * rng.gen_range(0.1..1.2))
        };
        plan.events
            .push(SensorEvent::new(uid.clone(), t, SensorKind::Light).with_num("lux", lux));
        let db = round3((user_noise_base + noise_level.sample(&mut noise_rng)).max(20.0));
        plan.events
            .push(SensorEvent::new(uid.clone(), t, SensorKind::Noise).with_num("db", db));
        plan.events
            .push(SensorEvent::new(uid.clone(), t, SensorKind::SemanticLocation).with_text("place", place));
        t += config.sampling_period_s;
    }
}

fn event_driven(config: &GenConfig, plan: &mut UserPlan, index: usize) {
    let start = config.start_time;
    let end = config.end_time();
    let norm = diurnal_mean(plan, start);
    let uid = plan.user_id.clone();

    // Screen sessions: bursts of unlocks with occasional orientation flips.
    let mut rng = sub_rng(config.seed, index, 3);
    let session_len = Exp::new(1.0 / (config.session_minutes * 60.0)).expect("positive");
    let extra = if config.extra_unlocks_per_session > 0.0 {
        Some(rand_distr::Poisson::new(config.extra_unlocks_per_session).expect("positive"))
    } else {
        None
    };
    let starts = poisson_times(&mut rng, plan, config.sessions_per_day, norm, start, end);
    let mut session_end = i64::MIN;
    for s in starts {
        if s <= session_end + 5 {
            continue;
        }
        let duration = (session_len.sample(&mut rng) as i64).clamp(20, 3600);
        let cycles = 1 + extra.map_or(0, |d| d.sample(&mut rng) as usize);
        let mut marks: Vec<i64> = (1..cycles).map(|_| s + rng.gen_range(10..duration.max(11))).collect();
        marks.sort_unstable();
        marks.insert(0, s);
        let stop = (s + duration).min(end - 1);
        let mut last = s;
        for (k, &m) in marks.iter().enumerate() {
            let m = m.max(last + 4);
            if m + 3 >= stop {
                break;
            }
            if k > 0 {
                plan.events
                    .push(SensorEvent::new(uid.clone(), m - 2, SensorKind::Screen).with_text("state", "off"));
            }
            plan.events
                .push(SensorEvent::new(uid.clone(), m, SensorKind::Screen).with_text("state", "on"));
            plan.events.push(
                SensorEvent::new(uid.clone(), m + rng.gen_range(1..4), SensorKind::Screen)
                    .with_text("state", "unlocked"),
            );
            last = m + 4;
        }
        if rng.gen::<f64>() < config.orientation_per_session && stop > last + 2 {
            let t = rng.gen_range(last..stop);
            plan.events.push(
                SensorEvent::new(uid.clone(), t, SensorKind::ScreenOrientation).with_text("orientation", "landscape"),
            );
            plan.events.push(
                SensorEvent::new(uid.clone(), (t + 60).min(stop), SensorKind::ScreenOrientation)
                    .with_text("orientation", "portrait"),
            );
        }
        plan.events
            .push(SensorEvent::new(uid.clone(), stop, SensorKind::Screen).with_text("state", "off"));
        session_end = stop;
    }

    // Background app launches.
    let mut rng = sub_rng(config.seed, index, 4);
    let weights: Vec<f64> = plan.apps.iter().map(|a| launch_weight(a.launch_category)).collect();
    let total: f64 = weights.iter().sum();
    for t in poisson_times(&mut rng, plan, config.launches_per_day, norm, start, end) {
        let mut r = rng.gen::<f64>() * total;
        let mut chosen = plan.apps.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if r < *w {
                chosen = i;
                break;
            }
            r -= w;
        }
        let app = &plan.apps[chosen];
        plan.events.push(
            SensorEvent::new(uid.clone(), t, SensorKind::App)
                .with_text("app", &*app.id)
                .with_text("category", app.launch_category.code()),
        );
    }

    // Minor event-driven sensors.
    let mut rng = sub_rng(config.seed, index, 5);
    for t in poisson_times(&mut rng, plan, config.notification_center_per_day, norm, start, end) {
        plan.events
            .push(SensorEvent::new(uid.clone(), t, SensorKind::NotificationCenter).with_text("access", "open"));
    }
    for t in poisson_times(&mut rng, plan, config.audio_per_day, norm, start, end) {
        let state = ["music", "no_music", "speaker", "headphones"][rng.gen_range(0..4)];
        plan.events
            .push(SensorEvent::new(uid.clone(), t, SensorKind::Audio).with_text("state", state));
    }
    let mut day = start;
    while day < end {
        let plug = day + 22 * 3600 + rng.gen_range(0..7200);
        let unplug = day + SECONDS_PER_DAY + 6 * 3600 + rng.gen_range(0..7200);
        if plug < end {
            plan.events
                .push(SensorEvent::new(uid.clone(), plug, SensorKind::ChargingState).with_text("state", "charging"));
            plan.events
                .push(SensorEvent::new(uid.clone(), plug + 1, SensorKind::RingerMode).with_text("mode", "silent"));
        }
        if unplug < end {
            plan.events.push(
                SensorEvent::new(uid.clone(), unplug, SensorKind::ChargingState).with_text("state", "not_charging"),
            );
            let mode = if rng.gen::<f64>() < 0.7 { "normal" } else { "vibrate" };
            plan.events
                .push(SensorEvent::new(uid.clone(), unplug + 1, SensorKind::RingerMode).with_text("mode", mode));
        }
        day += SECONDS_PER_DAY;
    }

    // Notification posts per category.
    let mut rng = sub_rng(config.seed, index, 6);
    for target in &config.categories {
        let candidates = notification_apps(&plan.apps, target.category);
        let shape = config.rate_dispersion;
        let multiplier = Gamma::new(shape, 1.0 / shape).expect("positive shape").sample(&mut rng);
        let times = poisson_times(&mut rng, plan, target.rate_per_day * multiplier, norm, start, end);
        for t in times {
            let app = candidates[rng.gen_range(0..candidates.len())];
            plan.posts.push((t, target.category, app));
        }
    }
    plan.posts.sort_by_key(|p| p.0);
    for &(t, category, app) in &plan.posts {
        plan.events.push(
            SensorEvent::new(uid.clone(), t, SensorKind::Notification)
                .with_text("action", "post")
                .with_text("app", &*plan.apps[app].id)
                .with_text("category", category.code()),
        );
    }
    plan.events.sort_by_key(|e| e.timestamp);
}

/// Per-post quantities needed to solve the category offsets.
struct PostSummary {
    category: AppCategory,
    fixed_logit: f64,
    chance_launch: bool,
}

fn post_summaries(config: &GenConfig, plan: &UserPlan) -> Vec<PostSummary> {
    let signal = config.planted_signal();
    let mut launches: BTreeMap<&str, Vec<i64>> = BTreeMap::new();
    for e in plan.events.iter().filter(|e| e.kind == SensorKind::App) {
        launches
            .entry(e.text("app").unwrap_or(""))
            .or_default()
            .push(e.timestamp);
    }
    plan.posts
        .iter()
        .map(|&(t, category, app)| {
            let usage = signal.recent_usage(&plan.events, t);
            let chance_launch = launches.get(&*plan.apps[app].id).is_some_and(|ts| {
                let i = ts.partition_point(|&x| x <= t);
                ts.get(i).is_some_and(|&x| x <= t + config.horizon_s)
            });
            PostSummary {
                category,
                fixed_logit: plan.bias + signal.logit(usage),
                chance_launch,
            }
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Offset per category so that the expected fraction of positive labels
/// (attended, or a chance launch inside the horizon) equals the target.
fn solve_offsets(config: &GenConfig, posts: &[PostSummary]) -> BTreeMap<AppCategory, f64> {
    let mut offsets = BTreeMap::new();
    for target in &config.categories {
        let rows: Vec<&PostSummary> = posts.iter().filter(|p| p.category == target.category).collect();
        let expected = |offset: f64| {
            rows.iter()
                .map(|p| {
                    if p.chance_launch {
                        1.0
                    } else {
                        sigmoid(offset + p.fixed_logit)
                    }
                })
                .sum::<f64>()
                / rows.len() as f64
        };
        let offset = if rows.is_empty() {
            (target.positive_rate / (1.0 - target.positive_rate)).ln()
        } else {
            let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if expected(mid) < target.positive_rate {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        offsets.insert(target.category, offset);
    }
    offsets
}

fn realize_attendance(
    config: &GenConfig,
    plan: &mut UserPlan,
    index: usize,
    offsets: &BTreeMap<AppCategory, f64>,
) -> Vec<f64> {
    let mut rng = sub_rng(config.seed, index, 7);
    let signal = config.planted_signal();
    let delay = Exp::new(1.0 / config.attend_delay_s.max(1.0)).expect("positive");
    let linger = Exp::new(1.0 / 2400.0).expect("positive");
    let uid = plan.user_id.clone();
    let mut unlocks = Vec::new();
    let mut launches = Vec::new();
    for e in &plan.events {
        if e.is_unlock() {
            unlocks.push(e.timestamp);
        } else if e.kind == SensorKind::App {
            launches.push(e.timestamp);
        }
    }
    let post_times: Vec<i64> = plan.posts.iter().map(|p| p.0).collect();
    let count =
        |times: &[i64], t: i64| times.partition_point(|&x| x < t) - times.partition_point(|&x| x < t - signal.window_s);
    let mut added = Vec::new();
    let mut probabilities = Vec::with_capacity(plan.posts.len());
    for &(t, category, app) in &plan.posts {
        let usage = RecentUsage {
            unlocks: count(&unlocks, t),
            launches: count(&launches, t),
            notifications: count(&post_times, t),
        };
        let p = sigmoid(offsets[&category] + plan.bias + signal.logit(usage));
        probabilities.push(p);
        let app = &plan.apps[app];
        let removal = if rng.gen::<f64>() < p {
            let lag = (delay.sample(&mut rng) as i64).clamp(1, config.horizon_s - 1);
            let at = t + lag;
            let pos = launches.partition_point(|&x| x <= at);
            launches.insert(pos, at);
            added.push(
                SensorEvent::new(uid.clone(), at, SensorKind::App)
                    .with_text("app", &*app.id)
                    .with_text("category", app.launch_category.code()),
            );
            at + 1
        } else {
            t + config.horizon_s + linger.sample(&mut rng) as i64
        };
        added.push(
            SensorEvent::new(uid.clone(), removal, SensorKind::Notification)
                .with_text("action", "remove")
                .with_text("app", &*app.id)
                .with_text("category", category.code()),
        );
    }
    let end = config.end_time();
    added.retain(|e| e.timestamp < end);
    plan.events.extend(added);
    plan.events.sort_by_key(|e| e.timestamp);
    probabilities
}

/// Generates the full population. Identical configurations produce identical
/// datasets.
pub fn generate(config: &GenConfig) -> Result<Generated> {
    config.validate()?;
    let mut plans: Vec<UserPlan> = (0..config.num_users)
        .map(|i| {
            let mut plan = plan_user(config, i);
            periodic_events(config, &mut plan, i);
            event_driven(config, &mut plan, i);
            plan
        })
        .collect();

    let summaries: Vec<PostSummary> = plans.iter().flat_map(|p| post_summaries(config, p)).collect();
    let category_offsets = solve_offsets(config, &summaries);

    let mut attendance_probability = Vec::with_capacity(plans.len());
    for (i, plan) in plans.iter_mut().enumerate() {
        attendance_probability.push(realize_attendance(config, plan, i, &category_offsets));
    }
    let user_bias = plans.iter().map(|p| p.bias).collect();
    let traces = plans
        .into_iter()
        .map(|p| UserTrace {
            user_id: p.user_id,
            age: p.age,
            gender: p.gender,
            events: p.events,
        })
        .collect();
    Ok(Generated {
        dataset: Dataset { traces },
        attendance_probability,
        user_bias,
        category_offsets,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryRow {
    pub category: AppCategory,
    pub count: usize,
    pub mean_per_user_day: f64,
    pub sd_per_user_day: f64,
    /// Absent when the category has no notifications.
    pub positive_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<CategoryRow>,
    pub user_days: usize,
}

impl Summary {
    pub fn row(&self, category: AppCategory) -> Option<&CategoryRow> {
        self.rows.iter().find(|r| r.category == category)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("category\tcount\tmean_per_user_day\tsd_per_user_day\tpositive_fraction\n");
        for r in &self.rows {
            let frac = r
                .positive_fraction
                .map_or_else(|| "NA".to_string(), |f| format!("{f:.4}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{:.3}\t{:.3}\t{}",
                r.category, r.count, r.mean_per_user_day, r.sd_per_user_day, frac
            );
        }
        out
    }
}

/// Per-category counts, per user-day means and positive fractions.
///
/// `labels[i]` are the labeled notifications of `dataset.traces[i]`. User
/// days span from the dataset's first midnight to its last event.
pub fn summarize(dataset: &Dataset, labels: &[Vec<LabeledNotification>]) -> Summary {
    let Some((first, last)) = dataset.time_range() else {
        return Summary {
            rows: AppCategory::NOTIFICATION
                .iter()
                .map(|&category| CategoryRow {
                    category,
                    count: 0,
                    mean_per_user_day: 0.0,
                    sd_per_user_day: 0.0,
                    positive_fraction: None,
                })
                .collect(),
            user_days: 0,
        };
    };
    let day0 = first.div_euclid(SECONDS_PER_DAY);
    let days = (last.div_euclid(SECONDS_PER_DAY) - day0 + 1) as usize;
    let users = labels.len();
    let user_days = users * days;
    let rows = AppCategory::NOTIFICATION
        .iter()
        .map(|&category| {
            let mut per_day = vec![0usize; user_days];
            let (mut count, mut positive) = (0usize, 0usize);
            for (u, user_labels) in labels.iter().enumerate() {
                for n in user_labels.iter().filter(|n| n.category == category) {
                    count += 1;
                    positive += usize::from(n.label);
                    let d = (n.post_time.div_euclid(SECONDS_PER_DAY) - day0) as usize;
                    per_day[u * days + d.min(days - 1)] += 1;
                }
            }
            let mean = count as f64 / user_days.max(1) as f64;
            let var = if user_days > 1 {
                per_day.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (user_days - 1) as f64
            } else {
                0.0
            };
            CategoryRow {
                category,
                count,
                mean_per_user_day: mean,
                sd_per_user_day: var.sqrt(),
                positive_fraction: (count > 0).then(|| positive as f64 / count as f64),
            }
        })
        .collect();
    Summary { rows, user_days }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{label_notifications, validate_trace};

    fn small() -> GenConfig {
        GenConfig {
            num_users: 4,
            num_days: 7,
            ..GenConfig::default()
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            GenConfig {
                num_users: 1,
                ..small()
            },
            GenConfig { num_days: 6, ..small() },
            GenConfig {
                sampling_period_s: 0,
                ..small()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
        let mut cfg = small();
        cfg.categories[0].rate_per_day = -1.0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn traces_are_valid_and_sorted() {
        let g = generate(&small()).unwrap();
        assert_eq!(g.dataset.traces.len(), 4);
        for t in &g.dataset.traces {
            assert!(t.is_sorted());
            assert!(validate_trace(t).is_empty(), "{:?}", validate_trace(t).issues.first());
            assert!((18..=66).contains(&t.age));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate(&GenConfig { seed: 99, ..small() }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn periodic_sensors_follow_sampling_period() {
        let g = generate(&small()).unwrap();
        let light: Vec<i64> = g.dataset.traces[0]
            .events
            .iter()
            .filter(|e| e.kind == SensorKind::Light)
            .map(|e| e.timestamp)
            .collect();
        assert_eq!(light.len(), 7 * 144);
        assert!(light.windows(2).all(|w| w[1] - w[0] == 600));
    }

    #[test]
    fn planted_signal_only_sees_the_past() {
        let cfg = small();
        let g = generate(&cfg).unwrap();
        let signal = cfg.planted_signal();
        let trace = &g.dataset.traces[1];
        let posts: Vec<i64> = trace
            .events
            .iter()
            .filter(|e| e.is_notification_post())
            .map(|e| e.timestamp)
            .collect();
        for (k, &t) in posts.iter().enumerate().step_by(17) {
            let truncated: Vec<SensorEvent> = trace.events.iter().filter(|e| e.timestamp < t).cloned().collect();
            let full = signal.recent_usage(&trace.events, t);
            assert_eq!(full, signal.recent_usage(&truncated, t));
            let category: AppCategory = trace
                .events
                .iter()
                .find(|e| e.is_notification_post() && e.timestamp == t)
                .and_then(|e| e.text("category"))
                .unwrap()
                .parse()
                .unwrap();
            let p = sigmoid(g.category_offsets[&category] + g.user_bias[1] + signal.logit(full));
            // Same-time posts share a timestamp; only compare unique ones.
            if posts.iter().filter(|&&x| x == t).count() == 1 {
                assert!((p - g.attendance_probability[1][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_strength_removes_usage_dependence() {
        let cfg = GenConfig {
            signal_strength: 0.0,
            ..small()
        };
        let g = generate(&cfg).unwrap();
        for (u, probs) in g.attendance_probability.iter().enumerate() {
            let trace = &g.dataset.traces[u];
            let cats: Vec<AppCategory> = trace
                .events
                .iter()
                .filter(|e| e.is_notification_post())
                .map(|e| e.text("category").unwrap().parse().unwrap())
                .collect();
            for (p, c) in probs.iter().zip(&cats) {
                assert!((p - sigmoid(g.category_offsets[c] + g.user_bias[u])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn summary_fractions() {
        let user = UserId::new("a");
        let mk = |t: i64, label: bool| LabeledNotification {
            user_id: user.clone(),
            post_time: DEFAULT_START + t,
            app_id: Arc::from("x"),
            category: AppCategory::Messaging,
            label,
            truncated: false,
        };
        let labels: Vec<LabeledNotification> = (0..10).map(|i| mk(i * 60, i < 6)).collect();
        let trace = UserTrace {
            user_id: user.clone(),
            age: 30,
            gender: Gender::Male,
            events: vec![SensorEvent::new(user.clone(), DEFAULT_START, SensorKind::Light).with_num("lux", 1.0)],
        };
        let ds = Dataset { traces: vec![trace] };
        let s = summarize(&ds, &[labels]);
        let msg = s.row(AppCategory::Messaging).unwrap();
        assert_eq!(msg.count, 10);
        assert!((msg.positive_fraction.unwrap() - 0.6).abs() < 1e-12);
        let email = s.row(AppCategory::Email).unwrap();
        assert_eq!(email.count, 0);
        assert_eq!(email.positive_fraction, None);
    }

    #[test]
    fn labels_cover_every_post() {
        let g = generate(&small()).unwrap();
        for t in &g.dataset.traces {
            let labels = label_notifications(t, 600).unwrap();
            let posts = t.events.iter().filter(|e| e.is_notification_post()).count();
            assert_eq!(labels.len(), posts);
        }
    }
}
