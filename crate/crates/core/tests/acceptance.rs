//! Acceptance suite. Prints one PASS/FAIL line per criterion followed by a
//! tally. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 1 2 3`.
//!
//! The process exits non-zero on a failing criterion only when
//! `ATTEND_ACCEPTANCE_STRICT=1` is set; otherwise the report is the outcome.

use std::collections::{BTreeMap, HashMap};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attend::encode::{compress, CompressionConfig, EncodedSample};
use attend::eval::{roc_auc, sensor_importance, Split, SplitAucs};
use attend::events::{AppCategory, SensorKind};
use attend::features::FeatureExtractor;
use attend::gbt::{boost, GbtConfig, Presorted};
use attend::pipeline::{
    fit_normalization, matrix_weights, rnn_training_streams, sample_count, split_matrix, Experiment, ExperimentConfig,
    GbtOutcome,
};
use attend::rnn::{self, gradient_check, RnnDims, RnnParams, RnnState, RnnTrainConfig, SeqBatch};
use attend::sequencing::SequencingConfig;
use attend::weighting::{GroupKey, WeightScheme};
use attend::{Error, Result};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

// ---------------------------------------------------------------- shared data

/// Default dataset plus cached GBT runs keyed by (seed, scheme, removed unit).
struct Shared {
    experiment: Option<Experiment>,
    gbt_runs: HashMap<(u64, WeightScheme, Option<SensorKind>, Vec<usize>), GbtOutcome>,
}

/// Grid point used where a single boosted model per run is enough.
const SINGLE_POINT: ([usize; 1], [f64; 1]) = ([4], [0.8]);

fn desk_rnn() -> RnnTrainConfig {
    RnnTrainConfig {
        embed: 16,
        hidden: 32,
        max_epochs: 12,
        ..RnnTrainConfig::default()
    }
}

impl Shared {
    fn experiment(&mut self) -> Result<&mut Experiment> {
        if self.experiment.is_none() {
            let started = Instant::now();
            let exp = Experiment::generate(ExperimentConfig::default())?;
            exp.features()?;
            exp.compressed()?;
            println!(
                "  default dataset: {} users, {} events, {} notifications, prepared in {:.1}s",
                exp.dataset.traces.len(),
                exp.dataset.num_events(),
                exp.labels.iter().map(Vec::len).sum::<usize>(),
                started.elapsed().as_secs_f64()
            );
            self.experiment = Some(exp);
        }
        Ok(self.experiment.as_mut().expect("just set"))
    }

    fn gbt(
        &mut self,
        seed: u64,
        scheme: WeightScheme,
        without: Option<SensorKind>,
        depths: &[usize],
        subsamples: &[f64],
    ) -> Result<GbtOutcome> {
        let key = (seed, scheme, without, depths.to_vec());
        if let Some(hit) = self
            .gbt_runs
            .get(&key)
            .filter(|o| o.model.params.subsample == subsamples[0] || subsamples.len() > 1)
        {
            return Ok(hit.clone());
        }
        let exp = self.experiment()?;
        exp.config.weighting = scheme;
        exp.config.gbt.depth_grid = depths.to_vec();
        exp.config.gbt.subsample_grid = subsamples.to_vec();
        let out = exp.gbt(seed, without)?;
        self.gbt_runs.insert(key, out.clone());
        Ok(out)
    }
}

// ------------------------------------------------------------- 1 compression

fn random_stream(rng: &mut ChaCha8Rng, all_truth: bool) -> Vec<EncodedSample> {
    let n = rng.gen_range(0..60);
    let mut t = rng.gen_range(0..10_000i64);
    let mut previous: Option<i64> = None;
    (0..n)
        .map(|_| {
            t += rng.gen_range(0..8 * 60);
            let dt = previous.map_or(0.0, |p| (t - p) as f64 / 60.0);
            previous = Some(t);
            let mut x: Vec<(u16, f64)> = Vec::new();
            for c in 0..6u16 {
                if rng.gen_bool(0.3) {
                    x.push((c, f64::from(rng.gen_range(1..4u8))));
                }
            }
            if x.is_empty() && rng.gen_bool(0.5) {
                x.push((rng.gen_range(0..6), 1.0));
            }
            let truth = all_truth || rng.gen_bool(0.2);
            EncodedSample {
                x,
                y: truth.then(|| rng.gen()),
                w: if truth { rng.gen_range(0.1..3.0) } else { 0.0 },
                dt,
                time: t,
                first_time: t,
                category: truth.then_some(AppCategory::Messaging),
            }
        })
        .collect()
}

/// Reference greedy grouping written from the merge rules.
fn reference_groups(samples: &[EncodedSample], span_s: i64) -> Vec<std::ops::Range<usize>> {
    let mut groups: Vec<std::ops::Range<usize>> = Vec::new();
    let mut values: BTreeMap<u16, f64> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let joins = match groups.last() {
            Some(g) => {
                let first = &samples[g.start];
                let last = &samples[g.end - 1];
                last.y.is_none()
                    && s.time - first.time <= span_s
                    && s.x.iter().all(|(c, v)| values.get(c).is_none_or(|o| o == v))
            }
            None => false,
        };
        if joins {
            groups.last_mut().expect("open group").end = i + 1;
        } else {
            groups.push(i..i + 1);
            values.clear();
        }
        values.extend(s.x.iter().copied());
    }
    groups
}

fn criterion_compression() -> Result<Verdict> {
    let config = CompressionConfig::default();
    let span_s = (config.max_span_minutes * 60.0) as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut problems = Vec::new();
    for case in 0..1000 {
        let all_truth = case % 10 == 0;
        let input = random_stream(&mut rng, all_truth);
        let output = compress(&input, &config)?;
        let groups = reference_groups(&input, span_s);
        let mut fail = |what: &str| problems.push(format!("stream {case}: {what}"));
        if output.len() != groups.len() {
            fail("group count differs from the reference");
            continue;
        }
        if output.len() > input.len() || (all_truth && output != input) {
            fail("length monotonicity / pass-through");
        }
        let truth_in: Vec<_> = input
            .iter()
            .filter(|s| s.y.is_some())
            .map(|s| (s.time, s.y, s.w))
            .collect();
        let truth_out: Vec<_> = output
            .iter()
            .filter(|s| s.y.is_some())
            .map(|s| (s.time, s.y, s.w))
            .collect();
        if truth_in != truth_out {
            fail("ground truth not conserved");
        }
        for (k, (g, o)) in groups.iter().zip(&output).enumerate() {
            let mut merged: BTreeMap<u16, f64> = BTreeMap::new();
            for s in &input[g.clone()] {
                for &(c, v) in &s.x {
                    if merged.insert(c, v).is_some_and(|old| old != v) {
                        fail("clash inside an emitted sample");
                    }
                }
            }
            if merged.into_iter().collect::<Vec<_>>() != o.x {
                fail("emitted values differ from the union of constituents");
            }
            if let Some(next) = groups.get(k + 1) {
                let candidate = &input[next.start];
                let mergeable = o.y.is_none()
                    && candidate.time - input[g.start].time <= span_s
                    && candidate.x.iter().all(|&(c, v)| o.get(c) == 0.0 || o.get(c) == v);
                if mergeable {
                    fail("adjacent emitted samples were mergeable");
                }
            }
        }
    }
    verdict(
        problems.is_empty(),
        match problems.first() {
            None => "1000 streams: conservation, clash-freedom, maximality, monotonicity".to_string(),
            Some(p) => format!("{} violations, first: {p}", problems.len()),
        },
    )
}

// ---------------------------------------------------------------------- 2 AUC

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn criterion_auc() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 1000 {
        let n = rng.gen_range(2..=12);
        let levels = rng.gen_range(1..=6);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..levels)) / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let auc = roc_auc(&scores, &labels)?.auc;
        worst = worst.max((auc - pair_count_auc(&scores, &labels)).abs());
        done += 1;
    }
    verdict(
        worst <= 1e-12,
        format!("1000 instances, max |trapezoid - pair count| = {worst:.1e}"),
    )
}

// ----------------------------------------------------------------- 3 gradient

fn criterion_gradient() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let configs = 120;
    for k in 0..configs {
        let dims = RnnDims {
            input: rng.gen_range(2..=5),
            embed: rng.gen_range(1..=4),
            hidden: rng.gen_range(1..=4),
        };
        let (slots, steps) = (rng.gen_range(1..=3), rng.gen_range(1..=5));
        // Zero-initialised biases put empty input rows exactly on the PReLU
        // kink; jitter every parameter so the check runs where the loss is
        // differentiable.
        let mut params = RnnParams::init(dims, 0.6, k);
        params.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        let n = slots * steps;
        let mut batch = SeqBatch {
            slots,
            steps,
            x: (0..n)
                .map(|_| {
                    let mut row = Vec::new();
                    for c in 0..dims.input as u16 {
                        if rng.gen_bool(0.5) {
                            row.push((c, rng.gen_range(0.05..1.0)));
                        }
                    }
                    row
                })
                .collect(),
            y: (0..n).map(|_| f64::from(u8::from(rng.gen::<bool>()))).collect(),
            w: (0..n)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        rng.gen_range(0.1..2.0)
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        batch.w[rng.gen_range(0..n)] = 1.0;
        let mut state = RnnState::zeros(slots, dims.hidden);
        for v in [&mut state.h1, &mut state.c1, &mut state.h2, &mut state.c2] {
            v.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
        worst = worst.max(gradient_check(&params, &batch, &state, 1e-5)?);
    }
    verdict(
        worst < 1e-4,
        format!("{configs} configurations, max relative error {worst:.2e}"),
    )
}

// ------------------------------------------------------------ 4 end-to-end

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn test_of(a: &SplitAucs) -> f64 {
    a.test.unwrap_or(f64::NAN)
}

fn unknown_of(a: &SplitAucs) -> f64 {
    a.unknown_test.unwrap_or(f64::NAN)
}

fn criterion_end_to_end(shared: &mut Shared) -> Result<Verdict> {
    let started = Instant::now();
    let seeds = [1u64, 2, 3];
    let (mut gbt, mut rnn, mut base) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &seeds {
        gbt.push(shared.gbt(seed, WeightScheme::InverseLog, None, &[3, 4], &[0.8])?.aucs);
        let exp = shared.experiment()?;
        exp.config.weighting = WeightScheme::InverseLog;
        exp.config.rnn = desk_rnn();
        rnn.push(exp.rnn(seed, None)?.aucs);
        base.push(exp.baseline(seed)?);
    }
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "  model     validation  test    unknown-test   (means over {} trials)",
        seeds.len()
    );
    for (name, runs) in [("gbt", &gbt), ("rnn", &rnn), ("baseline", &base)] {
        println!(
            "  {name:9} {:.4}      {:.4}  {:.4}",
            mean(runs.iter().map(|a| a.validation.unwrap_or(f64::NAN))),
            mean(runs.iter().map(test_of)),
            mean(runs.iter().map(unknown_of))
        );
    }
    let (gt, gu) = (mean(gbt.iter().map(test_of)), mean(gbt.iter().map(unknown_of)));
    let (rt, ru) = (mean(rnn.iter().map(test_of)), mean(rnn.iter().map(unknown_of)));
    let bt = mean(base.iter().map(test_of));
    let pass = gt >= 0.65
        && rt >= 0.65
        && (0.47..=0.53).contains(&bt)
        && (gu - gt).abs() <= 0.05
        && (ru - rt).abs() <= 0.05
        && elapsed < 1800.0;
    verdict(
        pass,
        format!(
            "test AUC gbt {gt:.4} rnn {rt:.4} baseline {bt:.4}; |unknown-test| gbt {:.4} rnn {:.4}; {elapsed:.0}s",
            (gu - gt).abs(),
            (ru - rt).abs()
        ),
    )
}

// ------------------------------------------------------ 5 compression benefit

fn criterion_compression_benefit(shared: &mut Shared) -> Result<Verdict> {
    let exp = shared.experiment()?;
    let raw = sample_count(exp.encoded()?);
    let packed = sample_count(exp.compressed()?);
    let ratio = raw as f64 / packed as f64;
    let budget = RnnTrainConfig {
        embed: 8,
        hidden: 16,
        max_epochs: 4,
        patience: 5,
        ..RnnTrainConfig::default()
    };
    exp.config.weighting = WeightScheme::InverseLog;
    exp.config.rnn = budget.clone();
    let seeds = [1u64, 2, 3, 4, 5];
    let mut arms: BTreeMap<bool, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for compressed in [true, false] {
        exp.config.compress = compressed;
        for &seed in &seeds {
            let out = exp.rnn(seed, None)?;
            let arm = arms.entry(compressed).or_default();
            arm.0.push(test_of(&out.aucs));
            arm.1.push(mean(out.history.epochs.iter().map(|e| e.seconds)));
        }
    }
    exp.config.compress = true;
    let (c_auc, c_sec) = (mean(arms[&true].0.clone()), mean(arms[&true].1.clone()));
    let (u_auc, u_sec) = (mean(arms[&false].0.clone()), mean(arms[&false].1.clone()));
    let speedup = u_sec / c_sec;
    println!(
        "  input         samples   s/epoch  test AUC (mean of {} seeds, {} epochs)",
        seeds.len(),
        budget.max_epochs
    );
    println!("  compressed    {packed:9} {c_sec:8.2}  {c_auc:.4}");
    println!("  uncompressed  {raw:9} {u_sec:8.2}  {u_auc:.4}");
    verdict(
        ratio >= 5.0 && speedup >= 3.0 && c_auc >= u_auc - 0.01,
        format!(
            "size {ratio:.2}x, epoch speedup {speedup:.2}x, test AUC compressed {c_auc:.4} vs uncompressed {u_auc:.4}"
        ),
    )
}

// ----------------------------------------------------------------- 6 ablation

fn criterion_ablation(shared: &mut Shared) -> Result<Verdict> {
    let seeds = [1u64, 2, 3, 4, 5];
    let (depths, subsamples) = SINGLE_POINT;
    let rows = sensor_importance(&[SensorKind::Screen, SensorKind::Noise], &seeds, |unit, seed| {
        let out = shared.gbt(seed, WeightScheme::InverseLog, unit, &depths, &subsamples)?;
        out.aucs.test.ok_or_else(|| Error::Empty("no test AUC".into()))
    })?;
    for r in &rows {
        println!(
            "  without {:8} full {:.4} ablated {:.4} delta {:+.4}",
            r.sensor.name(),
            r.full,
            r.ablated,
            r.delta
        );
    }
    let (signal, noise) = (rows[0].delta, rows[1].delta);
    verdict(
        signal >= 0.05 && noise.abs() <= 0.02,
        format!(
            "delta AUC without Screen {signal:+.4}, without Noise {noise:+.4} over {} seeds",
            seeds.len()
        ),
    )
}

// ---------------------------------------------------------------- 7 weighting

fn criterion_weighting(shared: &mut Shared) -> Result<Verdict> {
    let seed = 1;
    let exp = shared.experiment()?;
    let plan = exp.plan(seed)?;
    let table = exp.table(&plan);
    let parts = split_matrix(exp.features()?, &plan);
    let train = &parts[&Split::Train];
    let weights = matrix_weights(train, &table, WeightScheme::InverseFrequency)?;
    let mut sums: HashMap<GroupKey, f64> = HashMap::new();
    for (i, w) in weights.iter().enumerate() {
        *sums
            .entry(GroupKey::new(
                train.labels[i],
                train.users[i].clone(),
                train.categories[i],
            ))
            .or_default() += w;
    }
    let worst_sum = sums.values().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let sums_ok = sums.len() == table.len() && worst_sum <= 1e-12;

    let (depths, subsamples) = SINGLE_POINT;
    println!("  scheme     validation  test    unknown-test");
    let mut all_trained = true;
    for scheme in WeightScheme::ALL {
        match shared.gbt(seed, scheme, None, &depths, &subsamples) {
            Ok(out) => println!(
                "  {:10} {:.4}      {:.4}  {:.4}",
                scheme.flag(),
                out.aucs.validation.unwrap_or(f64::NAN),
                test_of(&out.aucs),
                unknown_of(&out.aucs)
            ),
            Err(e) => {
                println!("  {:10} failed: {e}", scheme.flag());
                all_trained = false;
            }
        }
    }
    verdict(
        sums_ok && all_trained,
        format!(
            "{} groups, max |group sum - 1| = {worst_sum:.1e}; all four schemes trained",
            sums.len()
        ),
    )
}

// ------------------------------------------------- 8 determinism and masking

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for (k, v) in [
        ("num_users", "8"),
        ("num_days", "7"),
        ("holdout_users", "1"),
        ("embed", "6"),
        ("hidden", "8"),
        ("max_epochs", "3"),
        ("n_estimators", "15"),
        ("depth_grid", "2,3"),
        ("subsample_grid", "0.8"),
        ("batch_lo", "3"),
        ("batch_hi", "7"),
    ] {
        c.set(k, v).expect("valid key");
    }
    c
}

fn criterion_determinism() -> Result<Verdict> {
    let a = Experiment::generate(small_config())?;
    let b = Experiment::generate(small_config())?;
    let same_gbt = a.gbt(4, None)?.model.to_text() == b.gbt(4, None)?.model.to_text();
    let same_rnn = a.rnn(4, None)?.model.to_text() == b.rnn(4, None)?.model.to_text();

    // Masking: zero the weight of some training ground truth, then flip the
    // labels of exactly those samples.
    let plan = a.plan(4)?;
    let table = a.table(&plan);
    let norm = fit_normalization(a.compressed()?, &attend::encode::ColumnSchema::full(), &plan)?;
    let mut streams = a.compressed()?.to_vec();
    for s in &mut streams {
        norm.apply_all(&mut s.samples);
    }
    let mut training = rnn_training_streams(&streams, &plan, &table, WeightScheme::InverseLog)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for x in training.iter_mut().flatten().filter(|x| x.y.is_some()) {
        if rng.gen_bool(0.3) {
            x.w = 0.0;
        }
    }
    let mut flipped = training.clone();
    let mut changed = 0;
    for x in flipped.iter_mut().flatten() {
        if x.w == 0.0 {
            if let Some(y) = x.y {
                x.y = Some(!y);
                changed += 1;
            }
        }
    }
    let config = RnnTrainConfig {
        embed: 6,
        hidden: 8,
        max_epochs: 2,
        sequencing: SequencingConfig {
            seq_len: 20,
            batch_lo: 3,
            batch_hi: 7,
        },
        seed: 4,
        ..RnnTrainConfig::default()
    };
    let width = attend::encode::ColumnSchema::full().width();
    let mut grads_equal = true;
    let views: Vec<&[EncodedSample]> = training.iter().map(Vec::as_slice).collect();
    let flipped_views: Vec<&[EncodedSample]> = flipped.iter().map(Vec::as_slice).collect();
    let params = RnnParams::init(
        RnnDims {
            input: width + 1,
            embed: 6,
            hidden: 8,
        },
        0.05,
        4,
    );
    for start in (0..200).step_by(50) {
        fn cut<'a>(v: &[&'a [EncodedSample]], start: usize) -> Vec<&'a [EncodedSample]> {
            v.iter()
                .map(|s| &s[start.min(s.len())..(start + 50).min(s.len())])
                .collect()
        }
        let (ba, bb) = (
            SeqBatch::from_samples(&cut(&views, start), 50, width),
            SeqBatch::from_samples(&cut(&flipped_views, start), 50, width),
        );
        let ga = params.loss_and_gradient(&ba, &mut RnnState::zeros(views.len(), 8))?;
        let gb = params.loss_and_gradient(&bb, &mut RnnState::zeros(views.len(), 8))?;
        grads_equal &= ga == gb;
    }
    let score = |p: &RnnParams| -> Result<f64> { Ok(p.data.iter().sum()) };
    let (pa, _) = rnn::train(&training, width, &config, score)?;
    let (pb, _) = rnn::train(&flipped, width, &config, score)?;
    let rnn_masked = pa == pb;

    let parts = split_matrix(a.features()?, &plan);
    let train = &parts[&Split::Train];
    let mut w = matrix_weights(train, &table, WeightScheme::InverseLog)?;
    let mut flipped_m = train.clone();
    for (i, wi) in w.iter_mut().enumerate() {
        if i % 3 == 0 {
            *wi = 0.0;
            flipped_m.labels[i] = !flipped_m.labels[i];
        }
    }
    let params = GbtConfig {
        n_estimators: 15,
        ..GbtConfig::default()
    }
    .point(3, 0.8);
    let ma = boost(train, &Presorted::new(train), &w, &params, |_, _| {})?;
    let mb = boost(&flipped_m, &Presorted::new(&flipped_m), &w, &params, |_, _| {})?;
    let gbt_masked = ma.to_text() == mb.to_text();

    verdict(
        same_gbt && same_rnn && grads_equal && rnn_masked && gbt_masked && changed > 0,
        format!(
            "identical models: gbt {same_gbt}, rnn {same_rnn}; {changed} zero-weight labels flipped: \
             gradients unchanged {grads_equal}, rnn params unchanged {rnn_masked}, gbt unchanged {gbt_masked}"
        ),
    )
}

// ------------------------------------------------------------------ 9 leakage

fn criterion_leakage(shared: &mut Shared) -> Result<Verdict> {
    let exp = shared.experiment()?;
    let signal = exp.config.generation.planted_signal();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    let mut feature_leaks = 0;
    let mut signal_leaks = 0;
    for (u, trace) in exp.dataset.traces.iter().enumerate().take(20) {
        let labels = &exp.labels[u];
        let extractor = FeatureExtractor::new(trace, &exp.config.features)?;
        for label in labels.iter().step_by(97).take(8) {
            let t = label.post_time;
            let mut altered = trace.clone();
            for _ in 0..30 {
                let mut e = trace.events[rng.gen_range(0..trace.events.len())].clone();
                e.timestamp = t + rng.gen_range(0..3 * 3600);
                altered.events.push(e);
            }
            altered.events.sort_by_key(|e| e.timestamp);
            let before = extractor.extract(t);
            let after = FeatureExtractor::new(&altered, &exp.config.features)?.extract(t);
            if before.iter().zip(&after).any(|(a, b)| a.to_bits() != b.to_bits()) {
                feature_leaks += 1;
            }
            if signal.recent_usage(&trace.events, t) != signal.recent_usage(&altered.events, t) {
                signal_leaks += 1;
            }
            checked += 1;
        }
    }

    let plan = exp.plan(1)?;
    let schema = attend::encode::ColumnSchema::full();
    let streams = exp.compressed()?;
    let fitted = fit_normalization(streams, &schema, &plan)?;
    let mut altered = streams.to_vec();
    for s in &mut altered {
        let holdout = plan.is_holdout(&s.user);
        for x in &mut s.samples {
            if holdout || x.time >= plan.train_end {
                x.x.iter_mut().for_each(|v| v.1 = v.1 * 50.0 + 3.0);
                x.dt += 11.0;
            }
        }
    }
    let stats_stable = fit_normalization(&altered, &schema, &plan)? == fitted;
    verdict(
        feature_leaks == 0 && signal_leaks == 0 && stats_stable && checked > 0,
        format!(
            "{checked} posts with later events injected: feature changes {feature_leaks}, planted-usage changes \
             {signal_leaks}; normalization unchanged by non-training data {stats_stable}"
        ),
    )
}

// ---------------------------------------------------------------------- main

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut shared = Shared {
        experiment: None,
        gbt_runs: HashMap::new(),
    };
    type Criterion = fn(&mut Shared) -> Result<Verdict>;
    let criteria: [(usize, &str, Criterion); 9] = [
        (1, "compression properties", |_| criterion_compression()),
        (2, "AUC equals pair-count oracle", |_| criterion_auc()),
        (3, "gradient check", |_| criterion_gradient()),
        (4, "end-to-end signal recovery", criterion_end_to_end),
        (5, "compression benefit", criterion_compression_benefit),
        (6, "sensor ablation pattern", criterion_ablation),
        (7, "weighting invariants", criterion_weighting),
        (8, "determinism and masking", |_| criterion_determinism()),
        (9, "leakage", criterion_leakage),
    ];
    let mut results = Vec::new();
    for (n, name, run) in criteria {
        if !wanted(n) {
            continue;
        }
        println!("criterion {n}: {name}");
        let started = Instant::now();
        let v = run(&mut shared).unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e}"),
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} {n} {name}: {} [{:.1}s]",
            v.detail,
            started.elapsed().as_secs_f64()
        );
        results.push((n, v.pass));
    }
    let passed = results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let strict = std::env::var("ATTEND_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
