//! End-to-end experiment wiring shared by the command-line tool and the
//! acceptance suite: labeling, splitting, weighting, both model families,
//! the baseline, trials and sensor ablation.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::encode::{compress, encode_events, ColumnSchema, CompressionConfig, NormalizationStats, UserStream};
use crate::error::{Error, Result};
use crate::eval::{aggregate, baseline_predict, split, Prediction, Split, SplitAucs, SplitPlan, SplitSpec};
use crate::events::{label_notifications, Dataset, LabeledNotification, SensorKind, DEFAULT_HORIZON_S};
use crate::features::{build_feature_matrix, columns_without, FeatureConfig, FeatureMatrix};
use crate::gbt::{self, GbtConfig, GbtEnsemble, GridResult};
use crate::rnn::{self, RnnModel, RnnTrainConfig, TrainHistory};
use crate::synthgen::{generate, GenConfig};
use crate::weighting::{GroupFrequencyTable, GroupKey, WeightScheme};

/// Every setting of an experiment. Trial `k` uses seed `seed + k` for the
/// holdout draw and for model initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub generation: GenConfig,
    pub horizon_s: i64,
    pub split: SplitSpec,
    pub weighting: WeightScheme,
    pub compress: bool,
    pub compression: CompressionConfig,
    pub features: FeatureConfig,
    pub gbt: GbtConfig,
    pub rnn: RnnTrainConfig,
    pub trials: usize,
    pub ablation_seeds: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generation: GenConfig::default(),
            horizon_s: DEFAULT_HORIZON_S,
            split: SplitSpec::default(),
            weighting: WeightScheme::default(),
            compress: true,
            compression: CompressionConfig::default(),
            features: FeatureConfig::default(),
            gbt: GbtConfig::default(),
            rnn: RnnTrainConfig::default(),
            trials: 10,
            ablation_seeds: 10,
            seed: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Keys accepted by [`ExperimentConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "num_users",
    "num_days",
    "data_seed",
    "signal_strength",
    "signal_window_s",
    "horizon_s",
    "train_fraction",
    "validation_fraction",
    "test_fraction",
    "holdout_users",
    "weighting",
    "compress",
    "max_span_minutes",
    "seq_len",
    "batch_lo",
    "batch_hi",
    "embed",
    "hidden",
    "step_size",
    "patience",
    "max_epochs",
    "clip_norm",
    "init_scale",
    "n_estimators",
    "depth_grid",
    "subsample_grid",
    "learning_rate",
    "lambda",
    "min_child_hessian",
    "holidays",
    "trials",
    "ablation_seeds",
    "seed",
];

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_users" => self.generation.num_users = parse(key, value)?,
            "num_days" => self.generation.num_days = parse(key, value)?,
            "data_seed" => self.generation.seed = parse(key, value)?,
            "signal_strength" => self.generation.signal_strength = parse(key, value)?,
            "signal_window_s" => self.generation.signal_window_s = parse(key, value)?,
            "horizon_s" => {
                self.horizon_s = parse(key, value)?;
                self.generation.horizon_s = self.horizon_s;
            }
            "train_fraction" => self.split.train_fraction = parse(key, value)?,
            "validation_fraction" => self.split.validation_fraction = parse(key, value)?,
            "test_fraction" => self.split.test_fraction = parse(key, value)?,
            "holdout_users" => {
                self.split.holdout_users = match value.trim() {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "weighting" => self.weighting = value.trim().parse()?,
            "compress" => self.compress = parse(key, value)?,
            "max_span_minutes" => self.compression.max_span_minutes = parse(key, value)?,
            "seq_len" => self.rnn.sequencing.seq_len = parse(key, value)?,
            "batch_lo" => self.rnn.sequencing.batch_lo = parse(key, value)?,
            "batch_hi" => self.rnn.sequencing.batch_hi = parse(key, value)?,
            "embed" => self.rnn.embed = parse(key, value)?,
            "hidden" => self.rnn.hidden = parse(key, value)?,
            "step_size" => self.rnn.step_size = parse(key, value)?,
            "patience" => self.rnn.patience = parse(key, value)?,
            "max_epochs" => self.rnn.max_epochs = parse(key, value)?,
            "clip_norm" => self.rnn.clip_norm = parse(key, value)?,
            "init_scale" => self.rnn.init_scale = parse(key, value)?,
            "n_estimators" => self.gbt.n_estimators = parse(key, value)?,
            "depth_grid" => self.gbt.depth_grid = parse_list(key, value)?,
            "subsample_grid" => self.gbt.subsample_grid = parse_list(key, value)?,
            "learning_rate" => self.gbt.learning_rate = parse(key, value)?,
            "lambda" => self.gbt.lambda = parse(key, value)?,
            "min_child_hessian" => self.gbt.min_child_hessian = parse(key, value)?,
            "holidays" => {
                self.features.holidays = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    parse_list(key, value)?
                }
            }
            "trials" => self.trials = parse(key, value)?,
            "ablation_seeds" => self.ablation_seeds = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of every key, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.generation;
        let r = &self.rnn;
        let b = &self.gbt;
        let values = [
            g.num_users.to_string(),
            g.num_days.to_string(),
            g.seed.to_string(),
            g.signal_strength.to_string(),
            g.signal_window_s.to_string(),
            self.horizon_s.to_string(),
            self.split.train_fraction.to_string(),
            self.split.validation_fraction.to_string(),
            self.split.test_fraction.to_string(),
            self.split.holdout_users.map_or("auto".to_string(), |h| h.to_string()),
            self.weighting.to_string(),
            self.compress.to_string(),
            self.compression.max_span_minutes.to_string(),
            r.sequencing.seq_len.to_string(),
            r.sequencing.batch_lo.to_string(),
            r.sequencing.batch_hi.to_string(),
            r.embed.to_string(),
            r.hidden.to_string(),
            r.step_size.to_string(),
            r.patience.to_string(),
            r.max_epochs.to_string(),
            r.clip_norm.to_string(),
            r.init_scale.to_string(),
            b.n_estimators.to_string(),
            join(&b.depth_grid),
            join(&b.subsample_grid),
            b.learning_rate.to_string(),
            b.lambda.to_string(),
            b.min_child_hessian.to_string(),
            join(&self.features.holidays),
            self.trials.to_string(),
            self.ablation_seeds.to_string(),
            self.seed.to_string(),
        ];
        CONFIG_KEYS.iter().copied().zip(values).collect()
    }

    /// `key = value` lines that [`ExperimentConfig::set`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let quoted = matches!(
                k,
                "weighting" | "depth_grid" | "subsample_grid" | "holdout_users" | "holidays"
            );
            if quoted {
                let _ = writeln!(out, "{k} = \"{v}\"");
            } else {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.compression.validate()?;
        self.gbt.validate()?;
        self.rnn.validate()?;
        if self.horizon_s <= 0 {
            return Err(Error::Config("horizon_s must be positive".into()));
        }
        if self.trials == 0 || self.ablation_seeds == 0 {
            return Err(Error::Config("trials and ablation_seeds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn trial_seeds(&self, n: usize) -> Vec<u64> {
        (0..n as u64).map(|k| self.seed + k).collect()
    }
}

pub fn label_dataset(dataset: &Dataset, horizon_s: i64) -> Result<Vec<Vec<LabeledNotification>>> {
    dataset
        .traces
        .iter()
        .map(|t| label_notifications(t, horizon_s))
        .collect()
}

/// Group counts over training-split instances only.
pub fn training_table(labels: &[Vec<LabeledNotification>], plan: &SplitPlan) -> GroupFrequencyTable {
    GroupFrequencyTable::build(
        labels
            .iter()
            .flatten()
            .filter(|l| plan.assign(&l.user_id, l.post_time) == Some(Split::Train))
            .map(|l| GroupKey::new(l.label, l.user_id.clone(), l.category)),
    )
}

/// Rows of `m` per split; rows of held-out users before the test period are
/// dropped.
pub fn split_matrix(m: &FeatureMatrix, plan: &SplitPlan) -> BTreeMap<Split, FeatureMatrix> {
    let assigned: Vec<Option<Split>> = (0..m.len())
        .map(|i| plan.assign(&m.users[i], m.post_times[i]))
        .collect();
    Split::ALL
        .into_iter()
        .map(|s| (s, m.select_rows(|i| assigned[i] == Some(s))))
        .collect()
}

pub fn matrix_weights(m: &FeatureMatrix, table: &GroupFrequencyTable, scheme: WeightScheme) -> Result<Vec<f64>> {
    (0..m.len())
        .map(|i| table.weight(&GroupKey::new(m.labels[i], m.users[i].clone(), m.categories[i]), scheme))
        .collect()
}

/// Mean AUC, or `None` when no (user, category) cell is scorable.
pub fn global_auc(predictions: &[Prediction]) -> Result<Option<f64>> {
    match aggregate(predictions) {
        Ok(r) => Ok(Some(r.global)),
        Err(Error::Empty(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn matrix_predictions(m: &FeatureMatrix, scores: &[f64]) -> Vec<Prediction> {
    (0..m.len())
        .map(|i| Prediction {
            user: m.users[i].clone(),
            category: m.categories[i],
            score: scores[i],
            label: m.labels[i],
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GbtOutcome {
    pub model: GbtEnsemble,
    pub grid: Vec<GridResult>,
    pub aucs: SplitAucs,
}

/// Grid-searched boosted trees on the training rows, scored on every split.
pub fn run_gbt(
    m: &FeatureMatrix,
    plan: &SplitPlan,
    table: &GroupFrequencyTable,
    scheme: WeightScheme,
    config: &GbtConfig,
) -> Result<GbtOutcome> {
    let parts = split_matrix(m, plan);
    let train = &parts[&Split::Train];
    let weights = matrix_weights(train, table, scheme)?;
    let (model, grid) = gbt::train(train, &weights, &parts[&Split::Validation], config)?;
    let mut aucs = SplitAucs::default();
    for s in [Split::Validation, Split::Test, Split::UnknownTest] {
        let part = &parts[&s];
        let scores = model.predict(part)?;
        aucs.set(s, global_auc(&matrix_predictions(part, &scores))?);
    }
    Ok(GbtOutcome { model, grid, aucs })
}

pub fn run_baseline(
    labels: &[Vec<LabeledNotification>],
    plan: &SplitPlan,
    table: &GroupFrequencyTable,
    seed: u64,
) -> Result<SplitAucs> {
    let mut aucs = SplitAucs::default();
    for s in [Split::Validation, Split::Test, Split::UnknownTest] {
        let chosen: Vec<&LabeledNotification> = labels
            .iter()
            .flatten()
            .filter(|l| plan.assign(&l.user_id, l.post_time) == Some(s))
            .collect();
        let instances: Vec<_> = chosen.iter().map(|l| (l.user_id.clone(), l.category)).collect();
        let scores = baseline_predict(table, &instances, seed);
        let preds: Vec<Prediction> = chosen
            .iter()
            .zip(scores)
            .map(|(l, score)| Prediction {
                user: l.user_id.clone(),
                category: l.category,
                score,
                label: l.label,
            })
            .collect();
        aucs.set(s, global_auc(&preds)?);
    }
    Ok(aucs)
}

/// Encodes every user of `dataset` against `schema`.
pub fn encode_dataset(
    dataset: &Dataset,
    labels: &[Vec<LabeledNotification>],
    schema: &ColumnSchema,
) -> Result<Vec<UserStream>> {
    dataset
        .traces
        .iter()
        .zip(labels)
        .map(|(t, l)| {
            Ok(UserStream {
                user: t.user_id.clone(),
                samples: encode_events(t, l, schema)?,
            })
        })
        .collect()
}

pub fn compress_streams(streams: &[UserStream], config: &CompressionConfig) -> Result<Vec<UserStream>> {
    streams
        .iter()
        .map(|s| {
            Ok(UserStream {
                user: s.user.clone(),
                samples: compress(&s.samples, config)?,
            })
        })
        .collect()
}

pub fn sample_count(streams: &[UserStream]) -> usize {
    streams.iter().map(|s| s.samples.len()).sum()
}

/// Normalization fitted on training-period samples of known users only.
pub fn fit_normalization(
    streams: &[UserStream],
    schema: &ColumnSchema,
    plan: &SplitPlan,
) -> Result<NormalizationStats> {
    NormalizationStats::fit(
        schema,
        streams
            .iter()
            .filter(|s| !plan.is_holdout(&s.user))
            .flat_map(|s| s.samples.iter().take_while(|x| x.time < plan.train_end)),
    )
}

/// Streams as seen when scoring `split`: known users run from the start of
/// their history up to the end of the split; held-out users start fresh at
/// the test period.
fn evaluation_streams(streams: &[UserStream], plan: &SplitPlan, split: Split) -> Vec<UserStream> {
    streams
        .iter()
        .filter(|s| plan.is_holdout(&s.user) == (split == Split::UnknownTest))
        .map(|s| {
            let samples = match split {
                Split::Train => s.samples.iter().filter(|x| x.time < plan.train_end).cloned().collect(),
                Split::Validation => s
                    .samples
                    .iter()
                    .filter(|x| x.time < plan.validation_end)
                    .cloned()
                    .collect(),
                Split::Test => s.samples.clone(),
                Split::UnknownTest => s
                    .samples
                    .iter()
                    .filter(|x| x.time >= plan.validation_end)
                    .cloned()
                    .collect(),
            };
            UserStream {
                user: s.user.clone(),
                samples,
            }
        })
        .filter(|s| !s.samples.is_empty())
        .collect()
}

/// Scores of the ground-truth samples of `split`, with the network run over
/// each user's stream from a zero state.
pub fn rnn_predictions(
    model: &RnnModel,
    streams: &[UserStream],
    plan: &SplitPlan,
    split: Split,
) -> Result<Vec<Prediction>> {
    let chosen = evaluation_streams(streams, plan, split);
    let views: Vec<&[_]> = chosen.iter().map(|s| s.samples.as_slice()).collect();
    let probs = rnn::predict_streams(&model.params, &views)?;
    let mut out = Vec::new();
    for (s, p) in chosen.iter().zip(probs) {
        for (x, score) in s.samples.iter().zip(p) {
            let (Some(label), Some(category)) = (x.y, x.category) else {
                continue;
            };
            if plan.assign(&s.user, x.time) == Some(split) {
                out.push(Prediction {
                    user: s.user.clone(),
                    category,
                    score,
                    label,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RnnOutcome {
    pub model: RnnModel,
    pub history: TrainHistory,
    pub aucs: SplitAucs,
}

/// Normalized training streams with scheme weights on training-split
/// ground truth and zero weight elsewhere.
pub fn rnn_training_streams(
    streams: &[UserStream],
    plan: &SplitPlan,
    table: &GroupFrequencyTable,
    scheme: WeightScheme,
) -> Result<Vec<Vec<crate::encode::EncodedSample>>> {
    let mut out = Vec::new();
    for s in streams.iter().filter(|s| !plan.is_holdout(&s.user)) {
        let mut samples: Vec<_> = s
            .samples
            .iter()
            .take_while(|x| x.time < plan.train_end)
            .cloned()
            .collect();
        for x in &mut samples {
            x.w = match (x.y, x.category) {
                (Some(y), Some(c)) => table.weight(&GroupKey::new(y, s.user.clone(), c), scheme)?,
                _ => 0.0,
            };
        }
        if !samples.is_empty() {
            out.push(samples);
        }
    }
    Ok(out)
}

/// Trains the recurrent model on raw (unnormalized) streams with early
/// stopping on validation AUC, then scores every split.
pub fn run_rnn(
    streams: &[UserStream],
    schema: &ColumnSchema,
    plan: &SplitPlan,
    table: &GroupFrequencyTable,
    scheme: WeightScheme,
    config: &RnnTrainConfig,
) -> Result<RnnOutcome> {
    let normalization = fit_normalization(streams, schema, plan)?;
    let normalized: Vec<UserStream> = streams
        .iter()
        .map(|s| {
            let mut s = s.clone();
            normalization.apply_all(&mut s.samples);
            s
        })
        .collect();
    let training = rnn_training_streams(&normalized, plan, table, scheme)?;
    let validation = evaluation_streams(&normalized, plan, Split::Validation);
    let validation_views: Vec<&[_]> = validation.iter().map(|s| s.samples.as_slice()).collect();
    let (params, history) = rnn::train(&training, schema.width(), config, |p| {
        let probs = rnn::predict_streams(p, &validation_views)?;
        let mut preds = Vec::new();
        for (s, ps) in validation.iter().zip(probs) {
            for (x, score) in s.samples.iter().zip(ps) {
                if let (Some(label), Some(category), true) = (x.y, x.category, x.time >= plan.train_end) {
                    preds.push(Prediction {
                        user: s.user.clone(),
                        category,
                        score,
                        label,
                    });
                }
            }
        }
        Ok(global_auc(&preds)?.unwrap_or(0.5))
    })?;
    let model = RnnModel {
        params,
        normalization,
        seed: config.seed,
    };
    let mut aucs = SplitAucs::default();
    for s in [Split::Validation, Split::Test, Split::UnknownTest] {
        aucs.set(s, global_auc(&rnn_predictions(&model, &normalized, plan, s)?)?);
    }
    Ok(RnnOutcome { model, history, aucs })
}

/// Which learner an ablation or trial drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gbt,
    Rnn,
    Baseline,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gbt" => Ok(ModelKind::Gbt),
            "rnn" => Ok(ModelKind::Rnn),
            "baseline" => Ok(ModelKind::Baseline),
            _ => Err(Error::Config(format!("unknown model `{s}` (gbt, rnn, baseline)"))),
        }
    }
}

/// A labeled dataset with lazily built, cached model inputs.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub labels: Vec<Vec<LabeledNotification>>,
    features: OnceCell<FeatureMatrix>,
    encoded: OnceCell<Vec<UserStream>>,
    compressed: OnceCell<Vec<UserStream>>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, dataset: Dataset) -> Result<Experiment> {
        config.validate()?;
        let labels = label_dataset(&dataset, config.horizon_s)?;
        Ok(Experiment {
            config,
            dataset,
            labels,
            features: OnceCell::new(),
            encoded: OnceCell::new(),
            compressed: OnceCell::new(),
        })
    }

    pub fn generate(config: ExperimentConfig) -> Result<Experiment> {
        let mut generation = config.generation.clone();
        generation.horizon_s = config.horizon_s;
        let dataset = generate(&generation)?.dataset;
        Experiment::new(config, dataset)
    }

    pub fn plan(&self, seed: u64) -> Result<SplitPlan> {
        split(
            &self.dataset,
            &SplitSpec {
                seed,
                ..self.config.split.clone()
            },
        )
    }

    pub fn features(&self) -> Result<&FeatureMatrix> {
        if self.features.get().is_none() {
            let m = build_feature_matrix(&self.dataset.traces, &self.labels, &self.config.features)?;
            let _ = self.features.set(m);
        }
        Ok(self.features.get().expect("just set"))
    }

    pub fn encoded(&self) -> Result<&[UserStream]> {
        if self.encoded.get().is_none() {
            let s = encode_dataset(&self.dataset, &self.labels, &ColumnSchema::full())?;
            let _ = self.encoded.set(s);
        }
        Ok(self.encoded.get().expect("just set"))
    }

    pub fn compressed(&self) -> Result<&[UserStream]> {
        if self.compressed.get().is_none() {
            let s = compress_streams(self.encoded()?, &self.config.compression)?;
            let _ = self.compressed.set(s);
        }
        Ok(self.compressed.get().expect("just set"))
    }

    /// Model input streams, compressed unless the configuration says not.
    pub fn streams(&self) -> Result<&[UserStream]> {
        if self.config.compress {
            self.compressed()
        } else {
            self.encoded()
        }
    }

    pub fn table(&self, plan: &SplitPlan) -> GroupFrequencyTable {
        training_table(&self.labels, plan)
    }

    pub fn gbt(&self, seed: u64, without: Option<SensorKind>) -> Result<GbtOutcome> {
        let plan = self.plan(seed)?;
        let table = self.table(&plan);
        let config = GbtConfig {
            seed,
            ..self.config.gbt.clone()
        };
        let m = self.features()?;
        match without {
            None => run_gbt(m, &plan, &table, self.config.weighting, &config),
            Some(kind) => run_gbt(
                &m.select_columns(&columns_without(kind)),
                &plan,
                &table,
                self.config.weighting,
                &config,
            ),
        }
    }

    pub fn rnn(&self, seed: u64, without: Option<SensorKind>) -> Result<RnnOutcome> {
        let plan = self.plan(seed)?;
        let table = self.table(&plan);
        let config = RnnTrainConfig {
            seed,
            ..self.config.rnn.clone()
        };
        match without {
            None => run_rnn(
                self.streams()?,
                &ColumnSchema::full(),
                &plan,
                &table,
                self.config.weighting,
                &config,
            ),
            Some(kind) => {
                let schema = ColumnSchema::without(kind);
                let mut streams = encode_dataset(&self.dataset.without_sensor(kind), &self.labels, &schema)?;
                if self.config.compress {
                    streams = compress_streams(&streams, &self.config.compression)?;
                }
                run_rnn(&streams, &schema, &plan, &table, self.config.weighting, &config)
            }
        }
    }

    pub fn baseline(&self, seed: u64) -> Result<SplitAucs> {
        let plan = self.plan(seed)?;
        run_baseline(&self.labels, &plan, &self.table(&plan), seed)
    }

    pub fn run(&self, model: ModelKind, seed: u64, without: Option<SensorKind>) -> Result<SplitAucs> {
        match model {
            ModelKind::Gbt => Ok(self.gbt(seed, without)?.aucs),
            ModelKind::Rnn => Ok(self.rnn(seed, without)?.aucs),
            ModelKind::Baseline => self.baseline(seed),
        }
    }
}
