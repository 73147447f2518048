use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _, Result};
use attend::encode::{read_samples, write_samples, ColumnSchema, UserStream};
use attend::eval::{
    aggregate, distribution_tsv, feature_distribution_report, importance_tsv, run_trials, sensor_importance,
    Prediction, Split, SplitAucs, TRIALS_HEADER,
};
use attend::events::{Dataset, SensorKind};
use attend::features::FeatureMatrix;
use attend::gbt::{self, GbtConfig, GbtEnsemble};
use attend::pipeline::{
    compress_streams, encode_dataset, global_auc, rnn_predictions, run_gbt, run_rnn, sample_count, split_matrix,
    Experiment, ExperimentConfig, ModelKind,
};
use attend::rnn::{self, RnnModel, RnnTrainConfig};
use attend::synthgen::{generate, summarize};

use crate::failure::Failure;
use crate::manifest::Manifest;

pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

const ENCODED_FILE: &str = "encoded.txt";
const COMPRESSED_FILE: &str = "compressed.txt";
const FEATURES_FILE: &str = "features.tsv";
const ROC_STEPS: usize = 100;

fn model_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Gbt => "gbt",
        ModelKind::Rnn => "rnn",
        ModelKind::Baseline => "baseline",
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::MissingInput(path.to_path_buf()).into())
    }
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

fn aucs_tsv(rows: &[(String, SplitAucs)]) -> String {
    let mut out = String::from("run\tvalidation\ttest\tunknown_test\n");
    for (name, a) in rows {
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}",
            fmt_auc(a.validation),
            fmt_auc(a.test),
            fmt_auc(a.unknown_test)
        );
    }
    out
}

/// The column layout with this hash: the full layout or one with a single
/// sensor removed.
fn schema_for_hash(hash: &str) -> Result<ColumnSchema> {
    std::iter::once(ColumnSchema::full())
        .chain(SensorKind::ALL.into_iter().map(ColumnSchema::without))
        .find(|s| s.hash() == hash)
        .ok_or_else(|| {
            Failure::SchemaMismatch {
                expected: "a known column layout".into(),
                found: hash.to_string(),
            }
            .into()
        })
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

impl Context {
    fn write(&self, name: &str, text: &str, manifest: &mut Manifest) -> Result<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        manifest.output(&path)?;
        Ok(path)
    }

    fn finish(&self, manifest: Manifest) -> Result<()> {
        let path = manifest.write(&self.out, &self.config)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    /// The dataset at `data`, or one generated from the configuration.
    fn experiment(&self, data: Option<&Path>, manifest: &mut Manifest) -> Result<Experiment> {
        let exp = match data {
            Some(dir) => {
                require(dir)?;
                let dataset = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
                manifest.input(dir)?;
                Experiment::new(self.config.clone(), dataset)?
            }
            None => Experiment::generate(self.config.clone())?,
        };
        manifest.count("users", exp.dataset.traces.len());
        manifest.count("notifications", exp.labels.iter().map(Vec::len).sum::<usize>());
        Ok(exp)
    }

    fn load_features(&self, path: &Path, manifest: &mut Manifest) -> Result<FeatureMatrix> {
        require(path)?;
        manifest.input(path)?;
        Ok(FeatureMatrix::load(path)?)
    }

    fn load_samples(&self, path: &Path, manifest: &mut Manifest) -> Result<(String, Vec<UserStream>)> {
        require(path)?;
        manifest.input(path)?;
        Ok(read_samples(path)?)
    }

    pub fn generate(&self) -> Result<()> {
        let mut manifest = Manifest::start("generate");
        let mut generation = self.config.generation.clone();
        generation.horizon_s = self.config.horizon_s;
        let generated = generate(&generation)?;
        generated.dataset.save(&self.out)?;
        for name in [attend::events::EVENTS_FILE, attend::events::DEMOGRAPHICS_FILE] {
            manifest.output(&self.out.join(name))?;
        }
        self.write("generator.txt", &generated.resolved_config(&generation), &mut manifest)?;
        self.write("config.toml", &self.config.to_text(), &mut manifest)?;
        manifest.count("users", generated.dataset.traces.len());
        manifest.count("events", generated.dataset.num_events());
        self.finish(manifest)
    }

    pub fn label(&self, data: Option<&Path>) -> Result<()> {
        let mut manifest = Manifest::start("label");
        let exp = self.experiment(data, &mut manifest)?;
        let mut text = String::from("user\tpost_time\tapp\tcategory\tlabel\ttruncated\n");
        let mut attended = 0usize;
        for l in exp.labels.iter().flatten() {
            attended += usize::from(l.label);
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}\t{}\t{}",
                l.user_id,
                l.post_time,
                l.app_id,
                l.category.code(),
                u8::from(l.label),
                u8::from(l.truncated)
            );
        }
        self.write("labels.tsv", &text, &mut manifest)?;
        self.write(
            "categories.tsv",
            &summarize(&exp.dataset, &exp.labels).to_tsv(),
            &mut manifest,
        )?;
        manifest.count("attended", attended);
        self.finish(manifest)
    }

    pub fn encode(&self, data: Option<&Path>, without: Option<SensorKind>) -> Result<()> {
        let mut manifest = Manifest::start("encode");
        let exp = self.experiment(data, &mut manifest)?;
        let (schema, streams) = match without {
            None => (ColumnSchema::full(), exp.encoded()?.to_vec()),
            Some(kind) => {
                let schema = ColumnSchema::without(kind);
                let streams = encode_dataset(&exp.dataset.without_sensor(kind), &exp.labels, &schema)?;
                (schema, streams)
            }
        };
        let path = self.out.join(ENCODED_FILE);
        write_samples(&path, &schema.hash(), &streams)?;
        manifest.output(&path)?;
        manifest.count("columns", schema.width());
        manifest.count("samples", sample_count(&streams));
        self.finish(manifest)
    }

    pub fn compress(&self, samples: &Path) -> Result<()> {
        let mut manifest = Manifest::start("compress");
        let (hash, streams) = self.load_samples(samples, &mut manifest)?;
        let packed = compress_streams(&streams, &self.config.compression)?;
        let path = self.out.join(COMPRESSED_FILE);
        write_samples(&path, &hash, &packed)?;
        manifest.output(&path)?;
        let (before, after) = (sample_count(&streams), sample_count(&packed));
        manifest.count("samples_before", before);
        manifest.count("samples_after", after);
        if after > 0 {
            manifest.count("size_reduction", before as f64 / after as f64);
        }
        println!("{before} samples -> {after}");
        self.finish(manifest)
    }

    pub fn features(&self, data: Option<&Path>) -> Result<()> {
        let mut manifest = Manifest::start("features");
        let exp = self.experiment(data, &mut manifest)?;
        let m = exp.features()?;
        let path = self.out.join(FEATURES_FILE);
        m.save(&path)?;
        manifest.output(&path)?;
        manifest.count("rows", m.len());
        manifest.count("columns", m.width());
        self.finish(manifest)
    }

    pub fn train_gbt(&self, data: Option<&Path>, features: Option<&Path>) -> Result<()> {
        let mut manifest = Manifest::start("train-gbt");
        let exp = self.experiment(data, &mut manifest)?;
        let loaded = features.map(|p| self.load_features(p, &mut manifest)).transpose()?;
        let m = match &loaded {
            Some(m) => m,
            None => exp.features()?,
        };
        let seed = self.config.seed;
        let plan = exp.plan(seed)?;
        let table = exp.table(&plan);
        let config = GbtConfig {
            seed,
            ..self.config.gbt.clone()
        };
        let outcome = run_gbt(m, &plan, &table, self.config.weighting, &config)?;
        self.write("gbt.model", &outcome.model.to_text(), &mut manifest)?;
        let mut grid = String::from("max_depth\tsubsample\tvalidation_auc\n");
        for g in &outcome.grid {
            let _ = writeln!(grid, "{}\t{}\t{:.6}", g.max_depth, g.subsample, g.validation_auc);
        }
        self.write("gbt_grid.tsv", &grid, &mut manifest)?;
        self.write(
            "gbt_aucs.tsv",
            &aucs_tsv(&[("gbt".into(), outcome.aucs)]),
            &mut manifest,
        )?;
        manifest.count("rows", m.len());
        manifest.count("test_auc", fmt_auc(outcome.aucs.test));
        println!("gbt test AUC {}", fmt_auc(outcome.aucs.test));
        self.finish(manifest)
    }

    /// Streams and layout for the recurrent model: the given sample file, or
    /// the dataset encoded (and compressed unless disabled).
    fn rnn_streams(
        &self,
        exp: &Experiment,
        samples: Option<&Path>,
        manifest: &mut Manifest,
    ) -> Result<(ColumnSchema, Vec<UserStream>)> {
        match samples {
            Some(path) => {
                let (hash, streams) = self.load_samples(path, manifest)?;
                Ok((schema_for_hash(&hash)?, streams))
            }
            None => {
                if self.config.compress {
                    manifest.count("samples_before", sample_count(exp.encoded()?));
                }
                Ok((ColumnSchema::full(), exp.streams()?.to_vec()))
            }
        }
    }

    pub fn train_rnn(&self, data: Option<&Path>, samples: Option<&Path>) -> Result<()> {
        let mut manifest = Manifest::start("train-rnn");
        let exp = self.experiment(data, &mut manifest)?;
        let (schema, streams) = self.rnn_streams(&exp, samples, &mut manifest)?;
        let seed = self.config.seed;
        let plan = exp.plan(seed)?;
        let table = exp.table(&plan);
        let config = RnnTrainConfig {
            seed,
            ..self.config.rnn.clone()
        };
        let outcome = run_rnn(&streams, &schema, &plan, &table, self.config.weighting, &config)?;
        self.write("rnn.model", &outcome.model.to_text(), &mut manifest)?;
        let mut history = String::from("epoch\ttrain_loss\tvalidation_auc\tseconds\tupdates\n");
        for e in &outcome.history.epochs {
            let _ = writeln!(
                history,
                "{}\t{:.6}\t{:.6}\t{:.3}\t{}",
                e.epoch, e.train_loss, e.validation_metric, e.seconds, e.updates
            );
        }
        self.write("rnn_history.tsv", &history, &mut manifest)?;
        self.write(
            "rnn_aucs.tsv",
            &aucs_tsv(&[("rnn".into(), outcome.aucs)]),
            &mut manifest,
        )?;
        let epochs = &outcome.history.epochs;
        manifest.count("samples", sample_count(&streams));
        manifest.count("epochs", epochs.len());
        manifest.count("best_epoch", outcome.history.best_epoch);
        manifest.count("diverged", outcome.history.diverged);
        if !epochs.is_empty() {
            manifest.count(
                "mean_epoch_seconds",
                epochs.iter().map(|e| e.seconds).sum::<f64>() / epochs.len() as f64,
            );
        }
        manifest.count("test_auc", fmt_auc(outcome.aucs.test));
        println!("rnn test AUC {}", fmt_auc(outcome.aucs.test));
        self.finish(manifest)
    }

    pub fn evaluate(
        &self,
        data: Option<&Path>,
        model: &Path,
        features: Option<&Path>,
        samples: Option<&Path>,
        chosen: Split,
    ) -> Result<()> {
        let mut manifest = Manifest::start("evaluate");
        require(model)?;
        manifest.input(model)?;
        let text = std::fs::read_to_string(model)?;
        let exp = self.experiment(data, &mut manifest)?;
        let plan = exp.plan(self.config.seed)?;
        let header = text.lines().next().unwrap_or("");
        let mut by_split: Vec<(Split, Vec<Prediction>)> = Vec::new();
        if header == gbt::MODEL_HEADER {
            let ensemble = GbtEnsemble::from_text(&text, model)?;
            let loaded = features.map(|p| self.load_features(p, &mut manifest)).transpose()?;
            let m = match &loaded {
                Some(m) => m,
                None => exp.features()?,
            };
            let found = gbt::manifest_hash(&m.names);
            if found != ensemble.manifest_hash {
                return Err(Failure::SchemaMismatch {
                    expected: ensemble.manifest_hash,
                    found,
                }
                .into());
            }
            let parts = split_matrix(m, &plan);
            for s in [Split::Validation, Split::Test, Split::UnknownTest] {
                let part = &parts[&s];
                by_split.push((s, matrix_predictions(part, &ensemble.predict(part)?)));
            }
        } else if header == rnn::MODEL_HEADER {
            let network = RnnModel::from_text(&text, model)?;
            let (schema, mut streams) = self.rnn_streams(&exp, samples, &mut manifest)?;
            if schema.hash() != network.normalization.schema_hash {
                return Err(Failure::SchemaMismatch {
                    expected: network.normalization.schema_hash,
                    found: schema.hash(),
                }
                .into());
            }
            for s in &mut streams {
                network.normalization.apply_all(&mut s.samples);
            }
            for s in [Split::Validation, Split::Test, Split::UnknownTest] {
                by_split.push((s, rnn_predictions(&network, &streams, &plan, s)?));
            }
        } else {
            return Err(anyhow!("{} is not a model file", model.display()));
        }

        let mut aucs = SplitAucs::default();
        for (s, preds) in &by_split {
            aucs.set(*s, global_auc(preds)?);
        }
        self.write(
            "aucs.tsv",
            &aucs_tsv(&[(header.trim_start_matches('#').to_string(), aucs)]),
            &mut manifest,
        )?;
        let preds = by_split
            .iter()
            .find(|(s, _)| *s == chosen)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Failure::InvalidConfig(format!("cannot evaluate the {} split", chosen.name())))?;
        let report = aggregate(preds)?;
        self.write(
            &format!("cells_{}.tsv", chosen.name()),
            &report.cells_tsv(),
            &mut manifest,
        )?;
        self.write(
            &format!("roc_{}.tsv", chosen.name()),
            &report.roc_tsv(ROC_STEPS),
            &mut manifest,
        )?;
        manifest.count("cells", report.cells.len());
        manifest.count("skipped_cells", report.skipped_cells);
        manifest.count("auc", report.global);
        println!("{} AUC {:.4}", chosen.name(), report.global);
        self.finish(manifest)
    }

    pub fn ablate(&self, data: Option<&Path>, kind: ModelKind, units: &[SensorKind]) -> Result<()> {
        let mut manifest = Manifest::start("ablate");
        let exp = self.experiment(data, &mut manifest)?;
        let units: Vec<SensorKind> = if units.is_empty() {
            SensorKind::ALL.to_vec()
        } else {
            units.to_vec()
        };
        let seeds = self.config.trial_seeds(self.config.ablation_seeds);
        let rows = sensor_importance(&units, &seeds, |unit, seed| {
            exp.run(kind, seed, unit)?
                .test
                .ok_or_else(|| attend::Error::Empty("test split has no scorable cell".into()))
        })?;
        for r in &rows {
            println!("without {:20} delta AUC {:+.4}", r.sensor.name(), r.delta);
        }
        self.write(
            &format!("importance_{}.tsv", model_name(kind)),
            &importance_tsv(&rows),
            &mut manifest,
        )?;
        manifest.count("seeds", seeds.len());
        self.finish(manifest)
    }

    pub fn trials(&self, data: Option<&Path>, models: &[ModelKind]) -> Result<()> {
        let mut manifest = Manifest::start("trials");
        let exp = self.experiment(data, &mut manifest)?;
        let seeds = self.config.trial_seeds(self.config.trials);
        let mut summary = String::from(TRIALS_HEADER);
        let mut runs = Vec::new();
        for &kind in models {
            let name = model_name(kind);
            let result = run_trials(&seeds, |seed| exp.run(kind, seed, None))?;
            summary.push_str(&result.to_tsv(name));
            print!("{}", result.to_tsv(name));
            for (seed, a) in result.seeds.iter().zip(&result.trials) {
                runs.push((format!("{name}:{seed}"), *a));
            }
        }
        self.write("trials.tsv", &summary, &mut manifest)?;
        self.write("trial_runs.tsv", &aucs_tsv(&runs), &mut manifest)?;
        manifest.count("trials", seeds.len());
        self.finish(manifest)
    }

    pub fn report(&self, data: Option<&Path>, features: Option<&Path>) -> Result<()> {
        let mut manifest = Manifest::start("report");
        let exp = self.experiment(data, &mut manifest)?;
        let loaded = features.map(|p| self.load_features(p, &mut manifest)).transpose()?;
        let m = match &loaded {
            Some(m) => m,
            None => exp.features()?,
        };
        let categories = summarize(&exp.dataset, &exp.labels);
        self.write("categories.tsv", &categories.to_tsv(), &mut manifest)?;
        self.write(
            "distributions.tsv",
            &distribution_tsv(&feature_distribution_report(m)),
            &mut manifest,
        )?;
        let positives = m.labels.iter().filter(|&&l| l).count();
        let mut text = String::new();
        let _ = writeln!(text, "users\t{}", exp.dataset.traces.len());
        let _ = writeln!(text, "events\t{}", exp.dataset.num_events());
        let _ = writeln!(text, "notifications\t{}", m.len());
        let _ = writeln!(text, "attended\t{positives}");
        let _ = writeln!(text, "user_days\t{}", categories.user_days);
        let _ = writeln!(text, "feature_columns\t{}", m.width());
        print!("{text}");
        self.write("summary.txt", &text, &mut manifest)?;
        self.finish(manifest)
    }
}
