//! ML-based digital twins.
//!
//! Five steps: collect request/response traces from campaigns, preprocess
//! them into a numeric feature matrix, define the network, train it, and
//! serve inference behind the same request API as the other twins.
//!
//! Features are derived from the trace alone: an operation one-hot, a
//! scaled numeric column per (operation, field), a one-hot block per
//! (operation, categorical field) with an explicit unknown bucket, and a
//! bucketed time-since-last-request block. Labels are the response
//! outcome classes.

pub mod nn;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::time::VirtualTime;
use crate::wire::{DeviceRequest, DeviceResponse, OutcomeClass, OUTCOME_CLASSES};
use nn::{Adam, Gradients, Matrix, Mlp};

/// One request/response observation from a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub campaign: String,
    pub seq: u64,
    pub operation: String,
    #[serde(default)]
    pub payload: BTreeMap<String, Value>,
    /// Virtual time since the previous request to the same target.
    pub delta_ms: u64,
    /// Response outcome class.
    pub label: String,
}

/// Time-since-last-request buckets (upper bounds in ms; the last bucket
/// is open).
pub const DELTA_BUCKETS: [u64; 3] = [1_000, 5_000, 30_000];

pub fn delta_bucket(delta_ms: u64) -> usize {
    DELTA_BUCKETS
        .iter()
        .position(|&b| delta_ms < b)
        .unwrap_or(DELTA_BUCKETS.len())
}

/// Feature layout and the fitted encoding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub operations: Vec<String>,
    pub numeric: Vec<NumericEncoder>,
    pub categorical: Vec<CategoricalEncoder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericEncoder {
    pub operation: String,
    pub field: String,
    pub min: f64,
    pub max: f64,
    /// Imputation value for records of this operation missing the field.
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEncoder {
    pub operation: String,
    pub field: String,
    /// Known categories, in first-seen order; unknown values land in an
    /// extra trailing bucket.
    pub categories: Vec<String>,
}

impl NumericEncoder {
    pub fn scale(&self, v: f64) -> f64 {
        if self.max > self.min {
            ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

impl CategoricalEncoder {
    pub fn width(&self) -> usize {
        self.categories.len() + 1
    }

    pub fn encode(&self, v: &str) -> usize {
        self.categories
            .iter()
            .position(|c| c == v)
            .unwrap_or(self.categories.len())
    }

    pub fn decode(&self, idx: usize) -> Option<&str> {
        self.categories.get(idx).map(String::as_str)
    }
}

impl EncoderSpec {
    /// Total feature count F.
    pub fn feature_count(&self) -> usize {
        self.operations.len()
            + self.numeric.len()
            + self
                .categorical
                .iter()
                .map(CategoricalEncoder::width)
                .sum::<usize>()
            + DELTA_BUCKETS.len()
            + 1
    }

    /// Encodes one request observation into a feature row.
    pub fn encode(
        &self,
        operation: &str,
        payload: &BTreeMap<String, Value>,
        delta_ms: u64,
    ) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.feature_count());
        for op in &self.operations {
            row.push(if op == operation { 1.0 } else { 0.0 });
        }
        for enc in &self.numeric {
            if enc.operation != operation {
                // Structurally absent: the field belongs to another
                // operation's schema.
                row.push(0.0);
                continue;
            }
            let v = payload
                .get(&enc.field)
                .and_then(numeric_value)
                .unwrap_or(enc.median);
            row.push(enc.scale(v));
        }
        for enc in &self.categorical {
            let mut block = vec![0.0; enc.width()];
            if enc.operation == operation {
                if let Some(v) = payload.get(&enc.field).map(categorical_value) {
                    block[enc.encode(&v)] = 1.0;
                }
            }
            row.extend(block);
        }
        let mut block = vec![0.0; DELTA_BUCKETS.len() + 1];
        block[delta_bucket(delta_ms)] = 1.0;
        row.extend(block);
        row
    }
}

fn numeric_value(v: &Value) -> Option<f64> {
    v.as_f64()
}

fn categorical_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// The numeric dataset after preprocessing.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub encoders: EncoderSpec,
    pub class_names: Vec<String>,
    pub report: PreprocessReport,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub rows_in: usize,
    pub rows_out: usize,
    pub dropped_outliers: usize,
    pub dropped_missing_categorical: usize,
    pub imputed_numerics: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("need at least {MIN_RECORDS} records, got {0}")]
    TooFewRecords(usize),
    #[error("need at least 2 distinct labels, got {0}")]
    SingleClass(usize),
}

pub const MIN_RECORDS: usize = 50;
const OUTLIER_Z: f64 = 3.0;

/// Builds the feature matrix: rows with missing categorical fields are
/// dropped, numeric outliers beyond |z| > 3 are dropped, missing numerics
/// are median-imputed, numerics min-max scale to [0,1], categoricals
/// one-hot.
pub fn preprocess(records: &[TraceRecord]) -> Result<FeatureMatrix, PreprocessError> {
    if records.len() < MIN_RECORDS {
        return Err(PreprocessError::TooFewRecords(records.len()));
    }
    let distinct: BTreeSet<&str> = records.iter().map(|r| r.label.as_str()).collect();
    if distinct.len() < 2 {
        return Err(PreprocessError::SingleClass(distinct.len()));
    }

    // Classes: outcome-class order first, then any foreign labels sorted.
    let mut class_names: Vec<String> = OUTCOME_CLASSES
        .iter()
        .map(|c| c.as_str().to_string())
        .filter(|c| distinct.contains(c.as_str()))
        .collect();
    for label in &distinct {
        if !class_names.iter().any(|c| c == label) {
            class_names.push(label.to_string());
        }
    }

    // Discover the per-operation field schema from the data: a field is
    // numeric when every observed value is numeric.
    let mut operations: Vec<String> = Vec::new();
    let mut fields: BTreeMap<(String, String), bool> = BTreeMap::new(); // -> numeric?
    for r in records {
        if !operations.contains(&r.operation) {
            operations.push(r.operation.clone());
        }
        for (k, v) in &r.payload {
            let numeric = fields
                .entry((r.operation.clone(), k.clone()))
                .or_insert(true);
            *numeric &= v.is_number();
        }
    }
    operations.sort();

    let mut report = PreprocessReport {
        rows_in: records.len(),
        ..Default::default()
    };

    // Pass 1: drop rows missing a categorical field their operation
    // declares.
    let mut rows: Vec<&TraceRecord> = Vec::new();
    'rows: for r in records {
        for ((op, field), numeric) in &fields {
            if *numeric || op != &r.operation {
                continue;
            }
            if !r.payload.contains_key(field) {
                report.dropped_missing_categorical += 1;
                continue 'rows;
            }
        }
        rows.push(r);
    }

    // Pass 2: z-score filter per numeric column over present values.
    let mut outlier = vec![false; rows.len()];
    for ((op, field), numeric) in &fields {
        if !*numeric {
            continue;
        }
        let values: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.operation == op)
            .filter_map(|(i, r)| r.payload.get(field).and_then(numeric_value).map(|v| (i, v)))
            .collect();
        if values.len() < 2 {
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().map(|(_, v)| v).sum::<f64>() / n;
        let var = values.iter().map(|(_, v)| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std == 0.0 {
            continue;
        }
        for (i, v) in values {
            if ((v - mean) / std).abs() > OUTLIER_Z {
                outlier[i] = true;
            }
        }
    }
    let rows: Vec<&TraceRecord> = rows
        .into_iter()
        .zip(&outlier)
        .filter_map(|(r, &bad)| {
            if bad {
                report.dropped_outliers += 1;
                None
            } else {
                Some(r)
            }
        })
        .collect();

    // Fit encoders on the surviving rows.
    let mut numeric = Vec::new();
    let mut categorical = Vec::new();
    for ((op, field), is_numeric) in &fields {
        if *is_numeric {
            let mut values: Vec<f64> = rows
                .iter()
                .filter(|r| &r.operation == op)
                .filter_map(|r| r.payload.get(field).and_then(numeric_value))
                .collect();
            if values.is_empty() {
                continue;
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = values[values.len() / 2];
            numeric.push(NumericEncoder {
                operation: op.clone(),
                field: field.clone(),
                min: values[0],
                max: values[values.len() - 1],
                median,
            });
        } else {
            let mut categories = Vec::new();
            for r in rows.iter().filter(|r| &r.operation == op) {
                if let Some(v) = r.payload.get(field).map(categorical_value) {
                    if !categories.contains(&v) {
                        categories.push(v);
                    }
                }
            }
            categorical.push(CategoricalEncoder {
                operation: op.clone(),
                field: field.clone(),
                categories,
            });
        }
    }
    let encoders = EncoderSpec {
        operations,
        numeric,
        categorical,
    };

    // Pass 3: encode (missing numerics impute to the median).
    let mut imputed = 0usize;
    for r in &rows {
        for enc in &encoders.numeric {
            if enc.operation == r.operation && !r.payload.contains_key(&enc.field) {
                imputed += 1;
            }
        }
    }
    report.imputed_numerics = imputed;
    report.rows_out = rows.len();

    let x_rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| encoders.encode(&r.operation, &r.payload, r.delta_ms))
        .collect();
    let y: Vec<usize> = rows
        .iter()
        .map(|r| class_names.iter().position(|c| *c == r.label).unwrap())
        .collect();

    Ok(FeatureMatrix {
        x: Matrix::from_rows(x_rows),
        y,
        encoders,
        class_names,
        report,
    })
}

/// Hyperparameters. Defaults: two hidden layers of 8 and 4, sigmoid,
/// dropout 0.2, Adam at learning rate 0.01, 3000 epochs, cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub hidden_dims: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            hidden_dims: vec![8, 4],
            dropout: 0.2,
            learning_rate: 0.01,
            epochs: 3000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Invalid("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Invalid("dropout must be in [0, 1)"));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Invalid(&'static str),
    #[error("training diverged at epoch {epoch}: loss became non-finite")]
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
}

/// The trained classifier plus everything needed to serve it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub network: Mlp,
    pub encoders: EncoderSpec,
    pub class_names: Vec<String>,
    pub report: TrainingReport,
    pub config: TrainingConfig,
}

/// Trains the classifier full-batch. Deterministic for a fixed
/// (data, config) pair.
pub fn train(data: &FeatureMatrix, cfg: &TrainingConfig) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    let f = data.encoders.feature_count();
    let c = data.class_names.len();
    let mut dims = vec![f];
    dims.extend(&cfg.hidden_dims);
    dims.push(c);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Mlp::init(&dims, &mut rng);
    let mut adam = Adam::new(
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
        model.param_count(),
    );

    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let pass = model.forward(&data.x, Some((cfg.dropout, &mut rng)));
        let loss = Mlp::loss(&pass.probs, &data.y);
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        losses.push(loss);
        let grads = model.backward(&pass, &data.y);
        adam.step(&mut model, &grads);
    }

    // Report accuracy with dropout off.
    let pass = model.forward(&data.x, None);
    let mut correct = 0usize;
    for (r, &y) in data.y.iter().enumerate() {
        if argmax(pass.probs.row(r)) == y {
            correct += 1;
        }
    }
    let final_train_accuracy = correct as f64 / data.y.len() as f64;

    Ok(TrainedModel {
        network: model,
        encoders: data.encoders.clone(),
        class_names: data.class_names.clone(),
        report: TrainingReport {
            epoch_losses: losses,
            final_train_accuracy,
        },
        config: cfg.clone(),
    })
}

/// First index of the maximum (ties break toward the lower index).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classifies one request. Dropout is inactive; the same request always
/// produces the same response.
pub fn infer(model: &TrainedModel, req: &DeviceRequest, delta_ms: u64) -> DeviceResponse {
    let row = model.encoders.encode(&req.operation, &req.payload, delta_ms);
    let x = Matrix::from_rows(vec![row]);
    let pass = model.network.forward(&x, None);
    let probs = pass.probs.row(0);
    let best = argmax(probs);

    let mut fields = BTreeMap::new();
    for (i, name) in model.class_names.iter().enumerate() {
        fields.insert(format!("p_{name}"), Value::from(probs[i]));
    }
    let status =
        OutcomeClass::from_str(&model.class_names[best]).unwrap_or(OutcomeClass::Error);
    DeviceResponse {
        seq: req.seq,
        operation: req.operation.clone(),
        status,
        state: None,
        fields,
        events: vec![],
        reason: None,
    }
}

/// Max relative error between analytic gradients and central finite
/// differences (h = 1e-5) over every parameter, dropout disabled.
pub fn grad_check(model: &Mlp, x: &Matrix, labels: &[usize]) -> f64 {
    const H: f64 = 1e-5;
    let pass = model.forward(x, None);
    let grads = model.backward(&pass, labels);

    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    for i in 0..model.param_count() {
        let original = probe.get_param(i);
        probe.set_param(i, original + H);
        let up = Mlp::loss(&probe.forward(x, None).probs, labels);
        probe.set_param(i, original - H);
        let down = Mlp::loss(&probe.forward(x, None).probs, labels);
        probe.set_param(i, original);

        let numeric = (up - down) / (2.0 * H);
        let analytic = grads.get(i);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        max_rel = max_rel.max(rel);
    }
    max_rel
}

// ---------------------------------------------------------------------------
// Model persistence
// ---------------------------------------------------------------------------

pub const MODEL_FORMAT: &str = "twinforge-mlmodel";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    model: TrainedModel,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelIoError {
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("unsupported model version {0}")]
    Version(u32),
}

/// Serializes the model. JSON float encoding is shortest-round-trip, so
/// weights survive save/load bit for bit.
pub fn save_model(model: &TrainedModel) -> Vec<u8> {
    let doc = ModelDoc {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        model: model.clone(),
    };
    serde_json::to_vec(&doc).expect("model serializes")
}

pub fn load_model(bytes: &[u8]) -> Result<TrainedModel, ModelIoError> {
    let doc: ModelDoc =
        serde_json::from_slice(bytes).map_err(|e| ModelIoError::Corrupt(e.to_string()))?;
    if doc.format != MODEL_FORMAT {
        return Err(ModelIoError::Corrupt(format!(
            "unexpected format '{}'",
            doc.format
        )));
    }
    if doc.version != MODEL_VERSION {
        return Err(ModelIoError::Version(doc.version));
    }
    Ok(doc.model)
}

/// A served ML twin: the shared trained model plus the per-twin clock
/// needed for the time-delta feature.
#[derive(Debug, Clone)]
pub struct MlTwin {
    pub model: Arc<TrainedModel>,
    pub last_time: VirtualTime,
    pub steps: u64,
}

impl MlTwin {
    pub fn new(model: Arc<TrainedModel>, created_at: VirtualTime) -> MlTwin {
        MlTwin {
            model,
            last_time: created_at,
            steps: 0,
        }
    }

    pub fn step(&mut self, req: &DeviceRequest) -> DeviceResponse {
        let delta = req.virtual_now.0.saturating_sub(self.last_time.0);
        let resp = infer(&self.model, req, delta);
        self.last_time = self.last_time.max(req.virtual_now);
        self.steps += 1;
        resp
    }

    pub fn state_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.last_time.0.to_le_bytes());
        hasher.update(self.steps.to_le_bytes());
        hex::encode(&hasher.finalize()[..16])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_records(n: usize) -> Vec<TraceRecord> {
        // Two linearly separable classes keyed off a numeric field.
        (0..n)
            .map(|i| {
                let v = if i % 2 == 0 { i as f64 % 10.0 } else { 50.0 + i as f64 % 10.0 };
                let label = if i % 2 == 0 { "accepted" } else { "error" };
                TraceRecord {
                    campaign: "toy".into(),
                    seq: i as u64,
                    operation: "load_plan".into(),
                    payload: [("roll_total".to_string(), Value::from(v))]
                        .into_iter()
                        .collect(),
                    delta_ms: 600,
                    label: label.into(),
                }
            })
            .collect()
    }

    #[test]
    fn preprocess_enforces_preconditions() {
        assert!(matches!(
            preprocess(&toy_records(10)),
            Err(PreprocessError::TooFewRecords(10))
        ));
        let mut single = toy_records(60);
        for r in &mut single {
            r.label = "accepted".into();
        }
        assert!(matches!(
            preprocess(&single),
            Err(PreprocessError::SingleClass(1))
        ));
    }

    #[test]
    fn preprocess_drops_outliers_and_missing_categoricals_imputes_numerics() {
        let mut records = toy_records(100);
        // Give every record a categorical field.
        for r in &mut records {
            r.payload
                .insert("dose_times".to_string(), Value::from("08:00"));
        }
        // One extreme numeric outlier (z >> 3).
        records[0]
            .payload
            .insert("roll_total".to_string(), Value::from(1e6));
        // One record missing the categorical: dropped.
        records[1].payload.remove("dose_times");
        // One record missing the numeric: imputed.
        records[2].payload.remove("roll_total");

        let fm = preprocess(&records).unwrap();
        assert_eq!(fm.report.rows_in, 100);
        assert_eq!(fm.report.dropped_outliers, 1);
        assert_eq!(fm.report.dropped_missing_categorical, 1);
        assert_eq!(fm.report.imputed_numerics, 1);
        assert_eq!(fm.report.rows_out, 98);
        assert_eq!(fm.x.rows, 98);
        // Feature count matches an independent recount over the encoders.
        let f = fm.encoders.operations.len()
            + fm.encoders.numeric.len()
            + fm
                .encoders
                .categorical
                .iter()
                .map(|c| c.categories.len() + 1)
                .sum::<usize>()
            + DELTA_BUCKETS.len()
            + 1;
        assert_eq!(fm.x.cols, f);
        assert_eq!(fm.encoders.feature_count(), f);
        // All finite, no missing.
        assert!(fm.x.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn training_separates_a_linear_toy_set() {
        let records = toy_records(200);
        let fm = preprocess(&records).unwrap();
        let cfg = TrainingConfig {
            epochs: 400,
            dropout: 0.0,
            ..TrainingConfig::default()
        };
        let model = train(&fm, &cfg).unwrap();
        assert!(
            model.report.final_train_accuracy >= 0.99,
            "accuracy {}",
            model.report.final_train_accuracy
        );
        let losses = &model.report.epoch_losses;
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let fm = preprocess(&toy_records(100)).unwrap();
        let cfg = TrainingConfig {
            epochs: 50,
            ..TrainingConfig::default()
        };
        let a = train(&fm, &cfg).unwrap();
        let b = train(&fm, &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.report.epoch_losses, b.report.epoch_losses);
    }

    #[test]
    fn epochs_zero_is_a_config_error() {
        let fm = preprocess(&toy_records(100)).unwrap();
        let cfg = TrainingConfig {
            epochs: 0,
            ..TrainingConfig::default()
        };
        assert_eq!(
            train(&fm, &cfg).unwrap_err(),
            TrainError::Invalid("epochs must be >= 1")
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::init(&[6, 8, 4, 5], &mut rng);
        let x = Matrix::from_rows(
            (0..8)
                .map(|_| (0..6).map(|_| rng.random::<f64>()).collect())
                .collect(),
        );
        let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();
        let err = grad_check(&mlp, &x, &labels);
        assert!(err <= 1e-4, "max relative error {err}");

        // Zero-weight init stays smooth.
        let zero = Mlp {
            layers: mlp
                .layers
                .iter()
                .map(|l| nn::Layer {
                    w: Matrix::zeros(l.w.rows, l.w.cols),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        };
        assert!(grad_check(&zero, &x, &labels) <= 1e-4);

        // Single-sample batch.
        let x1 = Matrix::from_rows(vec![x.row(0).to_vec()]);
        assert!(grad_check(&mlp, &x1, &labels[..1]) <= 1e-4);
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let fm = preprocess(&toy_records(100)).unwrap();
        let cfg = TrainingConfig {
            epochs: 30,
            seed: 7,
            ..TrainingConfig::default()
        };
        let model = train(&fm, &cfg).unwrap();
        let bytes = save_model(&model);
        let loaded = load_model(&bytes).unwrap();
        assert_eq!(loaded, model);
        // Twice-saved digests agree.
        assert_eq!(save_model(&loaded), bytes);

        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() / 3);
        assert!(matches!(
            load_model(&truncated),
            Err(ModelIoError::Corrupt(_))
        ));
    }

    #[test]
    fn inference_is_deterministic_and_attaches_probabilities() {
        let fm = preprocess(&toy_records(100)).unwrap();
        let cfg = TrainingConfig {
            epochs: 30,
            ..TrainingConfig::default()
        };
        let model = train(&fm, &cfg).unwrap();
        let req = DeviceRequest {
            seq: 1,
            operation: "load_plan".into(),
            virtual_now: VirtualTime(0),
            payload: [("roll_total".to_string(), Value::from(4.0))]
                .into_iter()
                .collect(),
        };
        let a = infer(&model, &req, 600);
        let b = infer(&model, &req, 600);
        assert_eq!(a, b);
        let psum: f64 = a
            .fields
            .values()
            .map(|v| v.as_f64().unwrap())
            .sum();
        assert!((psum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encoder_categories_round_trip() {
        let enc = CategoricalEncoder {
            operation: "set_language".into(),
            field: "language".into(),
            categories: vec!["no".into(), "en".into(), "de".into()],
        };
        for c in &enc.categories {
            assert_eq!(enc.decode(enc.encode(c)), Some(c.as_str()));
        }
        // Unknown values map to the trailing bucket and decode to None.
        assert_eq!(enc.encode("fr"), 3);
        assert_eq!(enc.decode(3), None);
    }
}
