//! The streaming loop: per-instance predict/buffer/flush orchestration,
//! classifier updates as novel classes accumulate, the event ledger, and
//! the evaluation metrics computed from it.

use serde::{Deserialize, Serialize};

use crate::data::StreamInstance;
use crate::dscu::{update_condition, DataStorage, PendingNovelSet};
use crate::error::{Error, Result};
use crate::metric::Label;
use crate::ncp::{detect_novel, detect_rng, BufferedPath, Candidate, DbscanConfig, LabelOracle, TableOracle};
use crate::network::NetworkConfig;
use crate::owc::{compute_thresholds, predict, train, ConvOwcModel, ThresholdTable, TrainHyper, REJECT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Candidate buffer capacity S_B; a full buffer triggers purification.
    pub buffer_capacity: usize,
    /// Per-class storage capacity S_D.
    pub storage_capacity: usize,
    /// Strict per-class count bar S_update for retraining.
    pub update_threshold: usize,
    /// Confidence bar T_D for storing immediately classified instances.
    pub store_confidence: f64,
    /// Significance level of the per-class rejection thresholds.
    pub alpha: f64,
    pub dbscan: DbscanConfig,
    pub net: NetworkConfig,
    pub hyper: TrainHyper,
    /// Accuracy trace window length.
    pub window: usize,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        if self.storage_capacity == 0 {
            return Err(Error::Config("storage capacity must be positive".into()));
        }
        if !(self.store_confidence > 0.0 && self.store_confidence <= 1.0) {
            return Err(Error::Config(format!(
                "store confidence must be in (0,1], got {}",
                self.store_confidence
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0,1), got {}",
                self.alpha
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("trace window must be positive".into()));
        }
        self.dbscan.validate()?;
        self.hyper.margin.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionPath {
    Immediate,
    BufferedCluster,
    BufferedNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub position: usize,
    pub instance_id: u64,
    /// Eq-style open-world prediction at arrival; REJECT for buffered
    /// instances.
    pub estimated: Label,
    pub final_label: Label,
    /// Filled by the scorer, never seen by the engine.
    pub truth: Option<Label>,
    pub path: DecisionPath,
    pub label_requested: bool,
    pub confidence: f64,
    /// The model's class list when the instance was predicted; scoring
    /// judges novelty against this snapshot.
    pub known_classes: Vec<Label>,
}

struct BufferedInstance {
    position: usize,
    instance_id: u64,
    features: Vec<f64>,
    confidence: f64,
}

pub struct Engine {
    pub config: EngineConfig,
    pub model: ConvOwcModel,
    pub thresholds: ThresholdTable,
    pub storage: DataStorage,
    pending: PendingNovelSet,
    buffer: Vec<BufferedInstance>,
    flush_count: u64,
    pub detect_calls: usize,
    pub oracle_queries: usize,
    pub clusters_seen: usize,
    pub retrains: usize,
    pub initial_labels: usize,
}

impl Engine {
    /// Trains the warm-up model on the initial labeled set, computes its
    /// thresholds over that set, and seeds storage with it.
    pub fn start(config: EngineConfig, initial: &[(Vec<f64>, Label)]) -> Result<Engine> {
        config.validate()?;
        let (model, _) = train(config.net.clone(), initial, &config.hyper)?;
        let class_data = group_by_class(initial, &model.class_list);
        let thresholds = compute_thresholds(&model, &class_data, config.alpha)?;
        let mut storage = DataStorage::new(config.storage_capacity);
        for (x, y) in initial {
            storage.store(x.clone(), *y);
        }
        Ok(Engine::from_parts(config, model, thresholds, storage, initial.len()))
    }

    /// Assembles an engine around a pre-built model; used when the warm-up
    /// phase happened elsewhere (or in tests).
    pub fn from_parts(
        config: EngineConfig,
        model: ConvOwcModel,
        thresholds: ThresholdTable,
        storage: DataStorage,
        initial_labels: usize,
    ) -> Engine {
        Engine {
            config,
            model,
            thresholds,
            storage,
            pending: PendingNovelSet::default(),
            buffer: Vec::new(),
            flush_count: 0,
            detect_calls: 0,
            oracle_queries: 0,
            clusters_seen: 0,
            retrains: 0,
            initial_labels,
        }
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    /// One step of the stream loop. Confident instances are finalized (and
    /// stored when confidence clears the bar) immediately; rejected ones
    /// wait in the buffer until it fills, at which point the whole buffer
    /// is finalized, possibly retraining the classifier first. Returns the
    /// events finalized by this step.
    pub fn process_instance(
        &mut self,
        position: usize,
        instance_id: u64,
        features: &[f64],
        oracle: &mut dyn LabelOracle,
    ) -> Result<Vec<StreamEvent>> {
        let outcome = predict(&self.model, &self.thresholds, features)?;
        if outcome.estimated_label != REJECT {
            if outcome.confidence > self.config.store_confidence {
                self.storage.store(features.to_vec(), outcome.estimated_label);
            }
            return Ok(vec![StreamEvent {
                position,
                instance_id,
                estimated: outcome.estimated_label,
                final_label: outcome.estimated_label,
                truth: None,
                path: DecisionPath::Immediate,
                label_requested: false,
                confidence: outcome.confidence,
                known_classes: self.model.class_list.clone(),
            }]);
        }
        self.buffer.push(BufferedInstance {
            position,
            instance_id,
            features: features.to_vec(),
            confidence: outcome.confidence,
        });
        debug_assert!(self.buffer.len() <= self.config.buffer_capacity);
        if self.buffer.len() == self.config.buffer_capacity {
            return self.flush(oracle);
        }
        Ok(Vec::new())
    }

    /// Finalizes whatever is left in the buffer at end of stream.
    pub fn finish(&mut self, oracle: &mut dyn LabelOracle) -> Result<Vec<StreamEvent>> {
        if self.buffer.is_empty() {
            return Ok(Vec::new());
        }
        self.flush(oracle)
    }

    fn flush(&mut self, oracle: &mut dyn LabelOracle) -> Result<Vec<StreamEvent>> {
        // class list as it stood when the buffered instances were rejected;
        // retrains only happen inside flushes, so it is the same for all of
        // them
        let known_at_prediction = self.model.class_list.clone();
        let candidates: Vec<Candidate> = self
            .buffer
            .iter()
            .map(|b| Candidate {
                instance_id: b.instance_id,
                features: b.features.clone(),
            })
            .collect();
        let mut rng = detect_rng(self.config.hyper.seed, self.flush_count);
        self.flush_count += 1;
        let outcome = detect_novel(
            &candidates,
            &self.model,
            &self.config.dbscan,
            oracle,
            &mut self.storage,
            &mut rng,
        )?;
        self.detect_calls += 1;
        self.oracle_queries += outcome.queries.len();
        self.clusters_seen += outcome.cluster_count;

        let queried: std::collections::HashSet<u64> =
            outcome.queries.iter().map(|q| q.instance_id).collect();
        let mut events = Vec::with_capacity(self.buffer.len());
        for d in &outcome.decisions {
            let b = &self.buffer[d.buffer_index];
            events.push(StreamEvent {
                position: b.position,
                instance_id: b.instance_id,
                estimated: REJECT,
                final_label: d.label,
                truth: None,
                path: match d.path {
                    BufferedPath::Cluster => DecisionPath::BufferedCluster,
                    BufferedPath::Noise => DecisionPath::BufferedNoise,
                },
                label_requested: queried.contains(&b.instance_id),
                confidence: b.confidence,
                known_classes: known_at_prediction.clone(),
            });
        }
        self.buffer.clear();

        if outcome.novel {
            for l in &outcome.novel_labels {
                self.pending.insert(*l);
            }
            if update_condition(&self.pending, &self.storage, self.config.update_threshold) {
                self.retrain()?;
            }
        }
        Ok(events)
    }

    fn retrain(&mut self) -> Result<()> {
        let d_prime = match self
            .storage
            .build_training_set(self.config.update_threshold)
        {
            Ok(d) => d,
            // fewer than two qualifying classes: skip this update, keep
            // the pending set for the next opportunity
            Err(Error::Training(_)) => return Ok(()),
            Err(e) => return Err(e),
        };
        let hyper = TrainHyper {
            // a distinct deterministic seed per update
            seed: self
                .config
                .hyper
                .seed
                .wrapping_add((self.retrains as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15)),
            ..self.config.hyper
        };
        let (model, _) = train(self.config.net.clone(), &d_prime, &hyper)?;
        let class_data = group_by_class(&d_prime, &model.class_list);
        self.thresholds = compute_thresholds(&model, &class_data, self.config.alpha)?;
        self.model = model;
        self.pending.clear();
        self.retrains += 1;
        Ok(())
    }
}

fn group_by_class(data: &[(Vec<f64>, Label)], classes: &[Label]) -> Vec<(Label, Vec<Vec<f64>>)> {
    classes
        .iter()
        .map(|&c| {
            (
                c,
                data.iter()
                    .filter(|(_, y)| *y == c)
                    .map(|(x, _)| x.clone())
                    .collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPoint {
    pub start: usize,
    pub len: usize,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMetrics {
    pub n: usize,
    /// Instances whose truth was outside the class list when predicted.
    pub n_c: usize,
    pub a_new: usize,
    pub a_known: usize,
    /// Novel instances finalized with an in-class-list label.
    pub false_negatives: usize,
    /// Known instances finalized with an out-of-class-list label.
    pub false_positives: usize,
    pub labels_requested: usize,
    pub initial_labels: usize,
    pub accuracy_pct: f64,
    /// FN * 100 / N_c; absent when the stream held no novel instances.
    pub m_new: Option<f64>,
    /// FP * 100 / (N - N_c); absent when every instance was novel.
    pub f_new: Option<f64>,
    /// Oracle queries as a percentage of stream length.
    pub pct_labels: f64,
    /// Same, counting the warm-up training labels too.
    pub pct_labels_with_initial: f64,
    pub windows: Vec<WindowPoint>,
}

/// Scores a completed ledger. Every event must carry its truth label.
pub fn compute_metrics(
    events: &[StreamEvent],
    initial_labels: usize,
    window: usize,
) -> Result<StreamMetrics> {
    if events.is_empty() {
        return Err(Error::Usage("empty event ledger".into()));
    }
    if window == 0 {
        return Err(Error::Usage("window must be positive".into()));
    }
    let mut events: Vec<&StreamEvent> = events.iter().collect();
    events.sort_by_key(|e| e.position);
    let n = events.len();
    let mut n_c = 0;
    let mut a_new = 0;
    let mut a_known = 0;
    let mut false_negatives = 0;
    let mut false_positives = 0;
    let mut labels_requested = 0;
    let mut correct_flags = Vec::with_capacity(n);
    for e in &events {
        let truth = e
            .truth
            .ok_or_else(|| Error::Usage(format!("event {} has no truth label", e.instance_id)))?;
        let novel = !e.known_classes.contains(&truth);
        let correct = e.final_label == truth;
        let finalized_known = e.known_classes.contains(&e.final_label);
        if novel {
            n_c += 1;
            if correct {
                a_new += 1;
            }
            if finalized_known {
                false_negatives += 1;
            }
        } else {
            if correct {
                a_known += 1;
            }
            if !finalized_known {
                false_positives += 1;
            }
        }
        if e.label_requested {
            labels_requested += 1;
        }
        correct_flags.push(correct);
    }
    let windows = correct_flags
        .chunks(window)
        .enumerate()
        .map(|(i, chunk)| WindowPoint {
            start: i * window,
            len: chunk.len(),
            accuracy_pct: chunk.iter().filter(|&&c| c).count() as f64 * 100.0
                / chunk.len() as f64,
        })
        .collect();
    Ok(StreamMetrics {
        n,
        n_c,
        a_new,
        a_known,
        false_negatives,
        false_positives,
        labels_requested,
        initial_labels,
        accuracy_pct: (a_new + a_known) as f64 * 100.0 / n as f64,
        m_new: (n_c > 0).then(|| false_negatives as f64 * 100.0 / n_c as f64),
        f_new: (n > n_c).then(|| false_positives as f64 * 100.0 / (n - n_c) as f64),
        pct_labels: labels_requested as f64 * 100.0 / n as f64,
        pct_labels_with_initial: (labels_requested + initial_labels) as f64 * 100.0 / n as f64,
        windows,
    })
}

#[derive(Debug, Clone)]
pub struct StreamRunReport {
    pub metrics: StreamMetrics,
    pub events: Vec<StreamEvent>,
    pub detect_calls: usize,
    pub oracle_queries: usize,
    pub clusters_seen: usize,
    pub retrains: usize,
    pub final_classes: Vec<Label>,
}

/// Drives an engine over a finite labeled stream with a replay oracle,
/// attaches the truth labels to the finalized ledger, and scores it.
/// Returns the engine too, so callers can checkpoint the final model.
pub fn run_stream(
    mut engine: Engine,
    stream: &[StreamInstance],
) -> Result<(StreamRunReport, Engine)> {
    let mut oracle = TableOracle::new(stream.iter().map(|s| (s.instance_id, s.label)));
    let truth: std::collections::HashMap<u64, Label> =
        stream.iter().map(|s| (s.instance_id, s.label)).collect();
    let mut events = Vec::with_capacity(stream.len());
    for (pos, inst) in stream.iter().enumerate() {
        events.extend(engine.process_instance(pos, inst.instance_id, &inst.features, &mut oracle)?);
    }
    events.extend(engine.finish(&mut oracle)?);
    for e in &mut events {
        e.truth = Some(truth[&e.instance_id]);
    }
    let metrics = compute_metrics(&events, engine.initial_labels, engine.config.window)?;
    let report = StreamRunReport {
        metrics,
        events,
        detect_calls: engine.detect_calls,
        oracle_queries: engine.oracle_queries,
        clusters_seen: engine.clusters_seen,
        retrains: engine.retrains,
        final_classes: engine.model.class_list.clone(),
    };
    Ok((report, engine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::MarginConfig;
    use crate::owc::ThresholdEntry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DIM: usize = 36;

    fn sample(pattern: [f64; 2], rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..DIM)
            .map(|i| pattern[i % 2] + rng.gen_range(-0.001..0.001))
            .collect()
    }

    fn tiny_config(buffer_capacity: usize) -> EngineConfig {
        let mut net = NetworkConfig::with_input(6, 6);
        net.conv_layers = 0;
        net.conv_channels = vec![];
        net.hidden_units = 8;
        net.embed_dim = 4;
        EngineConfig {
            buffer_capacity,
            storage_capacity: 50,
            update_threshold: 10,
            store_confidence: 0.99,
            alpha: 0.05,
            dbscan: DbscanConfig {
                eps: 0.05,
                min_pts: 4,
            },
            net,
            hyper: TrainHyper {
                mini_batch: 8,
                epochs: 3,
                learning_rate: 0.05,
                margin: MarginConfig {
                    gamma: 1.0,
                    beta: 1.0,
                },
                ..TrainHyper::default()
            },
            window: 10,
        }
    }

    /// A model whose heads point at the mean embedding of each pattern,
    /// scaled so the own-class probability saturates near 1.
    fn aligned_model(
        config: &EngineConfig,
        patterns: &[(Label, [f64; 2])],
        seed: u64,
    ) -> ConvOwcModel {
        let classes: Vec<Label> = patterns.iter().map(|&(l, _)| l).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model =
            ConvOwcModel::init(config.net.clone(), classes, &mut rng).unwrap();
        for (hi, &(_, p)) in patterns.iter().enumerate() {
            let mut srng = ChaCha8Rng::seed_from_u64(seed + 100 + hi as u64);
            let e = model.embed(&sample(p, &mut srng)).unwrap();
            model.heads[hi].weights = e.iter().map(|v| v * 80.0).collect();
            model.heads[hi].bias = -72.0;
        }
        model
    }

    fn flat_thresholds(model: &ConvOwcModel, threshold: f64) -> ThresholdTable {
        ThresholdTable {
            entries: model
                .class_list
                .iter()
                .map(|&label| ThresholdEntry {
                    label,
                    threshold,
                    mean_prob: threshold,
                    sample_std: 0.0,
                    count: 2,
                })
                .collect(),
        }
    }

    fn labeled_stream(
        patterns: &[(Label, [f64; 2])],
        count_per_class: usize,
        seed: u64,
    ) -> Vec<StreamInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut id = 0u64;
        for i in 0..count_per_class {
            for &(l, p) in patterns {
                let _ = i;
                out.push(StreamInstance {
                    instance_id: id,
                    features: sample(p, &mut rng),
                    label: l,
                });
                id += 1;
            }
        }
        out
    }

    #[test]
    fn confident_known_stream_is_all_immediate() {
        let config = tiny_config(8);
        let patterns = [(0, [0.5, 0.5]), (1, [0.9, 0.1])];
        let model = aligned_model(&config, &patterns, 3);
        let thresholds = flat_thresholds(&model, 1e-6);
        let storage = DataStorage::new(config.storage_capacity);
        let engine = Engine::from_parts(config, model, thresholds, storage, 0);
        let stream = labeled_stream(&patterns, 12, 9);
        let (report, _) = run_stream(engine, &stream).unwrap();
        assert_eq!(report.metrics.accuracy_pct, 100.0);
        assert_eq!(report.metrics.m_new, None);
        assert_eq!(report.metrics.f_new, Some(0.0));
        assert_eq!(report.metrics.n_c, 0);
        assert_eq!(report.detect_calls, 0);
        assert!(report
            .events
            .iter()
            .all(|e| e.path == DecisionPath::Immediate));
    }

    #[test]
    fn saturated_confidence_feeds_storage() {
        let config = tiny_config(8);
        let patterns = [(0, [0.5, 0.5]), (1, [0.9, 0.1])];
        let model = aligned_model(&config, &patterns, 3);
        let thresholds = flat_thresholds(&model, 1e-6);
        let storage = DataStorage::new(config.storage_capacity);
        let mut engine = Engine::from_parts(config, model, thresholds, storage, 0);
        let stream = labeled_stream(&patterns, 6, 9);
        let mut oracle = TableOracle::new([]);
        for (pos, s) in stream.iter().enumerate() {
            engine
                .process_instance(pos, s.instance_id, &s.features, &mut oracle)
                .unwrap();
        }
        // heads saturate their own class, so everything clears the 0.99 bar
        assert_eq!(engine.storage.count(0), 6);
        assert_eq!(engine.storage.count(1), 6);
    }

    #[test]
    fn rejections_buffer_until_capacity_then_one_flush() {
        let config = tiny_config(8);
        let patterns = [(0, [0.5, 0.5]), (1, [0.9, 0.1])];
        let model = aligned_model(&config, &patterns, 3);
        // impossible bar: everything is rejected
        let thresholds = flat_thresholds(&model, 1.1);
        let storage = DataStorage::new(config.storage_capacity);
        let mut engine = Engine::from_parts(config, model, thresholds, storage, 0);
        let stream = labeled_stream(&patterns, 5, 10);
        let mut oracle =
            TableOracle::new(stream.iter().map(|s| (s.instance_id, s.label)));
        let mut finalized = 0;
        for (pos, s) in stream.iter().enumerate() {
            let events = engine
                .process_instance(pos, s.instance_id, &s.features, &mut oracle)
                .unwrap();
            finalized += events.len();
            if pos < 7 {
                assert!(events.is_empty());
                assert_eq!(engine.buffer_len(), pos + 1);
            }
        }
        assert_eq!(engine.detect_calls, 1);
        assert_eq!(finalized, 8);
        assert_eq!(engine.buffer_len(), 2);
        let tail = engine.finish(&mut oracle).unwrap();
        assert_eq!(tail.len(), 2);
        assert_eq!(engine.buffer_len(), 0);
    }

    #[test]
    fn novel_class_triggers_retrain_and_joins_the_class_list() {
        let mut config = tiny_config(10);
        config.update_threshold = 8;
        config.hyper.epochs = 5;
        let known = [(0, [0.5, 0.5]), (1, [0.9, 0.1])];
        let novel_pattern: [f64; 2] = [0.1, 0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let initial: Vec<(Vec<f64>, Label)> = (0..20)
            .flat_map(|_| {
                known
                    .iter()
                    .map(|&(l, p)| (sample(p, &mut rng), l))
                    .collect::<Vec<_>>()
            })
            .collect();
        let engine = Engine::start(config, &initial).unwrap();
        assert_eq!(engine.model.class_list, vec![0, 1]);

        let stream = labeled_stream(&[(7, novel_pattern)], 30, 11);
        let (report, _) = run_stream(engine, &stream).unwrap();
        assert!(report.retrains >= 1, "no retrain happened");
        assert!(report.final_classes.contains(&7));
        // once learned, later instances are judged against the grown list
        assert!(report
            .events
            .iter()
            .any(|e| e.known_classes.contains(&7)));
        assert_eq!(report.events.len(), stream.len());
    }

    fn synthetic_event(
        position: usize,
        truth: Label,
        final_label: Label,
        known: Vec<Label>,
    ) -> StreamEvent {
        StreamEvent {
            position,
            instance_id: position as u64,
            estimated: final_label,
            final_label,
            truth: Some(truth),
            path: DecisionPath::Immediate,
            label_requested: false,
            confidence: 0.5,
            known_classes: known,
        }
    }

    #[test]
    fn metric_arithmetic_on_a_synthetic_ledger() {
        let known = vec![0, 1];
        let mut events = Vec::new();
        let mut pos = 0;
        // 80 known instances: 72 correct, 8 finalized as an unknown label
        for _ in 0..72 {
            events.push(synthetic_event(pos, 0, 0, known.clone()));
            pos += 1;
        }
        for _ in 0..8 {
            events.push(synthetic_event(pos, 1, 9, known.clone()));
            pos += 1;
        }
        // 20 novel instances: 5 swallowed by a known label, 15 labeled with
        // some novel id (12 of them correctly)
        for _ in 0..5 {
            events.push(synthetic_event(pos, 7, 0, known.clone()));
            pos += 1;
        }
        for _ in 0..12 {
            events.push(synthetic_event(pos, 7, 7, known.clone()));
            pos += 1;
        }
        for _ in 0..3 {
            events.push(synthetic_event(pos, 7, 8, known.clone()));
            pos += 1;
        }
        let m = compute_metrics(&events, 0, 10).unwrap();
        assert_eq!(m.n, 100);
        assert_eq!(m.n_c, 20);
        assert_eq!(m.false_negatives, 5);
        assert_eq!(m.false_positives, 8);
        assert_eq!(m.m_new, Some(25.0));
        assert_eq!(m.f_new, Some(10.0));
        assert_eq!(m.a_known, 72);
        assert_eq!(m.a_new, 12);
        assert_eq!(m.accuracy_pct, 84.0);
        // conservation: correct + incorrect == n
        let errors = m.n - m.a_new - m.a_known;
        assert_eq!(errors, 16);
        assert_eq!(m.windows.len(), 10);
    }

    #[test]
    fn zero_error_ledger_gives_zero_rates() {
        let events: Vec<StreamEvent> = (0..10)
            .map(|p| synthetic_event(p, 0, 0, vec![0, 1]))
            .collect();
        let m = compute_metrics(&events, 5, 4).unwrap();
        assert_eq!(m.f_new, Some(0.0));
        assert_eq!(m.m_new, None);
        assert_eq!(m.pct_labels, 0.0);
        assert_eq!(m.pct_labels_with_initial, 50.0);
        assert_eq!(m.windows.len(), 3);
        assert_eq!(m.windows[2].len, 2);
    }

    #[test]
    fn ledger_without_truth_is_rejected() {
        let mut e = synthetic_event(0, 0, 0, vec![0]);
        e.truth = None;
        assert!(compute_metrics(&[e], 0, 10).is_err());
    }
}
