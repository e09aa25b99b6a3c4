//! Purification of the rejected-instance buffer: density clustering in
//! embedding space, one label query per cluster, and a thresholdless
//! fallback for noise points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dscu::DataStorage;
use crate::error::{Error, Result};
use crate::metric::Label;
use crate::owc::{argmax, ConvOwcModel};
use crate::tensor::euclidean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> DbscanConfig {
        DbscanConfig {
            eps: 0.22,
            min_pts: 2,
        }
    }
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.min_pts < 1 {
            return Err(Error::Config("min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    /// Point indices, ascending.
    pub members: Vec<usize>,
}

/// Density clustering over points with the L2 metric. A point is core when
/// at least `min_pts` points (itself included) lie within `eps` of it;
/// border points join the cluster that first reaches them during expansion,
/// which for a fixed point order makes the output deterministic. Returns
/// clusters in creation order plus the noise indices.
pub fn dbscan(points: &[Vec<f64>], config: &DbscanConfig) -> Result<(Vec<Cluster>, Vec<usize>)> {
    config.validate()?;
    let n = points.len();
    const UNVISITED: usize = usize::MAX;
    const NOISE: usize = usize::MAX - 1;
    let mut assignment = vec![UNVISITED; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();

    let region = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| euclidean(&points[i], &points[j]) <= config.eps)
            .collect()
    };

    for i in 0..n {
        if assignment[i] != UNVISITED {
            continue;
        }
        let neighbors = region(i);
        if neighbors.len() < config.min_pts {
            assignment[i] = NOISE;
            continue;
        }
        let cid = clusters.len();
        clusters.push(vec![i]);
        assignment[i] = cid;
        let mut queue: std::collections::VecDeque<usize> = neighbors.into();
        while let Some(j) = queue.pop_front() {
            if assignment[j] == NOISE {
                // border point claimed by the first cluster to reach it
                assignment[j] = cid;
                clusters[cid].push(j);
                continue;
            }
            if assignment[j] != UNVISITED {
                continue;
            }
            assignment[j] = cid;
            clusters[cid].push(j);
            let jn = region(j);
            if jn.len() >= config.min_pts {
                queue.extend(jn);
            }
        }
    }

    let out = clusters
        .into_iter()
        .map(|mut members| {
            members.sort_unstable();
            Cluster { members }
        })
        .collect();
    let noise = (0..n).filter(|&i| assignment[i] == NOISE).collect();
    Ok((out, noise))
}

/// Independent reference clustering for validation: core points by
/// pairwise counting, clusters as union-find components of mutually
/// reachable cores ordered by their minimal core index, border points
/// assigned to the earliest-created neighboring cluster. Must produce
/// output identical to [`dbscan`].
pub fn dbscan_reference(
    points: &[Vec<f64>],
    config: &DbscanConfig,
) -> Result<(Vec<Cluster>, Vec<usize>)> {
    config.validate()?;
    let n = points.len();
    let within = |i: usize, j: usize| euclidean(&points[i], &points[j]) <= config.eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| within(i, j)).count() >= config.min_pts)
        .collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if core[i] && core[j] && within(i, j) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }

    // components keyed by minimal core index, which equals creation order
    let mut comp_of_root: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if !core[i] {
            continue;
        }
        let r = find(&mut parent, i);
        let cid = *comp_of_root.entry(r).or_insert_with(|| {
            clusters.push(Vec::new());
            clusters.len() - 1
        });
        clusters[cid].push(i);
    }
    let mut noise = Vec::new();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let claim = (0..n)
            .filter(|&j| core[j] && within(i, j))
            .map(|j| {
                let r = find(&mut parent, j);
                comp_of_root[&r]
            })
            .min();
        match claim {
            Some(cid) => clusters[cid].push(i),
            None => noise.push(i),
        }
    }
    let out = clusters
        .into_iter()
        .map(|mut members| {
            members.sort_unstable();
            Cluster { members }
        })
        .collect();
    Ok((out, noise))
}

/// Source of true labels, consulted once per cluster.
pub trait LabelOracle {
    fn query(&mut self, instance_id: u64) -> Result<Label>;
}

/// An oracle backed by a prebuilt id-to-label table.
pub struct TableOracle {
    labels: std::collections::HashMap<u64, Label>,
}

impl TableOracle {
    pub fn new(pairs: impl IntoIterator<Item = (u64, Label)>) -> TableOracle {
        TableOracle {
            labels: pairs.into_iter().collect(),
        }
    }
}

impl LabelOracle for TableOracle {
    fn query(&mut self, instance_id: u64) -> Result<Label> {
        self.labels
            .get(&instance_id)
            .copied()
            .ok_or_else(|| Error::Usage(format!("oracle has no label for id {}", instance_id)))
    }
}

/// A rejected instance waiting in the candidate buffer.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub instance_id: u64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferedPath {
    /// Labeled via the cluster representative's oracle answer and stored.
    Cluster,
    /// Noise point: highest-probability known class, not stored.
    Noise,
}

#[derive(Debug, Clone)]
pub struct BufferedDecision {
    pub buffer_index: usize,
    pub label: Label,
    pub path: BufferedPath,
}

#[derive(Debug, Clone)]
pub struct QueryRecord {
    pub instance_id: u64,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub struct DetectNovelOutcome {
    /// True iff any queried label was outside the classifier's class list.
    pub novel: bool,
    /// Novel labels among the queries, deduplicated, ascending.
    pub novel_labels: Vec<Label>,
    /// One decision per buffer entry, in buffer order.
    pub decisions: Vec<BufferedDecision>,
    pub queries: Vec<QueryRecord>,
    pub cluster_count: usize,
    pub noise_count: usize,
}

/// Resolves a full candidate buffer: embeds every instance, clusters the
/// embeddings, asks the oracle for the label of one uniformly drawn
/// representative per cluster and propagates it to the whole cluster
/// (storing each member), and finalizes noise points by plain probability
/// argmax without storing them. The caller drains the buffer afterwards.
pub fn detect_novel(
    buffer: &[Candidate],
    model: &ConvOwcModel,
    config: &DbscanConfig,
    oracle: &mut dyn LabelOracle,
    storage: &mut DataStorage,
    rng: &mut ChaCha8Rng,
) -> Result<DetectNovelOutcome> {
    if buffer.is_empty() {
        return Err(Error::Usage("detect_novel on an empty buffer".into()));
    }
    let embeddings: Vec<Vec<f64>> = buffer
        .iter()
        .map(|c| model.embed(&c.features))
        .collect::<Result<_>>()?;
    let (clusters, noise) = dbscan(&embeddings, config)?;

    let mut decisions: Vec<Option<BufferedDecision>> = vec![None; buffer.len()];
    let mut queries = Vec::with_capacity(clusters.len());
    let mut novel_labels = std::collections::BTreeSet::new();
    for cluster in &clusters {
        let rep = cluster.members[rng.gen_range(0..cluster.members.len())];
        let label = oracle.query(buffer[rep].instance_id)?;
        queries.push(QueryRecord {
            instance_id: buffer[rep].instance_id,
            label,
        });
        if !model.class_list.contains(&label) {
            novel_labels.insert(label);
        }
        for &m in &cluster.members {
            storage.store(buffer[m].features.clone(), label);
            decisions[m] = Some(BufferedDecision {
                buffer_index: m,
                label,
                path: BufferedPath::Cluster,
            });
        }
    }
    for &m in &noise {
        let probs = model.probs_from_embedding(&embeddings[m]);
        let label = model.class_list[argmax(&probs)];
        decisions[m] = Some(BufferedDecision {
            buffer_index: m,
            label,
            path: BufferedPath::Noise,
        });
    }
    let decisions: Vec<BufferedDecision> = decisions
        .into_iter()
        .map(|d| d.expect("every buffer entry is clustered or noise"))
        .collect();
    Ok(DetectNovelOutcome {
        novel: !novel_labels.is_empty(),
        novel_labels: novel_labels.into_iter().collect(),
        decisions,
        queries,
        cluster_count: clusters.len(),
        noise_count: noise.len(),
    })
}

/// Convenience for seeding the representative draws.
pub fn detect_rng(seed: u64, flush_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ flush_index.wrapping_mul(0xd1b54a32d192ed03))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn p2(x: f64, y: f64) -> Vec<f64> {
        vec![x, y]
    }

    #[test]
    fn two_blobs_and_an_outlier() {
        let mut pts = Vec::new();
        for i in 0..6 {
            pts.push(p2(0.0 + 0.01 * i as f64, 0.0));
        }
        for i in 0..6 {
            pts.push(p2(5.0 + 0.01 * i as f64, 5.0));
        }
        pts.push(p2(100.0, 100.0));
        let (clusters, noise) = dbscan(&pts, &DbscanConfig::default()).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].members, (0..6).collect::<Vec<_>>());
        assert_eq!(clusters[1].members, (6..12).collect::<Vec<_>>());
        assert_eq!(noise, vec![12]);
    }

    #[test]
    fn neighbor_count_includes_self() {
        // 2 coincident points, min_pts = 2: each sees itself plus the other
        let pts = vec![p2(1.0, 1.0), p2(1.0, 1.0)];
        let cfg = DbscanConfig {
            eps: 0.1,
            min_pts: 2,
        };
        let (clusters, noise) = dbscan(&pts, &cfg).unwrap();
        assert_eq!(clusters.len(), 1);
        assert!(noise.is_empty());
    }

    #[test]
    fn radius_is_inclusive() {
        let pts = vec![p2(0.0, 0.0), p2(0.3, 0.0)];
        let cfg = DbscanConfig {
            eps: 0.3,
            min_pts: 2,
        };
        let (clusters, _) = dbscan(&pts, &cfg).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members, vec![0, 1]);
    }

    #[test]
    fn border_point_joins_first_claiming_cluster() {
        // two dense runs of 10 core points with one sparse point between
        // them, within eps of the tail cores of each run but with too few
        // neighbors to be core itself; the earlier cluster claims it
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(p2(0.05 * i as f64, 0.0));
        }
        for i in 0..10 {
            pts.push(p2(1.35 + 0.05 * i as f64, 0.0));
        }
        pts.push(p2(0.9, 0.0));
        let cfg = DbscanConfig {
            eps: 0.5,
            min_pts: 10,
        };
        let (clusters, noise) = dbscan(&pts, &cfg).unwrap();
        assert!(noise.is_empty());
        assert_eq!(clusters.len(), 2);
        assert!(clusters[0].members.contains(&20));
        assert!(!clusters[1].members.contains(&20));
    }

    #[test]
    fn all_noise_when_sparse() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| p2(10.0 * i as f64, 0.0)).collect();
        let (clusters, noise) = dbscan(&pts, &DbscanConfig::default()).unwrap();
        assert!(clusters.is_empty());
        assert_eq!(noise.len(), 10);
    }

    #[test]
    fn partition_is_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..80)
            .map(|_| p2(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)))
            .collect();
        let cfg = DbscanConfig {
            eps: 0.5,
            min_pts: 4,
        };
        let (clusters, noise) = dbscan(&pts, &cfg).unwrap();
        let mut seen = vec![0usize; pts.len()];
        for c in &clusters {
            for &m in &c.members {
                seen[m] += 1;
            }
        }
        for &m in &noise {
            seen[m] += 1;
        }
        assert!(seen.iter().all(|&s| s == 1));
        // every cluster contains at least one core point and only points
        // within eps of some core member
        for c in &clusters {
            let cores: Vec<usize> = c
                .members
                .iter()
                .copied()
                .filter(|&i| {
                    pts.iter()
                        .filter(|q| euclidean(&pts[i], q) <= cfg.eps)
                        .count()
                        >= cfg.min_pts
                })
                .collect();
            assert!(!cores.is_empty());
            for &m in &c.members {
                assert!(cores
                    .iter()
                    .any(|&c0| euclidean(&pts[m], &pts[c0]) <= cfg.eps));
            }
        }
    }

    #[test]
    fn reference_clustering_agrees_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..25 {
            let n = rng.gen_range(2..40);
            let d = rng.gen_range(1..4);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(0.0..2.0)).collect())
                .collect();
            let cfg = DbscanConfig {
                eps: rng.gen_range(0.1..0.8),
                min_pts: rng.gen_range(2..6),
            };
            let got = dbscan(&pts, &cfg).unwrap();
            let want = dbscan_reference(&pts, &cfg).unwrap();
            assert_eq!(got, want, "case {} with {:?}", case, cfg);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = DbscanConfig {
            eps: 0.0,
            min_pts: 5,
        };
        assert!(dbscan(&[], &cfg).is_err());
    }

    fn tiny_model(seed: u64, classes: &[Label]) -> ConvOwcModel {
        let mut cfg = NetworkConfig::with_input(6, 6);
        cfg.conv_layers = 0;
        cfg.conv_channels = vec![];
        cfg.hidden_units = 8;
        cfg.embed_dim = 4;
        ConvOwcModel::init(cfg, classes.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    // tight input blobs around two distinct directions map to tight,
    // well separated embedding blobs for a fixed random network
    fn blob(pattern: [f64; 2], count: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                (0..36)
                    .map(|i| pattern[i % 2] + rng.gen_range(-0.001..0.001))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn detect_novel_queries_once_per_cluster_and_flags_unknown_labels() {
        let model = tiny_model(7, &[0, 1]);
        let mut buffer = Vec::new();
        for (id, f) in blob([0.5, 0.5], 8, 20).into_iter().enumerate() {
            buffer.push(Candidate {
                instance_id: id as u64,
                features: f,
            });
        }
        for (id, f) in blob([0.9, 0.1], 8, 21).into_iter().enumerate() {
            buffer.push(Candidate {
                instance_id: 100 + id as u64,
                features: f,
            });
        }
        // truth: first blob is known class 1, second is unseen class 5
        let oracle_pairs: Vec<(u64, Label)> = (0..8)
            .map(|i| (i, 1))
            .chain((0..8).map(|i| (100 + i, 5)))
            .collect();
        let mut oracle = TableOracle::new(oracle_pairs);
        let mut storage = DataStorage::new(50);
        let cfg = DbscanConfig {
            eps: 0.05,
            min_pts: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out =
            detect_novel(&buffer, &model, &cfg, &mut oracle, &mut storage, &mut rng).unwrap();
        assert_eq!(out.cluster_count, 2);
        assert_eq!(out.queries.len(), 2);
        assert!(out.novel);
        assert_eq!(out.novel_labels, vec![5]);
        // all cluster members stored under the propagated label
        assert_eq!(storage.count(1), 8);
        assert_eq!(storage.count(5), 8);
        assert_eq!(out.decisions.len(), buffer.len());
        for d in &out.decisions {
            assert_eq!(d.path, BufferedPath::Cluster);
        }
    }

    #[test]
    fn noise_points_fall_back_to_argmax_and_skip_storage() {
        let model = tiny_model(9, &[0, 1]);
        let buffer: Vec<Candidate> = blob([0.5, 0.5], 3, 30)
            .into_iter()
            .enumerate()
            .map(|(id, f)| Candidate {
                instance_id: id as u64,
                features: f,
            })
            .collect();
        let mut oracle = TableOracle::new([]);
        let mut storage = DataStorage::new(50);
        // min_pts above the buffer size forces everything to noise
        let cfg = DbscanConfig {
            eps: 0.05,
            min_pts: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out =
            detect_novel(&buffer, &model, &cfg, &mut oracle, &mut storage, &mut rng).unwrap();
        assert!(!out.novel);
        assert_eq!(out.noise_count, 3);
        assert!(out.queries.is_empty());
        assert_eq!(storage.count(0) + storage.count(1), 0);
        for d in &out.decisions {
            assert_eq!(d.path, BufferedPath::Noise);
            let probs = model.class_probabilities(&buffer[d.buffer_index].features).unwrap();
            assert_eq!(d.label, model.class_list[argmax(&probs)]);
        }
    }

    #[test]
    fn detect_novel_rejects_empty_buffer() {
        let model = tiny_model(1, &[0, 1]);
        let mut oracle = TableOracle::new([]);
        let mut storage = DataStorage::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(detect_novel(
            &[],
            &model,
            &DbscanConfig::default(),
            &mut oracle,
            &mut storage,
            &mut rng
        )
        .is_err());
    }
}
