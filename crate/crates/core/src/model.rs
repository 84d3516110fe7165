//! Reward estimator: a two-level shrinkage table.
//!
//! ```text
//! topic_mean(a)     = (n_a * mean_a + lambda * global) / (n_a + lambda)
//! predict(u, a)     = (n_ua * mean_ua + lambda * topic_mean(a)) / (n_ua + lambda)
//! ```
//!
//! Each task is fitted independently from the matching outcome flag. Because
//! the topic level pools every user in the training slice, data from one user
//! moves the predictions served to others; that pooling is what makes a model
//! shared between experiment groups leak.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;

use crate::error::Result;
use crate::io::fmt_sig9;
use crate::types::{Group, ImpressionRecord, TaskKind, TaskValues, TopicId, UserId};

/// Predicted reward of an untrained model, per task.
pub const COLD_START_PRIOR: f64 = 0.5;

/// Which records a model is trained on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSlice {
    groups: [bool; 3],
    pub days: Range<u32>,
}

impl DataSlice {
    pub fn all(days: Range<u32>) -> Self {
        DataSlice { groups: [true; 3], days }
    }

    pub fn group(group: Group, days: Range<u32>) -> Self {
        let mut groups = [false; 3];
        groups[group.index()] = true;
        DataSlice { groups, days }
    }

    pub fn includes_group(&self, group: Group) -> bool {
        self.groups[group.index()]
    }

    /// True when more than one group contributes.
    pub fn is_cross_group(&self) -> bool {
        self.groups.iter().filter(|g| **g).count() > 1
    }

    pub fn contains(&self, rec: &ImpressionRecord) -> bool {
        self.includes_group(rec.group) && self.days.contains(&rec.day)
    }
}

impl fmt::Display for DataSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Group::ALL.iter().filter(|g| self.includes_group(**g)).map(|g| g.name()).collect();
        write!(f, "{} days {}..{}", names.join("+"), self.days.start, self.days.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVersion {
    Prior,
    Fitted(u32),
}

impl fmt::Display for ModelVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelVersion::Prior => f.write_str("prior"),
            ModelVersion::Fitted(v) => write!(f, "{v}"),
        }
    }
}

/// Per-task outcome sums and the record count behind them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Cell {
    pub sums: TaskValues,
    pub n: u64,
}

impl Cell {
    fn add(&mut self, rec: &ImpressionRecord) {
        for task in TaskKind::ALL {
            if rec.outcomes.task(task) {
                self.sums[task.index()] += 1.0;
            }
        }
        self.n += 1;
    }

    fn merge(&mut self, other: &Cell) {
        for (s, o) in self.sums.iter_mut().zip(other.sums) {
            *s += o;
        }
        self.n += other.n;
    }

    fn mean(&self, task: usize) -> f64 {
        self.sums[task] / self.n as f64
    }
}

/// Sufficient statistics for [`RewardModel`]. Accumulates incrementally and
/// merges, so a cumulative window can be extended one day at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingStats {
    topics: usize,
    global: Cell,
    per_topic: Vec<Cell>,
    per_user_topic: HashMap<(UserId, TopicId), Cell>,
}

impl TrainingStats {
    pub fn new(topics: u32) -> Self {
        TrainingStats {
            topics: topics as usize,
            global: Cell::default(),
            per_topic: vec![Cell::default(); topics as usize],
            per_user_topic: HashMap::new(),
        }
    }

    pub fn add(&mut self, rec: &ImpressionRecord) {
        self.global.add(rec);
        self.per_topic[rec.topic.index()].add(rec);
        self.per_user_topic.entry((rec.user, rec.topic)).or_default().add(rec);
    }

    pub fn merge(&mut self, other: &TrainingStats) {
        debug_assert_eq!(self.topics, other.topics);
        self.global.merge(&other.global);
        for (a, b) in self.per_topic.iter_mut().zip(&other.per_topic) {
            a.merge(b);
        }
        for (key, cell) in &other.per_user_topic {
            self.per_user_topic.entry(*key).or_default().merge(cell);
        }
    }

    pub fn records(&self) -> u64 {
        self.global.n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    topics: usize,
    lambda: f64,
    global_mean: TaskValues,
    topic_mean: Vec<TaskValues>,
    user_topic: HashMap<(UserId, TopicId), Cell>,
    trained_on: Option<DataSlice>,
    version: ModelVersion,
}

impl RewardModel {
    /// Untrained model: predicts [`COLD_START_PRIOR`] for every task.
    pub fn prior(topics: u32, lambda: f64) -> Self {
        RewardModel {
            topics: topics as usize,
            lambda,
            global_mean: [COLD_START_PRIOR; 4],
            topic_mean: vec![[COLD_START_PRIOR; 4]; topics as usize],
            user_topic: HashMap::new(),
            trained_on: None,
            version: ModelVersion::Prior,
        }
    }

    /// Fits on the records that fall in `slice`.
    pub fn fit(records: &[ImpressionRecord], slice: &DataSlice, topics: u32, lambda: f64) -> Self {
        let mut stats = TrainingStats::new(topics);
        records.iter().filter(|r| slice.contains(r)).for_each(|r| stats.add(r));
        RewardModel::from_stats(&stats, slice.clone(), lambda)
    }

    /// Builds the model from accumulated statistics. An empty slice gives the
    /// cold-start prior.
    pub fn from_stats(stats: &TrainingStats, slice: DataSlice, lambda: f64) -> Self {
        assert!(lambda > 0.0, "shrinkage lambda must be positive");
        if stats.global.n == 0 {
            let mut model = RewardModel::prior(stats.topics as u32, lambda);
            model.trained_on = Some(slice);
            return model;
        }
        let global_mean: TaskValues = std::array::from_fn(|t| stats.global.mean(t));
        let topic_mean = stats
            .per_topic
            .iter()
            .map(|c| std::array::from_fn(|t| (c.sums[t] + lambda * global_mean[t]) / (c.n as f64 + lambda)))
            .collect();
        RewardModel {
            topics: stats.topics,
            lambda,
            global_mean,
            topic_mean,
            user_topic: stats.per_user_topic.clone(),
            trained_on: Some(slice),
            version: ModelVersion::Fitted(1),
        }
    }

    pub fn with_version(mut self, version: u32) -> Self {
        if self.version != ModelVersion::Prior {
            self.version = ModelVersion::Fitted(version);
        }
        self
    }

    pub fn version(&self) -> ModelVersion {
        self.version
    }

    pub fn trained_on(&self) -> Option<&DataSlice> {
        self.trained_on.as_ref()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn global_mean(&self, task: TaskKind) -> f64 {
        self.global_mean[task.index()]
    }

    pub fn topic_mean(&self, topic: TopicId, task: TaskKind) -> f64 {
        self.topic_mean[topic.index()][task.index()]
    }

    /// Raw `(sum, n)` of one user-topic pair for `task`, if present.
    pub fn user_topic(&self, user: UserId, topic: TopicId, task: TaskKind) -> Option<(f64, u64)> {
        self.user_topic.get(&(user, topic)).map(|c| (c.sums[task.index()], c.n))
    }

    pub fn predict(&self, user: UserId, topic: TopicId, task: TaskKind) -> f64 {
        self.predict_all(user, topic)[task.index()]
    }

    pub fn predict_all(&self, user: UserId, topic: TopicId) -> TaskValues {
        let parent = self.topic_mean[topic.index()];
        match self.user_topic.get(&(user, topic)) {
            Some(cell) if cell.n > 0 => {
                let n = cell.n as f64;
                std::array::from_fn(|t| (cell.sums[t] + self.lambda * parent[t]) / (n + self.lambda))
            }
            _ => parent,
        }
    }

    /// CSV dump with header `level,key,task,mean,n`, sorted by key.
    pub fn dump_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level", "key", "task", "mean", "n"])?;
        for task in TaskKind::ALL {
            w.write_record(["global", "", task.name(), &fmt_sig9(self.global_mean[task.index()]), ""])?;
        }
        for (t, means) in self.topic_mean.iter().enumerate() {
            for task in TaskKind::ALL {
                w.write_record(["topic", &t.to_string(), task.name(), &fmt_sig9(means[task.index()]), ""])?;
            }
        }
        let mut keys: Vec<_> = self.user_topic.keys().copied().collect();
        keys.sort_unstable();
        for (u, t) in keys {
            let cell = &self.user_topic[&(u, t)];
            for task in TaskKind::ALL {
                w.write_record([
                    "user_topic",
                    &format!("{u}:{t}"),
                    task.name(),
                    &fmt_sig9(cell.mean(task.index())),
                    &cell.n.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
