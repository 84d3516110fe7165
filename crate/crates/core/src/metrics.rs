//! Exploration-efficiency metrics.
//!
//! For each user and day we build a beta posterior of `p(relevant)` per
//! topic from completions before that day (never-seen topics included), turn
//! them into the distribution `P` of "which topic is most relevant" by Monte
//! Carlo argmax sampling, and compare it with the distribution `Q` of topics
//! actually served that day:
//!
//! * exploration inefficiency `EI = KL(P || Q)` (nats, zeros of `Q` imputed),
//! * topic diversity `TD = |support(Q)|`,
//! * interest uncertainty `IU = H(P)` (nats),
//! * topic excellence `TE = P . Q`.
//!
//! Topics are treated as independent.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::fmt_sig9;
use crate::rng::{stream, Purpose};
use crate::types::{Group, ImpressionRecord, Phase, TopicId, UserId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPosterior {
    pub a: f64,
    pub b: f64,
}

impl BetaPosterior {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
            return Err(Error::Contract(format!("beta parameters must be finite and positive, got ({a}, {b})")));
        }
        Ok(BetaPosterior { a, b })
    }

    /// Conjugate update with `completions` successes out of `impressions`.
    pub fn update(self, impressions: u64, completions: u64) -> Self {
        debug_assert!(completions <= impressions);
        BetaPosterior { a: self.a + completions as f64, b: self.b + (impressions - completions) as f64 }
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// Impressions and completions of one cell of the history.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub impressions: u64,
    pub completions: u64,
}

impl Tally {
    fn add(&mut self, rec: &ImpressionRecord) {
        self.impressions += 1;
        self.completions += rec.outcomes.completed() as u64;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.impressions > 0).then(|| self.completions as f64 / self.impressions as f64)
    }
}

/// Posterior per topic: `a = 1 + s*m + completions`, `b = 1 + s*(1-m) + misses`
/// with `m` the average of the topic's and the user's completion rates
/// (each 0.5 when undefined).
pub fn posteriors_from_tallies(user_topic: &[Tally], topic_rates: &[Option<f64>], user_rate: Option<f64>, prior_strength: f64) -> Vec<BetaPosterior> {
    let user_rate = user_rate.unwrap_or(0.5);
    user_topic
        .iter()
        .zip(topic_rates)
        .map(|(tally, topic_rate)| {
            let m = 0.5 * (topic_rate.unwrap_or(0.5) + user_rate);
            BetaPosterior { a: 1.0 + prior_strength * m, b: 1.0 + prior_strength * (1.0 - m) }
                .update(tally.impressions, tally.completions)
        })
        .collect()
}

/// Posteriors of `user` over all `topics` from `history` records with
/// `day < before_day`. Topic rates pool every user in the history.
pub fn build_posteriors(history: &[ImpressionRecord], user: UserId, before_day: u32, topics: u32, prior_strength: f64) -> Vec<BetaPosterior> {
    let k = topics as usize;
    let mut per_topic = vec![Tally::default(); k];
    let mut user_topic = vec![Tally::default(); k];
    let mut user_total = Tally::default();
    for rec in history.iter().filter(|r| r.day < before_day) {
        per_topic[rec.topic.index()].add(rec);
        if rec.user == user {
            user_topic[rec.topic.index()].add(rec);
            user_total.add(rec);
        }
    }
    let rates: Vec<Option<f64>> = per_topic.iter().map(Tally::rate).collect();
    posteriors_from_tallies(&user_topic, &rates, user_total.rate(), prior_strength)
}

/// A distribution over topic indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicDistribution {
    weights: Vec<f64>,
}

impl TopicDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Contract("distribution weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("distribution sums to {sum}")));
        }
        Ok(TopicDistribution { weights })
    }

    /// Normalized counts; `None` when every count is zero.
    pub fn from_counts(counts: &[u64]) -> Option<Self> {
        let total: u64 = counts.iter().sum();
        (total > 0).then(|| TopicDistribution { weights: counts.iter().map(|&c| c as f64 / total as f64).collect() })
    }

    pub fn point_mass(topics: usize, topic: TopicId) -> Self {
        let mut weights = vec![0.0; topics];
        weights[topic.index()] = 1.0;
        TopicDistribution { weights }
    }

    pub fn uniform(topics: usize) -> Self {
        TopicDistribution { weights: vec![1.0 / topics as f64; topics] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn support(&self) -> Vec<TopicId> {
        self.weights.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(t, _)| TopicId(t as u32)).collect()
    }
}

/// Probability that each topic has the highest draw, by Monte Carlo.
/// Ties go to the lowest topic id.
pub fn estimate_p<R: Rng + ?Sized>(posteriors: &[BetaPosterior], mc_samples: u32, rng: &mut R) -> TopicDistribution {
    assert!(!posteriors.is_empty(), "need at least one topic");
    assert!(mc_samples >= 1, "need at least one sample");
    let dists: Vec<Beta<f64>> = posteriors.iter().map(|p| Beta::new(p.a, p.b).expect("valid beta")).collect();
    let mut wins = vec![0u64; posteriors.len()];
    for _ in 0..mc_samples {
        let mut best = 0;
        let mut best_draw = f64::NEG_INFINITY;
        for (t, d) in dists.iter().enumerate() {
            let x = d.sample(rng);
            if x > best_draw {
                best_draw = x;
                best = t;
            }
        }
        wins[best] += 1;
    }
    TopicDistribution::from_counts(&wins).expect("at least one sample")
}

/// Empirical distribution of the topics served to `user` in `today`.
/// `None` when the user had no impressions.
pub fn observed_q(today: &[ImpressionRecord], user: UserId, topics: u32) -> Option<TopicDistribution> {
    let mut counts = vec![0u64; topics as usize];
    for rec in today.iter().filter(|r| r.user == user) {
        counts[rec.topic.index()] += 1;
    }
    TopicDistribution::from_counts(&counts)
}

fn same_space(p: &TopicDistribution, q: &TopicDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!("distributions over {} and {} topics", p.len(), q.len())));
    }
    Ok(())
}

/// `KL(P || Q)` in nats. Wherever `p_i > 0` and `q_i = 0`, `q_i` is set to
/// `epsilon` and `Q` is renormalized first.
pub fn exploration_inefficiency(p: &TopicDistribution, q: &TopicDistribution, epsilon: f64) -> Result<f64> {
    same_space(p, q)?;
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Contract(format!("imputation epsilon must be positive, got {epsilon}")));
    }
    let imputed: Vec<f64> = p.weights.iter().zip(&q.weights).map(|(&pi, &qi)| if pi > 0.0 && qi == 0.0 { epsilon } else { qi }).collect();
    let norm: f64 = imputed.iter().sum();
    let kl = p
        .weights
        .iter()
        .zip(&imputed)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi * norm / qi).ln())
        .sum::<f64>();
    // Rounding can leave a tiny negative value when P == Q.
    Ok(kl.max(0.0))
}

pub fn topic_diversity(q: &TopicDistribution) -> usize {
    q.weights.iter().filter(|w| **w > 0.0).count()
}

/// Shannon entropy of `P` in nats.
pub fn interest_uncertainty(p: &TopicDistribution) -> f64 {
    -p.weights.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

pub fn topic_excellence(p: &TopicDistribution, q: &TopicDistribution) -> Result<f64> {
    same_space(p, q)?;
    Ok(p.weights.iter().zip(&q.weights).map(|(a, b)| a * b).sum())
}

/// Metrics of one user on one day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub user: UserId,
    pub day: u32,
    pub group: Group,
    pub ei: f64,
    pub td: usize,
    pub iu: f64,
    pub te: f64,
    pub plays: u64,
}

/// Group means of the per-user metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricMeans {
    pub ei: f64,
    pub td: f64,
    pub iu: f64,
    /// Play-weighted; absent when the rows have no plays.
    pub te: Option<f64>,
    pub users: usize,
}

fn means<'a>(rows: impl Iterator<Item = &'a MetricsRow>) -> Option<MetricMeans> {
    let (mut n, mut ei, mut td, mut iu, mut te_num, mut plays) = (0usize, 0.0, 0.0, 0.0, 0.0, 0u64);
    for r in rows {
        n += 1;
        ei += r.ei;
        td += r.td as f64;
        iu += r.iu;
        te_num += r.te * r.plays as f64;
        plays += r.plays;
    }
    (n > 0).then(|| MetricMeans {
        ei: ei / n as f64,
        td: td / n as f64,
        iu: iu / n as f64,
        te: (plays > 0).then(|| te_num / plays as f64),
        users: n,
    })
}

/// EI, TD and IU averaged over users; TE weighted by plays.
pub fn aggregate(rows: &[MetricsRow], group: Group, day: u32) -> Option<MetricMeans> {
    means(rows.iter().filter(|r| r.group == group && r.day == day))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityBucket {
    /// Total-play range covered by the bucket.
    pub lower_plays: f64,
    pub upper_plays: f64,
    /// Distinct users in the bucket.
    pub users: usize,
    pub means: Option<MetricMeans>,
}

/// Bins users by total plays on a log scale (`ln(1 + plays)`, equal widths
/// between the smallest and largest user) and averages each bin's rows.
pub fn bucket_by_activity(rows: &[MetricsRow], total_plays: impl Fn(UserId) -> u64, n_buckets: usize) -> Vec<ActivityBucket> {
    assert!(n_buckets >= 2, "need at least two buckets");
    let mut users: Vec<UserId> = rows.iter().map(|r| r.user).collect();
    users.sort_unstable();
    users.dedup();
    let level = |u: UserId| (1.0 + total_plays(u) as f64).ln();
    let (lo, hi) = users.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &u| (lo.min(level(u)), hi.max(level(u))));
    let (lo, width) = if users.is_empty() {
        (0.0, 1.0 / n_buckets as f64)
    } else if hi > lo {
        (lo, (hi - lo) / n_buckets as f64)
    } else {
        (lo, 1.0 / n_buckets as f64)
    };
    let bucket_of = |u: UserId| (((level(u) - lo) / width) as usize).min(n_buckets - 1);

    let mut members: Vec<Vec<UserId>> = vec![Vec::new(); n_buckets];
    for &u in &users {
        members[bucket_of(u)].push(u);
    }
    (0..n_buckets)
        .map(|b| {
            let in_bucket = |u: &UserId| members[b].binary_search(u).is_ok();
            ActivityBucket {
                lower_plays: (lo + width * b as f64).exp() - 1.0,
                upper_plays: (lo + width * (b + 1) as f64).exp() - 1.0,
                users: members[b].len(),
                means: means(rows.iter().filter(|r| in_bucket(&r.user))),
            }
        })
        .collect()
}

/// `(loops / plays, skips / impressions)` of one group on one day.
pub fn engagement_rates(records: &[ImpressionRecord], group: Group, day: u32) -> (Option<f64>, Option<f64>) {
    let mut tally = DayTally::default();
    records.iter().filter(|r| r.group == group && r.day == day).for_each(|r| tally.add(r));
    (tally.loop_rate(), tally.skip_rate())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct DayTally {
    impressions: u64,
    plays: u64,
    loops: u64,
    skips: u64,
    active_users: u64,
}

impl DayTally {
    fn add(&mut self, r: &ImpressionRecord) {
        self.impressions += 1;
        self.plays += r.outcomes.play() as u64;
        self.loops += r.outcomes.is_loop() as u64;
        self.skips += r.outcomes.skip() as u64;
    }

    fn loop_rate(&self) -> Option<f64> {
        (self.plays > 0).then(|| self.loops as f64 / self.plays as f64)
    }

    fn skip_rate(&self) -> Option<f64> {
        (self.impressions > 0).then(|| self.skips as f64 / self.impressions as f64)
    }
}

/// Columns of `metrics.csv`'s `metric` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Impressions,
    ActiveUsers,
    Plays,
    PlaysPerUser,
    LoopRate,
    SkipRate,
    MeasuredUsers,
    Ei,
    Td,
    Iu,
    Te,
}

impl Metric {
    pub const ALL: [Metric; 11] = [
        Metric::Impressions,
        Metric::ActiveUsers,
        Metric::Plays,
        Metric::PlaysPerUser,
        Metric::LoopRate,
        Metric::SkipRate,
        Metric::MeasuredUsers,
        Metric::Ei,
        Metric::Td,
        Metric::Iu,
        Metric::Te,
    ];

    /// Metrics reported as test/control effects.
    pub const EFFECTS: [Metric; 7] =
        [Metric::PlaysPerUser, Metric::LoopRate, Metric::SkipRate, Metric::Ei, Metric::Td, Metric::Iu, Metric::Te];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Impressions => "impressions",
            Metric::ActiveUsers => "active_users",
            Metric::Plays => "plays",
            Metric::PlaysPerUser => "plays_per_user",
            Metric::LoopRate => "loop_rate",
            Metric::SkipRate => "skip_rate",
            Metric::MeasuredUsers => "measured_users",
            Metric::Ei => "ei_nats",
            Metric::Td => "td",
            Metric::Iu => "iu_nats",
            Metric::Te => "te",
        }
    }

    pub fn from_name(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Group time series: one optional value per (day, group, metric).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    days: u32,
    phase1_days: u32,
    values: Vec<Option<f64>>,
    /// Per-user rows behind the exploration-efficiency means.
    pub user_rows: Vec<MetricsRow>,
}

impl MetricsTable {
    fn new(days: u32, phase1_days: u32) -> Self {
        MetricsTable { days, phase1_days, values: vec![None; days as usize * 3 * Metric::ALL.len()], user_rows: Vec::new() }
    }

    fn slot(&self, day: u32, group: Group, metric: Metric) -> usize {
        (day as usize * 3 + group.index()) * Metric::ALL.len() + metric as usize
    }

    fn set(&mut self, day: u32, group: Group, metric: Metric, value: Option<f64>) {
        let i = self.slot(day, group, metric);
        self.values[i] = value;
    }

    pub fn days(&self) -> u32 {
        self.days
    }

    pub fn phase(&self, day: u32) -> Phase {
        if day < self.phase1_days {
            Phase::One
        } else {
            Phase::Two
        }
    }

    pub fn get(&self, day: u32, group: Group, metric: Metric) -> Option<f64> {
        if day >= self.days {
            return None;
        }
        self.values[self.slot(day, group, metric)]
    }

    pub fn series(&self, group: Group, metric: Metric) -> Vec<Option<f64>> {
        (0..self.days).map(|d| self.get(d, group, metric)).collect()
    }

    /// Writes `day,group,phase,metric,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "group", "phase", "metric", "value"])?;
        for day in 0..self.days {
            for group in Group::ALL {
                for metric in Metric::ALL {
                    if let Some(v) = self.get(day, group, metric) {
                        w.write_record([
                            &day.to_string(),
                            group.name(),
                            &self.phase(day).to_string(),
                            metric.name(),
                            &fmt_sig9(v),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes `bucket,metric,value,users`.
pub fn write_buckets_csv<W: Write>(buckets: &[ActivityBucket], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bucket", "metric", "value", "users"])?;
    for (b, bucket) in buckets.iter().enumerate() {
        let mut rows = vec![("lower_plays", bucket.lower_plays), ("upper_plays", bucket.upper_plays)];
        if let Some(m) = &bucket.means {
            rows.extend([("ei_nats", m.ei), ("td", m.td), ("iu_nats", m.iu)]);
            if let Some(te) = m.te {
                rows.push(("te", te));
            }
        }
        for (name, value) in rows {
            w.write_record([&b.to_string(), name, &fmt_sig9(value), &bucket.users.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything derived from a log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub table: MetricsTable,
    /// Activity breakdown of the control group; empty when no control user
    /// was measured.
    pub buckets: Vec<ActivityBucket>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsOptions {
    /// Compute EI/TD/IU/TE (the Monte Carlo part). Tallies are always computed.
    pub exploration: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions { exploration: true }
    }
}

/// Groups whose users get exploration-efficiency rows.
pub const MEASURED_GROUPS: [Group; 2] = [Group::Control, Group::Test];

/// Computes the group time series and the control activity buckets from a
/// log. Depends only on the records, the config, the seed and the group sizes.
pub fn compute_metrics(
    records: &[ImpressionRecord],
    cfg: &ExperimentConfig,
    seed: u64,
    group_sizes: [u64; 3],
    opts: MetricsOptions,
) -> Result<MetricsReport> {
    let k = cfg.topics as usize;
    let days = cfg.total_days();
    let mut by_day: Vec<Vec<&ImpressionRecord>> = vec![Vec::new(); days as usize];
    for rec in records {
        if rec.day >= days {
            return Err(Error::Contract(format!("record day {} beyond experiment horizon {days}", rec.day)));
        }
        if rec.topic.0 >= cfg.topics || rec.user.0 >= cfg.users {
            return Err(Error::Contract(format!("record ids out of range: user {} topic {}", rec.user, rec.topic)));
        }
        by_day[rec.day as usize].push(rec);
    }

    let mut table = MetricsTable::new(days, cfg.phase1_days);
    let mut topic_tally = vec![Tally::default(); k];
    let mut user_tally = vec![Tally::default(); cfg.users as usize];
    let mut user_topic_tally = vec![Tally::default(); cfg.users as usize * k];
    let mut total_plays = vec![0u64; cfg.users as usize];

    for (day, today) in by_day.iter().enumerate() {
        let day = day as u32;
        if today.is_empty() {
            continue;
        }
        // Today's impressions per user, in user order.
        let mut per_user: BTreeMap<UserId, Vec<&ImpressionRecord>> = BTreeMap::new();
        for rec in today {
            per_user.entry(rec.user).or_default().push(rec);
        }

        let mut tallies = [DayTally::default(); 3];
        for recs in per_user.values() {
            let g = recs[0].group.index();
            tallies[g].active_users += 1;
            for r in recs {
                tallies[g].add(r);
            }
        }
        for group in Group::ALL {
            let t = &tallies[group.index()];
            let size = group_sizes[group.index()];
            table.set(day, group, Metric::Impressions, Some(t.impressions as f64));
            table.set(day, group, Metric::ActiveUsers, Some(t.active_users as f64));
            table.set(day, group, Metric::Plays, Some(t.plays as f64));
            table.set(day, group, Metric::PlaysPerUser, (size > 0).then(|| t.plays as f64 / size as f64));
            table.set(day, group, Metric::LoopRate, t.loop_rate());
            table.set(day, group, Metric::SkipRate, t.skip_rate());
        }

        if opts.exploration {
            let topic_rates: Vec<Option<f64>> = topic_tally.iter().map(Tally::rate).collect();
            let measured: Vec<(&UserId, &Vec<&ImpressionRecord>)> =
                per_user.iter().filter(|(_, recs)| MEASURED_GROUPS.contains(&recs[0].group)).collect();
            let rows: Vec<MetricsRow> = measured
                .par_iter()
                .map(|(&user, recs)| {
                    let u = user.index();
                    let posteriors =
                        posteriors_from_tallies(&user_topic_tally[u * k..(u + 1) * k], &topic_rates, user_tally[u].rate(), cfg.prior_strength);
                    let mut rng = stream(seed, Purpose::Posterior, user.0, day, 0);
                    let p = estimate_p(&posteriors, cfg.mc_samples, &mut rng);
                    let mut counts = vec![0u64; k];
                    recs.iter().for_each(|r| counts[r.topic.index()] += 1);
                    let q = TopicDistribution::from_counts(&counts).expect("user has impressions today");
                    MetricsRow {
                        user,
                        day,
                        group: recs[0].group,
                        ei: exploration_inefficiency(&p, &q, cfg.imputation_epsilon).expect("validated epsilon"),
                        td: topic_diversity(&q),
                        iu: interest_uncertainty(&p),
                        te: topic_excellence(&p, &q).expect("same topic space"),
                        plays: recs.iter().filter(|r| r.outcomes.play()).count() as u64,
                    }
                })
                .collect();
            for group in MEASURED_GROUPS {
                let m = means(rows.iter().filter(|r| r.group == group));
                table.set(day, group, Metric::MeasuredUsers, Some(m.map_or(0.0, |m| m.users as f64)));
                table.set(day, group, Metric::Ei, m.map(|m| m.ei));
                table.set(day, group, Metric::Td, m.map(|m| m.td));
                table.set(day, group, Metric::Iu, m.map(|m| m.iu));
                table.set(day, group, Metric::Te, m.and_then(|m| m.te));
            }
            table.user_rows.extend(rows);
        }

        for rec in today {
            topic_tally[rec.topic.index()].add(rec);
            user_tally[rec.user.index()].add(rec);
            user_topic_tally[rec.user.index() * k + rec.topic.index()].add(rec);
            total_plays[rec.user.index()] += rec.outcomes.play() as u64;
        }
    }

    let control_rows: Vec<MetricsRow> = table.user_rows.iter().filter(|r| r.group == Group::Control).copied().collect();
    let buckets = if opts.exploration && !control_rows.is_empty() {
        bucket_by_activity(&control_rows, |u| total_plays[u.index()], cfg.activity_buckets as usize)
    } else {
        Vec::new()
    };
    Ok(MetricsReport { table, buckets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::types::{OutcomeFlags, Outcomes};
    use rand::{Rng, SeedableRng};

    fn dist(w: &[f64]) -> TopicDistribution {
        TopicDistribution::new(w.to_vec()).unwrap()
    }

    fn rec(user: u32, topic: u32, day: u32, completed: bool) -> ImpressionRecord {
        ImpressionRecord {
            day,
            user: UserId(user),
            topic: TopicId(topic),
            group: Group::Control,
            phase: Phase::One,
            outcomes: Outcomes::new(OutcomeFlags { play: completed, completed, ..Default::default() }).unwrap(),
            score: 0.0,
        }
    }

    #[test]
    fn prior_only_posteriors() {
        let post = build_posteriors(&[], UserId(0), 5, 4, 2.0);
        assert!(post.iter().all(|p| *p == BetaPosterior { a: 2.0, b: 2.0 }));
        let flat = build_posteriors(&[], UserId(0), 5, 4, 0.0);
        assert!(flat.iter().all(|p| *p == BetaPosterior { a: 1.0, b: 1.0 }));
    }

    #[test]
    fn conjugate_update() {
        let prior = BetaPosterior::new(2.0, 2.0).unwrap();
        assert_eq!(prior.update(3, 1), BetaPosterior { a: 3.0, b: 4.0 });
    }

    #[test]
    fn posterior_from_history_blends_averages() {
        // User 0: 3 impressions on topic 0, one completion -> user rate 1/3.
        // User 1: 3 completions on topic 0 -> topic rate 4/6. m = 0.5.
        let history = vec![
            rec(0, 0, 0, true),
            rec(0, 0, 0, false),
            rec(0, 0, 1, false),
            rec(1, 0, 1, true),
            rec(1, 0, 1, true),
            rec(1, 0, 1, true),
            rec(0, 1, 2, true), // on the measured day: excluded
        ];
        let post = build_posteriors(&history, UserId(0), 2, 2, 2.0);
        assert_eq!(post[0], BetaPosterior { a: 3.0, b: 4.0 });
        // Never-seen topic 1: topic rate undefined -> 0.5; m = (0.5 + 1/3) / 2.
        let m = (0.5 + 1.0 / 3.0) / 2.0;
        assert!((post[1].a - (1.0 + 2.0 * m)).abs() < 1e-15);
        assert!((post[1].b - (1.0 + 2.0 * (1.0 - m))).abs() < 1e-15);
    }

    #[test]
    fn shifting_days_shifts_p_and_q_inputs() {
        let history: Vec<_> = (0..40u32).map(|i| rec(i % 3, i % 5, i / 10, i % 4 == 0)).collect();
        let shifted: Vec<_> = history.iter().map(|r| ImpressionRecord { day: r.day + 1, ..*r }).collect();
        for day in 0..4u32 {
            for u in 0..3 {
                assert_eq!(
                    build_posteriors(&history, UserId(u), day, 5, 1.5),
                    build_posteriors(&shifted, UserId(u), day + 1, 5, 1.5)
                );
                let today: Vec<_> = history.iter().filter(|r| r.day == day).copied().collect();
                let today_shifted: Vec<_> = shifted.iter().filter(|r| r.day == day + 1).copied().collect();
                assert_eq!(observed_q(&today, UserId(u), 5), observed_q(&today_shifted, UserId(u), 5));
            }
        }
    }

    #[test]
    fn single_topic_p() {
        let mut rng = StreamRng::seed_from_u64(0);
        let p = estimate_p(&[BetaPosterior { a: 3.0, b: 9.0 }], 100, &mut rng);
        assert_eq!(p.weights(), &[1.0]);
    }

    #[test]
    fn symmetric_p() {
        let mut rng = StreamRng::seed_from_u64(1);
        let b = BetaPosterior { a: 2.0, b: 5.0 };
        let p = estimate_p(&[b, b], 100_000, &mut rng);
        assert!((p.weights()[0] - 0.5).abs() <= 0.01);
    }

    #[test]
    fn argmax_against_uniform() {
        // P(X > Y) for X ~ Beta(2,1), Y ~ U(0,1) equals E[X] = 2/3.
        let mut rng = StreamRng::seed_from_u64(2);
        let p = estimate_p(&[BetaPosterior { a: 2.0, b: 1.0 }, BetaPosterior { a: 1.0, b: 1.0 }], 100_000, &mut rng);
        assert!((p.weights()[0] - 2.0 / 3.0).abs() <= 0.01, "{:?}", p.weights());
    }

    #[test]
    fn monte_carlo_error_scales_as_inverse_sqrt() {
        // Quadrupling the sample count should halve the mean absolute error;
        // accept a ratio within a factor of two of 2.
        let posts = [BetaPosterior { a: 2.0, b: 1.0 }, BetaPosterior { a: 1.0, b: 1.0 }];
        let mean_err = |n: u32, base: u64| {
            (0..20).map(|r| (estimate_p(&posts, n, &mut StreamRng::seed_from_u64(base + r)).weights()[0] - 2.0 / 3.0).abs()).sum::<f64>() / 20.0
        };
        let ratio = mean_err(500, 100) / mean_err(2000, 200);
        assert!((1.0..=4.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn q_counts() {
        let today = vec![rec(0, 0, 0, false), rec(0, 0, 0, false), rec(0, 1, 0, true), rec(1, 2, 0, false)];
        let q = observed_q(&today, UserId(0), 3).unwrap();
        assert!((q.weights()[0] - 2.0 / 3.0).abs() < 1e-15 && (q.weights()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(observed_q(&today, UserId(1), 3).unwrap(), TopicDistribution::point_mass(3, TopicId(2)));
        assert_eq!(observed_q(&today, UserId(2), 3), None);
    }

    #[test]
    fn ei_examples() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(exploration_inefficiency(&p, &p, 1e-4).unwrap(), 0.0);
        let ei = exploration_inefficiency(&p, &dist(&[0.25, 0.75]), 1e-4).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((ei - expected).abs() < 1e-15 && (ei - 0.143_841).abs() < 1e-6);
        // Q = (1, 0) imputes to (1, 1e-4) / 1.0001.
        let ei = exploration_inefficiency(&p, &dist(&[1.0, 0.0]), 1e-4).unwrap();
        let expected = 0.5 * (0.5f64 * 1.0001).ln() + 0.5 * (0.5f64 * 1.0001 / 1e-4).ln();
        assert!((ei - expected).abs() < 1e-12, "{ei} vs {expected}");
        assert!(exploration_inefficiency(&p, &p, 0.0).is_err());
        assert!(exploration_inefficiency(&p, &dist(&[1.0]), 1e-4).is_err());
    }

    #[test]
    fn td_examples() {
        assert_eq!(topic_diversity(&TopicDistribution::point_mass(30, TopicId(4))), 1);
        assert_eq!(topic_diversity(&TopicDistribution::uniform(30)), 30);
        assert_eq!(topic_diversity(&dist(&[0.5, 0.5, 0.0])), 2);
    }

    #[test]
    fn iu_examples() {
        assert_eq!(interest_uncertainty(&TopicDistribution::point_mass(30, TopicId(0))), 0.0);
        assert!((interest_uncertainty(&TopicDistribution::uniform(30)) - 30f64.ln()).abs() < 1e-12);
        assert!((interest_uncertainty(&dist(&[0.5, 0.5])) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn te_examples() {
        let pm = TopicDistribution::point_mass(5, TopicId(2));
        assert_eq!(topic_excellence(&pm, &pm).unwrap(), 1.0);
        let u = TopicDistribution::uniform(4);
        assert!((topic_excellence(&u, &dist(&[0.1, 0.2, 0.3, 0.4])).unwrap() - 0.25).abs() < 1e-15);
        assert!((topic_excellence(&dist(&[0.6, 0.4]), &dist(&[0.5, 0.5])).unwrap() - 0.5).abs() < 1e-15);
    }

    fn row(user: u32, te: f64, plays: u64, ei: f64) -> MetricsRow {
        MetricsRow { user: UserId(user), day: 0, group: Group::Control, ei, td: 2, iu: 1.0, te, plays }
    }

    #[test]
    fn aggregation() {
        let one = [row(0, 0.4, 3, 1.5)];
        let m = aggregate(&one, Group::Control, 0).unwrap();
        assert_eq!((m.ei, m.td, m.iu), (1.5, 2.0, 1.0));
        assert!((m.te.unwrap() - 0.4).abs() < 1e-15);
        let weighted = [row(0, 1.0, 0, 0.0), row(1, 0.0, 10, 0.0)];
        assert_eq!(aggregate(&weighted, Group::Control, 0).unwrap().te, Some(0.0));
        let equal = [row(0, 0.2, 4, 0.0), row(1, 0.6, 4, 0.0)];
        assert!((aggregate(&equal, Group::Control, 0).unwrap().te.unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(aggregate(&equal, Group::Test, 0), None);
        assert_eq!(aggregate(&equal, Group::Control, 1), None);
    }

    #[test]
    fn buckets_degenerate_and_monotone() {
        let rows: Vec<_> = (0..20).map(|u| row(u, 0.5, 1, 1.0)).collect();
        let same = bucket_by_activity(&rows, |_| 50, 10);
        assert_eq!(same[0].users, 20);
        assert!(same[1..].iter().all(|b| b.users == 0 && b.means.is_none()));

        let spread = bucket_by_activity(&rows, |u| 1 << (u.0 / 2), 10);
        assert_eq!(spread.iter().map(|b| b.users).sum::<usize>(), 20);
        for w in spread.windows(2) {
            assert!(w[0].lower_plays < w[1].lower_plays);
            assert!((w[0].upper_plays - w[1].lower_plays).abs() < 1e-9);
        }
        assert!(spread[0].lower_plays <= 1.0 + 1e-9 && (spread[9].upper_plays - 512.0).abs() < 1e-6);
    }

    #[test]
    fn lognormal_activity_gives_unimodal_buckets() {
        use rand_distr::LogNormal;
        let mut rng = StreamRng::seed_from_u64(9);
        let plays: Vec<u64> = (0..5000).map(|_| LogNormal::<f64>::new(4.0, 0.8).unwrap().sample(&mut rng).round() as u64).collect();
        let rows: Vec<_> = (0..5000).map(|u| row(u, 0.5, 1, 1.0)).collect();
        let counts: Vec<usize> = bucket_by_activity(&rows, |u| plays[u.index()], 10).iter().map(|b| b.users).collect();
        let peak = counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0;
        assert!(counts[..=peak].windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
        assert!(counts[peak..].windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    fn eng(play: bool, loop_: bool, skip: bool) -> ImpressionRecord {
        ImpressionRecord {
            day: 0,
            user: UserId(0),
            topic: TopicId(0),
            group: Group::Test,
            phase: Phase::One,
            outcomes: Outcomes::new(OutcomeFlags { play, loop_, skip, ..Default::default() }).unwrap(),
            score: 0.0,
        }
    }

    #[test]
    fn engagement() {
        let recs: Vec<_> = (0..10).map(|i| eng(true, i < 3, false)).collect();
        assert_eq!(engagement_rates(&recs, Group::Test, 0).0, Some(0.3));
        let none: Vec<_> = (0..4).map(|_| eng(false, false, false)).collect();
        assert_eq!(engagement_rates(&none, Group::Test, 0), (None, Some(0.0)));
        let skipped: Vec<_> = (0..4).map(|_| eng(true, false, true)).collect();
        assert_eq!(engagement_rates(&skipped, Group::Test, 0).1, Some(1.0));
        assert_eq!(engagement_rates(&skipped, Group::Control, 0), (None, None));
    }

    #[test]
    fn light_user_skew() {
        // With P fixed and today's topics drawn from P, the expected EI falls
        // as the number of impressions grows.
        let p = dist(&[0.3, 0.25, 0.2, 0.1, 0.08, 0.05, 0.02]);
        let mut rng = StreamRng::seed_from_u64(5);
        let cdf: Vec<f64> = p.weights().iter().scan(0.0, |s, w| { *s += w; Some(*s) }).collect();
        let mut last = f64::INFINITY;
        for n in [1usize, 2, 4, 8, 16, 64, 256] {
            let mut total = 0.0;
            for _ in 0..3000 {
                let mut counts = vec![0u64; 7];
                for _ in 0..n {
                    let x: f64 = rng.random();
                    counts[cdf.iter().position(|c| x < *c).unwrap_or(6)] += 1;
                }
                total += exploration_inefficiency(&p, &TopicDistribution::from_counts(&counts).unwrap(), 1e-4).unwrap();
            }
            let mean = total / 3000.0;
            assert!(mean <= last, "n={n}: {mean} > {last}");
            last = mean;
        }
    }

    use proptest::prelude::*;

    fn arb_dist(k: usize) -> impl Strategy<Value = TopicDistribution> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], k).prop_filter_map("non-zero", |w| {
            let s: f64 = w.iter().sum();
            (s > 0.0).then(|| TopicDistribution { weights: w.iter().map(|x| x / s).collect() })
        })
    }

    proptest! {
        #[test]
        fn metric_bounds(p in arb_dist(12), q in arb_dist(12)) {
            let ei = exploration_inefficiency(&p, &q, 1e-4).unwrap();
            prop_assert!(ei >= 0.0);
            let iu = interest_uncertainty(&p);
            prop_assert!(iu >= -1e-15 && iu <= 12f64.ln() + 1e-12);
            prop_assert_eq!(iu == 0.0, topic_diversity(&p) == 1);
            let te = topic_excellence(&p, &q).unwrap();
            let pmax = p.weights().iter().cloned().fold(0.0, f64::max);
            prop_assert!(te >= 0.0 && te <= pmax + 1e-12);
            prop_assert!(exploration_inefficiency(&p, &p, 1e-4).unwrap() < 1e-12);
        }
    }
}
