//! Ranking scores and per-impression topic selection.
//!
//! The test group ranks candidates by
//!
//! ```text
//! U(a) = sum_T alpha_T * r_hat(a, T) + gamma * sqrt(ln N / N_a)
//! ```
//!
//! where `N` counts all impressions served to the user and `N_a` those on
//! topic `a`. The control and production groups rank by the first term only.

use crate::config::{ExperimentConfig, TaskWeights};
use crate::error::{Error, Result};
use crate::model::RewardModel;
use crate::types::{TaskValues, TopicId, UserId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    pub gamma: f64,
    pub alpha: TaskValues,
}

impl ScoreParams {
    pub fn new(gamma: f64, alpha: TaskWeights) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::config("gamma", "must be finite and >= 0"));
        }
        let alpha = alpha.values();
        if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::config("alpha", "weights must be finite and >= 0"));
        }
        if !alpha.iter().any(|a| *a > 0.0) {
            return Err(Error::config("alpha", "at least one weight must be > 0"));
        }
        Ok(ScoreParams { gamma, alpha })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        ScoreParams::new(cfg.gamma, cfg.alpha)
    }

    pub fn greedy(self) -> Self {
        ScoreParams { gamma: 0.0, ..self }
    }

    fn exploit(&self, estimates: &TaskValues) -> f64 {
        self.alpha.iter().zip(estimates).map(|(a, r)| a * r).sum()
    }
}

/// Ranking score of one arm. Returns `f64::INFINITY` for an untried arm when
/// `gamma > 0`; the bonus is zero while `n_total <= 1`.
pub fn ucb_score(estimates: &TaskValues, n_total: u64, n_topic: u64, params: &ScoreParams) -> Result<f64> {
    if n_topic > n_total {
        return Err(Error::Contract(format!("topic count {n_topic} exceeds total count {n_total}")));
    }
    let exploit = params.exploit(estimates);
    if params.gamma == 0.0 {
        return Ok(exploit);
    }
    if n_topic == 0 {
        return Ok(f64::INFINITY);
    }
    let log_total = (n_total as f64).ln().max(0.0);
    Ok(exploit + params.gamma * (log_total / n_topic as f64).sqrt())
}

/// Lifetime impression counts of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserCounts {
    total: u64,
    per_topic: Vec<u32>,
}

impl UserCounts {
    pub fn new(topics: usize) -> Self {
        UserCounts { total: 0, per_topic: vec![0; topics] }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn topic(&self, topic: TopicId) -> u32 {
        self.per_topic[topic.index()]
    }

    pub fn per_topic(&self) -> &[u32] {
        &self.per_topic
    }

    pub fn record(&mut self, topic: TopicId) {
        self.per_topic[topic.index()] += 1;
        self.total += 1;
    }
}

/// `N` and `N_a` for every user. Counts are never reset between phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountStore {
    users: Vec<UserCounts>,
}

impl CountStore {
    pub fn new(users: usize, topics: usize) -> Self {
        CountStore { users: vec![UserCounts::new(topics); users] }
    }

    pub fn user(&self, user: UserId) -> &UserCounts {
        &self.users[user.index()]
    }

    pub fn user_mut(&mut self, user: UserId) -> &mut UserCounts {
        &mut self.users[user.index()]
    }

    pub fn users_mut(&mut self) -> &mut [UserCounts] {
        &mut self.users
    }

    pub fn total(&self, user: UserId) -> u64 {
        self.users[user.index()].total
    }

    pub fn topic(&self, user: UserId, topic: TopicId) -> u32 {
        self.users[user.index()].topic(topic)
    }
}

pub fn record_selection(counts: &mut CountStore, user: UserId, topic: TopicId) {
    counts.user_mut(user).record(topic);
}

/// Argmax of [`ucb_score`] over `candidates`. Ties go to the arm with fewer
/// impressions, then to the lower topic id.
pub fn select_action(
    user: UserId,
    candidates: &[TopicId],
    model: &RewardModel,
    counts: &UserCounts,
    params: &ScoreParams,
) -> Result<(TopicId, f64)> {
    let mut best: Option<(TopicId, f64, u32)> = None;
    for &topic in candidates {
        let n_topic = counts.topic(topic);
        let score = ucb_score(&model.predict_all(user, topic), counts.total(), n_topic as u64, params)?;
        let better = match best {
            None => true,
            Some((b_topic, b_score, b_n)) => {
                score > b_score || (score == b_score && (n_topic < b_n || (n_topic == b_n && topic < b_topic)))
            }
        };
        if better {
            best = Some((topic, score, n_topic));
        }
    }
    best.map(|(t, s, _)| (t, s)).ok_or(Error::NoCandidates)
}

/// Pure exploitation: argmax of the weighted reward estimate, ties to the
/// lower topic id. `params.gamma` is ignored.
pub fn greedy_select(user: UserId, candidates: &[TopicId], model: &RewardModel, params: &ScoreParams) -> Result<(TopicId, f64)> {
    let params = params.greedy();
    let mut best: Option<(TopicId, f64)> = None;
    for &topic in candidates {
        let score = params.exploit(&model.predict_all(user, topic));
        if best.is_none_or(|(b_topic, b_score)| score > b_score || (score == b_score && topic < b_topic)) {
            best = Some((topic, score));
        }
    }
    best.ok_or(Error::NoCandidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DataSlice, RewardModel};
    use crate::types::{Group, ImpressionRecord, OutcomeFlags, Outcomes, Phase};
    use proptest::prelude::*;

    fn play_only(gamma: f64) -> ScoreParams {
        ScoreParams { gamma, alpha: [1.0, 0.0, 0.0, 0.0] }
    }

    fn rec(user: u32, topic: u32, play: bool) -> ImpressionRecord {
        ImpressionRecord {
            day: 0,
            user: UserId(user),
            topic: TopicId(topic),
            group: Group::Control,
            phase: Phase::One,
            outcomes: Outcomes::new(OutcomeFlags { play, ..Default::default() }).unwrap(),
            score: 0.0,
        }
    }

    /// Model whose user-0 play estimates differ by topic.
    fn model_with_estimates(plays_per_topic: &[(u32, u32)]) -> RewardModel {
        let mut records = Vec::new();
        for (t, &(plays, n)) in plays_per_topic.iter().enumerate() {
            for i in 0..n {
                records.push(rec(0, t as u32, i < plays));
            }
        }
        RewardModel::fit(&records, &DataSlice::all(0..1), plays_per_topic.len() as u32, 1.0)
    }

    #[test]
    fn exploitation_only() {
        let s = ucb_score(&[0.8, 0.0, 0.0, 0.0], 100, 10, &play_only(0.0)).unwrap();
        assert_eq!(s, 0.8);
    }

    #[test]
    fn bonus_arithmetic() {
        let s = ucb_score(&[0.8, 0.0, 0.0, 0.0], 100, 10, &play_only(1.0)).unwrap();
        // 0.8 + sqrt(ln(100) / 10)
        assert!((s - 1.478_614).abs() < 1e-6, "{s}");
        assert_eq!(s, 0.8 + (100f64.ln() / 10.0).sqrt());
    }

    #[test]
    fn untried_arm_is_infinite() {
        assert_eq!(ucb_score(&[0.1; 4], 5, 0, &play_only(1.0)).unwrap(), f64::INFINITY);
        assert_eq!(ucb_score(&[0.1; 4], 0, 0, &play_only(1.0)).unwrap(), f64::INFINITY);
        assert_eq!(ucb_score(&[0.1; 4], 0, 0, &play_only(0.0)).unwrap(), 0.1);
    }

    #[test]
    fn cold_start_bonus_is_zero() {
        assert_eq!(ucb_score(&[0.3, 0.0, 0.0, 0.0], 1, 1, &play_only(2.0)).unwrap(), 0.3);
    }

    #[test]
    fn inconsistent_counts_rejected() {
        assert!(matches!(ucb_score(&[0.0; 4], 3, 4, &play_only(1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn params_need_positive_alpha() {
        let zero = TaskWeights { play: 0.0, comment: 0.0, share: 0.0, like: 0.0 };
        assert!(ScoreParams::new(1.0, zero).is_err());
        assert!(ScoreParams::new(-1.0, TaskWeights::default()).is_err());
    }

    #[test]
    fn ties_go_to_lowest_topic() {
        let model = RewardModel::prior(5, 25.0);
        let mut counts = UserCounts::new(5);
        for t in 0..5 {
            counts.record(TopicId(t));
        }
        let cands: Vec<TopicId> = (0..5).map(TopicId).collect();
        let (t, _) = select_action(UserId(0), &cands, &model, &counts, &play_only(1.0)).unwrap();
        assert_eq!(t, TopicId(0));
        let (t, _) = select_action(UserId(0), &cands[2..], &model, &counts, &play_only(1.0)).unwrap();
        assert_eq!(t, TopicId(2));
    }

    #[test]
    fn ties_prefer_fewer_impressions() {
        // Equal scores with gamma = 0 but unequal counts.
        let model = RewardModel::prior(3, 25.0);
        let mut counts = UserCounts::new(3);
        counts.record(TopicId(0));
        counts.record(TopicId(0));
        counts.record(TopicId(1));
        counts.record(TopicId(2));
        let cands: Vec<TopicId> = (0..3).map(TopicId).collect();
        let (t, _) = select_action(UserId(0), &cands, &model, &counts, &play_only(0.0)).unwrap();
        assert_eq!(t, TopicId(1));
    }

    #[test]
    fn untried_arm_dominates() {
        let model = model_with_estimates(&[(10, 10), (0, 10), (0, 0)]);
        let mut counts = UserCounts::new(3);
        for _ in 0..10 {
            counts.record(TopicId(0));
            counts.record(TopicId(1));
        }
        let cands: Vec<TopicId> = (0..3).map(TopicId).collect();
        let (t, s) = select_action(UserId(0), &cands, &model, &counts, &play_only(0.5)).unwrap();
        assert_eq!((t, s), (TopicId(2), f64::INFINITY));
    }

    #[test]
    fn two_untried_arms_lower_id_wins() {
        let model = model_with_estimates(&[(0, 0), (0, 0), (5, 5)]);
        let counts = UserCounts::new(3);
        let cands = [TopicId(2), TopicId(1), TopicId(0)];
        let (t, _) = select_action(UserId(0), &cands, &model, &counts, &play_only(1.0)).unwrap();
        assert_eq!(t, TopicId(0));
    }

    #[test]
    fn empty_candidates() {
        let model = RewardModel::prior(3, 25.0);
        let counts = UserCounts::new(3);
        assert!(matches!(select_action(UserId(0), &[], &model, &counts, &play_only(1.0)), Err(Error::NoCandidates)));
        assert!(matches!(greedy_select(UserId(0), &[], &model, &play_only(1.0)), Err(Error::NoCandidates)));
    }

    #[test]
    fn greedy_ignores_gamma() {
        let model = model_with_estimates(&[(1, 10), (9, 10), (5, 10)]);
        let cands: Vec<TopicId> = (0..3).map(TopicId).collect();
        let a = greedy_select(UserId(0), &cands, &model, &play_only(0.0)).unwrap();
        let b = greedy_select(UserId(0), &cands, &model, &play_only(5.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0, TopicId(1));
    }

    #[test]
    fn greedy_ties_lowest_id() {
        let model = RewardModel::prior(4, 25.0);
        let cands = [TopicId(3), TopicId(1), TopicId(2)];
        assert_eq!(greedy_select(UserId(0), &cands, &model, &play_only(1.0)).unwrap().0, TopicId(1));
    }

    #[test]
    fn counter_bookkeeping() {
        let mut store = CountStore::new(2, 4);
        record_selection(&mut store, UserId(1), TopicId(2));
        assert_eq!((store.total(UserId(1)), store.topic(UserId(1), TopicId(2))), (1, 1));
        for _ in 0..6 {
            record_selection(&mut store, UserId(0), TopicId(3));
        }
        assert_eq!(store.topic(UserId(0), TopicId(3)), 6);
        for t in [0, 1, 0, 2] {
            record_selection(&mut store, UserId(0), TopicId(t));
        }
        let u = store.user(UserId(0));
        assert_eq!(u.total(), u.per_topic().iter().map(|&c| c as u64).sum::<u64>());
        assert_eq!(store.total(UserId(1)), 1);
    }

    #[test]
    fn every_arm_tried_before_any_repeat_beyond_k() {
        // Candidate sets always contain every topic.
        let k = 7;
        let model = model_with_estimates(&[(9, 10), (1, 10), (5, 10), (0, 10), (2, 10), (8, 10), (3, 10)]);
        let cands: Vec<TopicId> = (0..k).map(TopicId).collect();
        let mut counts = UserCounts::new(k as usize);
        for step in 0..200 {
            let (t, _) = select_action(UserId(0), &cands, &model, &counts, &play_only(0.3)).unwrap();
            counts.record(t);
            if counts.per_topic().contains(&0) {
                assert!(counts.per_topic().iter().all(|&c| c <= k), "step {step}");
            }
        }
        assert!(counts.per_topic().iter().all(|&c| c > 0));
    }

    proptest! {
        #[test]
        fn scaling_preserves_greedy_argmax(ests in prop::collection::vec(0.0f64..1.0, 1..12), c in 0.01f64..100.0) {
            let params = play_only(0.0);
            let counts = UserCounts::new(ests.len());
            let pick = |scale: f64| {
                let mut best = (0usize, f64::NEG_INFINITY);
                for (i, e) in ests.iter().enumerate() {
                    let s = ucb_score(&[e * scale, 0.0, 0.0, 0.0], counts.total(), 0, &params).unwrap();
                    if s > best.1 { best = (i, s); }
                }
                best.0
            };
            prop_assert_eq!(pick(1.0), pick(c));
        }

        #[test]
        fn bonus_decreases_in_topic_count(r in 0.0f64..1.0, n_total in 2u64..1_000_000, frac in 0.0f64..1.0, gamma in 0.01f64..10.0) {
            let n_topic = 1 + ((n_total - 2) as f64 * frac) as u64;
            let params = play_only(gamma);
            let lo = ucb_score(&[r, 0.0, 0.0, 0.0], n_total, n_topic, &params).unwrap();
            let hi = ucb_score(&[r, 0.0, 0.0, 0.0], n_total, n_topic + 1, &params).unwrap();
            prop_assert!(hi < lo);
        }
    }
}
