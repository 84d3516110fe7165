//! Synthetic user population and the per-impression outcome sampler.
//!
//! Ground truth here is a simulator choice: each user has a few "true
//! interest" topics with high play affinity and a long tail of low-affinity
//! topics. Interests are drawn from a Zipf popularity profile over topics,
//! and daily activity is log-normal across users.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, Poisson};
use serde::Serialize;

use crate::config::{EnvironmentConfig, ExperimentConfig};
use crate::error::Result;
use crate::rng::{stream, Purpose};
use crate::types::{OutcomeFlags, Outcomes, TaskKind, TaskValues, TopicId, UserId};

/// Play-quality shape shared by all users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Engagement {
    /// P(loop | play) = loop_scale * play affinity.
    pub loop_scale: f64,
    /// P(skip | play, not completed).
    pub skip_given_incomplete: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserProfile {
    pub user: UserId,
    /// `affinity[topic][task]`: probability of a positive outcome.
    pub affinity: Vec<TaskValues>,
    /// `completion[topic]`: P(completed | play).
    pub completion: Vec<f64>,
    /// Probability of being active on a given day.
    pub activity_rate: f64,
    pub novelty_lift: f64,
    /// The true-interest topics, ascending.
    pub hot_topics: Vec<TopicId>,
    pub engagement: Engagement,
}

impl UserProfile {
    /// Topic with the highest play affinity (lowest id on ties).
    pub fn best_topic(&self) -> TopicId {
        let mut best = 0;
        for (t, a) in self.affinity.iter().enumerate() {
            if a[TaskKind::Play.index()] > self.affinity[best][TaskKind::Play.index()] {
                best = t;
            }
        }
        TopicId(best as u32)
    }

    /// Play probability for an impression, including the first-exposure lift.
    pub fn play_probability(&self, topic: TopicId, prior_exposures: u32) -> f64 {
        let base = self.affinity[topic.index()][TaskKind::Play.index()];
        let lift = if prior_exposures == 0 { 1.0 + self.novelty_lift } else { 1.0 };
        (base * lift).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub profiles: Vec<UserProfile>,
    pub seed: u64,
    /// Relative popularity of each topic (sums to 1).
    pub popularity: Vec<f64>,
}

impl Population {
    pub fn profile(&self, user: UserId) -> &UserProfile {
        &self.profiles[user.index()]
    }

    /// One JSON object per user.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            user: u32,
            activity_rate: f64,
            novelty_lift: f64,
            hot_topics: Vec<u32>,
            play_affinity: Vec<f64>,
            #[serde(skip_serializing_if = "Option::is_none")]
            popularity: Option<&'a [f64]>,
        }
        for (i, p) in self.profiles.iter().enumerate() {
            let row = Row {
                user: p.user.0,
                activity_rate: p.activity_rate,
                novelty_lift: p.novelty_lift,
                hot_topics: p.hot_topics.iter().map(|t| t.0).collect(),
                play_affinity: p.affinity.iter().map(|a| a[TaskKind::Play.index()]).collect(),
                popularity: (i == 0).then_some(self.popularity.as_slice()),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn topic_popularity(k: usize, env: &EnvironmentConfig, seed: u64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut stream(seed, Purpose::Popularity, 0, 0, 0));
    let mut weights = vec![0.0; k];
    for (rank, &topic) in order.iter().enumerate() {
        weights[topic] = 1.0 / ((rank + 1) as f64).powf(env.popularity_skew);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

/// Builds `cfg.users` profiles; identical `(cfg, seed)` give identical output.
pub fn generate_population(cfg: &ExperimentConfig, seed: u64) -> Population {
    let env = &cfg.environment;
    let k = cfg.topics as usize;
    let popularity = topic_popularity(k, env, seed);
    let hot = Beta::new(env.hot_play_shape[0], env.hot_play_shape[1]).expect("validated shape");
    let cold = Beta::new(env.cold_play_shape[0], env.cold_play_shape[1]).expect("validated shape");
    let extra_hot = (env.hot_topics_mean - 1.0 > 0.0).then(|| Poisson::new(env.hot_topics_mean - 1.0).expect("validated mean"));
    let completion = (!env.completion_follows_play)
        .then(|| Beta::new(env.completion_shape[0], env.completion_shape[1]).expect("validated shape"));
    let activity = LogNormal::new(env.activity_log_mean, env.activity_log_sd).expect("validated activity");
    let engagement = Engagement { loop_scale: env.loop_scale, skip_given_incomplete: env.skip_given_incomplete };

    let profiles = (0..cfg.users)
        .map(|u| {
            let mut rng = stream(seed, Purpose::Population, u, 0, 0);
            let n_hot = 1 + extra_hot.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            let n_hot = n_hot.min(k);
            let mut hot_topics: Vec<TopicId> = index::sample_weighted(&mut rng, k, |t| popularity[t], n_hot)
                .expect("positive weights")
                .into_iter()
                .map(|t| TopicId(t as u32))
                .collect();
            hot_topics.sort_unstable();

            let affinity: Vec<TaskValues> = (0..k)
                .map(|t| {
                    let is_hot = hot_topics.binary_search(&TopicId(t as u32)).is_ok();
                    let play: f64 = if is_hot { hot.sample(&mut rng) } else { cold.sample(&mut rng) };
                    [play, play * env.comment_scale, play * env.share_scale, play * env.like_scale]
                })
                .collect();

            let activity_rate = activity.sample(&mut rng).clamp(1e-3, 1.0);
            let completion = match &completion {
                Some(dist) => (0..k).map(|_| dist.sample(&mut rng)).collect(),
                None => affinity.iter().map(|a| a[TaskKind::Play.index()]).collect(),
            };
            UserProfile {
                user: UserId(u),
                affinity,
                completion,
                activity_rate,
                novelty_lift: env.novelty_lift,
                hot_topics,
                engagement,
            }
        })
        .collect();

    Population { profiles, seed, popularity }
}

/// Number of topics offered per slot: `ceil(fraction * K)`, at least one.
pub fn available_count(topics: u32, availability_fraction: f64) -> usize {
    ((availability_fraction * topics as f64).ceil() as usize).clamp(1, topics as usize)
}

/// Uniform random subset of the topics that can be served in one slot,
/// returned in ascending order.
pub fn available_actions<R: Rng + ?Sized>(topics: u32, availability_fraction: f64, rng: &mut R) -> Vec<TopicId> {
    let n = available_count(topics, availability_fraction);
    let mut picked: Vec<TopicId> = if n == topics as usize {
        (0..topics).map(TopicId).collect()
    } else {
        index::sample(rng, topics as usize, n).into_iter().map(|t| TopicId(t as u32)).collect()
    };
    picked.sort_unstable();
    picked
}

/// Draws the task outcomes of one impression.
///
/// Always consumes exactly seven uniforms, so a stream yields the same draws
/// whichever topic was chosen.
pub fn sample_outcomes<R: Rng + ?Sized>(profile: &UserProfile, topic: TopicId, prior_exposures: u32, rng: &mut R) -> Outcomes {
    let u: [f64; 7] = std::array::from_fn(|_| rng.random::<f64>());
    let aff = &profile.affinity[topic.index()];
    let base_play = aff[TaskKind::Play.index()];

    let play = u[0] < profile.play_probability(topic, prior_exposures);
    let comment = u[1] < aff[TaskKind::Comment.index()];
    let share = u[2] < aff[TaskKind::Share.index()];
    let like = u[3] < aff[TaskKind::Like.index()];
    let completed = play && u[4] < profile.completion[topic.index()];
    let loop_ = play && u[5] < profile.engagement.loop_scale * base_play;
    let skip = play && !completed && u[6] < profile.engagement.skip_given_incomplete;

    Outcomes::new(OutcomeFlags { play, loop_, skip, comment, share, like, completed }).expect("sampler respects implications")
}
