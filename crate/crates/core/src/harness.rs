//! Two-phase A/B experiment driver.
//!
//! Phase I: every group is served by one reward model trained on all groups'
//! data; only the test group adds the exploration bonus. Test-group
//! exploration therefore also improves the model the control group sees.
//!
//! Phase II: each group gets its own model trained on its own data only, so
//! nothing learned by one group reaches another.
//!
//! Models are refit every `retrain_every_days` (and at the phase switch) on
//! all records from day 0 through the previous day. Day 0 uses the
//! cold-start prior.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::env::{available_actions, generate_population, sample_outcomes, Population, UserProfile};
use crate::error::{Error, Result};
use crate::io::fmt_sig9;
use crate::metrics::{compute_metrics, Metric, MetricsOptions, MetricsReport, MetricsTable};
use crate::model::{DataSlice, RewardModel, TrainingStats};
use crate::policy::{greedy_select, select_action, CountStore, ScoreParams, UserCounts};
use crate::rng::{stream, Purpose};
use crate::types::{Group, ImpressionRecord, Phase, UserId};

/// Fixed partition of users into groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    groups: Vec<Group>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl GroupAssignment {
    /// Shuffles users with `seed` and cuts the order into production,
    /// control and test blocks. Control and test get exactly the same size.
    pub fn assign(users: u32, fractions: [f64; 3], seed: u64) -> Result<Self> {
        let (control, test) = (fractions[Group::Control.index()], fractions[Group::Test.index()]);
        if (control - test).abs() > 1e-12 {
            return Err(Error::UnequalGroups { control, test });
        }
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("group_fractions", format!("must be non-negative and sum to 1 (got {sum})")));
        }
        let arm = ((users as f64 * control).round() as u32).min(users / 2);
        let mut order: Vec<u32> = (0..users).collect();
        order.shuffle(&mut stream(seed, Purpose::Assignment, 0, 0, 0));
        let mut groups = vec![Group::Production; users as usize];
        for (i, &u) in order.iter().enumerate() {
            let i = i as u32;
            if i < arm {
                groups[u as usize] = Group::Control;
            } else if i < 2 * arm {
                groups[u as usize] = Group::Test;
            }
        }
        Ok(GroupAssignment { groups, fractions, seed })
    }

    pub fn group(&self, user: UserId) -> Group {
        self.groups[user.index()]
    }

    pub fn users(&self) -> usize {
        self.groups.len()
    }

    pub fn sizes(&self) -> [u64; 3] {
        let mut sizes = [0u64; 3];
        self.groups.iter().for_each(|g| sizes[g.index()] += 1);
        sizes
    }

    pub fn members(&self, group: Group) -> impl Iterator<Item = UserId> + '_ {
        self.groups.iter().enumerate().filter(move |(_, g)| **g == group).map(|(u, _)| UserId(u as u32))
    }
}

/// Which slice each group's model is trained on.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSlices {
    /// Phase I: one model on every group's data.
    Shared(DataSlice),
    /// Phase II: dedicated control and test models. Production keeps the
    /// last shared model.
    PerGroup { control: DataSlice, test: DataSlice },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhasePlan {
    pub phase1_days: u32,
    pub phase2_days: u32,
}

impl PhasePlan {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        PhasePlan { phase1_days: cfg.phase1_days, phase2_days: cfg.phase2_days }
    }

    pub fn total_days(&self) -> u32 {
        self.phase1_days + self.phase2_days
    }

    pub fn phase(&self, day: u32) -> Phase {
        if day < self.phase1_days {
            Phase::One
        } else {
            Phase::Two
        }
    }

    /// Training slices for the models that serve `day` (cumulative window
    /// `0..day`).
    pub fn slices(&self, day: u32) -> ModelSlices {
        match self.phase(day) {
            Phase::One => ModelSlices::Shared(DataSlice::all(0..day)),
            Phase::Two => ModelSlices::PerGroup {
                control: DataSlice::group(Group::Control, 0..day),
                test: DataSlice::group(Group::Test, 0..day),
            },
        }
    }

    /// Whether models are refit at the start of `day`.
    pub fn refits_on(&self, day: u32, retrain_every_days: u32) -> bool {
        day > 0 && (day.is_multiple_of(retrain_every_days) || day == self.phase1_days)
    }
}

/// Mutable state of a running simulation.
pub struct SimState {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub plan: PhasePlan,
    pub population: Population,
    pub assignment: GroupAssignment,
    pub params: ScoreParams,
    pub counts: CountStore,
    /// Model serving each group, indexed by `Group::index`.
    pub models: [Arc<RewardModel>; 3],
    /// Cumulative training statistics per group.
    stats: [TrainingStats; 3],
    fits: u32,
}

impl SimState {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let population = generate_population(cfg, seed);
        let assignment = GroupAssignment::assign(cfg.users, cfg.group_fractions, seed)?;
        let prior = Arc::new(RewardModel::prior(cfg.topics, cfg.shrinkage_lambda));
        Ok(SimState {
            cfg: cfg.clone(),
            seed,
            plan: PhasePlan::from_config(cfg),
            population,
            assignment,
            params: ScoreParams::from_config(cfg)?,
            counts: CountStore::new(cfg.users as usize, cfg.topics as usize),
            models: [prior.clone(), prior.clone(), prior],
            stats: std::array::from_fn(|_| TrainingStats::new(cfg.topics)),
            fits: 0,
        })
    }

    /// Refits the serving models for `day` if the schedule says so.
    pub fn prepare_models(&mut self, day: u32) {
        if !self.plan.refits_on(day, self.cfg.retrain_every_days) {
            return;
        }
        let lambda = self.cfg.shrinkage_lambda;
        match self.plan.slices(day) {
            ModelSlices::Shared(slice) => {
                let mut all = TrainingStats::new(self.cfg.topics);
                self.stats.iter().for_each(|s| all.merge(s));
                self.fits += 1;
                let model = Arc::new(RewardModel::from_stats(&all, slice, lambda).with_version(self.fits));
                self.models = [model.clone(), model.clone(), model];
            }
            ModelSlices::PerGroup { control, test } => {
                for (g, slice) in [(Group::Control, control), (Group::Test, test)] {
                    self.fits += 1;
                    let model = RewardModel::from_stats(&self.stats[g.index()], slice, lambda).with_version(self.fits);
                    self.models[g.index()] = Arc::new(model);
                }
            }
        }
    }

    /// Simulates one day for every user and returns the day's records in
    /// user order. Models must already be prepared for `day`.
    pub fn run_day(&mut self, day: u32) -> Result<Vec<ImpressionRecord>> {
        let phase = self.plan.phase(day);
        let ctx = DayContext {
            cfg: &self.cfg,
            seed: self.seed,
            day,
            phase,
            params: &self.params,
            models: &self.models,
            assignment: &self.assignment,
        };
        let per_user: Vec<Vec<ImpressionRecord>> = self
            .counts
            .users_mut()
            .par_iter_mut()
            .zip(self.population.profiles.par_iter())
            .map(|(counts, profile)| ctx.simulate_user(profile, counts))
            .collect::<Result<_>>()?;
        let records: Vec<ImpressionRecord> = per_user.into_iter().flatten().collect();
        for rec in &records {
            self.stats[rec.group.index()].add(rec);
        }
        Ok(records)
    }
}

struct DayContext<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    day: u32,
    phase: Phase,
    params: &'a ScoreParams,
    models: &'a [Arc<RewardModel>; 3],
    assignment: &'a GroupAssignment,
}

impl DayContext<'_> {
    fn simulate_user(&self, profile: &UserProfile, counts: &mut UserCounts) -> Result<Vec<ImpressionRecord>> {
        let user = profile.user;
        let active = stream(self.seed, Purpose::Activity, user.0, self.day, 0).random::<f64>() < profile.activity_rate;
        if !active {
            return Ok(Vec::new());
        }
        let group = self.assignment.group(user);
        let model = &self.models[group.index()];
        let mut out = Vec::with_capacity(self.cfg.slots_per_active_day as usize);
        for slot in 0..self.cfg.slots_per_active_day {
            let mut avail_rng = stream(self.seed, Purpose::Availability, user.0, self.day, slot);
            let candidates = available_actions(self.cfg.topics, self.cfg.availability_fraction, &mut avail_rng);
            let (topic, score) = match group {
                Group::Test => select_action(user, &candidates, model, counts, self.params)?,
                Group::Control | Group::Production => greedy_select(user, &candidates, model, self.params)?,
            };
            let mut outcome_rng = stream(self.seed, Purpose::Outcomes, user.0, self.day, slot);
            let outcomes = sample_outcomes(profile, topic, counts.topic(topic), &mut outcome_rng);
            counts.record(topic);
            out.push(ImpressionRecord { day: self.day, user, topic, group, phase: self.phase, outcomes, score });
        }
        Ok(out)
    }
}

/// Output of [`simulate`]: the log and what produced it.
pub struct Simulation {
    pub log: Vec<ImpressionRecord>,
    pub population: Population,
    pub assignment: GroupAssignment,
    pub counts: CountStore,
}

/// Runs the impression loop over both phases.
pub fn simulate(cfg: &ExperimentConfig, seed: u64) -> Result<Simulation> {
    let mut state = SimState::new(cfg, seed)?;
    let mut log = Vec::new();
    for day in 0..state.plan.total_days() {
        state.prepare_models(day);
        log.extend(state.run_day(day)?);
    }
    Ok(Simulation { log, population: state.population, assignment: state.assignment, counts: state.counts })
}

/// Per-day `test / control - 1` of one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectSeries {
    pub metric: Metric,
    /// `None` where either side is missing or control is zero.
    pub values: Vec<Option<f64>>,
}

pub fn compute_effect(test: &[Option<f64>], control: &[Option<f64>]) -> Vec<Option<f64>> {
    assert_eq!(test.len(), control.len(), "series must be aligned by day");
    test.iter()
        .zip(control)
        .map(|(t, c)| match (t, c) {
            (Some(t), Some(c)) if *c != 0.0 => Some(t / c - 1.0),
            _ => None,
        })
        .collect()
}

pub fn effects_from_table(table: &MetricsTable) -> Vec<EffectSeries> {
    Metric::EFFECTS
        .iter()
        .map(|&metric| EffectSeries {
            metric,
            values: compute_effect(&table.series(Group::Test, metric), &table.series(Group::Control, metric)),
        })
        .collect()
}

/// Writes `day,phase,metric,value`; absent effects leave `value` empty.
pub fn write_effects_csv<W: Write>(effects: &[EffectSeries], plan: &PhasePlan, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["day", "phase", "metric", "value"])?;
    let days = effects.first().map_or(0, |e| e.values.len());
    for day in 0..days {
        for e in effects {
            let value = e.values[day].map(fmt_sig9).unwrap_or_default();
            w.write_record([&day.to_string(), &plan.phase(day as u32).to_string(), e.metric.name(), &value])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A finished experiment: log, group time series and effects.
pub struct ExperimentRun {
    pub seed: u64,
    pub plan: PhasePlan,
    pub log: Vec<ImpressionRecord>,
    pub population: Population,
    pub assignment: GroupAssignment,
    pub report: MetricsReport,
    pub effects: Vec<EffectSeries>,
}

impl ExperimentRun {
    pub fn effect(&self, metric: Metric) -> Option<&EffectSeries> {
        self.effects.iter().find(|e| e.metric == metric)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentRun> {
    run_experiment_with(cfg, seed, MetricsOptions::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, seed: u64, opts: MetricsOptions) -> Result<ExperimentRun> {
    let sim = simulate(cfg, seed)?;
    let report = compute_metrics(&sim.log, cfg, seed, sim.assignment.sizes(), opts)?;
    let effects = effects_from_table(&report.table);
    Ok(ExperimentRun {
        seed,
        plan: PhasePlan::from_config(cfg),
        log: sim.log,
        population: sim.population,
        assignment: sim.assignment,
        report,
        effects,
    })
}
