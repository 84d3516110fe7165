//! Identifiers and the impression record shared by every stage of a run.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a topic arm in `[0, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TopicId(pub u32);

impl TopicId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TopicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of a user in `[0, U)`, stable for the whole experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl UserId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The engagement tasks the reward model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Play,
    Comment,
    Share,
    Like,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Play, TaskKind::Comment, TaskKind::Share, TaskKind::Like];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Play => "play",
            TaskKind::Comment => "comment",
            TaskKind::Share => "share",
            TaskKind::Like => "like",
        }
    }
}

/// One real value per [`TaskKind`], indexed by `TaskKind::index`.
pub type TaskValues = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Production,
    Control,
    Test,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Production, Group::Control, Group::Test];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Production => "production",
            Group::Control => "control",
            Group::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        match s {
            "production" => Some(Group::Production),
            "control" => Some(Group::Control),
            "test" => Some(Group::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Experiment phase. Phase I shares one reward model across all groups;
/// Phase II trains one model per group on that group's data only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }

    pub fn from_number(n: u64) -> Option<Phase> {
        match n {
            1 => Some(Phase::One),
            2 => Some(Phase::Two),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Raw outcome flags, unchecked. Convert with [`Outcomes::new`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutcomeFlags {
    pub play: bool,
    pub loop_: bool,
    pub skip: bool,
    pub comment: bool,
    pub share: bool,
    pub like: bool,
    pub completed: bool,
}

/// Task outcomes of one impression.
///
/// Construction enforces `loop => play`, `completed => play` and
/// `skip => !completed`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Outcomes {
    play: bool,
    loop_: bool,
    skip: bool,
    comment: bool,
    share: bool,
    like: bool,
    completed: bool,
}

impl Outcomes {
    pub fn new(f: OutcomeFlags) -> Result<Self> {
        if f.loop_ && !f.play {
            return Err(Error::Outcomes("loop without play"));
        }
        if f.completed && !f.play {
            return Err(Error::Outcomes("completed without play"));
        }
        if f.skip && f.completed {
            return Err(Error::Outcomes("skip on a completed play"));
        }
        Ok(Outcomes {
            play: f.play,
            loop_: f.loop_,
            skip: f.skip,
            comment: f.comment,
            share: f.share,
            like: f.like,
            completed: f.completed,
        })
    }

    pub fn flags(&self) -> OutcomeFlags {
        OutcomeFlags {
            play: self.play,
            loop_: self.loop_,
            skip: self.skip,
            comment: self.comment,
            share: self.share,
            like: self.like,
            completed: self.completed,
        }
    }

    pub fn play(&self) -> bool {
        self.play
    }
    pub fn is_loop(&self) -> bool {
        self.loop_
    }
    pub fn skip(&self) -> bool {
        self.skip
    }
    pub fn comment(&self) -> bool {
        self.comment
    }
    pub fn share(&self) -> bool {
        self.share
    }
    pub fn like(&self) -> bool {
        self.like
    }
    pub fn completed(&self) -> bool {
        self.completed
    }

    /// The reward flag for a fitted task.
    pub fn task(&self, task: TaskKind) -> bool {
        match task {
            TaskKind::Play => self.play,
            TaskKind::Comment => self.comment,
            TaskKind::Share => self.share,
            TaskKind::Like => self.like,
        }
    }
}

/// One recommendation event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpressionRecord {
    pub day: u32,
    pub user: UserId,
    pub topic: TopicId,
    pub group: Group,
    pub phase: Phase,
    pub outcomes: Outcomes,
    /// Ranking score used at selection time; `+inf` marks a forced first trial.
    pub score: f64,
}
