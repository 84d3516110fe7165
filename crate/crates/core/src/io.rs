//! Line-delimited impression log and number formatting for the CSV outputs.
//!
//! Each log line is one JSON object:
//!
//! ```text
//! {"day":0,"user":17,"topic":4,"group":"test","phase":1,"outcomes":{"play":true,"loop":false,"skip":false,"comment":false,"share":false,"like":true,"completed":true},"score":"inf"}
//! ```
//!
//! `score` is a JSON number, or the string `"inf"` for a forced first trial.

use std::io::{BufRead, Write};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::types::{Group, ImpressionRecord, OutcomeFlags, Outcomes, Phase, TopicId, UserId};

/// Upper bounds that decoded ids are checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogBounds {
    pub topics: u32,
    pub users: u32,
}

const OUTCOME_KEYS: [&str; 7] = ["play", "loop", "skip", "comment", "share", "like", "completed"];

pub fn encode_impression(rec: &ImpressionRecord) -> String {
    let o = rec.outcomes.flags();
    let flags = [o.play, o.loop_, o.skip, o.comment, o.share, o.like, o.completed];
    let mut outcomes = Map::new();
    for (key, flag) in OUTCOME_KEYS.iter().zip(flags) {
        outcomes.insert((*key).to_owned(), Value::Bool(flag));
    }
    let score = if rec.score.is_finite() {
        Value::from(rec.score)
    } else if rec.score == f64::INFINITY {
        Value::from("inf")
    } else if rec.score == f64::NEG_INFINITY {
        Value::from("-inf")
    } else {
        Value::from("nan")
    };
    // serde_json keeps insertion order only with preserve_order; build the
    // line by hand to pin the field order.
    format!(
        "{{\"day\":{},\"user\":{},\"topic\":{},\"group\":\"{}\",\"phase\":{},\"outcomes\":{},\"score\":{}}}",
        rec.day,
        rec.user,
        rec.topic,
        rec.group.name(),
        rec.phase.number(),
        outcomes_json(&flags),
        score
    )
}

fn outcomes_json(flags: &[bool; 7]) -> String {
    let mut s = String::from("{");
    for (i, (key, flag)) in OUTCOME_KEYS.iter().zip(flags).enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("\"{key}\":{flag}"));
    }
    s.push('}');
    s
}

fn field<'a>(obj: &'a Map<String, Value>, name: &'static str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::parse(name, "missing"))
}

fn uint(obj: &Map<String, Value>, name: &'static str) -> Result<u64> {
    field(obj, name)?.as_u64().ok_or_else(|| Error::parse(name, "expected a non-negative integer"))
}

fn u32_field(obj: &Map<String, Value>, name: &'static str) -> Result<u32> {
    u32::try_from(uint(obj, name)?).map_err(|_| Error::parse(name, "out of range"))
}

fn flag(obj: &Map<String, Value>, name: &'static str) -> Result<bool> {
    field(obj, name)?.as_bool().ok_or_else(|| Error::parse(name, "expected true or false"))
}

/// Parses one log line and checks ids against `bounds`.
pub fn decode_impression(line: &str, bounds: LogBounds) -> Result<ImpressionRecord> {
    let value: Value = serde_json::from_str(line.trim()).map_err(|e| Error::parse("line", e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| Error::parse("line", "expected a JSON object"))?;

    let day = u32_field(obj, "day")?;
    let user = u32_field(obj, "user")?;
    if user >= bounds.users {
        return Err(Error::parse("user", format!("index {user} >= user count {}", bounds.users)));
    }
    let topic = u32_field(obj, "topic")?;
    if topic >= bounds.topics {
        return Err(Error::parse("topic", format!("index {topic} >= topic count {}", bounds.topics)));
    }
    let group = field(obj, "group")?
        .as_str()
        .and_then(Group::from_name)
        .ok_or_else(|| Error::parse("group", "expected production, control or test"))?;
    let phase = Phase::from_number(uint(obj, "phase")?).ok_or_else(|| Error::parse("phase", "expected 1 or 2"))?;

    let o = field(obj, "outcomes")?.as_object().ok_or_else(|| Error::parse("outcomes", "expected an object"))?;
    let flags = OutcomeFlags {
        play: flag(o, "play")?,
        loop_: flag(o, "loop")?,
        skip: flag(o, "skip")?,
        comment: flag(o, "comment")?,
        share: flag(o, "share")?,
        like: flag(o, "like")?,
        completed: flag(o, "completed")?,
    };
    let outcomes = Outcomes::new(flags).map_err(|e| Error::parse("outcomes", e.to_string()))?;

    let score = match field(obj, "score")? {
        Value::Number(n) => n.as_f64().ok_or_else(|| Error::parse("score", "not representable"))?,
        Value::String(s) if s == "inf" => f64::INFINITY,
        Value::String(s) if s == "-inf" => f64::NEG_INFINITY,
        Value::String(s) if s == "nan" => f64::NAN,
        _ => return Err(Error::parse("score", "expected a number or \"inf\"")),
    };

    Ok(ImpressionRecord { day, user: UserId(user), topic: TopicId(topic), group, phase, outcomes, score })
}

pub fn write_log<W: Write>(mut out: W, records: &[ImpressionRecord]) -> Result<()> {
    for rec in records {
        out.write_all(encode_impression(rec).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a whole log; blank lines are skipped, errors carry the 1-based line.
pub fn read_log<R: BufRead>(input: R, bounds: LogBounds) -> Result<Vec<ImpressionRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = decode_impression(&line, bounds).map_err(|e| Error::Line { line: i + 1, source: Box::new(e) })?;
        records.push(rec);
    }
    Ok(records)
}

/// Formats a real with 9 significant digits, trailing zeros stripped
/// (the `%.9g` convention).
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_owned();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        strip_zeros(format!("{x:.decimals$}"))
    } else {
        let m = strip_zeros(mantissa.to_owned());
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn strip_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        s
    }
}
