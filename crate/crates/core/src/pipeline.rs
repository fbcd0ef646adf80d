//! Sliding-window conversion of per-period interactions into SARSA tuples.
//!
//! After period `t` the table holds the interactions of periods
//! `t-h ..= t`. When period `t+1` arrives, each user's most recent record is
//! paired with the new interaction if it is at most `h` periods old; a
//! record that reaches age `h+1` without a successor is closed with the
//! dummy terminal pair.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::mdp::parse_field;
use crate::sarsa::TransitionTuple;
use crate::state::{Action, Interest, Period, UserId, UserState};

pub const DEFAULT_HORIZON: u32 = 15;
pub const MAX_HORIZON: u32 = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRecord {
    pub t: Period,
    pub user_id: UserId,
    pub s: UserState,
    pub a: Action,
    pub r: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classification {
    /// Interacts now with no record in the last `h` periods.
    New,
    /// Interacts now; pairs with its most recent interaction at `t_u`.
    Active { t_u: Period },
    /// Silent now and its latest record, at `t - h`, leaves the window.
    Inactive,
    /// Anything else: nothing to emit for this user.
    Carryover,
}

/// The buffer table `B_t` plus a per-user index of the latest interaction.
#[derive(Clone, Debug)]
pub struct BufferTable {
    h: u32,
    current: Option<Period>,
    window: BTreeMap<Period, Vec<InteractionRecord>>,
    latest: HashMap<UserId, InteractionRecord>,
}

impl BufferTable {
    pub fn new(h: u32) -> Result<Self> {
        if h == 0 || h > MAX_HORIZON {
            return Err(Error::InvalidConfig(format!("horizon {h} outside 1..={MAX_HORIZON}")));
        }
        Ok(BufferTable {
            h,
            current: None,
            window: BTreeMap::new(),
            latest: HashMap::new(),
        })
    }

    pub fn horizon(&self) -> u32 {
        self.h
    }

    /// Last processed period.
    pub fn current(&self) -> Option<Period> {
        self.current
    }

    /// Periods currently held, oldest first.
    pub fn periods(&self) -> Vec<Period> {
        self.window.keys().copied().collect()
    }

    pub fn records_at(&self, t: Period) -> &[InteractionRecord] {
        self.window.get(&t).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Users with an interaction still waiting for a successor.
    pub fn pending(&self) -> usize {
        self.latest.len()
    }

    /// Classifies `u` for the arrival of period `t_next`, given whether it
    /// interacts in that period.
    pub fn classify(&self, u: UserId, t_next: Period, interacted_now: bool) -> Classification {
        let latest = self.latest.get(&u).map(|r| r.t);
        let fresh = |t_u: Period| t_u + self.h >= t_next;
        match (interacted_now, latest) {
            (true, Some(t_u)) if fresh(t_u) => Classification::Active { t_u },
            (true, _) => Classification::New,
            (false, Some(t_u)) if t_u + self.h + 1 == t_next => Classification::Inactive,
            (false, _) => Classification::Carryover,
        }
    }

    /// Processes the interactions of period `t_next` and returns the emitted
    /// tuples sorted by user id (non-terminal and terminal alike).
    pub fn ingest(&mut self, t_next: Period, period_data: Vec<InteractionRecord>) -> Result<Vec<TransitionTuple>> {
        if let Some(t) = self.current {
            if t_next != t + 1 {
                return Err(Error::OutOfOrderPeriod {
                    expected: t + 1,
                    got: t_next,
                });
            }
        }
        let mut incoming: BTreeMap<UserId, InteractionRecord> = BTreeMap::new();
        for rec in period_data {
            if rec.t != t_next {
                return Err(Error::OutOfOrderPeriod {
                    expected: t_next,
                    got: rec.t,
                });
            }
            if rec.r > 1 {
                return Err(Error::InvalidTuple(format!("reward {} is not binary", rec.r)));
            }
            let user = rec.user_id;
            if incoming.insert(user, rec).is_some() {
                return Err(Error::DuplicateRecord { user, period: t_next });
            }
        }

        let mut emitted: Vec<(UserId, TransitionTuple)> = Vec::new();
        // records at t_next - h - 1 expire now; close those still latest
        if let Some(expiring) = (t_next).checked_sub(self.h + 1) {
            if let Some(records) = self.window.get(&expiring) {
                for rec in records {
                    if self.latest.get(&rec.user_id).map(|l| l.t) == Some(expiring) {
                        emitted.push((
                            rec.user_id,
                            TransitionTuple::terminal(rec.t, rec.s.clone(), rec.a, rec.r)?,
                        ));
                        self.latest.remove(&rec.user_id);
                    }
                }
            }
        }
        for (user, rec) in &incoming {
            if let Some(prev) = self.latest.get(user) {
                // anything older than h periods was closed above
                debug_assert!(prev.t + self.h >= t_next);
                emitted.push((
                    *user,
                    TransitionTuple::transition(
                        prev.t,
                        prev.s.clone(),
                        prev.a,
                        prev.r,
                        rec.s.clone(),
                        rec.a,
                        t_next - prev.t,
                    )?,
                ));
            }
        }
        for (user, rec) in &incoming {
            self.latest.insert(*user, rec.clone());
        }
        self.window.insert(t_next, incoming.into_values().collect());
        if let Some(oldest) = t_next.checked_sub(self.h) {
            self.window = self.window.split_off(&oldest);
        }
        self.current = Some(t_next);
        emitted.sort_by_key(|(u, d)| (*u, d.t));
        Ok(emitted.into_iter().map(|(_, d)| d).collect())
    }

    /// Feeds empty periods until every pending interaction is closed.
    pub fn flush(&mut self) -> Result<Vec<TransitionTuple>> {
        let mut out = Vec::new();
        let Some(mut t) = self.current else {
            return Ok(out);
        };
        while !self.latest.is_empty() {
            t += 1;
            out.extend(self.ingest(t, Vec::new())?);
        }
        Ok(out)
    }
}

/// Offline construction from complete logs: consecutive interactions of a
/// user at most `h` periods apart form a transition, every other
/// interaction closes with the terminal pair.
pub fn reference_scan(logs: &[InteractionRecord], h: u32) -> Vec<TransitionTuple> {
    let mut by_user: BTreeMap<UserId, Vec<&InteractionRecord>> = BTreeMap::new();
    for rec in logs {
        by_user.entry(rec.user_id).or_default().push(rec);
    }
    let mut out = Vec::new();
    for records in by_user.values_mut() {
        records.sort_by_key(|r| r.t);
        for (k, rec) in records.iter().enumerate() {
            let next = records.get(k + 1).filter(|n| n.t - rec.t <= h);
            let d = match next {
                Some(n) => TransitionTuple::transition(rec.t, rec.s.clone(), rec.a, rec.r, n.s.clone(), n.a, n.t - rec.t),
                None => TransitionTuple::terminal(rec.t, rec.s.clone(), rec.a, rec.r),
            };
            out.push(d.expect("records carry binary rewards and increasing times"));
        }
    }
    out
}

/// Streams `logs` period by period through a fresh table and flushes it.
pub fn stream_logs(logs: &[InteractionRecord], h: u32) -> Result<Vec<TransitionTuple>> {
    let mut periods: BTreeMap<Period, Vec<InteractionRecord>> = BTreeMap::new();
    for rec in logs {
        periods.entry(rec.t).or_default().push(rec.clone());
    }
    let mut table = BufferTable::new(h)?;
    let mut out = Vec::new();
    let (Some(&first), Some(&last)) = (periods.keys().next(), periods.keys().next_back()) else {
        return Ok(out);
    };
    for t in first..=last {
        out.extend(table.ingest(t, periods.remove(&t).unwrap_or_default())?);
    }
    out.extend(table.flush()?);
    Ok(out)
}

/// Parses a state written by [`UserState::repr`]. Vector states come back
/// with all features in `z`, which leaves the concatenated features intact.
pub fn parse_state(user_id: UserId, repr: &str) -> Result<UserState> {
    let repr = repr.trim();
    if let Ok(k) = repr.parse::<usize>() {
        return Ok(UserState::tabular(user_id, k));
    }
    let z = repr
        .split(';')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Parse(format!("unreadable state `{repr}`")))?;
    Ok(UserState {
        user_id,
        z: Interest::Vector(z),
        x: Vec::new(),
        i: Vec::new(),
    })
}

/// Reads `t,user_id,state_repr,item_id,reward` rows; the simulator's
/// interaction logs use the same layout.
pub fn read_logs_csv<R: Read>(r: R) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(r).records() {
        let rec = rec?;
        let t = parse_field::<Period>(&rec, 0)?;
        let user_id = UserId(parse_field::<u64>(&rec, 1)?);
        let s = parse_state(user_id, rec.get(2).unwrap_or(""))?;
        let a = Action(parse_field::<u32>(&rec, 3)?);
        let r = parse_field::<u8>(&rec, 4)?;
        out.push(InteractionRecord { t, user_id, s, a, r });
    }
    Ok(out)
}

pub fn write_tuples_csv<W: Write>(w: W, tuples: &[TransitionTuple]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "user_id", "s", "a", "r", "s_next", "a_next", "tau"])?;
    for d in tuples {
        let (s_next, a_next) = match &d.next {
            Some((s, a)) => (s.repr(), a.0.to_string()),
            None => ("*".to_string(), "*".to_string()),
        };
        out.write_record([
            d.t.to_string(),
            d.s.user_id.0.to_string(),
            d.s.repr(),
            d.a.0.to_string(),
            d.r.to_string(),
            s_next,
            a_next,
            d.tau.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: Period, u: u64) -> InteractionRecord {
        InteractionRecord {
            t,
            user_id: UserId(u),
            s: UserState::tabular(UserId(u), (t % 3) as usize),
            a: Action(1 + (t % 2)),
            r: (t % 2) as u8,
        }
    }

    #[test]
    fn empty_period_emits_nothing() {
        let mut b = BufferTable::new(15).unwrap();
        assert!(b.ingest(0, vec![]).unwrap().is_empty());
    }

    #[test]
    fn every_period_user() {
        let h = 15;
        let mut b = BufferTable::new(h).unwrap();
        let mut out = Vec::new();
        for t in 0..h + 2 {
            out.extend(b.ingest(t, vec![rec(t, 1)]).unwrap());
        }
        assert_eq!(out.len() as u32, h + 1);
        assert!(out.iter().all(|d| d.tau == 1 && !d.is_terminal()));
    }

    #[test]
    fn single_interaction_terminates_at_age_h_plus_one() {
        let h = 4;
        let mut b = BufferTable::new(h).unwrap();
        assert!(b.ingest(0, vec![rec(0, 9)]).unwrap().is_empty());
        for t in 1..=h {
            assert!(b.ingest(t, vec![]).unwrap().is_empty(), "period {t}");
        }
        let out = b.ingest(h + 1, vec![]).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].is_terminal());
        assert_eq!((out[0].t, out[0].tau, out[0].r), (0, 0, 0));
        assert_eq!(b.pending(), 0);
    }

    #[test]
    fn classification() {
        let h = 5;
        let mut b = BufferTable::new(h).unwrap();
        // first-ever interaction
        assert_eq!(b.classify(UserId(1), 0, true), Classification::New);
        b.ingest(0, vec![rec(0, 1)]).unwrap();
        for t in 1..=3 {
            b.ingest(t, vec![]).unwrap();
        }
        b.ingest(4, vec![rec(4, 2)]).unwrap();
        // user 2 interacted at t-2 (t = 6 after two more periods → next is 7)
        b.ingest(5, vec![]).unwrap();
        b.ingest(6, vec![]).unwrap();
        assert_eq!(b.classify(UserId(2), 7, true), Classification::Active { t_u: 4 });
        // user 1 interacted at 0 = (t_next - 1) - h with t_next = 6 ... check at the right period
        let mut c = BufferTable::new(h).unwrap();
        c.ingest(0, vec![rec(0, 1)]).unwrap();
        for t in 1..=h {
            c.ingest(t, vec![]).unwrap();
        }
        assert_eq!(c.classify(UserId(1), h + 1, false), Classification::Inactive);
        assert_eq!(c.classify(UserId(1), h + 1, true), Classification::New);
        assert_eq!(c.classify(UserId(7), h + 1, false), Classification::Carryover);
    }

    #[test]
    fn window_span() {
        let h = 3;
        let mut b = BufferTable::new(h).unwrap();
        for t in 0..10 {
            b.ingest(t, vec![rec(t, 1)]).unwrap();
            let lo = t.saturating_sub(h);
            assert_eq!(b.periods(), (lo..=t).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_out_of_order_and_duplicates() {
        let mut b = BufferTable::new(3).unwrap();
        b.ingest(5, vec![]).unwrap();
        assert!(matches!(b.ingest(7, vec![]), Err(Error::OutOfOrderPeriod { expected: 6, got: 7 })));
        assert!(matches!(b.ingest(6, vec![rec(5, 1)]), Err(Error::OutOfOrderPeriod { .. })));
        assert!(matches!(
            b.ingest(6, vec![rec(6, 1), rec(6, 1)]),
            Err(Error::DuplicateRecord { .. })
        ));
        assert!(BufferTable::new(0).is_err());
        assert!(BufferTable::new(61).is_err());
    }

    #[test]
    fn gap_of_h_plus_one_splits_the_run() {
        let h = 3;
        let logs = vec![rec(0, 1), rec(h + 1, 1)];
        let streamed = stream_logs(&logs, h).unwrap();
        assert_eq!(streamed.len(), 2);
        assert!(streamed.iter().all(|d| d.is_terminal()));
        assert_eq!(reference_scan(&logs, h), {
            let mut s = streamed.clone();
            s.sort_by_key(|d| d.t);
            s
        });
        let logs = vec![rec(0, 1), rec(h, 1)];
        let streamed = stream_logs(&logs, h).unwrap();
        assert_eq!(streamed[0].tau, h);
    }

    #[test]
    fn csv_logs_parse() {
        let text = "t,user_id,state_repr,item_id,converted\n0,4,2,1,1\n1,4,0.5;0.25,3,0\n";
        let logs = read_logs_csv(text.as_bytes()).unwrap();
        assert_eq!(logs[0].s.tabular_index(), Some(2));
        assert_eq!(logs[1].s.features().unwrap(), vec![0.5, 0.25]);
        assert_eq!((logs[1].a, logs[1].r), (Action(3), 0));
        let mut buf = Vec::new();
        write_tuples_csv(&mut buf, &reference_scan(&logs, 15)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("0,4,2,1,1,0.500000;0.250000,3,1"));
    }
}
