//! Pairwise-comparison ranking: a resumable merge sort that asks one question
//! at a time, binary-search insertion, and rank agreement statistics.

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidatePool, ItemId};
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::face::FaceSim;

/// Total order, strongest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<ItemId>,
}

impl Ranking {
    pub fn new(order: Vec<ItemId>) -> Result<Self> {
        check_unique(&order)?;
        Ok(Self { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `σ(i)`: item id to position.
    pub fn positions(&self) -> HashMap<ItemId, usize> {
        self.order.iter().enumerate().map(|(p, &id)| (id, p)).collect()
    }

    pub fn reversed(&self) -> Self {
        Self { order: self.order.iter().rev().copied().collect() }
    }
}

fn check_unique(ids: &[ItemId]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidItems(format!("duplicate id {id}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonQuery {
    pub query_id: u64,
    pub left_id: ItemId,
    pub right_id: ItemId,
    pub emotion: Emotion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonAnswer {
    pub query_id: u64,
    pub winner: ItemId,
}

/// One answered query as persisted in the session file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub query_id: u64,
    pub left_id: ItemId,
    pub right_id: ItemId,
    pub winner: ItemId,
    /// Unix milliseconds; absent for synthetic sessions so files stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl LogEntry {
    pub fn loser(&self) -> ItemId {
        if self.winner == self.left_id {
            self.right_id
        } else {
            self.left_id
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Next {
    Query(ComparisonQuery),
    Completed(Ranking),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub items: Vec<ItemId>,
    pub seed: u64,
    pub emotion: Emotion,
    pub annotator_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total_items: usize,
    pub answered: usize,
    /// Upper bound on the answers still needed.
    pub remaining_at_most: usize,
    pub worst_case: usize,
    pub completed: bool,
}

/// Worst-case merge-sort comparisons: `n⌈log₂n⌉ − 2^⌈log₂n⌉ + 1`.
pub fn worst_case_comparisons(n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    let c = usize::BITS - (n - 1).leading_zeros();
    n * c as usize - (1usize << c) + 1
}

/// Merge sort with the annotator as comparator, advanced one answer at a time.
///
/// Merges follow the post-order of a top-down split (`mid = lo + len/2`) over
/// the seeded shuffle of the items. A merge emits the winner of its two run
/// heads, so the final array is strongest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SortSession {
    header: SessionHeader,
    arr: Vec<ItemId>,
    plan: Vec<(usize, usize, usize)>,
    step: usize,
    i: usize,
    j: usize,
    out: Vec<ItemId>,
    log: Vec<LogEntry>,
    result: Option<Ranking>,
}

fn merge_plan(lo: usize, hi: usize, plan: &mut Vec<(usize, usize, usize)>) {
    if hi - lo < 2 {
        return;
    }
    let mid = lo + (hi - lo) / 2;
    merge_plan(lo, mid, plan);
    merge_plan(mid, hi, plan);
    plan.push((lo, mid, hi));
}

/// Seeded shuffle used to order items before sorting.
pub fn shuffled(items: &[ItemId], seed: u64) -> Vec<ItemId> {
    let mut arr = items.to_vec();
    arr.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    arr
}

impl SortSession {
    pub fn new(items: Vec<ItemId>, emotion: Emotion, annotator_id: impl Into<String>, seed: u64) -> Result<Self> {
        Self::from_header(SessionHeader { items, seed, emotion, annotator_id: annotator_id.into() })
    }

    pub fn from_header(header: SessionHeader) -> Result<Self> {
        if header.items.is_empty() {
            return Err(Error::InvalidItems("a session needs at least one item".into()));
        }
        check_unique(&header.items)?;
        let arr = shuffled(&header.items, header.seed);
        let mut plan = Vec::with_capacity(arr.len());
        merge_plan(0, arr.len(), &mut plan);
        let mut s = Self { header, arr, plan, step: 0, i: 0, j: 0, out: Vec::new(), log: Vec::new(), result: None };
        s.start_merge();
        Ok(s)
    }

    fn start_merge(&mut self) {
        match self.plan.get(self.step) {
            Some(&(lo, mid, _)) => {
                self.i = lo;
                self.j = mid;
                self.out.clear();
            }
            None => self.result = Some(Ranking { order: self.arr.clone() }),
        }
    }

    pub fn header(&self) -> &SessionHeader {
        &self.header
    }

    pub fn emotion(&self) -> Emotion {
        self.header.emotion
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn result(&self) -> Option<&Ranking> {
        self.result.as_ref()
    }

    pub fn is_complete(&self) -> bool {
        self.result.is_some()
    }

    pub fn pending(&self) -> Option<ComparisonQuery> {
        if self.result.is_some() {
            return None;
        }
        Some(ComparisonQuery {
            query_id: self.log.len() as u64,
            left_id: self.arr[self.i],
            right_id: self.arr[self.j],
            emotion: self.header.emotion,
        })
    }

    /// The pending query, or the ranking once sorting is done. Idempotent.
    pub fn next_query(&self) -> Next {
        match &self.result {
            Some(r) => Next::Completed(r.clone()),
            None => Next::Query(self.pending().expect("incomplete session has a pending query")),
        }
    }

    pub fn submit_answer(&mut self, answer: ComparisonAnswer) -> Result<Next> {
        self.submit_at(answer, None)
    }

    /// Like [`submit_answer`](Self::submit_answer), recording a timestamp.
    pub fn submit_at(&mut self, answer: ComparisonAnswer, timestamp: Option<u64>) -> Result<Next> {
        let q = self
            .pending()
            .ok_or(Error::StaleAnswer { got: answer.query_id, expected: None })?;
        if answer.query_id != q.query_id {
            return Err(Error::StaleAnswer { got: answer.query_id, expected: Some(q.query_id) });
        }
        if answer.winner != q.left_id && answer.winner != q.right_id {
            return Err(Error::InvalidWinner { query_id: q.query_id, winner: answer.winner });
        }
        self.log.push(LogEntry {
            query_id: q.query_id,
            left_id: q.left_id,
            right_id: q.right_id,
            winner: answer.winner,
            timestamp,
        });
        if answer.winner == q.left_id {
            self.out.push(q.left_id);
            self.i += 1;
        } else {
            self.out.push(q.right_id);
            self.j += 1;
        }
        let (lo, mid, hi) = self.plan[self.step];
        if self.i == mid || self.j == hi {
            self.out.extend_from_slice(&self.arr[self.i..mid]);
            self.out.extend_from_slice(&self.arr[self.j..hi]);
            self.arr[lo..hi].copy_from_slice(&self.out);
            self.step += 1;
            self.start_merge();
        }
        Ok(self.next_query())
    }

    /// Runs the sort to completion with `winner(left, right)` as comparator.
    pub fn run_with<F: FnMut(ItemId, ItemId) -> ItemId>(&mut self, mut winner: F) -> Result<Ranking> {
        while let Some(q) = self.pending() {
            let w = winner(q.left_id, q.right_id);
            self.submit_answer(ComparisonAnswer { query_id: q.query_id, winner: w })?;
        }
        Ok(self.result.clone().expect("loop ends on completion"))
    }

    pub fn progress(&self) -> Progress {
        let remaining = match self.plan.get(self.step) {
            Some(&(_, mid, hi)) if self.result.is_none() => {
                let current = (mid - self.i) + (hi - self.j) - 1;
                current + self.plan[self.step + 1..].iter().map(|&(lo, _, hi)| hi - lo - 1).sum::<usize>()
            }
            _ => 0,
        };
        Progress {
            total_items: self.header.items.len(),
            answered: self.log.len(),
            remaining_at_most: remaining,
            worst_case: worst_case_comparisons(self.header.items.len()),
            completed: self.result.is_some(),
        }
    }

    /// Rebuilds a session from its header and answer log. Every entry must
    /// match the query the sorter would have asked at that point.
    pub fn replay(header: SessionHeader, log: &[LogEntry]) -> Result<Self> {
        let mut s = Self::from_header(header)?;
        for entry in log {
            let q = s.pending().ok_or(Error::StaleAnswer { got: entry.query_id, expected: None })?;
            if (q.query_id, q.left_id, q.right_id) != (entry.query_id, entry.left_id, entry.right_id) {
                return Err(Error::format(
                    "session log",
                    format!("entry {} does not match the replayed query {:?}", entry.query_id, q),
                ));
            }
            s.submit_at(ComparisonAnswer { query_id: entry.query_id, winner: entry.winner }, entry.timestamp)?;
        }
        Ok(s)
    }

    pub fn header_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.header)?)
    }

    pub fn entry_line(entry: &LogEntry) -> Result<String> {
        Ok(serde_json::to_string(entry)?)
    }

    pub fn final_line(ranking: &Ranking) -> Result<String> {
        Ok(serde_json::to_string(&FinalRecord { ranking: ranking.order.clone() })?)
    }

    /// Whole session as JSONL: header, answers, and the final ranking if done.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut text = self.header_line()?;
        text.push('\n');
        for e in &self.log {
            text.push_str(&Self::entry_line(e)?);
            text.push('\n');
        }
        if let Some(r) = &self.result {
            text.push_str(&Self::final_line(r)?);
            text.push('\n');
        }
        Ok(text)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: SessionHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::format("session", "empty file"))?)?;
        let mut log = Vec::new();
        let mut stored = None;
        for line in lines {
            if stored.is_some() {
                return Err(Error::format("session", "records after the final ranking"));
            }
            let value: serde_json::Value = serde_json::from_str(line)?;
            if value.get("ranking").is_some() {
                stored = Some(serde_json::from_value::<FinalRecord>(value)?.ranking);
            } else {
                log.push(serde_json::from_value::<LogEntry>(value)?);
            }
        }
        let s = Self::replay(header, &log)?;
        if let Some(order) = stored {
            if s.result.as_ref().map(|r| &r.order) != Some(&order) {
                return Err(Error::format("session", "stored ranking differs from the replayed one"));
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct FinalRecord {
    ranking: Vec<ItemId>,
}

/// Sorts `pool` with the simulator's hidden intensity as the annotator.
pub fn annotate_with_latent(
    sim: &FaceSim,
    pool: &CandidatePool,
    emotion: Emotion,
    annotator_id: &str,
    seed: u64,
) -> Result<SortSession> {
    let latent = pool
        .entries()
        .iter()
        .map(|e| Ok((e.id, sim.latent_intensity(&e.actuators, emotion)?)))
        .collect::<Result<HashMap<ItemId, f64>>>()?;
    let mut s = SortSession::new(pool.ids(), emotion, annotator_id, seed)?;
    s.run_with(|a, b| if latent[&a] > latent[&b] { a } else { b })?;
    Ok(s)
}

/// `session-{annotator}-{emotion}.jsonl`
pub fn session_file_name(annotator_id: &str, emotion: Emotion) -> String {
    format!("session-{annotator_id}-{emotion}.jsonl")
}

/// Appends lines and flushes them to stable storage before returning.
pub fn append_durable(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

/// Inserts `item` by binary search over positions; `winner(a, b)` answers
/// which of the two is stronger. Uses at most `⌈log₂(n+1)⌉` comparisons.
pub fn insert_item<F: FnMut(ItemId, ItemId) -> ItemId>(r: &Ranking, item: ItemId, mut winner: F) -> Result<Ranking> {
    if r.order.contains(&item) {
        return Err(Error::InvalidItems(format!("item {item} already ranked")));
    }
    let (mut lo, mut hi) = (0, r.order.len());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if winner(item, r.order[mid]) == item {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut order = r.order.clone();
    order.insert(lo, item);
    Ok(Ranking { order })
}

fn count_inversions(v: &mut [usize], buf: &mut Vec<usize>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf.push(v[i]);
            i += 1;
        } else {
            buf.push(v[j]);
            inv += (mid - i) as u64;
            j += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// `(concordant − discordant) / C(n,2)`, computed from an inversion count.
/// Rankings of fewer than two items agree vacuously.
pub fn kendall_tau(a: &Ranking, b: &Ranking) -> Result<f64> {
    let pos_b = b.positions();
    if a.len() != b.len() || pos_b.len() != b.len() {
        return Err(Error::IncomparableRankings);
    }
    let mut seq = Vec::with_capacity(a.len());
    for id in &a.order {
        seq.push(*pos_b.get(id).ok_or(Error::IncomparableRankings)?);
    }
    let n = seq.len() as u64;
    if n < 2 {
        return Ok(1.0);
    }
    let total = n * (n - 1) / 2;
    let discordant = count_inversions(&mut seq, &mut Vec::with_capacity(n as usize));
    Ok((total as f64 - 2.0 * discordant as f64) / total as f64)
}

/// `(agreeing − contradicted) / |log|` over the logged answers; 1.0 for an
/// empty log.
pub fn consistency_check(r: &Ranking, log: &[LogEntry]) -> Result<f64> {
    if log.is_empty() {
        return Ok(1.0);
    }
    let pos = r.positions();
    let mut score = 0i64;
    for e in log {
        let (w, l) = (e.winner, e.loser());
        let missing = || Error::InvalidItems(format!("logged pair ({}, {}) not in ranking", e.left_id, e.right_id));
        let (pw, pl) = (pos.get(&w).ok_or_else(missing)?, pos.get(&l).ok_or_else(missing)?);
        score += if pw < pl { 1 } else { -1 };
    }
    Ok(score as f64 / log.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn by_value(values: &[f64]) -> impl FnMut(ItemId, ItemId) -> ItemId + '_ {
        move |a, b| if values[a as usize] > values[b as usize] { a } else { b }
    }

    #[test]
    fn worst_case_values() {
        assert_eq!(worst_case_comparisons(1), 0);
        assert_eq!(worst_case_comparisons(2), 1);
        assert_eq!(worst_case_comparisons(4), 5);
        assert_eq!(worst_case_comparisons(100), 573);
    }

    #[test]
    fn single_item_is_complete() {
        let s = SortSession::new(vec![7], Emotion::Fear, "a", 0).unwrap();
        assert_eq!(s.next_query(), Next::Completed(Ranking { order: vec![7] }));
        assert!(matches!(
            SortSession::new(vec![1, 1], Emotion::Fear, "a", 0),
            Err(Error::InvalidItems(_))
        ));
    }

    #[test]
    fn two_items() {
        let mut s = SortSession::new(vec![3, 9], Emotion::Anger, "a", 5).unwrap();
        let Next::Query(q) = s.next_query() else { panic!() };
        assert_eq!(s.next_query(), Next::Query(q.clone()));
        let mut pair = [q.left_id, q.right_id];
        pair.sort();
        assert_eq!(pair, [3, 9]);
        assert!(matches!(
            s.submit_answer(ComparisonAnswer { query_id: 1, winner: 9 }),
            Err(Error::StaleAnswer { got: 1, expected: Some(0) })
        ));
        assert!(matches!(
            s.submit_answer(ComparisonAnswer { query_id: 0, winner: 4 }),
            Err(Error::InvalidWinner { .. })
        ));
        let next = s.submit_answer(ComparisonAnswer { query_id: 0, winner: 9 }).unwrap();
        assert_eq!(next, Next::Completed(Ranking { order: vec![9, 3] }));
        assert!(matches!(
            s.submit_answer(ComparisonAnswer { query_id: 0, winner: 9 }),
            Err(Error::StaleAnswer { expected: None, .. })
        ));
    }

    #[test]
    fn four_items_within_five_answers() {
        let values = [0.3, 0.9, 0.1, 0.5];
        for seed in 0..20 {
            let mut s = SortSession::new(vec![0, 1, 2, 3], Emotion::Happiness, "a", seed).unwrap();
            let r = s.run_with(by_value(&values)).unwrap();
            assert_eq!(r.order, vec![1, 3, 0, 2]);
            assert!(s.log().len() <= 5);
        }
    }

    #[test]
    fn remaining_bound_holds_at_every_step() {
        let values: Vec<f64> = (0..37).map(|i| ((i * 17) % 37) as f64).collect();
        let mut s = SortSession::new((0..37).collect(), Emotion::Sadness, "a", 11).unwrap();
        assert_eq!(s.progress().remaining_at_most, worst_case_comparisons(37));
        let mut oracle = by_value(&values);
        while let Some(q) = s.pending() {
            let before = s.progress().remaining_at_most;
            let w = oracle(q.left_id, q.right_id);
            s.submit_answer(ComparisonAnswer { query_id: q.query_id, winner: w }).unwrap();
            let after = s.progress().remaining_at_most;
            assert!(after < before);
            assert!(s.progress().answered + after <= worst_case_comparisons(37));
        }
        assert_eq!(s.progress().remaining_at_most, 0);
    }

    #[test]
    fn jsonl_round_trip_mid_session() {
        let values: Vec<f64> = (0..10).map(|i| (i as f64 * 1.7).sin()).collect();
        let mut s = SortSession::new((0..10).collect(), Emotion::Surprise, "ann", 2).unwrap();
        let mut oracle = by_value(&values);
        for _ in 0..6 {
            let q = s.pending().unwrap();
            s.submit_at(ComparisonAnswer { query_id: q.query_id, winner: oracle(q.left_id, q.right_id) }, Some(1_700_000_000_000))
                .unwrap();
        }
        let back = SortSession::from_jsonl(&s.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, s);
        let done = {
            let mut t = back.clone();
            t.run_with(oracle).unwrap();
            t
        };
        let again = SortSession::from_jsonl(&done.to_jsonl().unwrap()).unwrap();
        assert_eq!(again.result(), done.result());
    }

    #[test]
    fn tau_examples() {
        let a = Ranking::new(vec![1, 2, 3]).unwrap();
        let b = Ranking::new(vec![1, 3, 2]).unwrap();
        assert!((kendall_tau(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert_eq!(kendall_tau(&a, &a.reversed()).unwrap(), -1.0);
        let c = Ranking::new(vec![1, 2, 4]).unwrap();
        assert!(matches!(kendall_tau(&a, &c), Err(Error::IncomparableRankings)));
    }

    #[test]
    fn consistency_examples() {
        let r = Ranking::new(vec![1, 2, 3]).unwrap();
        assert_eq!(consistency_check(&r, &[]).unwrap(), 1.0);
        let log = [
            LogEntry { query_id: 0, left_id: 1, right_id: 2, winner: 1, timestamp: None },
            LogEntry { query_id: 1, left_id: 3, right_id: 2, winner: 3, timestamp: None },
        ];
        assert_eq!(consistency_check(&r, &log).unwrap(), 0.0);
    }

    #[test]
    fn insertion() {
        let values: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let r = Ranking::new((0..100).rev().collect()).unwrap();
        let mut calls = 0;
        let out = insert_item(&r, 100, |a, b| {
            calls += 1;
            by_value(&values)(a, b)
        })
        .unwrap();
        assert_eq!(out.order[0], 100);
        assert!(calls <= 7);
        assert!(insert_item(&r, 5, |a, _| a).is_err());
        let one = Ranking::new(vec![4]).unwrap();
        let mut calls = 0;
        insert_item(&one, 2, |a, _| {
            calls += 1;
            a
        })
        .unwrap();
        assert_eq!(calls, 1);
    }
}
