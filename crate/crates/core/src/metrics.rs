//! Detection cost (`Cavg`), equal error rate and DET curves.
//!
//! Every segment contributes one trial per hypothesis language. A trial is a
//! target trial when the hypothesis equals the segment's true language;
//! out-of-set segments only ever produce non-target trials. A trial is
//! accepted when its score is `>= threshold`.
//!
//! `Cavg` averages, over target languages `L_t`, the quantity
//! `p_target * P_miss(L_t) + sum_{L_n} p_nontarget * P_fa(L_t, L_n)` where
//! `p_nontarget = (1 - p_target) / (number of non-target classes)`. With no
//! out-of-set segments the number of non-target classes is `N - 1`; out-of-set
//! segments form one extra non-target class.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::submission::{format_score, ScoreRecord, TrialKey, TrueLanguage, OUT_OF_SET};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("empty trial set: {0}")]
    EmptyTrialSet(String),
    #[error("segment `{0}` in the key has no scores")]
    MissingSegment(String),
    #[error("segment `{segment}` has {found} scores, expected {expected}")]
    InconsistentLanguageSet {
        segment: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// One global threshold minimising `Cavg`.
    MinSweep,
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Fixed(t) => write!(f, "fixed({})", format_score(*t)),
            ThresholdPolicy::MinSweep => f.write_str("min_sweep"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub p_target: f64,
    pub num_languages: usize,
    pub threshold_policy: ThresholdPolicy,
}

impl EvalConfig {
    /// Defaults: `p_target = 0.5`, min-sweep threshold.
    pub fn new(num_languages: usize) -> Self {
        Self {
            p_target: 0.5,
            num_languages,
            threshold_policy: ThresholdPolicy::MinSweep,
        }
    }

    pub fn with_p_target(mut self, p_target: f64) -> Self {
        self.p_target = p_target;
        self
    }

    pub fn with_threshold(mut self, policy: ThresholdPolicy) -> Self {
        self.threshold_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(MetricsError::InvalidConfig(format!(
                "p_target must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        if self.num_languages < 2 {
            return Err(MetricsError::InvalidConfig(format!(
                "need at least 2 languages, got {}",
                self.num_languages
            )));
        }
        if let ThresholdPolicy::Fixed(t) = self.threshold_policy {
            if t.is_nan() {
                return Err(MetricsError::InvalidConfig("threshold is NaN".into()));
            }
        }
        Ok(())
    }
}

/// Non-target side of a language pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NonTarget {
    Language(usize),
    OutOfSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseLoss {
    pub target: usize,
    pub nontarget: NonTarget,
    pub p_miss: f64,
    pub p_fa: f64,
    /// `p_target * p_miss + (1 - p_target) * p_fa`.
    pub cost: f64,
}

/// A point on the pooled detection-error tradeoff curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cavg: f64,
    pub eer: f64,
    pub pairwise: Vec<PairwiseLoss>,
    pub det_points: Vec<DetPoint>,
    pub threshold_policy: ThresholdPolicy,
    /// The fixed threshold, or the minimiser found by the sweep.
    pub threshold_used: f64,
    pub p_target: f64,
    pub languages: Vec<String>,
}

impl EvalReport {
    /// Recomputes `Cavg` from the pairwise entries alone.
    pub fn recompute_cavg(&self) -> f64 {
        let n = self.languages.len();
        let mut total = 0.0;
        for t in 0..n {
            let pairs: Vec<&PairwiseLoss> = self.pairwise.iter().filter(|p| p.target == t).collect();
            if pairs.is_empty() {
                continue;
            }
            let p_nontarget = (1.0 - self.p_target) / pairs.len() as f64;
            total += self.p_target * pairs[0].p_miss + pairs.iter().map(|p| p_nontarget * p.p_fa).sum::<f64>();
        }
        total / n as f64
    }

    fn nontarget_name(&self, n: NonTarget) -> &str {
        match n {
            NonTarget::Language(i) => &self.languages[i],
            NonTarget::OutOfSet => OUT_OF_SET,
        }
    }

    /// Flat `key value` report.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "cavg {}", format_score(self.cavg))?;
        writeln!(w, "eer {}", format_score(self.eer))?;
        writeln!(w, "threshold_policy {}", self.threshold_policy)?;
        writeln!(w, "threshold {}", format_score(self.threshold_used))?;
        writeln!(w, "p_target {}", format_score(self.p_target))?;
        writeln!(w, "languages {}", self.languages.join(","))?;
        for p in &self.pairwise {
            let key = format!("pair.{}.{}", self.languages[p.target], self.nontarget_name(p.nontarget));
            writeln!(w, "{key}.p_miss {}", format_score(p.p_miss))?;
            writeln!(w, "{key}.p_fa {}", format_score(p.p_fa))?;
            writeln!(w, "{key}.cost {}", format_score(p.cost))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    /// Two columns, `p_miss p_fa`, one point per line.
    pub fn write_det<W: Write>(&self, mut w: W) -> io::Result<()> {
        for p in &self.det_points {
            writeln!(w, "{} {}", format_score(p.p_miss), format_score(p.p_fa))?;
        }
        Ok(())
    }
}

/// Scores joined with their ground truth, in key order.
struct TrialTable<'a> {
    num_languages: usize,
    rows: Vec<(TrueLanguage, &'a [f64])>,
    /// Segments per true language; last slot counts out-of-set segments.
    class_sizes: Vec<usize>,
}

impl<'a> TrialTable<'a> {
    fn build(scores: &'a [ScoreRecord], key: &TrialKey) -> Result<Self, MetricsError> {
        let n = key.num_languages();
        let by_id: HashMap<&str, &ScoreRecord> = scores.iter().map(|r| (r.segment_id.as_str(), r)).collect();
        let mut rows = Vec::with_capacity(key.len());
        let mut class_sizes = vec![0usize; n + 1];
        for (seg, truth) in key.entries() {
            let rec = by_id
                .get(seg.as_str())
                .ok_or_else(|| MetricsError::MissingSegment(seg.clone()))?;
            if rec.scores.len() != n {
                return Err(MetricsError::InconsistentLanguageSet {
                    segment: seg.clone(),
                    expected: n,
                    found: rec.scores.len(),
                });
            }
            match truth {
                TrueLanguage::InSet(i) => class_sizes[*i] += 1,
                TrueLanguage::OutOfSet => class_sizes[n] += 1,
            }
            rows.push((*truth, rec.scores.as_slice()));
        }
        Ok(Self {
            num_languages: n,
            rows,
            class_sizes,
        })
    }

    fn class_of(&self, truth: TrueLanguage) -> usize {
        match truth {
            TrueLanguage::InSet(i) => i,
            TrueLanguage::OutOfSet => self.num_languages,
        }
    }

    fn has_oos(&self) -> bool {
        self.class_sizes[self.num_languages] > 0
    }

    fn require_all_languages(&self, key: &TrialKey) -> Result<(), MetricsError> {
        for (i, &c) in self.class_sizes[..self.num_languages].iter().enumerate() {
            if c == 0 {
                return Err(MetricsError::EmptyTrialSet(format!(
                    "no segments of language `{}`",
                    key.languages()[i]
                )));
            }
        }
        Ok(())
    }

    /// `below[t][c]`: segments of class `c` whose score in column `t` is `< threshold`.
    fn count_below(&self, threshold: f64) -> Vec<Vec<usize>> {
        let n = self.num_languages;
        let mut below = vec![vec![0usize; n + 1]; n];
        for (truth, s) in &self.rows {
            let c = self.class_of(*truth);
            for t in 0..n {
                if s[t] < threshold {
                    below[t][c] += 1;
                }
            }
        }
        below
    }

    fn nontargets(&self, target: usize) -> Vec<NonTarget> {
        let mut v: Vec<NonTarget> = (0..self.num_languages)
            .filter(|&l| l != target)
            .map(NonTarget::Language)
            .collect();
        if self.has_oos() {
            v.push(NonTarget::OutOfSet);
        }
        v
    }

    fn nontarget_class(&self, n: NonTarget) -> usize {
        match n {
            NonTarget::Language(l) => l,
            NonTarget::OutOfSet => self.num_languages,
        }
    }

    fn pair_from_counts(&self, below: &[Vec<usize>], target: usize, nontarget: NonTarget, p_target: f64) -> PairwiseLoss {
        let nc = self.nontarget_class(nontarget);
        let p_miss = below[target][target] as f64 / self.class_sizes[target] as f64;
        let p_fa = (self.class_sizes[nc] - below[target][nc]) as f64 / self.class_sizes[nc] as f64;
        PairwiseLoss {
            target,
            nontarget,
            p_miss,
            p_fa,
            cost: p_target * p_miss + (1.0 - p_target) * p_fa,
        }
    }

    fn pairs_from_counts(&self, below: &[Vec<usize>], p_target: f64) -> Vec<PairwiseLoss> {
        (0..self.num_languages)
            .flat_map(|t| {
                self.nontargets(t)
                    .into_iter()
                    .map(move |nt| (t, nt))
            })
            .map(|(t, nt)| self.pair_from_counts(below, t, nt, p_target))
            .collect()
    }

    fn cavg_from_counts(&self, below: &[Vec<usize>], p_target: f64) -> f64 {
        let n = self.num_languages;
        let mut total = 0.0;
        for t in 0..n {
            let nts = self.nontargets(t);
            let p_nontarget = (1.0 - p_target) / nts.len() as f64;
            let p_miss = below[t][t] as f64 / self.class_sizes[t] as f64;
            let mut term = p_target * p_miss;
            for nt in nts {
                let c = self.nontarget_class(nt);
                let p_fa = (self.class_sizes[c] - below[t][c]) as f64 / self.class_sizes[c] as f64;
                term += p_nontarget * p_fa;
            }
            total += term;
        }
        total / n as f64
    }

    /// Finds the smallest threshold minimising `Cavg`. Candidates are every
    /// distinct score plus both infinities.
    fn sweep(&self, p_target: f64) -> (f64, f64) {
        let n = self.num_languages;
        let mut events: Vec<(f64, usize, usize)> = Vec::with_capacity(self.rows.len() * n);
        for (truth, s) in &self.rows {
            let c = self.class_of(*truth);
            for (t, &v) in s.iter().enumerate() {
                events.push((v, t, c));
            }
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut below = vec![vec![0usize; n + 1]; n];
        let mut best_theta = f64::NEG_INFINITY;
        let mut best = self.cavg_from_counts(&below, p_target);
        let mut i = 0;
        while i < events.len() {
            let v = events[i].0;
            // at threshold v every event with score < v is below
            if v > f64::NEG_INFINITY {
                let c = self.cavg_from_counts(&below, p_target);
                if c < best {
                    best = c;
                    best_theta = v;
                }
            }
            while i < events.len() && events[i].0 == v {
                let (_, t, c) = events[i];
                below[t][c] += 1;
                i += 1;
            }
        }
        if events.last().is_none_or(|e| e.0 < f64::INFINITY) {
            let c = self.cavg_from_counts(&below, p_target);
            if c < best {
                best = c;
                best_theta = f64::INFINITY;
            }
        }
        (best_theta, best)
    }

    fn pooled(&self) -> (Vec<f64>, Vec<f64>) {
        let mut targets = Vec::new();
        let mut nontargets = Vec::new();
        for (truth, s) in &self.rows {
            for (h, &v) in s.iter().enumerate() {
                if *truth == TrueLanguage::InSet(h) {
                    targets.push(v);
                } else {
                    nontargets.push(v);
                }
            }
        }
        (targets, nontargets)
    }
}

fn resolve_language(key: &TrialKey, name: &str) -> Result<usize, MetricsError> {
    key.language_index(name)
        .ok_or_else(|| MetricsError::UnknownLanguage(name.to_string()))
}

/// Miss and false-alarm rates for one target/non-target pair at `threshold`.
/// `nontarget` may be `OOS` to pair the target against out-of-set segments.
pub fn compute_pairwise_loss(
    scores: &[ScoreRecord],
    key: &TrialKey,
    target: &str,
    nontarget: &str,
    threshold: f64,
    config: &EvalConfig,
) -> Result<PairwiseLoss, MetricsError> {
    config.validate()?;
    let t = resolve_language(key, target)?;
    let nt = if nontarget == OUT_OF_SET {
        NonTarget::OutOfSet
    } else {
        NonTarget::Language(resolve_language(key, nontarget)?)
    };
    if nt == NonTarget::Language(t) {
        return Err(MetricsError::InvalidConfig(format!(
            "target and non-target are both `{target}`"
        )));
    }
    let table = TrialTable::build(scores, key)?;
    let nc = table.nontarget_class(nt);
    for (c, name) in [(t, target), (nc, nontarget)] {
        if table.class_sizes[c] == 0 {
            return Err(MetricsError::EmptyTrialSet(format!("no segments of `{name}`")));
        }
    }
    let below = table.count_below(threshold);
    Ok(table.pair_from_counts(&below, t, nt, config.p_target))
}

/// Full evaluation: `Cavg` under the configured threshold policy, pooled EER
/// and the DET curve.
pub fn compute_cavg(scores: &[ScoreRecord], key: &TrialKey, config: &EvalConfig) -> Result<EvalReport, MetricsError> {
    config.validate()?;
    if config.num_languages != key.num_languages() {
        return Err(MetricsError::InvalidConfig(format!(
            "config declares {} languages, key has {}",
            config.num_languages,
            key.num_languages()
        )));
    }
    let table = TrialTable::build(scores, key)?;
    table.require_all_languages(key)?;
    let threshold = match config.threshold_policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::MinSweep => table.sweep(config.p_target).0,
    };
    let below = table.count_below(threshold);
    let cavg = table.cavg_from_counts(&below, config.p_target);
    let pairwise = table.pairs_from_counts(&below, config.p_target);
    let (targets, nontargets) = table.pooled();
    let det_points = det_from_pooled(&targets, &nontargets)?;
    Ok(EvalReport {
        cavg,
        eer: eer_from_det(&det_points),
        pairwise,
        det_points,
        threshold_policy: config.threshold_policy,
        threshold_used: threshold,
        p_target: config.p_target,
        languages: key.languages().to_vec(),
    })
}

/// Pooled equal error rate over all segment x language trials.
pub fn compute_eer(scores: &[ScoreRecord], key: &TrialKey) -> Result<f64, MetricsError> {
    Ok(eer_from_det(&det_curve(scores, key)?))
}

pub fn det_curve(scores: &[ScoreRecord], key: &TrialKey) -> Result<Vec<DetPoint>, MetricsError> {
    let table = TrialTable::build(scores, key)?;
    let (targets, nontargets) = table.pooled();
    det_from_pooled(&targets, &nontargets)
}

/// DET points for explicit target / non-target score sets: the `-inf`
/// endpoint `(0, 1)`, one point per distinct score in ascending order, and
/// the reject-all endpoint `(1, 0)`.
pub fn det_from_pooled(targets: &[f64], nontargets: &[f64]) -> Result<Vec<DetPoint>, MetricsError> {
    if targets.is_empty() {
        return Err(MetricsError::EmptyTrialSet("no target trials".into()));
    }
    if nontargets.is_empty() {
        return Err(MetricsError::EmptyTrialSet("no non-target trials".into()));
    }
    let mut tgt = targets.to_vec();
    let mut non = nontargets.to_vec();
    tgt.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut values: Vec<f64> = tgt.iter().chain(&non).copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();

    let nt = tgt.len() as f64;
    let nn = non.len() as f64;
    let mut points = Vec::with_capacity(values.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    for v in values {
        let miss = tgt.partition_point(|&s| s < v);
        let accepted = non.len() - non.partition_point(|&s| s < v);
        points.push(DetPoint {
            threshold: v,
            p_miss: miss as f64 / nt,
            p_fa: accepted as f64 / nn,
        });
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Rate where the DET curve crosses `p_miss == p_fa`, interpolating
/// linearly between the flanking points.
pub fn eer_from_det(points: &[DetPoint]) -> f64 {
    let Some(i) = points.iter().position(|p| p.p_miss >= p.p_fa) else {
        return points.last().map_or(0.5, |p| 0.5 * (p.p_miss + p.p_fa));
    };
    let b = points[i];
    if b.p_miss == b.p_fa || i == 0 {
        return 0.5 * (b.p_miss + b.p_fa);
    }
    let a = points[i - 1];
    let dm = b.p_miss - a.p_miss;
    let df = b.p_fa - a.p_fa;
    let s = (a.p_fa - a.p_miss) / (dm - df);
    a.p_miss + s * dm
}

pub fn eer_from_pooled(targets: &[f64], nontargets: &[f64]) -> Result<f64, MetricsError> {
    Ok(eer_from_det(&det_from_pooled(targets, nontargets)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(langs: &[&str], entries: &[(&str, &str)]) -> TrialKey {
        TrialKey::new(langs.iter().map(|s| s.to_string()).collect(), entries.iter().copied()).unwrap()
    }

    fn rec(id: &str, s: &[f64]) -> ScoreRecord {
        ScoreRecord::new(id, s.to_vec())
    }

    fn fixed(n: usize, t: f64) -> EvalConfig {
        EvalConfig::new(n).with_threshold(ThresholdPolicy::Fixed(t))
    }

    // Independent count of misses and false alarms for one pair.
    fn count_pair(rows: &[(usize, Vec<f64>)], t: usize, n: usize, theta: f64) -> (f64, f64) {
        let tgt: Vec<_> = rows.iter().filter(|r| r.0 == t).collect();
        let non: Vec<_> = rows.iter().filter(|r| r.0 == n).collect();
        let miss = tgt.iter().filter(|r| r.1[t] < theta).count() as f64 / tgt.len() as f64;
        let fa = non.iter().filter(|r| r.1[t] >= theta).count() as f64 / non.len() as f64;
        (miss, fa)
    }

    #[test]
    fn pairwise_separated_and_inverted() {
        let k = key(&["A", "B"], &[("s1", "A"), ("s2", "B")]);
        let cfg = EvalConfig::new(2);
        let p = compute_pairwise_loss(&[rec("s1", &[1.0, 0.0]), rec("s2", &[-1.0, 0.0])], &k, "A", "B", 0.0, &cfg).unwrap();
        assert_eq!((p.p_miss, p.p_fa, p.cost), (0.0, 0.0, 0.0));
        let p = compute_pairwise_loss(&[rec("s1", &[-2.0, 0.0]), rec("s2", &[2.0, 0.0])], &k, "A", "B", 0.0, &cfg).unwrap();
        assert_eq!((p.p_miss, p.p_fa, p.cost), (1.0, 1.0, 1.0));
    }

    #[test]
    fn pairwise_three_segments() {
        let k = key(&["A", "B"], &[("s1", "A"), ("s2", "B"), ("s3", "A")]);
        let scores = [rec("s1", &[1.0, 0.0]), rec("s2", &[-1.0, 0.0]), rec("s3", &[-2.0, 0.0])];
        let p = compute_pairwise_loss(&scores, &k, "A", "B", 0.0, &EvalConfig::new(2)).unwrap();
        let rows = vec![(0, vec![1.0, 0.0]), (1, vec![-1.0, 0.0]), (0, vec![-2.0, 0.0])];
        assert_eq!((p.p_miss, p.p_fa), count_pair(&rows, 0, 1, 0.0));
        assert_eq!((p.p_miss, p.p_fa, p.cost), (0.5, 0.0, 0.25));
    }

    #[test]
    fn pairwise_errors() {
        let k = key(&["A", "B", "C"], &[("s1", "A"), ("s2", "B")]);
        let scores = [rec("s1", &[1.0, 0.0, 0.0]), rec("s2", &[0.0, 1.0, 0.0])];
        let cfg = EvalConfig::new(3);
        assert!(matches!(
            compute_pairwise_loss(&scores, &k, "Z", "B", 0.0, &cfg),
            Err(MetricsError::UnknownLanguage(_))
        ));
        assert!(matches!(
            compute_pairwise_loss(&scores, &k, "A", "C", 0.0, &cfg),
            Err(MetricsError::EmptyTrialSet(_))
        ));
        assert!(matches!(
            compute_pairwise_loss(&scores[..1], &k, "A", "B", 0.0, &cfg),
            Err(MetricsError::MissingSegment(_))
        ));
        assert!(compute_pairwise_loss(&scores, &k, "A", "A", 0.0, &cfg).is_err());
    }

    #[test]
    fn cavg_perfect_classifier() {
        let k = key(&["A", "B"], &[("s1", "A"), ("s2", "B")]);
        let scores = [rec("s1", &[1.0, -1.0]), rec("s2", &[-1.0, 1.0])];
        let r = compute_cavg(&scores, &k, &fixed(2, 0.0)).unwrap();
        assert_eq!(r.cavg, 0.0);
        assert_eq!(r.eer, 0.0);
    }

    #[test]
    fn cavg_worked_example() {
        let k = key(&["A", "B"], &[("s1", "A"), ("s2", "B"), ("s3", "A")]);
        let scores = [rec("s1", &[1.0, 2.0]), rec("s3", &[-2.0, -1.0]), rec("s2", &[-1.0, 1.0])];
        let r = compute_cavg(&scores, &k, &fixed(2, 0.0)).unwrap();
        assert_eq!(r.cavg, 0.25);
        assert_eq!(r.recompute_cavg(), 0.25);
        assert_eq!(r.pairwise.len(), 2);
        // sweep over {-inf,-2,-1,1,2,+inf} gives 0.5,0.5,0.625,0.25,0.625,0.5
        let r = compute_cavg(&scores, &k, &EvalConfig::new(2)).unwrap();
        assert_eq!(r.cavg, 0.25);
        assert_eq!(r.threshold_used, 1.0);
    }

    #[test]
    fn identical_scores_sweep_to_half() {
        let k = key(&["A", "B", "C"], &[("s1", "A"), ("s2", "B"), ("s3", "C"), ("s4", "A")]);
        let v = [0.3, -0.7, 1.1];
        let scores: Vec<_> = ["s1", "s2", "s3", "s4"].iter().map(|s| rec(s, &v)).collect();
        let r = compute_cavg(&scores, &k, &EvalConfig::new(3)).unwrap();
        assert_eq!(r.cavg, 0.5);
        let r = compute_cavg(&scores, &k, &EvalConfig::new(3).with_p_target(0.3)).unwrap();
        assert!((r.cavg - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cavg_errors() {
        let k = key(&["A", "B"], &[("s1", "A"), ("s2", "B")]);
        let bad = [rec("s1", &[1.0]), rec("s2", &[0.0, 1.0])];
        assert!(matches!(
            compute_cavg(&bad, &k, &EvalConfig::new(2)),
            Err(MetricsError::InconsistentLanguageSet { .. })
        ));
        let k1 = key(&["A", "B"], &[("s1", "A")]);
        assert!(matches!(
            compute_cavg(&[rec("s1", &[0.0, 0.0])], &k1, &EvalConfig::new(2)),
            Err(MetricsError::EmptyTrialSet(_))
        ));
        assert!(compute_cavg(&[], &k, &EvalConfig::new(2).with_p_target(1.0)).is_err());
    }

    #[test]
    fn out_of_set_is_an_extra_nontarget_class() {
        let k = key(&["A", "B"], &[("s1", "A"), ("s2", "B"), ("s3", "OOS")]);
        let scores = [rec("s1", &[1.0, -1.0]), rec("s2", &[-1.0, 1.0]), rec("s3", &[0.5, -0.5])];
        let r = compute_cavg(&scores, &k, &fixed(2, 0.0)).unwrap();
        // A: miss 0, fa(B)=0, fa(OOS)=1 -> 0.25/2 * 1 ; B: all zero
        assert_eq!(r.pairwise.len(), 4);
        assert_eq!(r.cavg, 0.5 * 0.25);
        assert_eq!(r.recompute_cavg(), r.cavg);
        let p = compute_pairwise_loss(&scores, &k, "A", "OOS", 0.0, &EvalConfig::new(2)).unwrap();
        assert_eq!(p.p_fa, 1.0);
        // OOS never contributes target trials
        let (t, n) = TrialTable::build(&scores, &k).unwrap().pooled();
        assert_eq!((t.len(), n.len()), (2, 4));
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer_from_pooled(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(eer_from_pooled(&[0.9, 0.8, 0.7, 0.3], &[0.85, 0.6, 0.4, 0.2]).unwrap(), 0.25);
        assert_eq!(eer_from_pooled(&[0.1, 0.4, 0.4, 0.9], &[0.9, 0.4, 0.1, 0.4]).unwrap(), 0.5);
        assert!(matches!(eer_from_pooled(&[0.1], &[]), Err(MetricsError::EmptyTrialSet(_))));
    }

    #[test]
    fn eer_interpolates_between_points() {
        // targets {1,3}, nontargets {2}: points (0,1) (0,1) (.5,1) (.5,0) (1,0)
        // crossing on the vertical segment at 0.5
        assert_eq!(eer_from_pooled(&[1.0, 3.0], &[2.0]).unwrap(), 0.5);
        // targets {1,2}, nontargets {2,3}: tie at 2 gives the diagonal
        // segment (.5,1) -> (1,.5), crossing at .75
        assert_eq!(eer_from_pooled(&[1.0, 2.0], &[2.0, 3.0]).unwrap(), 0.75);
    }

    #[test]
    fn det_examples() {
        let d = det_from_pooled(&[1.0], &[0.0]).unwrap();
        let pts: Vec<_> = d.iter().map(|p| (p.p_miss, p.p_fa)).collect();
        assert_eq!(pts, vec![(0.0, 1.0), (0.0, 1.0), (0.0, 0.0), (1.0, 0.0)]);

        let d = det_from_pooled(&[0.9, 0.8, 0.7, 0.3], &[0.85, 0.6, 0.4, 0.2]).unwrap();
        assert_eq!(d.len(), 10);
        assert!(d.windows(2).all(|w| w[0].p_miss <= w[1].p_miss && w[0].p_fa >= w[1].p_fa));
        assert!(matches!(det_from_pooled(&[1.0], &[]), Err(MetricsError::EmptyTrialSet(_))));
    }

    #[test]
    fn report_text_and_det_output() {
        let k = key(&["A", "B"], &[("s1", "A"), ("s2", "B")]);
        let scores = [rec("s1", &[1.0, -1.0]), rec("s2", &[-1.0, 1.0])];
        let r = compute_cavg(&scores, &k, &fixed(2, 0.0)).unwrap();
        let text = r.to_text();
        assert!(text.starts_with("cavg 0\neer 0\nthreshold_policy fixed(0)\n"));
        assert!(text.contains("pair.A.B.cost 0\n"));
        let mut det = Vec::new();
        r.write_det(&mut det).unwrap();
        assert_eq!(String::from_utf8(det).unwrap().lines().next(), Some("0 1"));
    }

    fn random_table() -> impl Strategy<Value = (usize, Vec<(usize, Vec<f64>)>)> {
        (2usize..5).prop_flat_map(|n| {
            let row = (0..n, prop::collection::vec(prop_oneof![-3i32..3i32, -3i32..3i32].prop_map(|v| v as f64 * 0.5), n));
            (Just(n), prop::collection::vec(row, n..40))
        })
    }

    fn to_inputs(n: usize, rows: &[(usize, Vec<f64>)]) -> (TrialKey, Vec<ScoreRecord>) {
        let langs: Vec<String> = (0..n).map(|i| format!("L{i}")).collect();
        // guarantee every language has a segment
        let mut entries: Vec<(String, String)> = (0..n).map(|i| (format!("pad{i}"), langs[i].clone())).collect();
        let mut recs: Vec<ScoreRecord> = (0..n).map(|i| rec(&format!("pad{i}"), &vec![0.0; n])).collect();
        for (j, (l, s)) in rows.iter().enumerate() {
            entries.push((format!("seg{j}"), langs[*l].clone()));
            recs.push(rec(&format!("seg{j}"), s));
        }
        (TrialKey::new(langs, entries).unwrap(), recs)
    }

    proptest! {
        #[test]
        fn sweep_matches_direct_minimum((n, rows) in random_table()) {
            let (k, recs) = to_inputs(n, &rows);
            let swept = compute_cavg(&recs, &k, &EvalConfig::new(n)).unwrap();
            let mut cands: Vec<f64> = recs.iter().flat_map(|r| r.scores.clone()).collect();
            cands.extend([f64::NEG_INFINITY, f64::INFINITY]);
            let best = cands.iter().map(|&t| compute_cavg(&recs, &k, &fixed(n, t)).unwrap().cavg).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(swept.cavg, best);
            prop_assert!((swept.recompute_cavg() - swept.cavg).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&swept.cavg));
            prop_assert!((0.0..=1.0).contains(&swept.eer));
        }

        #[test]
        fn monotone_transform_invariance((n, rows) in random_table()) {
            let (k, recs) = to_inputs(n, &rows);
            let warped: Vec<_> = recs.iter().map(|r| rec(&r.segment_id, &r.scores.iter().map(|v| (v * 0.7).exp() + 3.0 * v).collect::<Vec<_>>())).collect();
            let a = compute_cavg(&recs, &k, &EvalConfig::new(n)).unwrap();
            let b = compute_cavg(&warped, &k, &EvalConfig::new(n)).unwrap();
            prop_assert_eq!(a.cavg, b.cavg);
            prop_assert_eq!(a.eer, b.eer);
            let pa: Vec<_> = a.det_points.iter().map(|p| (p.p_miss, p.p_fa)).collect();
            let pb: Vec<_> = b.det_points.iter().map(|p| (p.p_miss, p.p_fa)).collect();
            prop_assert_eq!(pa, pb);
        }

        #[test]
        fn permutation_invariance((n, rows) in random_table(), seed in any::<u64>()) {
            let (k, recs) = to_inputs(n, &rows);
            let mut shuffled = recs.clone();
            let len = shuffled.len();
            let mut state = seed;
            for i in (1..len).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let a = compute_cavg(&recs, &k, &EvalConfig::new(n)).unwrap();
            let b = compute_cavg(&shuffled, &k, &EvalConfig::new(n)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
