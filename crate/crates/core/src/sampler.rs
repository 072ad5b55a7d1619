//! Coreset sampling: fingerprint the downstream set, screen the open-set through
//! the filter, score the survivors by cosine similarity and keep a budgeted top-k.

use std::borrow::Cow;
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cbf::{sized_for, CountingBloomFilter, HashFamily, DEFAULT_COUNTER_BITS};
use crate::embedding_io::{binarize_into, signature_len, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::par::{self, Exec};

/// Open-set rows binarized and checked per parallel task.
const SCREEN_BLOCK: usize = 4096;
/// Candidates sharing one pass over the downstream rows.
const CANDIDATE_TILE: usize = 64;
/// Downstream rows sharing one pass over the candidates.
const QUERY_TILE: usize = 16;

/// How a candidate's similarities against every downstream row become one ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Round-robin over downstream rows, each taking its best remaining candidate.
    Base,
    /// Sum of similarities.
    Sum,
    /// Best similarity to any downstream row.
    #[default]
    Max,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Base, Aggregation::Sum, Aggregation::Max];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Base => "base",
            Aggregation::Sum => "sum",
            Aggregation::Max => "max",
        }
    }

    /// One-line description recorded in output documents.
    pub fn detail(self) -> &'static str {
        match self {
            Aggregation::Base => {
                "round-robin over downstream rows in index order; each row takes its most \
                 similar not-yet-selected candidate per round"
            }
            Aggregation::Sum => {
                "candidates ranked by summed cosine similarity over downstream rows"
            }
            Aggregation::Max => {
                "candidates ranked by maximum cosine similarity over downstream rows"
            }
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Aggregation::Base),
            "sum" => Ok(Aggregation::Sum),
            "max" => Ok(Aggregation::Max),
            other => Err(Error::Config(format!(
                "unknown aggregation {other:?} (expected base, sum or max)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Coreset size as a fraction of the open-set, in `(0, 1]`.
    pub budget_fraction: f64,
    pub aggregation: Aggregation,
    /// Scale rows to unit norm before scoring.
    pub normalize: bool,
    pub family: HashFamily,
    /// Counter count; `sized_for(N_X)` when unset.
    pub filter_size: Option<usize>,
    pub counter_bits: u32,
    /// Worker cap. `Some(1)` runs everything on the calling thread.
    pub threads: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            budget_fraction: 0.01,
            aggregation: Aggregation::Max,
            normalize: true,
            family: HashFamily::default(),
            filter_size: None,
            counter_bits: DEFAULT_COUNTER_BITS,
            threads: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "budget fraction {} must lie in (0, 1]",
                self.budget_fraction
            )));
        }
        if self.filter_size == Some(0) {
            return Err(Error::Config("filter size must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be positive".into()));
        }
        Ok(())
    }

    pub fn budget_count(&self, n_openset: usize) -> usize {
        budget_count(self.budget_fraction, n_openset)
    }
}

/// `ceil(fraction * n)`. Products within 1e-9 of an integer count as that integer,
/// so binary-float noise such as `0.07 * 100 = 7.000000000000001` does not round up.
pub fn budget_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let nearest = exact.round();
    if (exact - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        exact.ceil() as usize
    }
}

/// Open-set rows that passed membership screening, in increasing index order.
#[derive(Debug, Clone)]
pub struct CandidateSet<'a> {
    indices: Vec<usize>,
    openset: &'a EmbeddingMatrix,
}

impl<'a> CandidateSet<'a> {
    /// Indices must be strictly increasing and in range.
    pub fn new(openset: &'a EmbeddingMatrix, indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "candidate indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = indices.last() {
            if last >= openset.count() {
                return Err(Error::Config(format!(
                    "candidate index {last} out of range for {} rows",
                    openset.count()
                )));
            }
        }
        Ok(CandidateSet { indices, openset })
    }

    /// Every open-set row.
    pub fn all(openset: &'a EmbeddingMatrix) -> Self {
        CandidateSet {
            indices: (0..openset.count()).collect(),
            openset,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn openset(&self) -> &'a EmbeddingMatrix {
        self.openset
    }

    #[inline]
    pub fn row(&self, pos: usize) -> &'a [f32] {
        self.openset.row(self.indices[pos])
    }
}

/// Dense `N_X x N_M` cosine similarities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    rows: usize,
    cols: usize,
    scores: Vec<f32>,
}

impl ScoreTable {
    pub fn from_vec(rows: usize, cols: usize, scores: Vec<f32>) -> Result<Self> {
        if scores.len() != rows * cols {
            return Err(Error::Config(format!(
                "{} scores do not fill a {rows} x {cols} table",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("score table holds non-finite values".into()));
        }
        Ok(ScoreTable { rows, cols, scores })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.scores[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.scores[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedItem {
    pub index: usize,
    pub score: f64,
}

/// Budgeted selection in rank order (pick order for `base`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetSelection {
    pub strategy: Aggregation,
    pub budget_count: usize,
    pub selected: Vec<SelectedItem>,
}

impl CoresetSelection {
    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.index).collect()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Wall time per pipeline stage, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub fingerprint: f64,
    pub screen: f64,
    pub score: f64,
    pub refine: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.fingerprint + self.screen + self.score + self.refine
    }
}

/// The output document of a sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetReport {
    pub strategy: Aggregation,
    pub strategy_detail: String,
    pub budget_fraction: f64,
    pub budget_count: usize,
    pub n_downstream: usize,
    pub n_openset: usize,
    pub n_candidates: usize,
    pub n_selected: usize,
    pub timings_ms: StageTimings,
    pub selected: Vec<SelectedItem>,
}

impl CoresetReport {
    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.index).collect()
    }

    /// Budget minus what the candidate pool could supply.
    pub fn shortfall(&self) -> usize {
        self.budget_count.saturating_sub(self.n_selected)
    }

    pub fn without_timings(&self) -> CoresetReport {
        CoresetReport {
            timings_ms: StageTimings::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One index per line.
    pub fn indices_text(&self) -> String {
        let mut out = String::with_capacity(self.selected.len() * 8);
        for s in &self.selected {
            out.push_str(&s.index.to_string());
            out.push('\n');
        }
        out
    }
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dim { expected, actual });
    }
    Ok(())
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Inserts every downstream signature into a fresh filter.
pub fn build_fingerprint(
    downstream: &EmbeddingMatrix,
    config: &SamplerConfig,
) -> Result<CountingBloomFilter> {
    if downstream.is_empty() {
        return Err(Error::EmptyInput("downstream set has no rows"));
    }
    let size = config
        .filter_size
        .unwrap_or_else(|| sized_for(downstream.count()));
    let mut filter = CountingBloomFilter::new(
        size,
        config.counter_bits,
        downstream.dim(),
        config.family.clone(),
    )?;
    let mut buf = vec![0u8; signature_len(downstream.dim())];
    for row in downstream.rows() {
        binarize_into(row, &mut buf);
        filter.update_packed(&buf);
    }
    Ok(filter)
}

/// Indices of the open-set rows whose signature passes the filter.
pub fn screen<'a>(
    openset: &'a EmbeddingMatrix,
    filter: &CountingBloomFilter,
) -> Result<CandidateSet<'a>> {
    screen_with(Exec::for_threads(None), openset, filter)
}

pub fn screen_with<'a>(
    exec: Exec,
    openset: &'a EmbeddingMatrix,
    filter: &CountingBloomFilter,
) -> Result<CandidateSet<'a>> {
    check_dims(filter.dim(), openset.dim())?;
    let sig_len = signature_len(openset.dim());
    let parts = par::map_blocks(exec, openset.count(), SCREEN_BLOCK, |range| {
        let mut buf = vec![0u8; sig_len];
        range
            .filter(|&i| {
                binarize_into(openset.row(i), &mut buf);
                filter.check_packed(&buf)
            })
            .collect::<Vec<usize>>()
    });
    Ok(CandidateSet {
        indices: parts.concat(),
        openset,
    })
}

/// Full similarity table between the downstream rows and the candidates.
pub fn score(downstream: &EmbeddingMatrix, candidates: &CandidateSet<'_>) -> Result<ScoreTable> {
    score_with(Exec::for_threads(None), downstream, candidates)
}

pub fn score_with(
    exec: Exec,
    downstream: &EmbeddingMatrix,
    candidates: &CandidateSet<'_>,
) -> Result<ScoreTable> {
    check_dims(downstream.dim(), candidates.openset().dim())?;
    let cols = candidates.len();
    let parts = par::map_blocks(exec, downstream.count(), QUERY_TILE, |rows| {
        let mut out = Vec::with_capacity(rows.len() * cols);
        for i in rows {
            let x = downstream.row(i);
            out.extend((0..cols).map(|j| dot(x, candidates.row(j))));
        }
        out
    });
    Ok(ScoreTable {
        rows: downstream.count(),
        cols,
        scores: parts.concat(),
    })
}

/// Ordering key: higher score first, then lower candidate position.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    score: f32,
    pos: usize,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    /// `Greater` means ranked ahead.
    fn cmp(&self, other: &Self) -> Ordering {
        // + 0.0 folds -0.0 into 0.0 so signed zeros tie
        (self.score + 0.0)
            .total_cmp(&(other.score + 0.0))
            .then_with(|| other.pos.cmp(&self.pos))
    }
}

/// Keeps the best `cap` entries seen so far.
struct TopList {
    cap: usize,
    heap: BinaryHeap<Reverse<Ranked>>,
}

impl TopList {
    fn new(cap: usize) -> Self {
        TopList {
            cap,
            heap: BinaryHeap::with_capacity(cap + 1),
        }
    }

    #[inline]
    fn offer(&mut self, item: Ranked) {
        if self.heap.len() < self.cap {
            self.heap.push(Reverse(item));
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if item > worst.0 {
                *worst = Reverse(item);
            }
        }
    }

    fn into_sorted(self) -> Vec<Ranked> {
        // ascending Reverse = descending rank
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|r| r.0)
            .collect()
    }
}

fn aggregate_fold(strategy: Aggregation, scores: impl Iterator<Item = f32>) -> f64 {
    match strategy {
        Aggregation::Max => {
            let mut best = f32::NEG_INFINITY;
            for s in scores {
                if s > best {
                    best = s;
                }
            }
            f64::from(best)
        }
        _ => scores.map(f64::from).sum(),
    }
}

/// Top `budget` positions by aggregate, in rank order.
fn select_by_aggregate(aggregates: &[f64], budget: usize) -> Vec<(usize, f64)> {
    let rank = |a: &usize, b: &usize| {
        (aggregates[*b] + 0.0)
            .total_cmp(&(aggregates[*a] + 0.0))
            .then_with(|| a.cmp(b))
    };
    let mut order: Vec<usize> = (0..aggregates.len()).collect();
    let take = budget.min(order.len());
    if take < order.len() && take > 0 {
        order.select_nth_unstable_by(take - 1, rank);
        order.truncate(take);
    }
    order.truncate(take);
    order.sort_unstable_by(rank);
    order.into_iter().map(|p| (p, aggregates[p])).collect()
}

/// Round-robin across downstream rows. `lists[i]` holds row `i`'s candidates in
/// rank order; it needs at most `min(budget, N_M)` entries, since every entry a
/// row passes over is already selected.
fn select_round_robin(
    lists: &[Vec<Ranked>],
    n_candidates: usize,
    budget: usize,
) -> Vec<(usize, f64)> {
    let target = budget.min(n_candidates);
    let mut taken = vec![false; n_candidates];
    let mut cursor = vec![0usize; lists.len()];
    let mut out = Vec::with_capacity(target);
    while out.len() < target {
        let mut progressed = false;
        for (list, cur) in lists.iter().zip(cursor.iter_mut()) {
            while *cur < list.len() && taken[list[*cur].pos] {
                *cur += 1;
            }
            if let Some(item) = list.get(*cur) {
                taken[item.pos] = true;
                out.push((item.pos, f64::from(item.score)));
                *cur += 1;
                progressed = true;
                if out.len() == target {
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    out
}

fn into_selection(
    picks: Vec<(usize, f64)>,
    candidates: &CandidateSet<'_>,
    strategy: Aggregation,
    budget_count: usize,
) -> CoresetSelection {
    CoresetSelection {
        strategy,
        budget_count,
        selected: picks
            .into_iter()
            .map(|(pos, score)| SelectedItem {
                index: candidates.indices[pos],
                score,
            })
            .collect(),
    }
}

/// Budgeted top-k over a full score table.
pub fn refine(
    table: &ScoreTable,
    candidates: &CandidateSet<'_>,
    budget_count: usize,
    strategy: Aggregation,
) -> Result<CoresetSelection> {
    if budget_count == 0 {
        return Err(Error::Config("budget must be at least one item".into()));
    }
    if table.cols != candidates.len() {
        return Err(Error::Config(format!(
            "score table has {} columns for {} candidates",
            table.cols,
            candidates.len()
        )));
    }
    let picks = match strategy {
        Aggregation::Max | Aggregation::Sum => {
            let aggregates: Vec<f64> = (0..table.cols)
                .map(|j| aggregate_fold(strategy, (0..table.rows).map(|i| table.get(i, j))))
                .collect();
            select_by_aggregate(&aggregates, budget_count)
        }
        Aggregation::Base => {
            let cap = budget_count.min(table.cols);
            let lists: Vec<Vec<Ranked>> = (0..table.rows)
                .map(|i| {
                    let mut top = TopList::new(cap);
                    for (pos, &score) in table.row(i).iter().enumerate() {
                        top.offer(Ranked { score, pos });
                    }
                    top.into_sorted()
                })
                .collect();
            select_round_robin(&lists, table.cols, budget_count)
        }
    };
    Ok(into_selection(picks, candidates, strategy, budget_count))
}

/// Scores and refines without materializing the full table. Produces exactly
/// what `refine(score(..))` would. Returns the selection with score and refine
/// wall times.
pub fn score_and_refine(
    exec: Exec,
    downstream: &EmbeddingMatrix,
    candidates: &CandidateSet<'_>,
    budget_count: usize,
    strategy: Aggregation,
) -> Result<(CoresetSelection, f64, f64)> {
    if budget_count == 0 {
        return Err(Error::Config("budget must be at least one item".into()));
    }
    check_dims(downstream.dim(), candidates.openset().dim())?;
    let n_m = candidates.len();
    let start = Instant::now();
    match strategy {
        Aggregation::Max | Aggregation::Sum => {
            let parts = par::map_blocks(exec, n_m, CANDIDATE_TILE, |cols| {
                let width = cols.len();
                let rows: Vec<&[f32]> = cols.clone().map(|j| candidates.row(j)).collect();
                let mut acc = vec![0.0f64; width];
                let mut best = vec![f32::NEG_INFINITY; width];
                for x in downstream.rows() {
                    for (k, u) in rows.iter().enumerate() {
                        let s = dot(x, u);
                        if strategy == Aggregation::Max {
                            if s > best[k] {
                                best[k] = s;
                            }
                        } else {
                            acc[k] += f64::from(s);
                        }
                    }
                }
                if strategy == Aggregation::Max {
                    best.into_iter().map(f64::from).collect()
                } else {
                    acc
                }
            });
            let aggregates = parts.concat();
            let score_ms = elapsed_ms(start);
            let t = Instant::now();
            let picks = select_by_aggregate(&aggregates, budget_count);
            let sel = into_selection(picks, candidates, strategy, budget_count);
            Ok((sel, score_ms, elapsed_ms(t)))
        }
        Aggregation::Base => {
            let cap = budget_count.min(n_m);
            let parts = par::map_blocks(exec, downstream.count(), QUERY_TILE, |rows| {
                let xs: Vec<&[f32]> = rows.clone().map(|i| downstream.row(i)).collect();
                let mut tops: Vec<TopList> = xs.iter().map(|_| TopList::new(cap)).collect();
                for pos in 0..n_m {
                    let u = candidates.row(pos);
                    for (x, top) in xs.iter().zip(tops.iter_mut()) {
                        top.offer(Ranked {
                            score: dot(x, u),
                            pos,
                        });
                    }
                }
                tops.into_iter()
                    .map(TopList::into_sorted)
                    .collect::<Vec<_>>()
            });
            let lists: Vec<Vec<Ranked>> = parts.into_iter().flatten().collect();
            let score_ms = elapsed_ms(start);
            let t = Instant::now();
            let picks = select_round_robin(&lists, n_m, budget_count);
            let sel = into_selection(picks, candidates, strategy, budget_count);
            Ok((sel, score_ms, elapsed_ms(t)))
        }
    }
}

fn normalized<'a>(m: &'a EmbeddingMatrix, enabled: bool) -> Result<Cow<'a, EmbeddingMatrix>> {
    if enabled {
        Ok(Cow::Owned(m.clone().normalize()?))
    } else {
        Ok(Cow::Borrowed(m))
    }
}

/// Fingerprint, screen, score and refine in one call.
pub fn sample_coreset(
    downstream: &EmbeddingMatrix,
    openset: &EmbeddingMatrix,
    config: &SamplerConfig,
) -> Result<CoresetReport> {
    config.validate()?;
    check_dims(downstream.dim(), openset.dim())?;
    let downstream = normalized(downstream, config.normalize)?;
    let openset = normalized(openset, config.normalize)?;
    par::install(config.threads, |exec| {
        let start = Instant::now();
        let filter = build_fingerprint(&downstream, config)?;
        let fingerprint_ms = elapsed_ms(start);
        let mut report = run_screened(exec, &filter, &downstream, &openset, config)?;
        report.timings_ms.fingerprint = fingerprint_ms;
        Ok(report)
    })
}

/// Samples with a prebuilt fingerprint, so one filter can screen many open-sets.
pub fn sample_with_filter(
    filter: &CountingBloomFilter,
    downstream: &EmbeddingMatrix,
    openset: &EmbeddingMatrix,
    config: &SamplerConfig,
) -> Result<CoresetReport> {
    config.validate()?;
    check_dims(filter.dim(), downstream.dim())?;
    check_dims(filter.dim(), openset.dim())?;
    let downstream = normalized(downstream, config.normalize)?;
    let openset = normalized(openset, config.normalize)?;
    par::install(config.threads, |exec| {
        run_screened(exec, filter, &downstream, &openset, config)
    })
}

fn run_screened(
    exec: Exec,
    filter: &CountingBloomFilter,
    downstream: &EmbeddingMatrix,
    openset: &EmbeddingMatrix,
    config: &SamplerConfig,
) -> Result<CoresetReport> {
    if downstream.is_empty() {
        return Err(Error::EmptyInput("downstream set has no rows"));
    }
    let start = Instant::now();
    let candidates = screen_with(exec, openset, filter)?;
    let screen_ms = elapsed_ms(start);
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates {
            n_openset: openset.count(),
        });
    }
    let budget = config.budget_count(openset.count());
    let (selection, score_ms, refine_ms) =
        score_and_refine(exec, downstream, &candidates, budget, config.aggregation)?;
    Ok(CoresetReport {
        strategy: config.aggregation,
        strategy_detail: config.aggregation.detail().to_string(),
        budget_fraction: config.budget_fraction,
        budget_count: budget,
        n_downstream: downstream.count(),
        n_openset: openset.count(),
        n_candidates: candidates.len(),
        n_selected: selection.len(),
        timings_ms: StageTimings {
            fingerprint: 0.0,
            screen: screen_ms,
            score: score_ms,
            refine: refine_ms,
        },
        selected: selection.selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut impl Rng, n: usize, dim: usize) -> EmbeddingMatrix {
        let data: Vec<f32> = (0..n * dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        EmbeddingMatrix::new(n, dim, data)
            .unwrap()
            .normalize()
            .unwrap()
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(budget_count(0.01, 10_000), 100);
        assert_eq!(budget_count(0.07, 100), 7);
        assert_eq!(budget_count(0.01, 150), 2);
        assert_eq!(budget_count(1.0, 37), 37);
        assert_eq!(budget_count(0.5, 3), 2);
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        for bad in [0.0, -0.1, 1.01, f64::NAN] {
            c.budget_fraction = bad;
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn aggregation_parse() {
        assert_eq!("sum".parse::<Aggregation>().unwrap(), Aggregation::Sum);
        assert!("median".parse::<Aggregation>().is_err());
        assert_eq!(Aggregation::default(), Aggregation::Max);
        assert_eq!(
            serde_json::to_string(&Aggregation::Base).unwrap(),
            "\"base\""
        );
    }

    #[test]
    fn fingerprint_sizing_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = unit_rows(&mut rng, 3500, 32);
        let f = build_fingerprint(&x, &SamplerConfig::default()).unwrap();
        assert_eq!(f.size(), 10_000);
        assert_eq!(f.inserted(), 3500);

        // sized_for(1) is only 3 counters, so pin a size where one insert cannot collide
        let wide = SamplerConfig {
            filter_size: Some(100_000),
            ..SamplerConfig::default()
        };
        let one = unit_rows(&mut rng, 1, 32);
        let f1 = build_fingerprint(&one, &wide).unwrap();
        let nonzero: Vec<u32> = f1.counters().iter().copied().filter(|&c| c > 0).collect();
        assert_eq!(nonzero, vec![1; 10]);
        assert_eq!(
            build_fingerprint(&one, &SamplerConfig::default())
                .unwrap()
                .size(),
            3
        );

        let twice = one.select(&[0, 0]);
        let f2 = build_fingerprint(&twice, &wide).unwrap();
        let doubled: Vec<u32> = f1.counters().iter().map(|c| c * 2).collect();
        assert_eq!(f2.counters(), &doubled[..]);

        assert!(matches!(
            build_fingerprint(
                &EmbeddingMatrix::empty(32).unwrap(),
                &SamplerConfig::default()
            ),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn screen_admits_copies_and_rejects_on_empty_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = unit_rows(&mut rng, 20, 64);
        let u = unit_rows(&mut rng, 200, 64);
        let mut rows: Vec<Vec<f32>> = u.rows().map(|r| r.to_vec()).collect();
        rows[17] = x.row(3).to_vec();
        rows[150] = x.row(19).to_vec();
        let u = EmbeddingMatrix::from_rows(64, &rows).unwrap();
        let f = build_fingerprint(&x, &SamplerConfig::default()).unwrap();
        let c = screen(&u, &f).unwrap();
        assert!(c.indices().contains(&17) && c.indices().contains(&150));
        assert!(c.indices().windows(2).all(|w| w[0] < w[1]));

        let empty = CountingBloomFilter::with_size(1000, 64).unwrap();
        assert!(screen(&u, &empty).unwrap().is_empty());

        let narrow = CountingBloomFilter::with_size(1000, 32).unwrap();
        assert!(matches!(screen(&u, &narrow), Err(Error::Dim { .. })));
    }

    #[test]
    fn score_hand_cases() {
        let x = EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let u = EmbeddingMatrix::from_rows(2, &[[0.0f32, 1.0], [0.6, 0.8]]).unwrap();
        let c = CandidateSet::all(&u);
        let t = score(&x, &c).unwrap();
        assert_eq!((t.rows(), t.cols()), (3, 2));
        // brute-force per-element oracle
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = x
                    .row(i)
                    .iter()
                    .zip(u.row(j))
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                assert!((f64::from(t.get(i, j)) - want).abs() < 1e-6);
            }
        }
        assert!((t.get(2, 1) - 1.0).abs() < 1e-6);
        assert!(t.get(0, 0).abs() < 1e-6);

        let none = CandidateSet::new(&u, vec![]).unwrap();
        let t = score(&x, &none).unwrap();
        assert_eq!(t.cols(), 0);
    }

    #[test]
    fn refine_budget_exceeding_pool_takes_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = unit_rows(&mut rng, 4, 8);
        let u = unit_rows(&mut rng, 9, 8);
        let c = CandidateSet::new(&u, vec![0, 2, 3, 7, 8]).unwrap();
        let t = score(&x, &c).unwrap();
        for s in Aggregation::ALL {
            let sel = refine(&t, &c, 50, s).unwrap();
            let mut idx = sel.indices();
            idx.sort();
            assert_eq!(idx, vec![0, 2, 3, 7, 8]);
        }
    }

    #[test]
    fn signed_zeros_tie() {
        let u = EmbeddingMatrix::new(3, 1, vec![1.0; 3]).unwrap();
        let c = CandidateSet::all(&u);
        let t = ScoreTable::from_vec(1, 3, vec![-0.5, -0.0, 0.0]).unwrap();
        for s in Aggregation::ALL {
            assert_eq!(refine(&t, &c, 1, s).unwrap().indices(), vec![1], "{s}");
        }
    }

    #[test]
    fn single_query_strategies_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = unit_rows(&mut rng, 1, 16);
        let u = unit_rows(&mut rng, 40, 16);
        let c = CandidateSet::all(&u);
        let t = score(&x, &c).unwrap();
        let picks: Vec<Vec<usize>> = Aggregation::ALL
            .iter()
            .map(|&s| refine(&t, &c, 7, s).unwrap().indices())
            .collect();
        assert_eq!(picks[0], picks[1]);
        assert_eq!(picks[1], picks[2]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let t = ScoreTable::from_vec(1, 4, vec![0.5, 0.9, 0.9, 0.5]).unwrap();
        let u = EmbeddingMatrix::from_rows(1, &[[1.0f32]; 4]).unwrap();
        let c = CandidateSet::all(&u);
        for s in Aggregation::ALL {
            assert_eq!(refine(&t, &c, 3, s).unwrap().indices(), vec![1, 2, 0]);
        }
    }

    #[test]
    fn round_robin_skips_taken() {
        // row 0 prefers 0 > 1 > 2, row 1 prefers 0 > 2 > 1
        let t = ScoreTable::from_vec(2, 3, vec![0.9, 0.8, 0.1, 0.9, 0.1, 0.8]).unwrap();
        let u = EmbeddingMatrix::from_rows(1, &[[1.0f32]; 3]).unwrap();
        let c = CandidateSet::all(&u);
        let sel = refine(&t, &c, 2, Aggregation::Base).unwrap();
        assert_eq!(sel.indices(), vec![0, 2]);
        assert_eq!(sel.selected[1].score, f64::from(0.8f32));
    }

    #[test]
    fn streaming_matches_table_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = unit_rows(&mut rng, 37, 40);
        let u = unit_rows(&mut rng, 300, 40);
        let idx: Vec<usize> = (0..300).filter(|i| i % 3 != 1).collect();
        let c = CandidateSet::new(&u, idx).unwrap();
        let t = score(&x, &c).unwrap();
        for s in Aggregation::ALL {
            for budget in [1, 5, 33, 199, 200, 500] {
                let want = refine(&t, &c, budget, s).unwrap();
                for exec in [Exec::Sequential, Exec::Parallel] {
                    let (got, _, _) = score_and_refine(exec, &x, &c, budget, s).unwrap();
                    assert_eq!(got, want, "{s} budget {budget}");
                }
            }
        }
    }

    #[test]
    fn sample_end_to_end_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = unit_rows(&mut rng, 50, 32);
        let u = x.select(&(0..50).rev().collect::<Vec<_>>());
        let config = SamplerConfig {
            budget_fraction: 1.0,
            ..SamplerConfig::default()
        };
        let r = sample_coreset(&x, &u, &config).unwrap();
        let mut idx = r.indices();
        idx.sort();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
        assert_eq!(r.n_candidates, 50);
        assert_eq!(r.shortfall(), 0);
    }

    #[test]
    fn empty_candidates_is_an_error() {
        let x = EmbeddingMatrix::from_rows(4, &[[1.0f32, 1.0, 1.0, 1.0]]).unwrap();
        let u = EmbeddingMatrix::from_rows(4, &[[-1.0f32, -1.0, -1.0, -1.0]; 5]).unwrap();
        let config = SamplerConfig {
            filter_size: Some(1_000_000),
            ..SamplerConfig::default()
        };
        assert!(matches!(
            sample_coreset(&x, &u, &config),
            Err(Error::EmptyCandidates { n_openset: 5 })
        ));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let x = EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
        let u = EmbeddingMatrix::from_rows(3, &[[1.0f32, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            sample_coreset(&x, &u, &SamplerConfig::default()),
            Err(Error::Dim { .. })
        ));
    }

    #[test]
    fn report_json_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = unit_rows(&mut rng, 10, 16);
        let u = x.select(&[0, 1, 2, 3]);
        let r = sample_coreset(
            &x,
            &u,
            &SamplerConfig {
                budget_fraction: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in [
            "strategy",
            "budget_fraction",
            "budget_count",
            "n_downstream",
            "n_openset",
            "n_candidates",
            "n_selected",
            "timings_ms",
            "selected",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        for key in ["fingerprint", "screen", "score", "refine"] {
            assert!(v["timings_ms"].get(key).is_some());
        }
        assert_eq!(v["strategy"], "max");
        assert_eq!(v["n_selected"], 2);
        assert!(v["selected"][0].get("index").is_some());
        assert_eq!(r.indices_text().lines().count(), 2);
    }
}
