//! Synthetic clustered embeddings, the exhaustive oracle, and the
//! speed-versus-quality comparison between sampling strategies.
//!
//! Cluster prototypes are random sign patterns scaled to unit norm, so cluster
//! identity is visible to sign binarization. `cluster_spread` is the standard
//! deviation of the per-coordinate Gaussian noise added before renormalizing;
//! larger spreads flip more signature bits and push more cross-cluster false
//! positives through the filter.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding_io::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::sampler::{
    self, build_fingerprint, score_and_refine, screen_with, Aggregation, CandidateSet,
    CoresetSelection, SamplerConfig, StageTimings,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub num_clusters: usize,
    /// Open-set rows per cluster.
    pub points_per_cluster: usize,
    /// Clusters the downstream set is drawn from.
    pub downstream_clusters: Vec<usize>,
    pub downstream_count: usize,
    pub cluster_spread: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dim: 64,
            num_clusters: 10,
            points_per_cluster: 1000,
            downstream_clusters: vec![0, 1],
            downstream_count: 500,
            cluster_spread: 0.1,
            rng_seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.num_clusters == 0 {
            return fail("num_clusters must be positive".into());
        }
        if self.dim < 64 && (self.num_clusters as u64) > (1u64 << self.dim) {
            return fail(format!(
                "{} clusters cannot have distinct {}-bit prototypes",
                self.num_clusters, self.dim
            ));
        }
        if self.downstream_clusters.is_empty() {
            return fail("downstream_clusters must not be empty".into());
        }
        if let Some(c) = self
            .downstream_clusters
            .iter()
            .find(|&&c| c >= self.num_clusters)
        {
            return fail(format!(
                "downstream cluster {c} >= num_clusters {}",
                self.num_clusters
            ));
        }
        if self.downstream_count == 0 {
            return fail("downstream_count must be positive".into());
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return fail(format!(
                "cluster_spread {} must be positive",
                self.cluster_spread
            ));
        }
        Ok(())
    }

    pub fn n_openset(&self) -> usize {
        self.num_clusters * self.points_per_cluster
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SyntheticSpec =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bench spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub downstream: EmbeddingMatrix,
    pub openset: EmbeddingMatrix,
    /// Cluster id of every open-set row.
    pub labels: Vec<usize>,
    pub downstream_labels: Vec<usize>,
}

/// Distinct random sign patterns of magnitude `1/sqrt(dim)`.
pub fn prototypes(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    let scale = 1.0 / (spec.dim as f32).sqrt();
    let mut seen: HashSet<Vec<bool>> = HashSet::with_capacity(spec.num_clusters);
    let mut out = Vec::with_capacity(spec.num_clusters);
    while out.len() < spec.num_clusters {
        let signs: Vec<bool> = (0..spec.dim).map(|_| rng.random::<bool>()).collect();
        if seen.insert(signs.clone()) {
            out.push(
                signs
                    .iter()
                    .map(|&s| if s { scale } else { -scale })
                    .collect(),
            );
        }
    }
    out
}

/// `prototype` plus isotropic Gaussian noise, not yet renormalized.
pub fn sample_point(
    prototype: &[f32],
    noise: &Normal<f64>,
    rng: &mut impl Rng,
    out: &mut Vec<f32>,
) {
    out.extend(
        prototype
            .iter()
            .map(|&p| (f64::from(p) + noise.sample(rng)) as f32),
    );
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let protos = prototypes(spec, &mut rng);
    let noise = Normal::new(0.0, spec.cluster_spread)
        .map_err(|e| Error::Config(format!("cluster_spread: {e}")))?;

    let n_u = spec.n_openset();
    let labels: Vec<usize> = (0..n_u).map(|r| r % spec.num_clusters).collect();
    let mut data = Vec::with_capacity(n_u * spec.dim);
    for &c in &labels {
        sample_point(&protos[c], &noise, &mut rng, &mut data);
    }
    let openset = EmbeddingMatrix::new(n_u, spec.dim, data)?.normalize()?;

    let downstream_labels: Vec<usize> = (0..spec.downstream_count)
        .map(|r| spec.downstream_clusters[r % spec.downstream_clusters.len()])
        .collect();
    let mut data = Vec::with_capacity(spec.downstream_count * spec.dim);
    for &c in &downstream_labels {
        sample_point(&protos[c], &noise, &mut rng, &mut data);
    }
    let downstream = EmbeddingMatrix::new(spec.downstream_count, spec.dim, data)?.normalize()?;

    Ok(SyntheticData {
        downstream,
        openset,
        labels,
        downstream_labels,
    })
}

/// Exhaustive top-k over every open-set row, no filter involved.
pub fn oracle_coreset(
    downstream: &EmbeddingMatrix,
    openset: &EmbeddingMatrix,
    budget_count: usize,
    strategy: Aggregation,
) -> Result<CoresetSelection> {
    oracle_coreset_with(
        Exec::for_threads(None),
        downstream,
        openset,
        budget_count,
        strategy,
    )
    .map(|(sel, _, _)| sel)
}

/// As [`oracle_coreset`], also returning score and refine wall times in ms.
pub fn oracle_coreset_with(
    exec: Exec,
    downstream: &EmbeddingMatrix,
    openset: &EmbeddingMatrix,
    budget_count: usize,
    strategy: Aggregation,
) -> Result<(CoresetSelection, f64, f64)> {
    if downstream.is_empty() {
        return Err(Error::EmptyInput("downstream set has no rows"));
    }
    score_and_refine(
        exec,
        downstream,
        &CandidateSet::all(openset),
        budget_count,
        strategy,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchStrategy {
    /// Filter screening followed by exact top-k.
    BloomTopk,
    /// Filter screening followed by a uniform draw from the candidates.
    BloomOnly,
    /// Uniform draw from the whole open-set.
    Random,
    /// Exact top-k over the whole open-set.
    Exhaustive,
}

impl BenchStrategy {
    pub const ALL: [BenchStrategy; 4] = [
        BenchStrategy::BloomTopk,
        BenchStrategy::BloomOnly,
        BenchStrategy::Random,
        BenchStrategy::Exhaustive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchStrategy::BloomTopk => "bloom_topk",
            BenchStrategy::BloomOnly => "bloom_only",
            BenchStrategy::Random => "random",
            BenchStrategy::Exhaustive => "exhaustive",
        }
    }
}

impl fmt::Display for BenchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: BenchStrategy,
    pub n_selected: usize,
    pub wall_ms: StageTimings,
    pub total_ms: f64,
    pub precision_vs_oracle: f64,
    pub recall_vs_oracle: f64,
    pub in_distribution_fraction: f64,
    /// Selected open-set indices, ascending.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: SyntheticSpec,
    pub aggregation: Aggregation,
    pub budget_fraction: f64,
    pub budget_count: usize,
    pub n_downstream: usize,
    pub n_openset: usize,
    pub n_candidates: usize,
    pub filter_size: usize,
    pub filter_fpr_estimate: f64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, strategy: BenchStrategy) -> &BenchRow {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy)
            .expect("every strategy is benchmarked")
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timings(&self) -> BenchReport {
        let mut out = self.clone();
        for row in &mut out.rows {
            row.wall_ms = StageTimings::default();
            row.total_ms = 0.0;
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,n_selected,fingerprint_ms,screen_ms,score_ms,refine_ms,total_ms,\
             precision_vs_oracle,recall_vs_oracle,in_distribution_fraction\n",
        );
        for r in &self.rows {
            let t = &r.wall_ms;
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.6},{:.6},{:.6}",
                r.strategy,
                r.n_selected,
                t.fingerprint,
                t.screen,
                t.score,
                t.refine,
                r.total_ms,
                r.precision_vs_oracle,
                r.recall_vs_oracle,
                r.in_distribution_fraction
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "N_X={} N_U={} N_M={} budget={} ({}) agg={} filter m={} est.fpr={:.4}",
            self.n_downstream,
            self.n_openset,
            self.n_candidates,
            self.budget_count,
            self.budget_fraction,
            self.aggregation,
            self.filter_size,
            self.filter_fpr_estimate
        );
        let _ = writeln!(
            out,
            "{:<11} {:>8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9}",
            "strategy",
            "selected",
            "fp_ms",
            "screen_ms",
            "score_ms",
            "refine_ms",
            "total_ms",
            "precision",
            "recall",
            "in_dist"
        );
        for r in &self.rows {
            let t = &r.wall_ms;
            let _ = writeln!(
                out,
                "{:<11} {:>8} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>9.4} {:>9.4} {:>9.4}",
                r.strategy.as_str(),
                r.n_selected,
                t.fingerprint,
                t.screen,
                t.score,
                t.refine,
                r.total_ms,
                r.precision_vs_oracle,
                r.recall_vs_oracle,
                r.in_distribution_fraction
            );
        }
        out
    }
}

/// Generates the data and runs every strategy on it, one after another.
pub fn run_bench(spec: &SyntheticSpec, config: &SamplerConfig) -> Result<BenchReport> {
    let data = generate(spec)?;
    run_bench_on(spec, &data, config)
}

/// [`run_bench`] on data generated beforehand.
pub fn run_bench_on(
    spec: &SyntheticSpec,
    data: &SyntheticData,
    config: &SamplerConfig,
) -> Result<BenchReport> {
    config.validate()?;
    let n_u = data.openset.count();
    let budget = config.budget_count(n_u);
    let in_dist: HashSet<usize> = spec.downstream_clusters.iter().copied().collect();

    let (oracle, oracle_score, oracle_refine) = par::install(config.threads, |exec| {
        oracle_coreset_with(
            exec,
            &data.downstream,
            &data.openset,
            budget,
            config.aggregation,
        )
    })?;
    let oracle_set: HashSet<usize> = oracle.indices().into_iter().collect();

    let mut rows = Vec::with_capacity(4);
    let make_row = |strategy, mut selected: Vec<usize>, wall_ms: StageTimings| {
        selected.sort_unstable();
        let hits = selected.iter().filter(|i| oracle_set.contains(i)).count();
        let in_d = selected
            .iter()
            .filter(|&&i| in_dist.contains(&data.labels[i]))
            .count();
        let frac = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        BenchRow {
            strategy,
            n_selected: selected.len(),
            total_ms: wall_ms.total(),
            wall_ms,
            precision_vs_oracle: frac(hits, selected.len()),
            recall_vs_oracle: frac(hits, oracle_set.len()),
            in_distribution_fraction: frac(in_d, selected.len()),
            selected,
        }
    };

    let topk = sampler::sample_coreset(&data.downstream, &data.openset, config)?;
    rows.push(make_row(
        BenchStrategy::BloomTopk,
        topk.indices(),
        topk.timings_ms,
    ));

    // bloom_only: same screening, then a seeded uniform draw from the candidates
    let (filter, candidates, fp_ms, screen_ms) = par::install(config.threads, |exec| {
        let t = Instant::now();
        let filter = build_fingerprint(&data.downstream, config)?;
        let fp_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let candidates = screen_with(exec, &data.openset, &filter)?
            .indices()
            .to_vec();
        Ok::<_, Error>((filter, candidates, fp_ms, t.elapsed().as_secs_f64() * 1e3))
    })?;
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates { n_openset: n_u });
    }
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0xb100_0001);
    let take = budget.min(candidates.len());
    let bloom_only: Vec<usize> = index::sample(&mut rng, candidates.len(), take)
        .into_iter()
        .map(|p| candidates[p])
        .collect();
    let draw_ms = t.elapsed().as_secs_f64() * 1e3;
    rows.push(make_row(
        BenchStrategy::BloomOnly,
        bloom_only,
        StageTimings {
            fingerprint: fp_ms,
            screen: screen_ms,
            score: 0.0,
            refine: draw_ms,
        },
    ));

    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x0a4d_0002);
    let random: Vec<usize> = index::sample(&mut rng, n_u, budget.min(n_u)).into_vec();
    let draw_ms = t.elapsed().as_secs_f64() * 1e3;
    rows.push(make_row(
        BenchStrategy::Random,
        random,
        StageTimings {
            refine: draw_ms,
            ..StageTimings::default()
        },
    ));

    rows.push(make_row(
        BenchStrategy::Exhaustive,
        oracle.indices(),
        StageTimings {
            score: oracle_score,
            refine: oracle_refine,
            ..StageTimings::default()
        },
    ));

    let stats = filter.stats();
    Ok(BenchReport {
        spec: spec.clone(),
        aggregation: config.aggregation,
        budget_fraction: config.budget_fraction,
        budget_count: budget,
        n_downstream: data.downstream.count(),
        n_openset: n_u,
        n_candidates: candidates.len(),
        filter_size: stats.size,
        filter_fpr_estimate: stats.fpr_estimate,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_io::binarize;

    fn tiny_spec(spread: f64) -> SyntheticSpec {
        SyntheticSpec {
            dim: 32,
            num_clusters: 6,
            points_per_cluster: 50,
            downstream_clusters: vec![1, 4],
            downstream_count: 40,
            cluster_spread: spread,
            rng_seed: 11,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec::default().validate().is_ok());
        let bad = [
            SyntheticSpec {
                downstream_clusters: vec![],
                ..Default::default()
            },
            SyntheticSpec {
                downstream_clusters: vec![10],
                ..Default::default()
            },
            SyntheticSpec {
                cluster_spread: 0.0,
                ..Default::default()
            },
            SyntheticSpec {
                dim: 2,
                num_clusters: 5,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
        assert!(SyntheticSpec::from_json(r#"{"dim": 8, "bogus": 1}"#).is_err());
        assert_eq!(
            SyntheticSpec::from_json("{}").unwrap(),
            SyntheticSpec::default()
        );
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(&tiny_spec(0.05)).unwrap();
        let b = generate(&tiny_spec(0.05)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SyntheticSpec {
            rng_seed: 12,
            ..tiny_spec(0.05)
        })
        .unwrap();
        assert_ne!(a.openset, c.openset);
    }

    #[test]
    fn noise_free_points_carry_prototype_signature() {
        let spec = tiny_spec(1e-7);
        let data = generate(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let protos = prototypes(&spec, &mut rng);
        for (i, &c) in data.labels.iter().enumerate() {
            assert_eq!(data.openset.signature(i), binarize(&protos[c]));
        }
        for (i, &c) in data.downstream_labels.iter().enumerate() {
            assert_eq!(data.downstream.signature(i), binarize(&protos[c]));
        }
    }

    #[test]
    fn opposite_prototypes_differ_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = tiny_spec(1e-6);
        let p = prototypes(&spec, &mut rng).remove(0);
        let q: Vec<f32> = p.iter().map(|v| -v).collect();
        let noise = Normal::new(0.0, spec.cluster_spread).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        sample_point(&p, &noise, &mut rng, &mut a);
        sample_point(&q, &noise, &mut rng, &mut b);
        let (sa, sb) = (binarize(&a), binarize(&b));
        assert!((0..spec.dim).all(|j| sa.bit(j) != sb.bit(j)));
    }

    #[test]
    fn oracle_hand_enumerated() {
        // 5 x 20 instance: candidate j sits at angle theta_j from e0 in the plane,
        // downstream rows are tilted copies; max aggregate is hand-checkable.
        let dim = 4;
        let down: Vec<[f32; 4]> = vec![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.6, 0.8, 0.0, 0.0],
        ];
        let mut open: Vec<[f32; 4]> = vec![[0.0, 0.0, -1.0, 0.0]; 20];
        open[13] = [0.6, 0.8, 0.0, 0.0]; // 1.0 against row 4
        open[2] = [0.0, 0.0, 0.0, 1.0]; // 1.0 against row 3
        open[7] = [0.8, 0.6, 0.0, 0.0]; // 0.96 against row 4
        open[19] = [0.0, 0.0, 0.6, 0.8]; // 0.8
        let x = EmbeddingMatrix::from_rows(dim, &down).unwrap();
        let u = EmbeddingMatrix::from_rows(dim, &open).unwrap();
        let sel = oracle_coreset(&x, &u, 3, Aggregation::Max).unwrap();
        assert_eq!(sel.indices(), vec![2, 13, 7]);
    }

    #[test]
    fn bench_rows_and_invariants() {
        let spec = tiny_spec(0.05);
        let config = SamplerConfig {
            budget_fraction: 0.05,
            ..Default::default()
        };
        let r = run_bench(&spec, &config).unwrap();
        assert_eq!(r.rows.len(), 4);
        let ex = r.row(BenchStrategy::Exhaustive);
        assert_eq!(ex.precision_vs_oracle, 1.0);
        assert_eq!(ex.recall_vs_oracle, 1.0);
        for row in &r.rows {
            assert!((0.0..=1.0).contains(&row.precision_vs_oracle));
            assert!((0.0..=1.0).contains(&row.recall_vs_oracle));
            assert!(row.n_selected <= r.budget_count);
        }
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 4);
        assert_eq!(r.to_csv().lines().count(), 5);
        assert!(r.to_table().contains("bloom_topk"));
    }

    #[test]
    fn noise_free_bloom_equals_oracle() {
        let spec = tiny_spec(1e-7);
        for agg in Aggregation::ALL {
            let config = SamplerConfig {
                budget_fraction: 0.1,
                aggregation: agg,
                ..Default::default()
            };
            let r = run_bench(&spec, &config).unwrap();
            let topk = r.row(BenchStrategy::BloomTopk);
            assert_eq!(topk.precision_vs_oracle, 1.0, "{agg}");
            assert_eq!(topk.recall_vs_oracle, 1.0, "{agg}");
        }
    }
}
