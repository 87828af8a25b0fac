//! Grid search over `(λ_α, μ_α)` and selection of data-specific optima.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amortizer::{predict_field, HyperNet};
use crate::energy::{ElasticityParams, Objective, RawElasticity, TissuePreset, DEFAULT_NCC_WINDOW};
use crate::error::{Error, Result};
use crate::grid::{DisplacementField, ScalarGrid};
use crate::metrics::{evaluate, EvalData, MetricsReport};
use crate::registration::{fit_window, register, register_pair, OptimizerConfig};

/// One grid point. Coordinates are exact multiples `i/n` of the resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Combo {
    pub lambda: f64,
    pub mu: f64,
}

impl Combo {
    pub fn total(&self) -> f64 {
        self.lambda + self.mu
    }

    pub fn params(&self) -> Result<ElasticityParams> {
        ElasticityParams::new(self.lambda, self.mu)
    }

    fn cmp_lex(&self, other: &Combo) -> Ordering {
        self.lambda
            .total_cmp(&other.lambda)
            .then(self.mu.total_cmp(&other.mu))
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(λ={}, μ={})", self.lambda, self.mu)
    }
}

/// Feasible lattice points, sorted lexicographically by `(λ_α, μ_α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub resolution: f64,
    pub combos: Vec<Combo>,
}

impl ParamGrid {
    pub fn len(&self) -> usize {
        self.combos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }

    /// Grid from arbitrary feasible combos, sorted and deduplicated.
    pub fn from_combos(resolution: f64, mut combos: Vec<Combo>) -> Result<Self> {
        for c in &combos {
            c.params()?;
        }
        combos.sort_by(Combo::cmp_lex);
        combos.dedup();
        Ok(Self { resolution, combos })
    }

    /// Second-pass grid at `resolution / 5` covering one first-pass cell in
    /// every direction around `center`.
    pub fn refined_around(&self, center: Combo) -> Result<Self> {
        let n = steps_per_unit(self.resolution)?;
        let fine = 5 * n;
        let ci = (center.lambda * fine as f64).round() as i64;
        let cj = (center.mu * fine as f64).round() as i64;
        let mut combos = Vec::new();
        for di in -5..=5i64 {
            for dj in -5..=5i64 {
                let (i, j) = (ci + di, cj + dj);
                if i >= 0 && j >= 0 && i + j <= fine as i64 {
                    combos.push(Combo {
                        lambda: i as f64 / fine as f64,
                        mu: j as f64 / fine as f64,
                    });
                }
            }
        }
        Self::from_combos(self.resolution / 5.0, combos)
    }
}

fn steps_per_unit(resolution: f64) -> Result<usize> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::Param(format!(
            "grid resolution must lie in (0, 1], got {resolution}"
        )));
    }
    let n = (1.0 / resolution).round();
    if ((1.0 / resolution) - n).abs() > 1e-9 * n {
        return Err(Error::Param(format!(
            "grid resolution {resolution} does not divide 1"
        )));
    }
    Ok(n as usize)
}

/// All `(i/n, j/n)` with `i + j ≤ n`, where `n = 1 / resolution`.
pub fn enumerate_grid(resolution: f64) -> Result<ParamGrid> {
    let n = steps_per_unit(resolution)?;
    let mut combos = Vec::with_capacity((n + 1) * (n + 2) / 2);
    for i in 0..=n {
        for j in 0..=n - i {
            combos.push(Combo {
                lambda: i as f64 / n as f64,
                mu: j as f64 / n as f64,
            });
        }
    }
    Ok(ParamGrid { resolution, combos })
}

/// Selection criterion over aggregated metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Heuristic {
    MaxDice,
    MinTre,
    /// Maximize `dice·w_dice − tre·w_tre − neg_jac·w_neg_jac`.
    Weighted {
        dice: f64,
        tre: f64,
        neg_jac: f64,
    },
}

impl Heuristic {
    pub fn weighted(dice: f64, tre: f64, neg_jac: f64) -> Result<Self> {
        let w = [dice, tre, neg_jac];
        if w.iter().any(|x| !x.is_finite()) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Param(format!(
                "heuristic weights must be finite with at least one nonzero, got {w:?}"
            )));
        }
        Ok(Heuristic::Weighted { dice, tre, neg_jac })
    }

    pub fn name(&self) -> String {
        match self {
            Heuristic::MaxDice => "dice".into(),
            Heuristic::MinTre => "tre".into(),
            Heuristic::Weighted { dice, tre, neg_jac } => {
                format!("weighted:{dice},{tre},{neg_jac}")
            }
        }
    }

    pub fn needs_labels(&self) -> bool {
        match *self {
            Heuristic::MaxDice => true,
            Heuristic::MinTre => false,
            Heuristic::Weighted { dice, .. } => dice != 0.0,
        }
    }

    pub fn needs_keypoints(&self) -> bool {
        match *self {
            Heuristic::MaxDice => false,
            Heuristic::MinTre => true,
            Heuristic::Weighted { tre, .. } => tre != 0.0,
        }
    }

    /// Larger is better.
    pub fn score(&self, m: &MetricsReport) -> Result<f64> {
        let dice = || {
            m.dice_mean
                .ok_or_else(|| Error::Param("heuristic needs Dice but no labels were given".into()))
        };
        let tre = || {
            m.tre_mean_mm.ok_or_else(|| {
                Error::Param("heuristic needs TRE but no keypoints were given".into())
            })
        };
        Ok(match *self {
            Heuristic::MaxDice => dice()?,
            Heuristic::MinTre => -tre()?,
            Heuristic::Weighted {
                dice: wd,
                tre: wt,
                neg_jac: wn,
            } => {
                let d = if wd != 0.0 { wd * dice()? } else { 0.0 };
                let t = if wt != 0.0 { wt * tre()? } else { 0.0 };
                d - t - wn * m.neg_jac_fraction
            }
        })
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    /// `dice`, `tre`, or `weighted:<w_dice>,<w_tre>,<w_neg_jac>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(Heuristic::MaxDice),
            "tre" => Ok(Heuristic::MinTre),
            _ => {
                let rest = s
                    .strip_prefix("weighted:")
                    .ok_or_else(|| Error::Param(format!("unknown heuristic `{s}`")))?;
                let w: Vec<f64> = rest
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Param(format!("bad heuristic weights `{rest}`")))?;
                if w.len() != 3 {
                    return Err(Error::Param(format!(
                        "weighted heuristic takes 3 weights, got {}",
                        w.len()
                    )));
                }
                Heuristic::weighted(w[0], w[1], w[2])
            }
        }
    }
}

/// How a field is obtained for each combo.
#[derive(Debug, Clone, Copy)]
pub enum Engine<'a> {
    Amortized(&'a HyperNet),
    Instance(OptimizerConfig),
}

impl Engine<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Amortized(_) => "amortized",
            Engine::Instance(_) => "instance",
        }
    }
}

/// An image pair plus the data used to score it.
#[derive(Debug, Clone)]
pub struct SweepCase {
    pub fixed: ScalarGrid,
    pub moving: ScalarGrid,
    pub eval: EvalData,
}

/// Result for one combo on one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub combo: Combo,
    pub pair: usize,
    pub loss: f64,
    pub dissimilarity: f64,
    pub regularization: f64,
    pub metrics: MetricsReport,
}

/// Mean over pairs for one combo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboSummary {
    pub combo: Combo,
    pub loss_mean: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub combo: Combo,
    pub score: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub engine: String,
    pub resolution: f64,
    pub pairs: usize,
    pub records: Vec<SweepRecord>,
    pub summary: Vec<ComboSummary>,
    pub selected: BTreeMap<String, Selection>,
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Param(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

fn run_combo(case: &SweepCase, combo: Combo, pair: usize, engine: &Engine) -> Result<SweepRecord> {
    let params = combo.params()?;
    let domain = case.fixed.domain();
    let objective = Objective::absorbed(params).with_window(fit_window(DEFAULT_NCC_WINDOW, domain));
    let field: DisplacementField = match engine {
        Engine::Amortized(h) => predict_field(h, params, domain)?,
        Engine::Instance(cfg) => register_pair(&case.fixed, &case.moving, params, cfg)?.field,
    };
    let terms = objective.evaluate(&case.fixed, &case.moving, &field)?;
    Ok(SweepRecord {
        combo,
        pair,
        loss: terms.value,
        dissimilarity: terms.dissimilarity,
        regularization: terms.regularization,
        metrics: evaluate(&field, &case.eval)?,
    })
}

/// Register every pair at every combo, aggregate per combo, and pick an
/// optimum for each heuristic.
///
/// `jobs` bounds the worker count (0 uses the global pool). Output order
/// follows the grid, then the pair index, regardless of scheduling.
pub fn run_sweep(
    cases: &[SweepCase],
    grid: &ParamGrid,
    engine: &Engine,
    heuristics: &[Heuristic],
    jobs: usize,
) -> Result<SweepReport> {
    if cases.is_empty() {
        return Err(Error::Param("sweep needs at least one image pair".into()));
    }
    if grid.is_empty() {
        return Err(Error::Param("sweep grid is empty".into()));
    }
    for h in heuristics {
        if h.needs_labels() && !cases.iter().all(|c| c.eval.has_labels()) {
            return Err(Error::Param(format!(
                "heuristic `{}` needs label maps for every pair",
                h.name()
            )));
        }
        if h.needs_keypoints() && !cases.iter().all(|c| c.eval.has_keypoints()) {
            return Err(Error::Param(format!(
                "heuristic `{}` needs keypoints for every pair",
                h.name()
            )));
        }
    }
    let tasks: Vec<(Combo, usize)> = grid
        .combos
        .iter()
        .flat_map(|&c| (0..cases.len()).map(move |p| (c, p)))
        .collect();
    let records: Vec<SweepRecord> = with_pool(jobs, || {
        tasks
            .par_iter()
            .map(|&(c, p)| run_combo(&cases[p], c, p, engine))
            .collect::<Result<Vec<_>>>()
    })??;

    let summary = records
        .chunks(cases.len())
        .map(|rs| {
            let metrics: Vec<MetricsReport> = rs.iter().map(|r| r.metrics.clone()).collect();
            Ok(ComboSummary {
                combo: rs[0].combo,
                loss_mean: rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64,
                metrics: MetricsReport::mean(&metrics)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = SweepReport {
        engine: engine.name().to_string(),
        resolution: grid.resolution,
        pairs: cases.len(),
        records,
        summary,
        selected: BTreeMap::new(),
    };
    for h in heuristics {
        let sel = select_optimum(&report, h)?;
        report.selected.insert(h.name(), sel);
    }
    Ok(report)
}

/// Totals within rounding of each other (such as `0.1 + 0.2` and `0.3`)
/// compare equal.
fn cmp_totals(a: &Combo, b: &Combo) -> Ordering {
    let (ta, tb) = (a.total(), b.total());
    if (ta - tb).abs() <= 1e-9 {
        Ordering::Equal
    } else {
        ta.total_cmp(&tb)
    }
}

/// Index of the best `(combo, score)`: highest score, ties going to the
/// larger `λ_α + μ_α`, then the larger `μ_α`.
pub fn best_index(scored: &[(Combo, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (c, s)) in scored.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (bc, bs) = &scored[b];
                s.total_cmp(bs)
                    .then(cmp_totals(c, bc))
                    .then(c.mu.total_cmp(&bc.mu))
                    == Ordering::Greater
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

pub fn select_optimum(report: &SweepReport, heuristic: &Heuristic) -> Result<Selection> {
    if report.summary.is_empty() {
        return Err(Error::Param("cannot select from an empty report".into()));
    }
    let scored = report
        .summary
        .iter()
        .map(|s| Ok((s.combo, heuristic.score(&s.metrics)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some((c, _)) = scored.iter().find(|(_, s)| s.is_nan()) {
        return Err(Error::Numeric {
            step: 0,
            what: format!("heuristic score at {c} is NaN"),
        });
    }
    let i = best_index(&scored).expect("non-empty");
    Ok(Selection {
        combo: scored[i].0,
        score: scored[i].1,
        metrics: report.summary[i].metrics.clone(),
    })
}

/// Optional second pass on a finer grid around the first-pass optimum.
pub fn refine_sweep(
    cases: &[SweepCase],
    first: &SweepReport,
    heuristic: &Heuristic,
    engine: &Engine,
    jobs: usize,
) -> Result<SweepReport> {
    let center = select_optimum(first, heuristic)?.combo;
    let coarse = ParamGrid {
        resolution: first.resolution,
        combos: Vec::new(),
    };
    let fine = coarse.refined_around(center)?;
    run_sweep(cases, &fine, engine, &[*heuristic], jobs)
}

pub const CSV_HEADER: [&str; 5] = [
    "lambda",
    "mu",
    "dice_mean",
    "tre_mean_mm",
    "neg_jac_fraction",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-combo summary as CSV; missing metrics are empty cells.
pub fn write_csv<W: Write>(report: &SweepReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::Param(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(wrap)?;
    for s in &report.summary {
        w.write_record([
            s.combo.lambda.to_string(),
            s.combo.mu.to_string(),
            opt(s.metrics.dice_mean),
            opt(s.metrics.tre_mean_mm),
            s.metrics.neg_jac_fraction.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::Param(format!("csv: {e}")))?;
    Ok(())
}

pub fn to_json(report: &SweepReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Param(format!("json: {e}")))
}

/// Regularizer setting for the fixed-parameter α ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlphaRegularizer {
    Elastic {
        label: String,
        params: RawElasticity,
    },
    Diffusion,
}

impl AlphaRegularizer {
    pub fn label(&self) -> String {
        match self {
            AlphaRegularizer::Elastic { label, .. } => label.clone(),
            AlphaRegularizer::Diffusion => "diffusion".into(),
        }
    }

    /// Every tissue preset at the scales `{1, 0.1, 0.01}`, plus diffusion.
    pub fn presets_with_downscaling() -> Vec<Self> {
        let mut out = Vec::new();
        for p in TissuePreset::ALL {
            for (tag, s) in [("", 1.0), ("*0.1", 0.1), ("*0.01", 0.01)] {
                out.push(AlphaRegularizer::Elastic {
                    label: format!("{}{tag}", p.name()),
                    params: p.params().scaled(s),
                });
            }
        }
        out.push(AlphaRegularizer::Diffusion);
        out
    }

    fn objective(&self, alpha: f64) -> Result<Objective> {
        match self {
            AlphaRegularizer::Elastic { params, .. } => Objective::weighted_elastic(alpha, *params),
            AlphaRegularizer::Diffusion => Objective::diffusion(alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub regularizer: String,
    pub alpha: f64,
    pub loss_mean: f64,
    pub metrics: MetricsReport,
}

/// Instance registration of every pair for each regularizer over a ladder of
/// global weights α, reporting metrics averaged over pairs.
pub fn run_alpha_sweep(
    cases: &[SweepCase],
    regularizers: &[AlphaRegularizer],
    alphas: &[f64],
    config: &OptimizerConfig,
    jobs: usize,
) -> Result<Vec<AlphaRecord>> {
    if cases.is_empty() {
        return Err(Error::Param("sweep needs at least one image pair".into()));
    }
    let tasks: Vec<(usize, f64)> = (0..regularizers.len())
        .flat_map(|r| alphas.iter().map(move |&a| (r, a)))
        .collect();
    with_pool(jobs, || {
        tasks
            .par_iter()
            .map(|&(r, alpha)| {
                let reg = &regularizers[r];
                let mut metrics = Vec::with_capacity(cases.len());
                let mut loss = 0.0;
                for case in cases {
                    let obj = reg.objective(alpha)?;
                    let res = register(&case.fixed, &case.moving, &obj, config)?;
                    loss += res.final_terms.loss;
                    metrics.push(evaluate(&res.field, &case.eval)?);
                }
                Ok(AlphaRecord {
                    regularizer: reg.label(),
                    alpha,
                    loss_mean: loss / cases.len() as f64,
                    metrics: MetricsReport::mean(&metrics)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amortizer::HyperNet;
    use crate::phantom::{make_phantom, FieldFamily, PhantomSpec};
    use proptest::prelude::*;

    fn report_from(values: &[(Combo, MetricsReport)]) -> SweepReport {
        SweepReport {
            engine: "test".into(),
            resolution: 0.1,
            pairs: 1,
            records: Vec::new(),
            summary: values
                .iter()
                .map(|(c, m)| ComboSummary {
                    combo: *c,
                    loss_mean: 0.0,
                    metrics: m.clone(),
                })
                .collect(),
            selected: BTreeMap::new(),
        }
    }

    fn metrics(dice: f64, tre: f64, neg: f64) -> MetricsReport {
        MetricsReport {
            dice_mean: Some(dice),
            dice_per_label: BTreeMap::new(),
            tre_mean_mm: Some(tre),
            tre_std_mm: Some(0.0),
            neg_jac_fraction: neg,
        }
    }

    #[test]
    fn grid_counts() {
        assert_eq!(enumerate_grid(0.1).unwrap().len(), 66);
        assert_eq!(enumerate_grid(0.5).unwrap().len(), 6);
        let g = enumerate_grid(1.0).unwrap();
        let pts: Vec<(f64, f64)> = g.combos.iter().map(|c| (c.lambda, c.mu)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0)]);
        for n in 1..=20usize {
            let expected: usize = (0..=n).map(|i| n - i + 1).sum();
            assert_eq!(enumerate_grid(1.0 / n as f64).unwrap().len(), expected);
        }
    }

    #[test]
    fn grid_is_sorted_and_feasible() {
        let g = enumerate_grid(0.1).unwrap();
        assert!(g
            .combos
            .windows(2)
            .all(|w| w[0].cmp_lex(&w[1]) == Ordering::Less));
        assert!(g.combos.iter().all(|c| c.params().is_ok()));
        assert!(g.combos.iter().any(|c| c.lambda == 0.3 && c.mu == 0.7));
    }

    #[test]
    fn non_divisor_resolutions_are_rejected() {
        for r in [0.3, 0.0, -0.1, 1.5, 0.15] {
            assert!(enumerate_grid(r).is_err(), "{r}");
        }
    }

    #[test]
    fn refined_grid_stays_feasible() {
        let g = enumerate_grid(0.1).unwrap();
        let fine = g
            .refined_around(Combo {
                lambda: 0.0,
                mu: 0.9,
            })
            .unwrap();
        assert!(fine.combos.iter().all(|c| c.params().is_ok()));
        assert!((fine.resolution - 0.02).abs() < 1e-15);
        assert!(fine.combos.contains(&Combo {
            lambda: 0.0,
            mu: 0.9
        }));
        assert!(fine.combos.contains(&Combo {
            lambda: 0.02,
            mu: 0.98
        }));
        assert!(!fine.combos.iter().any(|c| c.total() > 1.0 + 1e-12));
    }

    #[test]
    fn heuristic_parsing() {
        assert_eq!("dice".parse::<Heuristic>().unwrap(), Heuristic::MaxDice);
        assert_eq!("tre".parse::<Heuristic>().unwrap(), Heuristic::MinTre);
        assert_eq!(
            "weighted:1,0.5,2".parse::<Heuristic>().unwrap(),
            Heuristic::Weighted {
                dice: 1.0,
                tre: 0.5,
                neg_jac: 2.0
            }
        );
        assert!("weighted:0,0,0".parse::<Heuristic>().is_err());
        assert!("weighted:1,2".parse::<Heuristic>().is_err());
        assert!("psnr".parse::<Heuristic>().is_err());
    }

    #[test]
    fn unique_best_dice_is_selected() {
        let g = enumerate_grid(0.1).unwrap();
        let vals: Vec<_> = g
            .combos
            .iter()
            .map(|&c| {
                let d = if c
                    == (Combo {
                        lambda: 0.2,
                        mu: 0.0,
                    }) {
                    0.9
                } else {
                    0.5
                };
                (c, metrics(d, 1.0, 0.0))
            })
            .collect();
        let sel = select_optimum(&report_from(&vals), &Heuristic::MaxDice).unwrap();
        assert_eq!(
            sel.combo,
            Combo {
                lambda: 0.2,
                mu: 0.0
            }
        );
    }

    #[test]
    fn ties_go_to_stronger_regularization() {
        let g = enumerate_grid(0.1).unwrap();
        let vals: Vec<_> = g
            .combos
            .iter()
            .map(|&c| (c, metrics(0.7, 2.0, 0.0)))
            .collect();
        let sel = select_optimum(&report_from(&vals), &Heuristic::MaxDice).unwrap();
        assert_eq!(
            sel.combo,
            Combo {
                lambda: 0.0,
                mu: 1.0
            }
        );
    }

    #[test]
    fn hand_built_tre_report() {
        let vals = vec![
            (
                Combo {
                    lambda: 0.1,
                    mu: 0.1,
                },
                metrics(0.5, 3.0, 0.0),
            ),
            (
                Combo {
                    lambda: 0.4,
                    mu: 0.2,
                },
                metrics(0.5, 1.5, 0.0),
            ),
            (
                Combo {
                    lambda: 0.7,
                    mu: 0.0,
                },
                metrics(0.5, 2.5, 0.0),
            ),
        ];
        let sel = select_optimum(&report_from(&vals), &Heuristic::MinTre).unwrap();
        assert_eq!(
            sel.combo,
            Combo {
                lambda: 0.4,
                mu: 0.2
            }
        );
        assert_eq!(sel.score, -1.5);
    }

    #[test]
    fn empty_report_and_missing_metrics_are_errors() {
        assert!(select_optimum(&report_from(&[]), &Heuristic::MaxDice).is_err());
        let mut m = metrics(0.5, 1.0, 0.0);
        m.tre_mean_mm = None;
        let r = report_from(&[(
            Combo {
                lambda: 0.0,
                mu: 0.0,
            },
            m,
        )]);
        assert!(select_optimum(&r, &Heuristic::MinTre).is_err());
        assert!(select_optimum(&r, &Heuristic::MaxDice).is_ok());
    }

    /// Brute force on lattice indices: keep the lexicographic max of
    /// (score, i + j, j) for a combo `(i/10, j/10)`.
    fn brute_force(scored: &[(Combo, f64)]) -> Combo {
        let key = |c: &Combo| {
            let i = (c.lambda * 10.0).round() as i64;
            let j = (c.mu * 10.0).round() as i64;
            (i + j, j)
        };
        let mut all = scored.to_vec();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(key(&a.0).cmp(&key(&b.0))));
        all.last().unwrap().0
    }

    #[test]
    fn equal_totals_fall_back_to_mu_despite_rounding() {
        let scored = [
            (
                Combo {
                    lambda: 0.2,
                    mu: 0.1,
                },
                1.0,
            ),
            (
                Combo {
                    lambda: 0.0,
                    mu: 0.3,
                },
                1.0,
            ),
            (
                Combo {
                    lambda: 0.1,
                    mu: 0.1,
                },
                1.0,
            ),
        ];
        assert!(scored[0].0.total() > scored[1].0.total());
        assert_eq!(best_index(&scored), Some(1));
    }

    proptest! {
        #[test]
        fn selection_matches_brute_force(
            dice in proptest::collection::vec(0u8..4, 66),
            tre in proptest::collection::vec(0u8..4, 66),
            wd in 0.0f64..2.0, wt in 0.0f64..2.0, wn in 0.1f64..2.0,
        ) {
            let g = enumerate_grid(0.1).unwrap();
            let vals: Vec<_> = g.combos.iter().enumerate()
                .map(|(i, &c)| (c, metrics(dice[i] as f64 / 4.0, tre[i] as f64, 0.0)))
                .collect();
            let report = report_from(&vals);
            for h in [Heuristic::MaxDice, Heuristic::MinTre, Heuristic::weighted(wd, wt, wn).unwrap()] {
                let scored: Vec<_> = vals.iter().map(|(c, m)| (*c, h.score(m).unwrap())).collect();
                prop_assert_eq!(select_optimum(&report, &h).unwrap().combo, brute_force(&scored));
            }
        }

        #[test]
        fn selection_is_invariant_under_monotone_maps(
            scores in proptest::collection::vec(-5i32..5, 66),
            a in 0.1f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let g = enumerate_grid(0.1).unwrap();
            let base: Vec<(Combo, f64)> =
                g.combos.iter().zip(&scores).map(|(&c, &s)| (c, s as f64)).collect();
            let maps: [&dyn Fn(f64) -> f64; 3] = [
                &|x| a * x + b,
                &|x| (x / 2.0).exp(),
                &|x| x.powi(3) + x,
            ];
            let reference = best_index(&base);
            for f in maps {
                let mapped: Vec<_> = base.iter().map(|&(c, s)| (c, f(s))).collect();
                prop_assert_eq!(best_index(&mapped), reference);
            }
        }
    }

    fn identity_case(n: usize) -> SweepCase {
        let p = make_phantom(&PhantomSpec::new_2d(n, FieldFamily::identity(), 4)).unwrap();
        SweepCase {
            eval: p.eval_data(),
            fixed: p.fixed,
            moving: p.moving,
        }
    }

    #[test]
    fn identity_pair_scores_perfectly_with_a_zero_field() {
        let case = identity_case(16);
        let hyper = HyperNet::new(2, 1).unwrap();
        let grid = enumerate_grid(0.5).unwrap();
        let report = run_sweep(
            &[case],
            &grid,
            &Engine::Amortized(&hyper),
            &[Heuristic::MaxDice, Heuristic::MinTre],
            1,
        )
        .unwrap();
        assert_eq!(report.records.len(), 6);
        for s in &report.summary {
            assert_eq!(s.metrics.dice_mean, Some(1.0));
            assert_eq!(s.metrics.tre_mean_mm, Some(0.0));
        }
        assert_eq!(
            report.selected["dice"].combo,
            Combo {
                lambda: 0.0,
                mu: 1.0
            }
        );
    }

    #[test]
    fn instance_engine_on_identity_pair_including_the_boundary() {
        let case = identity_case(16);
        let grid = ParamGrid::from_combos(
            0.1,
            vec![
                Combo {
                    lambda: 0.5,
                    mu: 0.5,
                },
                Combo {
                    lambda: 0.1,
                    mu: 0.2,
                },
            ],
        )
        .unwrap();
        let cfg = OptimizerConfig {
            steps: 30,
            ..OptimizerConfig::instance()
        };
        let report = run_sweep(&[case], &grid, &Engine::Instance(cfg), &[], 2).unwrap();
        for s in &report.summary {
            assert!(s.metrics.dice_mean.unwrap() >= 0.99);
            assert!(s.metrics.tre_mean_mm.unwrap() < 0.05);
        }
    }

    #[test]
    fn record_count_and_order_independence() {
        let cases = vec![identity_case(12), identity_case(12)];
        let hyper = HyperNet::random(2, 3, 0.2).unwrap();
        let grid = enumerate_grid(0.25).unwrap();
        let a = run_sweep(&cases, &grid, &Engine::Amortized(&hyper), &[], 3).unwrap();
        assert_eq!(a.records.len(), grid.len() * 2);

        let mut rev = grid.clone();
        rev.combos.reverse();
        let b = run_sweep(&cases, &rev, &Engine::Amortized(&hyper), &[], 1).unwrap();
        for r in &a.records {
            assert!(b.records.contains(r));
        }
        assert_eq!(a.records.len(), b.records.len());
    }

    #[test]
    fn missing_eval_data_is_reported_up_front() {
        let mut case = identity_case(12);
        case.eval.fixed_keypoints = None;
        let hyper = HyperNet::new(2, 1).unwrap();
        let grid = enumerate_grid(1.0).unwrap();
        let err = run_sweep(
            &[case],
            &grid,
            &Engine::Amortized(&hyper),
            &[Heuristic::MinTre],
            1,
        );
        assert!(matches!(err, Err(Error::Param(_))));
    }

    #[test]
    fn csv_has_one_row_per_combo() {
        let case = identity_case(12);
        let hyper = HyperNet::new(2, 1).unwrap();
        let grid = enumerate_grid(0.1).unwrap();
        let report = run_sweep(&[case], &grid, &Engine::Amortized(&hyper), &[], 0).unwrap();
        let mut buf = Vec::new();
        write_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "lambda,mu,dice_mean,tre_mean_mm,neg_jac_fraction"
        );
        assert_eq!(lines.count(), 66);
        let json = to_json(&report).unwrap();
        let back: SweepReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn preset_ladder_contents() {
        let regs = AlphaRegularizer::presets_with_downscaling();
        assert_eq!(regs.len(), 13);
        let brock = regs
            .iter()
            .find(|r| r.label() == "lung-brock*0.01")
            .unwrap();
        match brock {
            AlphaRegularizer::Elastic { params, .. } => {
                assert!((params.lambda - 0.1551).abs() < 1e-12);
                assert!((params.mu - 0.0172).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn alpha_sweep_runs_on_a_small_case() {
        let case = identity_case(12);
        let cfg = OptimizerConfig {
            steps: 5,
            ..OptimizerConfig::instance()
        };
        let recs = run_alpha_sweep(
            &[case],
            &[AlphaRegularizer::Diffusion],
            &[0.0, 0.5, 1.0],
            &cfg,
            1,
        )
        .unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].alpha, 1.0);
    }
}
