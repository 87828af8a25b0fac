use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use elastireg_core::amortizer::{
    checkpoint, moving_average, train_amortized, HyperNet, TrainingPair,
};
use elastireg_core::energy::TissuePreset;
use elastireg_core::io::{self, CaseSpec, Normalization};
use elastireg_core::metrics::evaluate;
use elastireg_core::phantom::{make_phantom, FieldFamily, Pattern, PhantomSpec};
use elastireg_core::registration::{register, LrSchedule, OptimizerConfig};
use elastireg_core::sweep::{
    enumerate_grid, refine_sweep, run_alpha_sweep, run_sweep, to_json, write_csv, AlphaRegularizer,
    Engine, Heuristic, SweepCase,
};
use elastireg_core::{ElasticityParams, Error, Objective, RawElasticity, Result};

use crate::{
    Cli, Command, CorpusArgs, EngineKind, EvaluateArgs, FieldKind, ObjectiveKind, OptimArgs,
    PairArgs, PatternKind, PhantomArgs, RegisterArgs, ScheduleKind, SweepArgs, TrainArgs,
};

pub fn report_error(e: &Error) -> ExitCode {
    let body = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
    eprintln!("{body}");
    ExitCode::FAILURE
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => phantom(a, cli.seed),
        Command::Register(a) => register_cmd(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Sweep(a) => sweep(a, cli.seed, cli.jobs),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Param(format!("json: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Param(format!("json: {e}")))?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn phantom_field(a: &PhantomArgs, nd: usize) -> Result<FieldFamily> {
    Ok(match a.field {
        FieldKind::Identity => FieldFamily::identity(),
        FieldKind::Bump => FieldFamily::bump(a.amplitude, a.sigma),
        FieldKind::Rotation => FieldFamily::Rotation { angle_deg: a.angle },
        FieldKind::Affine => {
            let mut linear = [[0.0; 3]; 3];
            if let Some(l) = &a.linear {
                if l.len() != nd * nd {
                    return Err(Error::Param(format!(
                        "--linear needs {} entries for a {nd}-D field, got {}",
                        nd * nd,
                        l.len()
                    )));
                }
                for i in 0..nd {
                    for j in 0..nd {
                        linear[i][j] = l[i * nd + j];
                    }
                }
            }
            let mut translation = [0.0; 3];
            if let Some(t) = &a.translation {
                if t.len() != nd {
                    return Err(Error::Param(format!(
                        "--translation needs {nd} entries, got {}",
                        t.len()
                    )));
                }
                translation[..nd].copy_from_slice(t);
            }
            FieldFamily::Affine {
                linear,
                translation,
            }
        }
    })
}

fn phantom(a: PhantomArgs, seed: u64) -> Result<()> {
    let nd = a.dims.len();
    let spacing = a.spacing.clone().unwrap_or_else(|| vec![1.0; nd]);
    let field = phantom_field(&a, nd)?;
    let pattern = match a.pattern {
        PatternKind::Blobs => Pattern::GaussianBlobs { count: a.blobs },
        PatternKind::Checker => Pattern::CheckerSmooth { period: a.period },
    };
    create_dir(&a.out)?;
    let mut written = Vec::new();
    for i in 0..a.count {
        let spec = PhantomSpec {
            dims: a.dims.clone(),
            spacing: spacing.clone(),
            pattern: pattern.clone(),
            field: field.clone(),
            seed: seed.wrapping_add(i as u64),
            allow_folding: a.allow_folding,
        };
        let ph = make_phantom(&spec)?;
        let dir = a.out.join(format!("case_{i:03}"));
        let cfg = io::write_phantom_case(&dir, &ph)?;
        write_json(&dir.join("phantom.json"), &spec)?;
        written.push(cfg);
    }
    print_json(&json!({ "cases": written }))
}

fn load_pair(p: &PairArgs) -> Result<SweepCase> {
    match (&p.case, &p.fixed, &p.moving) {
        (Some(cfg), _, _) => io::load_case(cfg),
        (None, Some(f), Some(m)) => {
            let mut spec = CaseSpec::new(f.clone(), m.clone());
            if p.raw_intensities {
                spec.normalization = Normalization::None;
            }
            spec.load()
        }
        _ => Err(Error::Param(
            "give --case or both --fixed and --moving".into(),
        )),
    }
}

fn optimizer(o: &OptimArgs, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: o.lr,
        steps: o.steps,
        pyramid_levels: o.levels,
        schedule: schedule(o.schedule),
        seed,
        ..OptimizerConfig::default()
    }
}

fn schedule(s: ScheduleKind) -> LrSchedule {
    match s {
        ScheduleKind::Constant => LrSchedule::Constant,
        ScheduleKind::Cosine => LrSchedule::Cosine,
    }
}

fn objective(a: &RegisterArgs) -> Result<Objective> {
    let obj = match a.objective {
        ObjectiveKind::Absorbed => Objective::absorbed(ElasticityParams::new(a.lambda, a.mu)?),
        ObjectiveKind::Elastic => {
            let params = match &a.preset {
                Some(name) => TissuePreset::from_name(name)
                    .ok_or_else(|| Error::Param(format!("unknown preset `{name}`")))?
                    .params()
                    .scaled(a.preset_scale),
                None => RawElasticity::new(a.lambda, a.mu)?,
            };
            Objective::weighted_elastic(a.alpha, params)?
        }
        ObjectiveKind::Diffusion => Objective::diffusion(a.alpha)?,
    };
    Ok(obj.with_window(a.window))
}

fn register_cmd(a: RegisterArgs, seed: u64) -> Result<()> {
    let case = load_pair(&a.pair)?;
    let obj = objective(&a)?;
    let cfg = optimizer(&a.optim, seed);
    let res = register(&case.fixed, &case.moving, &obj, &cfg)?;
    let metrics = evaluate(&res.field, &case.eval)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        io::save_field(&out.join("field.rvol"), &res.field)?;
        write_json(
            &out.join("result.json"),
            &json!({
                "objective": obj,
                "optimizer": cfg,
                "final_terms": res.final_terms,
                "metrics": metrics,
                "loss_trace": res.loss_trace,
            }),
        )?;
    }
    print_json(&metrics)
}

fn corpus_cases(c: &CorpusArgs) -> Result<Vec<SweepCase>> {
    let mut paths: Vec<PathBuf> = Vec::new();
    if let Some(dir) = &c.corpus {
        let entries = fs::read_dir(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path().join("case.cfg"))
            .filter(|p| p.is_file())
            .collect();
        found.sort();
        paths.extend(found);
    }
    paths.extend(c.cases.iter().cloned());
    if paths.is_empty() {
        return Err(Error::Param("no cases: give --corpus or --case".into()));
    }
    paths.iter().map(|p| io::load_case(p)).collect()
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let cases = corpus_cases(&a.corpus)?;
    let ndim = cases[0].fixed.domain().ndim();
    let pairs: Vec<TrainingPair> = cases
        .into_iter()
        .map(|c| TrainingPair {
            fixed: c.fixed,
            moving: c.moving,
        })
        .collect();
    let hyper = HyperNet::new(ndim, seed)?.with_max_displacement(a.max_displacement)?;
    let cfg = OptimizerConfig {
        learning_rate: a.lr,
        steps: a.steps,
        schedule: schedule(a.schedule),
        seed,
        ..OptimizerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = train_amortized(&pairs, &hyper, &cfg, &mut rng)?;
    checkpoint::save(&run.hyper, &a.out)?;
    let ma = moving_average(&run.loss_trace, 50);
    if let Some(t) = &a.trace {
        write_json(
            t,
            &json!({ "loss": run.loss_trace, "moving_average_50": ma }),
        )?;
    }
    let first_full = ma[ma.len().min(50) - 1];
    print_json(&json!({
        "model": a.out,
        "steps": a.steps,
        "pairs": pairs.len(),
        "moving_average_start": first_full,
        "moving_average_end": ma.last(),
    }))
}

fn default_heuristics(cases: &[SweepCase]) -> Vec<Heuristic> {
    let mut out = Vec::new();
    if cases.iter().all(|c| c.eval.has_labels()) {
        out.push(Heuristic::MaxDice);
    }
    if cases.iter().all(|c| c.eval.has_keypoints()) {
        out.push(Heuristic::MinTre);
    }
    out
}

fn write_report(dir: &Path, stem: &str, report: &elastireg_core::sweep::SweepReport) -> Result<()> {
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, to_json(report)? + "\n").map_err(|e| Error::Io {
        path: json_path,
        source: e,
    })?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let f = fs::File::create(&csv_path).map_err(|e| Error::Io {
        path: csv_path,
        source: e,
    })?;
    write_csv(report, f)
}

fn sweep(a: SweepArgs, seed: u64, jobs: usize) -> Result<()> {
    let cases = corpus_cases(&a.corpus)?;
    create_dir(&a.out)?;
    let cfg = optimizer(&a.optim, seed);

    if a.alpha_presets {
        let regs = AlphaRegularizer::presets_with_downscaling();
        let recs = run_alpha_sweep(&cases, &regs, &a.alphas, &cfg, jobs)?;
        write_json(&a.out.join("alpha.json"), &recs)?;
        let mut csv = String::from("regularizer,alpha,dice_mean,tre_mean_mm,neg_jac_fraction\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &recs {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.regularizer,
                r.alpha,
                opt(r.metrics.dice_mean),
                opt(r.metrics.tre_mean_mm),
                r.metrics.neg_jac_fraction
            ));
        }
        let path = a.out.join("alpha.csv");
        fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
        return print_json(&json!({ "records": recs.len() }));
    }

    let heuristics: Vec<Heuristic> = if a.heuristics.is_empty() {
        default_heuristics(&cases)
    } else {
        a.heuristics
            .iter()
            .map(|h| h.parse())
            .collect::<Result<_>>()?
    };
    let kind = if a.amortized {
        EngineKind::Amortized
    } else {
        a.engine
    };
    let model;
    let engine = match kind {
        EngineKind::Instance => Engine::Instance(cfg),
        EngineKind::Amortized => {
            let path = a
                .model
                .as_ref()
                .ok_or_else(|| Error::Param("the amortized engine needs --model".into()))?;
            model = checkpoint::load(path)?;
            Engine::Amortized(&model)
        }
    };
    let grid = enumerate_grid(a.resolution)?;
    let report = run_sweep(&cases, &grid, &engine, &heuristics, jobs)?;
    write_report(&a.out, "sweep", &report)?;
    let mut selected = json!({ "sweep": report.selected });
    if a.refine {
        let h = heuristics
            .first()
            .ok_or_else(|| Error::Param("--refine needs a heuristic".into()))?;
        let fine = refine_sweep(&cases, &report, h, &engine, jobs)?;
        write_report(&a.out, "refine", &fine)?;
        selected["refine"] = json!(fine.selected);
    }
    print_json(&selected)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let case = load_pair(&a.pair)?;
    let field = io::load_field(&a.field)?;
    if case.fixed.domain() != field.domain() {
        return Err(Error::Shape(format!(
            "field grid {:?} does not match the case grid {:?}",
            field.domain().dims(),
            case.fixed.domain().dims()
        )));
    }
    print_json(&evaluate(&field, &case.eval)?)
}
