use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use prefrank_core::bayesopt::{self, hapi_objective, BoConfig};
use prefrank_core::dataset::{
    enumerate_pairs, generate_pool, load_pool, preprocess, resolve_image, select_diverse, write_pool_images,
    write_records, CandidatePool, PoolConfig, PoolRecord,
};
use prefrank_core::emotion::Emotion;
use prefrank_core::face::{ActuatorVector, FaceSim};
use prefrank_core::imageio::write_image;
use prefrank_core::prefmodel::{build_labels, kfold_cv, train, CvReport, ImageBank, PairData, PreferenceModel, TrainConfig};
use prefrank_core::ranking::{annotate_with_latent, consistency_check, session_file_name, SortSession};
use prefrank_service::ServiceConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

use crate::cli::{
    AnnotateArgs, Cli, Command, GenPoolArgs, Mode, OptimizeArgs, ReportArgs, SelectArgs, ServeArgs, TrainArgs,
    UsageError,
};
use crate::manifest::{read_verified, read_verified_string, Recorder};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx { data_dir: cli.data_dir, sim: FaceSim::new(cli.dof, cli.sim_seed) };
    if cli.dof == 0 {
        return Err(UsageError("--dof must be positive".into()).into());
    }
    match cli.command {
        Command::GenPool(a) => gen_pool(&ctx, a),
        Command::Select(a) => select(&ctx, a),
        Command::Annotate(a) => annotate(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Optimize(a) => optimize(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Serve(a) => {
            let cfg = ServiceConfig {
                pool: a.pool.clone().unwrap_or_else(|| ctx.data_dir.join("subset.jsonl")),
                data_dir: a.sessions_dir.clone().unwrap_or_else(|| ctx.data_dir.join("sessions")),
                static_dir: a.static_dir.clone(),
            };
            serve(cfg, &a)
        }
    }
}

struct Ctx {
    data_dir: PathBuf,
    sim: FaceSim,
}

impl Ctx {
    fn sim_config(&self) -> serde_json::Value {
        json!({ "dof": self.sim.dof(), "sim_seed": self.sim.seed() })
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Loads a pool or subset manifest after checking it against upstream manifests.
fn load_manifest_pool(path: &Path) -> anyhow::Result<(CandidatePool, Vec<PoolRecord>)> {
    read_verified(path)?;
    load_pool(path).with_context(|| format!("loading {}", path.display()))
}

fn gen_pool(ctx: &Ctx, a: GenPoolArgs) -> anyhow::Result<()> {
    if a.count == 0 {
        return Err(UsageError("--count must be positive".into()).into());
    }
    let out = a.out.clone().unwrap_or_else(|| ctx.data_dir.clone());
    create_dir(&out)?;
    let cfg = PoolConfig { count: a.count, seed: a.seed, bo_fraction: a.bo_fraction, bo_budget: a.bo_budget };
    let mut rec = Recorder::start(&out, "gen-pool", &json!({ "pool": cfg, "sim": ctx.sim_config() }), Some(a.seed))?;
    info!(count = a.count, "rendering candidate pool");
    let pool = generate_pool(&ctx.sim, &cfg)?;
    let records = write_pool_images(&out, &pool)?;
    let manifest = out.join("pool.jsonl");
    write_records(&manifest, &records)?;
    rec.output(&manifest)?;
    rec.finish()?;
    println!("wrote {} images, manifest {}", records.len(), manifest.display());
    Ok(())
}

fn select(ctx: &Ctx, a: SelectArgs) -> anyhow::Result<()> {
    let pool_path = a.pool.clone().unwrap_or_else(|| ctx.data_dir.join("pool.jsonl"));
    let (pool, records) = load_manifest_pool(&pool_path)?;
    let pool_dir = pool_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let out = a.out.clone().unwrap_or_else(|| pool_dir.clone());
    create_dir(&out)?;
    let mut rec = Recorder::start(&out, "select", &json!({ "k": a.k }), None)?;
    rec.input(&pool_path)?;
    let subset = select_diverse(&pool, a.k)?;
    let same_dir = out.canonicalize()? == pool_dir.canonicalize()?;
    let chosen: Vec<PoolRecord> = records
        .iter()
        .filter(|r| subset.get(r.id).is_some())
        .map(|r| {
            let mut r = r.clone();
            if !same_dir {
                r.image_path = resolve_image(&pool_path, &r).canonicalize()?.to_string_lossy().into_owned();
            }
            Ok(r)
        })
        .collect::<anyhow::Result<_>>()?;
    let subset_path = out.join("subset.jsonl");
    write_records(&subset_path, &chosen)?;
    let pairs = enumerate_pairs(&subset);
    let pairs_path = out.join("pairs.csv");
    write_file(&pairs_path, pairs.to_csv())?;
    rec.output(&subset_path)?;
    rec.output(&pairs_path)?;
    rec.finish()?;
    println!("selected {} of {} images, {} pairs", subset.len(), pool.len(), pairs.len());
    Ok(())
}

fn check_annotator(id: &str) -> Result<(), UsageError> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
        return Err(UsageError(format!("annotator id {id:?} may only hold letters, digits, '_' and '.'")));
    }
    Ok(())
}

fn annotate(ctx: &Ctx, a: AnnotateArgs) -> anyhow::Result<()> {
    let subset_path = a.subset.clone().unwrap_or_else(|| ctx.data_dir.join("subset.jsonl"));
    let sessions_dir = a.sessions_dir.clone().unwrap_or_else(|| ctx.data_dir.join("sessions"));
    if a.mode == Mode::Human {
        read_verified(&subset_path)?;
        let cfg = ServiceConfig { pool: subset_path, data_dir: sessions_dir, static_dir: a.static_dir.clone() };
        return serve_on(cfg, &a.bind);
    }
    check_annotator(&a.annotator)?;
    let targets = a.emotions.targets()?;
    let (subset, _) = load_manifest_pool(&subset_path)?;
    create_dir(&sessions_dir)?;
    for e in targets {
        let path = sessions_dir.join(session_file_name(&a.annotator, e));
        let stage = format!("annotate-{}-{e}", a.annotator);
        let mut rec = Recorder::start(&sessions_dir, &stage, &json!({ "annotator": a.annotator, "emotion": e, "sim": ctx.sim_config() }), Some(a.seed))?;
        rec.input(&subset_path)?;
        let session = if path.exists() {
            if !a.resume {
                bail!("{} already exists; pass --resume to continue it", path.display());
            }
            let mut s = SortSession::from_jsonl(&read_verified_string(&path)?)?;
            if s.header().items != subset.ids() || s.emotion() != e {
                bail!("{} belongs to a different subset or emotion", path.display());
            }
            let latent: BTreeMap<u32, f64> = subset
                .entries()
                .iter()
                .map(|x| Ok((x.id, ctx.sim.latent_intensity(&x.actuators, e)?)))
                .collect::<prefrank_core::error::Result<_>>()?;
            s.run_with(|l, r| if latent[&l] > latent[&r] { l } else { r })?;
            s
        } else {
            annotate_with_latent(&ctx.sim, &subset, e, &a.annotator, a.seed)?
        };
        session.save(&path)?;
        rec.output(&path)?;
        rec.finish()?;
        let ranking = session.result().expect("synthetic sessions run to completion");
        println!(
            "{e}: {} comparisons, consistency {:.3}, {}",
            session.log().len(),
            consistency_check(ranking, session.log())?,
            path.display()
        );
    }
    Ok(())
}

fn session_files(dir: &Path, e: Emotion) -> anyhow::Result<Vec<PathBuf>> {
    let suffix = format!("-{e}.jsonl");
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("session-") && n.ends_with(&suffix)))
        .collect();
    out.sort();
    Ok(out)
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> anyhow::Result<()> {
    let targets = a.emotions.targets()?;
    let cfg = TrainConfig {
        learning_rate: a.learning_rate,
        weight_decay: a.weight_decay,
        momentum: a.momentum,
        epochs: a.epochs,
        batch_size: a.batch_size,
        patience: a.patience,
        seed: a.seed,
        hidden: a.hidden,
        sigmoid_scale: a.sigmoid_scale,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let subset_path = a.subset.clone().unwrap_or_else(|| ctx.data_dir.join("subset.jsonl"));
    let out = a.out.clone().unwrap_or_else(|| ctx.data_dir.join("models"));
    create_dir(&out)?;
    let (subset, _) = load_manifest_pool(&subset_path)?;
    let pre = subset
        .entries()
        .iter()
        .map(|e| Ok((e.id, preprocess(&e.image)?)))
        .collect::<prefrank_core::error::Result<Vec<_>>>()?;
    let refs: Vec<_> = pre.iter().map(|(id, p)| (*id, p)).collect();
    let bank = ImageBank::new(&refs)?;

    for e in targets {
        let mut rec = Recorder::start(&out, format!("train-{e}"), &json!({ "train": cfg, "folds": a.folds, "emotion": e }), Some(a.seed))?;
        rec.input(&subset_path)?;
        let files = if a.sessions.is_empty() { session_files(&ctx.data_dir.join("sessions"), e)? } else { a.sessions.clone() };
        let mut rankings = Vec::new();
        for f in &files {
            let s = SortSession::from_jsonl(&read_verified_string(f)?).with_context(|| format!("loading {}", f.display()))?;
            if s.emotion() != e {
                continue;
            }
            let Some(r) = s.result() else { bail!("{} is not complete", f.display()) };
            rankings.push(r.clone());
            rec.input(f)?;
        }
        if rankings.is_empty() {
            bail!("no completed {e} sessions found");
        }
        info!(emotion = %e, sessions = rankings.len(), folds = a.folds, "cross-validating");
        let cv = kfold_cv(e, &bank, &rankings, a.folds, &cfg)?;
        let labels = build_labels(&rankings, &enumerate_pairs(&subset))?;
        let data = PairData::new(&bank, &labels.labels)?;
        info!(emotion = %e, pairs = data.len(), "fitting final model on all pairs");
        let model = train(e, &data, None, &cfg)?.model;

        let model_path = out.join(format!("model-{e}.json"));
        model.save(&model_path)?;
        let cv_path = out.join(format!("cv-{e}.json"));
        write_file(&cv_path, serde_json::to_string_pretty(&cv)? + "\n")?;
        rec.output(&model_path)?;
        rec.output(&cv_path)?;
        rec.finish()?;
        let folds: Vec<String> = cv.folds.iter().map(|f| format!("{:.3}", f.accuracy)).collect();
        println!("{e}: mean pair accuracy {:.3} over {} folds [{}]", cv.mean_accuracy, a.folds, folds.join(", "));
    }
    Ok(())
}

/// Summary of one optimize run, read back by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub emotion: Emotion,
    pub seed: u64,
    pub budget: usize,
    pub bo_best_score: f64,
    /// Hidden intensity of the face the optimizer settled on.
    pub bo_incumbent_latent: f64,
    /// Best hidden intensity among the same number of Sobol samples.
    pub random_best_latent: f64,
    pub monotone: bool,
}

fn optimize(ctx: &Ctx, a: OptimizeArgs) -> anyhow::Result<()> {
    let out = a.out.clone().unwrap_or_else(|| ctx.data_dir.join("runs"));
    create_dir(&out)?;
    let jobs: Vec<(Emotion, PathBuf)> = match &a.model {
        Some(m) => vec![(PreferenceModel::from_json(&read_verified_string(m)?)?.target, m.clone())],
        None => a
            .emotions
            .targets()?
            .into_iter()
            .map(|e| (e, ctx.data_dir.join("models").join(format!("model-{e}.json"))))
            .collect(),
    };
    if a.budget == 0 {
        return Err(UsageError("--budget must be positive".into()).into());
    }
    let dim = ctx.sim.dof();
    for (e, model_path) in jobs {
        let model = PreferenceModel::from_json(&read_verified_string(&model_path)?)
            .with_context(|| format!("loading {}", model_path.display()))?;
        if model.target != e {
            bail!("{} scores {}, not {e}", model_path.display(), model.target);
        }
        for seed in a.seed..a.seed + a.runs {
            let bo = BoConfig { budget: a.budget, init: a.init, seed, ..Default::default() };
            let stage = format!("optimize-{e}-{seed}");
            let mut rec = Recorder::start(&out, &stage, &json!({ "bo": bo, "emotion": e, "sim": ctx.sim_config() }), Some(seed))?;
            rec.input(&model_path)?;
            info!(emotion = %e, seed, budget = a.budget, "optimizing");
            let (best, trace) = bayesopt::optimize(hapi_objective(&model, &ctx.sim), dim, &bo)?;
            let latent = |x: &[f64]| {
                ActuatorVector::new(x.to_vec()).and_then(|v| ctx.sim.latent_intensity(&v, e)).unwrap_or(f64::NAN)
            };
            let (_, baseline) = bayesopt::random_search(latent, dim, a.budget, seed)?;
            let best_vec = ActuatorVector::new(best.clone())?;
            let summary = RunSummary {
                emotion: e,
                seed,
                budget: a.budget,
                bo_best_score: trace.best_value().expect("nonempty trace"),
                bo_incumbent_latent: ctx.sim.latent_intensity(&best_vec, e)?,
                random_best_latent: baseline.best_value().expect("nonempty trace"),
                monotone: trace.is_monotone(),
            };
            let paths = [
                (out.join(format!("bo-{e}-{seed}.csv")), trace.to_csv().into_bytes()),
                (out.join(format!("random-{e}-{seed}.csv")), baseline.to_csv().into_bytes()),
                (
                    out.join(format!("best-{e}-{seed}.json")),
                    (serde_json::to_string_pretty(&json!({ "emotion": e, "seed": seed, "actuators": best }))? + "\n").into_bytes(),
                ),
                (out.join(format!("run-{e}-{seed}.json")), (serde_json::to_string_pretty(&summary)? + "\n").into_bytes()),
            ];
            for (p, bytes) in &paths {
                write_file(p, bytes)?;
                rec.output(p)?;
            }
            let png = out.join(format!("best-{e}-{seed}.png"));
            write_image(&png, &ctx.sim.render(&best_vec)?)?;
            rec.output(&png)?;
            rec.finish()?;
            println!(
                "{e} seed {seed}: score {:.4}, hidden intensity {:.4} (random search {:.4})",
                summary.bo_best_score, summary.bo_incumbent_latent, summary.random_best_latent
            );
        }
    }
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn json_files(p: &Path, prefix: &str) -> anyhow::Result<Vec<PathBuf>> {
    if p.is_file() {
        return Ok(vec![p.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(p)
        .with_context(|| format!("listing {}", p.display()))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|f| f.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix) && n.ends_with(".json")))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Default)]
struct Row {
    cv: Option<f64>,
    bo: Vec<f64>,
    random: Vec<f64>,
    monotone: bool,
}

fn report(ctx: &Ctx, a: ReportArgs) -> anyhow::Result<()> {
    let run_dirs = if a.runs.is_empty() { vec![ctx.data_dir.join("runs")] } else { a.runs.clone() };
    let models = a.models.clone().unwrap_or_else(|| ctx.data_dir.join("models"));
    let out = a.out.clone().unwrap_or_else(|| ctx.data_dir.clone());
    create_dir(&out)?;
    let mut rec = Recorder::start(&out, "report", &json!({ "runs": run_dirs, "models": models }), None)?;
    let mut rows: BTreeMap<Emotion, Row> = BTreeMap::new();
    for d in &run_dirs {
        for f in json_files(d, "run-")? {
            let s: RunSummary = serde_json::from_slice(&read_verified(&f)?).with_context(|| format!("parsing {}", f.display()))?;
            rec.input(&f)?;
            let row = rows.entry(s.emotion).or_insert_with(|| Row { monotone: true, ..Default::default() });
            row.bo.push(s.bo_incumbent_latent);
            row.random.push(s.random_best_latent);
            row.monotone &= s.monotone;
        }
    }
    if models.is_dir() {
        for f in json_files(&models, "cv-")? {
            let cv: CvReport = serde_json::from_slice(&read_verified(&f)?).with_context(|| format!("parsing {}", f.display()))?;
            rec.input(&f)?;
            rows.entry(cv.target).or_insert_with(|| Row { monotone: true, ..Default::default() }).cv = Some(cv.mean_accuracy);
        }
    }
    if rows.is_empty() {
        bail!("no run summaries or cross-validation reports found");
    }

    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    let mut csv = String::from("emotion,cv_mean_accuracy,runs,median_bo_latent,median_random_latent,bo_ge_random,traces_monotone\n");
    let mut md = String::from(
        "| emotion | CV pair accuracy | runs | median BO incumbent | median random search | BO ≥ random |\n|---|---|---|---|---|---|\n",
    );
    for (e, row) in &mut rows {
        let runs = row.bo.len();
        let (bo, rnd) = if runs > 0 { (Some(median(&mut row.bo)), Some(median(&mut row.random))) } else { (None, None) };
        let ge = bo.zip(rnd).map(|(b, r)| b >= r);
        let ge_s = ge.map_or(String::new(), |g| g.to_string());
        let mono = if runs > 0 { row.monotone.to_string() } else { String::new() };
        writeln!(csv, "{e},{},{runs},{},{},{ge_s},{mono}", fmt(row.cv), fmt(bo), fmt(rnd))?;
        let yes = ge.map_or("", |g| if g { "yes" } else { "no" });
        writeln!(md, "| {e} | {} | {runs} | {} | {} | {yes} |", fmt(row.cv), fmt(bo), fmt(rnd))?;
    }
    let csv_path = out.join("report.csv");
    let md_path = out.join("report.md");
    write_file(&csv_path, &csv)?;
    write_file(&md_path, &md)?;
    rec.output(&csv_path)?;
    rec.output(&md_path)?;
    rec.finish()?;
    print!("{md}");
    Ok(())
}

fn serve(cfg: ServiceConfig, a: &ServeArgs) -> anyhow::Result<()> {
    read_verified(&cfg.pool)?;
    serve_on(cfg, &a.bind)
}

fn serve_on(cfg: ServiceConfig, bind: &str) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("binding {bind}"))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        prefrank_service::serve(&cfg, listener).await.context("annotation service")
    })
}
