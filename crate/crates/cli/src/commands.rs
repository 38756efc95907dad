use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Value};

use bronchosteer::anatomy::{generate_scene, Scene, SceneParams};
use bronchosteer::engine::study::{write_trajectory_csv, write_trajectory_error_csv};
use bronchosteer::engine::{
    metrics, read_record, replay, run_comparison_study, run_deployment, run_manual_baseline, write_record, Seeds,
    SimConfig, StudySpec,
};
use bronchosteer::geometry::Vec3;
use bronchosteer::planner::{plan_candidates, validate_path, PlanFile, PlanRequest};
use bronchosteer::Error;

use crate::args::{
    Cli, Command, ConfigArgs, PlanArgs, ReplayArgs, SceneCommand, ServeArgs, SimulateArgs, StudyArgs, ValidateArgs,
};

const TARGET_SEED_OFFSET: u64 = 1000;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Sim(Error),
    /// A check ran and did not pass.
    Domain {
        kind: &'static str,
        message: String,
    },
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Sim(Error::Parse(_) | Error::Config(_) | Error::Io(_)) => 2,
            Failure::Sim(_) | Failure::Domain { .. } => 1,
        }
    }

    pub fn diagnostic(&self) -> String {
        let (kind, message) = match self {
            Failure::Usage(m) => ("Usage", m.clone()),
            Failure::Sim(e) => (e.kind(), e.to_string()),
            Failure::Domain { kind, message } => (*kind, message.clone()),
        };
        json!({"error": kind, "exit": self.exit_code(), "message": message}).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Sim(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Sim(Error::Io(e.to_string()))
    }
}

type Outcome = Result<(), Failure>;

/// Output root; every written path must resolve inside it.
struct OutDir(PathBuf);

impl OutDir {
    fn path(&self, rel: &Path) -> Result<PathBuf, Failure> {
        let inside = !rel.as_os_str().is_empty()
            && rel
                .components()
                .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
        if !inside {
            return Err(Failure::Usage(format!(
                "output path {} must be relative to the output directory {} and stay inside it",
                rel.display(),
                self.0.display()
            )));
        }
        let p = self.0.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }
}

pub fn run(cli: Cli) -> Outcome {
    let out = OutDir(cli.out_dir.clone());
    match cli.command {
        Command::Scene(SceneCommand::Gen { seed, output }) => scene_gen(&out, seed, &output),
        Command::Plan(a) => plan(&out, &a),
        Command::Validate(a) => validate(&a),
        Command::Simulate(a) => simulate(&out, &a),
        Command::Study(a) => study(&out, &a),
        Command::Replay(a) => replay_record(&a),
        Command::Serve(a) => serve(&a),
    }
}

/// Effective configuration, logged before any work so a run can be
/// repeated from its echo.
fn echo(subcommand: &str, args: Value, config: Option<&SimConfig>) {
    let mut v = json!({"subcommand": subcommand, "args": args});
    if let Some(c) = config {
        v["config"] = serde_json::to_value(c).expect("config serializes");
    }
    eprintln!("config {v}");
}

fn sim_config(a: &ConfigArgs) -> Result<SimConfig, Failure> {
    let mut config = match &a.config {
        Some(path) => SimConfig::from_json(&fs::read_to_string(path).map_err(|e| input_error(path, e))?)?,
        None => SimConfig::profile(&a.profile)?,
    };
    for o in &a.overrides {
        config.apply_override(o)?;
    }
    Ok(config)
}

fn input_error(path: &Path, e: io::Error) -> Failure {
    Failure::Usage(format!("cannot read {}: {e}", path.display()))
}

fn load_scene(path: &Path) -> Result<Scene, Failure> {
    let text = fs::read_to_string(path).map_err(|e| input_error(path, e))?;
    Ok(Scene::from_str(&text)?)
}

fn scene_gen(out: &OutDir, seed: u64, output: &Path) -> Outcome {
    echo("scene gen", json!({"seed": seed, "output": output}), None);
    let path = out.path(output)?;
    let scene = generate_scene(seed, &SceneParams::default())?;
    scene.save(&path)?;
    println!("scene {} hash {}", path.display(), scene.hash());
    Ok(())
}

fn plan(out: &OutDir, a: &PlanArgs) -> Outcome {
    let config = sim_config(&a.config)?;
    echo(
        "plan",
        json!({"scene": a.scene, "target": a.target, "seed": a.seed, "output": a.output}),
        Some(&config),
    );
    let scene = load_scene(&a.scene)?;
    let path = out.path(&a.output)?;
    let mut req = PlanRequest::new(Vec3::from(a.target), a.seed);
    req.goal_tol = config.planner.goal_tol;
    let candidates = plan_candidates(&scene, &req, &config.planner)?;
    for (i, c) in candidates.iter().enumerate() {
        println!(
            "candidate {i} cost {:.3} needle {:.2} mm arcs {}",
            c.cost,
            c.needle_length(),
            c.needle_path.len()
        );
    }
    fs::write(&path, PlanFile::new(&scene, &req, candidates).to_string_pretty())?;
    println!("plans {}", path.display());
    Ok(())
}

fn validate(a: &ValidateArgs) -> Outcome {
    echo("validate", json!({"plan": a.plan, "scene": a.scene}), None);
    let text = fs::read_to_string(&a.plan).map_err(|e| input_error(&a.plan, e))?;
    let plans = PlanFile::from_str(&text)?;
    let scene = load_scene(&a.scene)?;
    if plans.scene_hash != scene.hash() {
        println!("warning: plan file was made for scene {}", plans.scene_hash);
    }
    let mut failed = Vec::new();
    for (i, c) in plans.candidates.iter().enumerate() {
        println!("candidate {i}");
        let report = validate_path(&c.needle_path, &scene, &plans.target, plans.goal_tol);
        for item in &report.items {
            let mark = if item.pass { "pass" } else { "FAIL" };
            println!("  {:<11} {mark}  {}", item.name, item.detail);
        }
        failed.extend(report.failures().iter().map(|f| format!("{i}:{f}")));
    }
    if failed.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Failure::Domain {
            kind: "ValidationFailed",
            message: format!("failed checks {}", failed.join(",")),
        })
    }
}

fn simulate(out: &OutDir, a: &SimulateArgs) -> Outcome {
    let config = sim_config(&a.config)?;
    echo(
        "simulate",
        json!({
            "scene": a.scene, "target": a.target, "target_seed": a.target_seed, "seed": a.seed,
            "manual": a.manual, "output": a.output, "csv": a.csv,
        }),
        Some(&config),
    );
    let scene = load_scene(&a.scene)?;
    let path = out.path(&a.output)?;
    let target = match a.target {
        Some(t) => Vec3::from(t),
        None => scene.sample_target(a.target_seed.unwrap_or(TARGET_SEED_OFFSET + a.seed))?,
    };
    let seeds = Seeds::from_master(a.seed);
    let rec = if a.manual {
        run_manual_baseline(&scene, target, &config, seeds)?
    } else {
        run_deployment(&scene, target, &config, seeds)?
    };
    write_record(BufWriter::new(File::create(&path)?), &rec)?;
    if a.csv {
        let stem = path.with_extension("");
        let traj = stem.with_file_name(format!("{}_trajectory.csv", file_stem(&stem)));
        let err = stem.with_file_name(format!("{}_trajectory_error.csv", file_stem(&stem)));
        write_trajectory_csv(BufWriter::new(File::create(&traj)?), &rec)?;
        write_trajectory_error_csv(BufWriter::new(File::create(&err)?), &rec)?;
    }
    println!(
        "{}",
        json!({"record": path, "outcome": rec.outcome, "metrics": metrics(&rec)})
    );
    if rec.outcome.is_completed() {
        Ok(())
    } else {
        Err(Failure::Domain {
            kind: outcome_kind(rec.outcome.as_str()),
            message: format!(
                "deployment ended with {}",
                serde_json::to_string(&rec.outcome).unwrap_or_default()
            ),
        })
    }
}

fn file_stem(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn outcome_kind(outcome: &str) -> &'static str {
    match outcome {
        "no_plan_found" => "NoPlanFound",
        "alignment_failed" => "AlignmentFailed",
        "safety_stop" => "SafetyStop",
        "gate_timeout" => "GateTimeout",
        "segment_incomplete" => "SegmentIncomplete",
        "aborted" => "Aborted",
        _ => "DeploymentFailed",
    }
}

fn study(out: &OutDir, a: &StudyArgs) -> Outcome {
    let config = sim_config(&a.config)?;
    echo(
        "study",
        json!({
            "scene": a.scene, "robot": a.robot, "manual": a.manual, "seed": a.seed,
            "jobs": a.jobs, "output": a.output, "records": a.records,
        }),
        Some(&config),
    );
    let scene = load_scene(&a.scene)?;
    let report_path = out.path(&a.output.join("report.json"))?;
    let rows_path = out.path(&a.output.join("rows.csv"))?;
    let spec = StudySpec {
        jobs: a.jobs,
        ..StudySpec::new(a.robot, a.manual, a.seed)
    };
    let (report, records) = run_comparison_study(&scene, &config, &spec)?;
    fs::write(&report_path, report.to_json_pretty())?;
    report.write_rows_csv(BufWriter::new(File::create(&rows_path)?))?;
    if a.records {
        for (i, rec) in records.iter().enumerate() {
            let p = out.path(
                &a.output
                    .join("records")
                    .join(format!("{i:03}_{}.log", rec.kind.as_str())),
            )?;
            write_record(BufWriter::new(File::create(&p)?), rec)?;
        }
    }
    let cohort = |name: &str, s: &Option<bronchosteer::engine::CohortSummary>| {
        if let Some(s) = s {
            println!("{name:<14} n {:>3}  mean {:>7.2}  sd {:>6.2}", s.n, s.mean, s.sd);
        }
    };
    cohort("robot length", &report.robot_length);
    cohort("manual length", &report.manual_length);
    cohort("robot error", &report.robot_error);
    cohort("manual error", &report.manual_error);
    for (name, t) in [("length test", &report.length_test), ("error test", &report.error_test)] {
        if let Some(t) = t {
            println!("{name:<14} t {:>7.3}  df {:>4.0}  p {:.3e}", t.t, t.df, t.p);
        }
    }
    println!(
        "robot completed {}/{}  adverse {}",
        report.robot_completed, a.robot, report.robot_adverse
    );
    println!("report {}", report_path.display());
    Ok(())
}

fn replay_record(a: &ReplayArgs) -> Outcome {
    echo("replay", json!({"record": a.record, "scene": a.scene}), None);
    let file = File::open(&a.record).map_err(|e| input_error(&a.record, e))?;
    let stored = read_record(BufReader::new(file))?;
    let scene = load_scene(&a.scene)?;
    let again = replay(&scene, &stored)?;
    let (before, after) = (metrics(&stored), metrics(&again));
    println!("{}", json!({"identical": again == stored, "metrics": after}));
    if again == stored {
        Ok(())
    } else {
        Err(Failure::Domain {
            kind: "ReplayMismatch",
            message: format!(
                "replay differs from the stored record (metrics {})",
                if before == after { "equal" } else { "differ" }
            ),
        })
    }
}

fn serve(a: &ServeArgs) -> Outcome {
    echo(
        "serve",
        json!({"addr": a.addr, "rtf": a.rtf, "session_ttl": a.session_ttl, "stdio": a.stdio}),
        None,
    );
    if a.stdio {
        let stdin = io::stdin();
        let stdout = io::stdout();
        bronchosteer_service::run_oneshot(stdin.lock(), stdout.lock())?;
        return Ok(());
    }
    if !(a.rtf.is_finite() && a.rtf > 0.0) {
        return Err(Failure::Usage(format!("--rtf must be positive, got {}", a.rtf)));
    }
    let config = bronchosteer_service::ServerConfig {
        rtf: a.rtf,
        session_ttl: Duration::from_secs(a.session_ttl),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Failure::Usage(format!("cannot listen on {}: {e}", a.addr)))?;
        eprintln!("listening {}", listener.local_addr()?);
        io::stderr().flush()?;
        bronchosteer_service::serve(listener, config).await?;
        Ok(())
    })
}
