use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chebtaylor::bundle::Stability;
use chebtaylor::connections::conjugacy_time;
use chebtaylor::io::{
    artifact_path, export_decay, export_grid, export_orbit, export_trajectory, rerun_orbit, run_bundle, run_connect, run_manifold,
    run_orbit, validate_artifact, write_atomic, Artifact, Payload, Provenance, RunConfig, ValidateSpec,
};
use chebtaylor::{Error, FlowOptions, ManifoldParam, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Map, Value};

#[derive(Parser, Debug)]
#[command(name = "chebtaylor", version, about = "Chebyshev-Taylor manifolds of periodic orbits and their connections")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(flatten)]
    over: Overrides,
}

/// Config overrides, so that every run can be spelled on the command line.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// lorenz, crtbp, crfbp, kepler or linear.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Model parameter, e.g. `--param rho=28`.
    #[arg(long = "param", global = true, value_parser = parse_kv)]
    params: Vec<(String, f64)>,
    /// Lorenz word (`ABB`), CRTBP `L1@3.17`, CRFBP `x,y@lambda`, or a JSON hint.
    #[arg(long, global = true)]
    orbit_hint: Option<String>,
    /// Number of subdomains.
    #[arg(long = "domains", global = true)]
    d: Option<usize>,
    /// Comma-separated subdomain proportions.
    #[arg(long, global = true, value_delimiter = ',')]
    proportions: Option<Vec<f64>>,
    #[arg(long = "half-period", global = true)]
    l: Option<f64>,
    /// Chebyshev modes per subdomain.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Taylor order.
    #[arg(long, global = true)]
    order: Option<usize>,
    /// Normalization constant, or `auto:TARGET`.
    #[arg(long, global = true)]
    k: Option<String>,
    #[arg(long, global = true)]
    k0: Option<usize>,
    #[arg(long, global = true)]
    stability: Option<String>,
    #[arg(long, global = true)]
    pick: Option<usize>,
    #[arg(long, global = true)]
    truncation: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Seed, solve and validate a periodic orbit.
    Orbit {
        /// Previous orbit artifact to start Newton from.
        #[arg(long)]
        warm_start: Option<PathBuf>,
    },
    /// Floquet exponent and normalized bundle.
    Bundle {
        /// Orbit artifact; the orbit is solved from the config otherwise.
        #[arg(long)]
        orbit: Option<PathBuf>,
    },
    /// Taylor coefficients of the local stable or unstable manifold.
    Manifold {
        #[arg(long)]
        orbit: Option<PathBuf>,
    },
    /// Evaluate a manifold artifact on a grid (or an orbit artifact on a time grid).
    Export {
        artifact: PathBuf,
        #[arg(long, default_value_t = 100)]
        nt: usize,
        #[arg(long, default_value_t = 21)]
        nsigma: usize,
    },
    /// Connecting orbit between a stable and an unstable manifold.
    Connect {
        /// Stable manifold artifact (or orbit artifact, built with the config).
        #[arg(long)]
        stable: Option<PathBuf>,
        #[arg(long)]
        unstable: Option<PathBuf>,
        /// One artifact providing both manifolds of the same orbit.
        #[arg(long, conflicts_with_all = ["stable", "unstable"])]
        homoclinic: Option<PathBuf>,
    },
    /// Run the numerical checks on an artifact.
    Validate {
        artifact: PathBuf,
        #[arg(long, value_delimiter = ',')]
        t0: Option<Vec<f64>>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s}"))?;
    Ok((k.trim().to_string(), v.trim().parse().map_err(|e| format!("{k}: {e}"))?))
}

fn model_defaults(name: &str) -> Result<Value> {
    Ok(match name {
        "lorenz" => json!({ "model": "lorenz", "sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0 }),
        "crtbp" => json!({ "model": "crtbp", "mu": 0.0123 }),
        "crfbp" => json!({ "model": "crfbp", "m1": 0.9987, "m2": 0.001, "m3": 0.0003 }),
        "kepler" => json!({ "model": "kepler", "mass": 1.0 }),
        "linear" => json!({ "model": "linear", "a": [] }),
        _ => return Err(Error::Config(format!("unknown model {name}"))),
    })
}

fn parse_hint(model: &str, s: &str) -> Result<Value> {
    if s.trim_start().starts_with('{') {
        return Ok(serde_json::from_str(s)?);
    }
    let bad = || Error::Config(format!("cannot read orbit hint {s:?} for model {model}"));
    match model {
        "lorenz" => Ok(json!({ "kind": "lorenz_word", "word": s })),
        "crtbp" => {
            let (p, e) = s.split_once('@').ok_or_else(bad)?;
            let point: usize = p.trim_start_matches(['L', 'l']).parse().map_err(|_| bad())?;
            Ok(json!({ "kind": "lyapunov", "point": point, "energy": e.parse::<f64>().map_err(|_| bad())? }))
        }
        "crfbp" => {
            let (g, lam) = s.split_once('@').ok_or_else(bad)?;
            let (x, y) = g.split_once(',').ok_or_else(bad)?;
            let f = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
            Ok(json!({ "kind": "planar_lyapunov", "guess": [f(x)?, f(y)?], "lambda": f(lam)? }))
        }
        _ => Err(bad()),
    }
}

fn build_config(cli: &Cli, needed: bool) -> Result<Option<RunConfig>> {
    let mut v: Map<String, Value> = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            match serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))? {
                Value::Object(m) => m,
                _ => return Err(Error::Config("config must be a JSON object".into())),
            }
        }
        None => Map::new(),
    };
    let o = &cli.over;
    if let Some(name) = &o.model {
        if v.get("model").and_then(|m| m.get("model")).and_then(Value::as_str) != Some(name.as_str()) {
            v.insert("model".into(), model_defaults(name)?);
        }
    }
    if !v.contains_key("model") {
        if needed {
            return Err(Error::Config("no model given (use --config or --model)".into()));
        }
        return Ok(None);
    }
    for (k, x) in &o.params {
        v["model"][k.as_str()] = json!(x);
    }
    let name = v["model"]["model"].as_str().unwrap_or_default().to_string();
    if let Some(h) = &o.orbit_hint {
        v.insert("hint".into(), parse_hint(&name, h)?);
    }
    let mesh = v.entry("mesh").or_insert_with(|| json!({ "d": 10 }));
    if let Some(d) = o.d {
        mesh["d"] = json!(d);
    }
    if let Some(p) = &o.proportions {
        mesh["d"] = json!(p.len());
        mesh["proportions"] = json!(p);
    }
    if let Some(l) = o.l {
        mesh["l"] = json!(l);
    }
    v.entry("m").or_insert(json!(50));
    let set = |v: &mut Map<String, Value>, k: &str, x: Option<Value>| {
        if let Some(x) = x {
            v.insert(k.into(), x);
        }
    };
    set(&mut v, "m", o.m.map(|x| json!(x)));
    set(&mut v, "n", o.order.map(|x| json!(x)));
    set(&mut v, "k0", o.k0.map(|x| json!(x)));
    set(&mut v, "stability", o.stability.as_ref().map(|x| json!(x)));
    set(&mut v, "pick", o.pick.map(|x| json!(x)));
    set(&mut v, "truncation", o.truncation.map(|x| json!(x)));
    set(&mut v, "seed", cli.seed.map(|x| json!(x)));
    if let Some(k) = &o.k {
        let k = match k.strip_prefix("auto:") {
            Some(t) => json!({ "auto": t.parse::<f64>().map_err(|e| Error::Config(format!("--k {k}: {e}")))? }),
            None => json!(k.parse::<f64>().map_err(|e| Error::Config(format!("--k {k}: {e}")))?),
        };
        v.insert("k".into(), k);
    }
    RunConfig::from_json(&Value::Object(v).to_string()).map(Some)
}

fn need(cfg: Option<RunConfig>) -> RunConfig {
    cfg.expect("build_config(.., true) returns a config")
}

fn emit(out: &Path, stem: &str, summary: &str) -> Result<()> {
    print!("{summary}");
    write_atomic(&out.join(format!("{stem}_summary.txt")), summary.as_bytes())
}

fn residuals_of(report: &chebtaylor::NewtonReport) -> Vec<(String, f64)> {
    vec![("newton_residual".into(), report.residual), ("newton_condition".into(), report.condition)]
}

fn stability_stem(s: Stability) -> &'static str {
    match s {
        Stability::Stable => "stable",
        Stability::Unstable => "unstable",
    }
}

fn load_orbit(cfg: &RunConfig, path: &Option<PathBuf>) -> Result<chebtaylor::Orbit> {
    match path {
        Some(p) => Ok(Artifact::load(p)?.orbit()?.clone()),
        None => Ok(run_orbit(cfg)?.0),
    }
}

/// A manifold of the given stability: taken from the artifact when it matches, built from its orbit otherwise.
fn resolve_manifold(cfg: &RunConfig, path: &Path, stability: Stability) -> Result<ManifoldParam> {
    let art = Artifact::load(path)?;
    if let Payload::Manifold(m) = &art.payload {
        if m.stability() == stability {
            return Ok(m.clone());
        }
    }
    let mut c = cfg.clone();
    c.stability = Some(stability);
    if let Payload::Manifold(m) = &art.payload {
        // Same chart size and order as the manifold already on file.
        c.k = chebtaylor::io::ScaleSpec::Fixed(m.bundle.k);
        c.k0 = Some(m.bundle.k0);
        c.n = m.n;
    }
    info!("building the {} manifold of the orbit in {}", stability_stem(stability), path.display());
    run_manifold(&c, art.orbit()?)
}

fn run(cli: &Cli) -> Result<u8> {
    let out = &cli.out;
    std::fs::create_dir_all(out)?;
    match &cli.cmd {
        Cmd::Orbit { warm_start } => {
            let cfg = need(build_config(cli, true)?);
            let (orbit, defect) = match warm_start {
                Some(p) => {
                    let prev = Artifact::load(p)?;
                    let o = rerun_orbit(&cfg, prev.orbit()?)?;
                    let d = chebtaylor::orbit::validate_orbit(&o, 20, &cfg.flow)?;
                    (o, d)
                }
                None => run_orbit(&cfg)?,
            };
            let mut res = residuals_of(&orbit.report);
            res.push(("flow_defect".into(), defect));
            Artifact::new(Payload::Orbit(orbit.clone()), Provenance::new(&cfg, res)).save(&artifact_path(out, "orbit"))?;
            export_orbit(&orbit, 1000, &out.join("orbit.csv"))?;
            let mut s = String::new();
            writeln!(s, "model: {}", orbit.model.name()).ok();
            writeln!(s, "L = {:.12}", orbit.half_period()).ok();
            writeln!(s, "period = {:.12}", orbit.period()).ok();
            if matches!(orbit.formulation, chebtaylor::Formulation::MultiplierPoincare) {
                writeln!(s, "beta = {:.3e}", orbit.beta).ok();
            }
            writeln!(s, "newton iterations = {}", orbit.report.iterations).ok();
            writeln!(s, "residual = {:.3e}", orbit.report.residual).ok();
            writeln!(s, "flow defect = {defect:.3e}").ok();
            for w in &orbit.warnings {
                writeln!(s, "warning: {w}").ok();
            }
            emit(out, "orbit", &s)?;
        }
        Cmd::Bundle { orbit } => {
            let cfg = need(build_config(cli, true)?);
            let orbit = load_orbit(&cfg, orbit)?;
            let b = run_bundle(&cfg, &orbit)?;
            let stem = format!("bundle_{}", stability_stem(b.stability));
            let s = format!(
                "lambda = {:.12}\nK = {:.6e}\nk0 = {}\nnewton iterations = {}\nresidual = {:.3e}\n",
                b.lambda, b.k, b.k0, b.report.iterations, b.report.residual
            );
            let res = residuals_of(&b.report);
            Artifact::new(Payload::Bundle { orbit, bundle: b }, Provenance::new(&cfg, res)).save(&artifact_path(out, &stem))?;
            emit(out, &stem, &s)?;
        }
        Cmd::Manifold { orbit } => {
            let cfg = need(build_config(cli, true)?);
            let orbit = load_orbit(&cfg, orbit)?;
            let man = run_manifold(&cfg, &orbit)?;
            let stem = format!("manifold_{}", stability_stem(man.stability()));
            export_decay(&man, &out.join(format!("{stem}_decay.csv")))?;
            let cond = man.conditions.iter().cloned().fold(0.0, f64::max);
            let s = format!(
                "lambda = {:.12}\nK = {:.6e}\nN = {}\ntail norm |A_N| = {:.6e}\nlargest condition estimate = {:.3e}\n",
                man.lambda,
                man.bundle.k,
                man.n,
                man.order_norm(man.n),
                cond
            );
            let res = vec![("bundle_residual".into(), man.bundle.report.residual), ("tail_norm".into(), man.order_norm(man.n))];
            Artifact::new(Payload::Manifold(man), Provenance::new(&cfg, res)).save(&artifact_path(out, &stem))?;
            emit(out, &stem, &s)?;
        }
        Cmd::Export { artifact, nt, nsigma } => {
            let art = Artifact::load(artifact)?;
            let stem = artifact.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "export".into());
            match &art.payload {
                Payload::Manifold(m) => {
                    let path = out.join(format!("{stem}_grid.csv"));
                    export_grid(m, *nt, *nsigma, &path)?;
                    println!("wrote {} ({} rows)", path.display(), nt * nsigma);
                }
                Payload::Connection { trajectory: Some(t), .. } => {
                    let path = out.join(format!("{stem}_trajectory.csv"));
                    export_trajectory(t, &path)?;
                    println!("wrote {}", path.display());
                }
                _ => {
                    let path = out.join(format!("{stem}_orbit.csv"));
                    export_orbit(art.orbit()?, *nt, &path)?;
                    println!("wrote {}", path.display());
                }
            }
        }
        Cmd::Connect { stable, unstable, homoclinic } => {
            let cfg = need(build_config(cli, true)?);
            let (s_path, u_path) = match (homoclinic, stable, unstable) {
                (Some(h), _, _) => (h, h),
                (None, Some(s), Some(u)) => (s, u),
                _ => return Err(Error::Config("connect needs --stable and --unstable, or --homoclinic".into())),
            };
            let sm = resolve_manifold(&cfg, s_path, Stability::Stable)?;
            let um = resolve_manifold(&cfg, u_path, Stability::Unstable)?;
            let run = run_connect(&cfg, &sm, &um)?;
            let mut s = String::new();
            for (i, c) in run.found.iter().enumerate() {
                writeln!(
                    s,
                    "{} [{i}] {:?}: theta_u = {:.10}, sigma_u = {:+.3e}, theta_s = {:.10}, sigma_s = {:+.6e}, T = {:.10}, residual = {:.2e}",
                    if i == run.picked { "*" } else { " " },
                    c.kind,
                    c.theta_u,
                    c.sigma_u,
                    c.theta_s,
                    c.sigma_s,
                    c.t,
                    c.residual
                )
                .ok();
            }
            let c = &run.found[run.picked];
            let tu = conjugacy_time(um.lambda, c.sigma_u, cfg.truncation.copysign(c.sigma_u))?;
            let ts = if c.sigma_s == 0.0 { 0.0 } else { conjugacy_time(sm.lambda, c.sigma_s, cfg.truncation.copysign(c.sigma_s))? };
            writeln!(s, "lambda_u = {:.12}, lambda_s = {:.12}", um.lambda, sm.lambda).ok();
            writeln!(s, "conjugacy extension to sigma = {:.1e}: unstable {tu:.6}, stable {ts:.6}", cfg.truncation).ok();
            writeln!(s, "assembled endpoint gaps: {:.3e} (unstable), {:.3e} (stable)", run.trajectory.start_gap, run.trajectory.end_gap).ok();
            export_trajectory(&run.trajectory, &out.join("connection_trajectory.csv"))?;
            let res = vec![("connection_residual".into(), c.residual)];
            let payload = Payload::Connection { result: c.clone(), alternatives: run.found.clone(), trajectory: Some(run.trajectory) };
            Artifact::new(payload, Provenance::new(&cfg, res)).save(&artifact_path(out, "connection"))?;
            emit(out, "connection", &s)?;
        }
        Cmd::Validate { artifact, t0, samples } => {
            let art = Artifact::load(artifact)?;
            let (mut spec, flow) = match build_config(cli, false)? {
                Some(c) => (c.validate, c.flow),
                None => (art.provenance.config.validate.clone(), art.provenance.config.flow),
            };
            if let Some(t) = t0 {
                spec.t0 = t.clone();
            }
            if let Some(n) = samples {
                spec.samples = *n;
            }
            let spec: ValidateSpec = spec;
            let flow: FlowOptions = flow;
            let rep = validate_artifact(&art, &spec, &flow);
            let stem = artifact.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "artifact".into());
            write_atomic(&out.join(format!("{stem}_validation.json")), &serde_json::to_vec_pretty(&rep)?)?;
            for c in &rep.checks {
                println!("{} {:<36} {:.3e} (tol {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
            }
            if !rep.pass {
                return Ok(4);
            }
        }
    }
    Ok(0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_config() => 2,
        Error::Artifact(_) | Error::Io(_) | Error::Csv(_) => 2,
        Error::Validation(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
