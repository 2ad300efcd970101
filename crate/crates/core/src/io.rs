//! Run configuration, artifact persistence, CSV export and validation reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{solve_bundle, BundleOptions, FloquetBundle, Stability};
use crate::bvp::NewtonOptions;
use crate::cheb::{Mesh, PeriodicPiecewise};
use crate::connections::{assemble_trajectory, bvp_connections, short_connections, AssembledTrajectory, BvpOptions, ConnectionResult, ShortOptions};
use crate::error::{Error, Result};
use crate::flow::FlowOptions;
use crate::manifold::{choose_scale, conjugacy_error, solve_manifold, ManifoldParam};
use crate::models::{Model, ModelKind};
use crate::orbit::{build_system, seed_guess, seed_orbit, solve_orbit, validate_orbit, Formulation, Orbit, OrbitProblem, SeedHint};

pub const ARTIFACT_FORMAT: &str = "chebtaylor-artifact";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    pub d: usize,
    /// Subdomain proportions summing to one; uniform when absent.
    #[serde(default)]
    pub proportions: Option<Vec<f64>>,
    /// Half-period; taken from the seed when absent.
    #[serde(default)]
    pub l: Option<f64>,
}

impl MeshSpec {
    pub fn proportions(&self) -> Vec<f64> {
        self.proportions.clone().unwrap_or_else(|| vec![1.0 / self.d as f64; self.d])
    }

    pub fn build(&self, l: f64) -> Result<Mesh> {
        match &self.proportions {
            Some(p) => Mesh::new(p.clone(), l),
            None => Mesh::uniform(self.d, l),
        }
    }
}

/// Normalization constant: a fixed value or a search for a target tail norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleSpec {
    Fixed(f64),
    Auto { auto: f64 },
}

impl Default for ScaleSpec {
    fn default() -> Self {
        ScaleSpec::Fixed(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidateSpec {
    pub t0: Vec<f64>,
    pub samples: usize,
    pub conjugacy_tol: f64,
    pub lift_tol: f64,
    pub energy_tol: f64,
    pub orbit_tol: f64,
}

impl Default for ValidateSpec {
    fn default() -> Self {
        ValidateSpec { t0: vec![1e-5, 1.0], samples: 200, conjugacy_tol: 1e-5, lift_tol: 1e-8, energy_tol: 1e-8, orbit_tol: 1e-7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConnectionSpec {
    Short(ShortOptions),
    Bvp(BvpOptions),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Defaults per model when absent.
    #[serde(default)]
    pub formulation: Option<Formulation>,
    #[serde(default)]
    pub hint: Option<SeedHint>,
    pub mesh: MeshSpec,
    pub m: usize,
    /// Taylor order.
    #[serde(default = "default_order")]
    pub n: usize,
    #[serde(default)]
    pub k: ScaleSpec,
    #[serde(default)]
    pub k0: Option<usize>,
    #[serde(default)]
    pub stability: Option<Stability>,
    #[serde(default)]
    pub newton: NewtonOptions,
    #[serde(default = "FlowOptions::tight")]
    pub flow: FlowOptions,
    #[serde(default)]
    pub validate: ValidateSpec,
    #[serde(default)]
    pub connection: Option<ConnectionSpec>,
    /// Sigma level at which conjugacy tails of assembled connections stop.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    /// Which of the distinct connections found (ordered as reported) to keep and assemble.
    #[serde(default)]
    pub pick: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_order() -> usize {
    10
}

fn default_truncation() -> f64 {
    1e-8
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn formulation(&self) -> Result<Formulation> {
        if let Some(f) = &self.formulation {
            return Ok(f.clone());
        }
        Ok(match (&self.model, &self.hint) {
            (ModelKind::Crtbp { .. }, Some(SeedHint::Lyapunov { energy, .. })) => Formulation::SymmetricFixedEnergy { energy: *energy },
            (ModelKind::Crtbp { .. }, _) => Formulation::SymmetricFixedL,
            (ModelKind::Crfbp { .. }, _) => Formulation::MultiplierPoincare,
            _ => Formulation::AutonomousPoincare,
        })
    }

    pub fn bundle_options(&self) -> BundleOptions {
        let k = match self.k {
            ScaleSpec::Fixed(k) => k,
            ScaleSpec::Auto { .. } => 1.0,
        };
        BundleOptions { k, k0: self.k0, newton: self.newton }
    }

    /// Structural checks, including squareness of the orbit system, before any solve.
    pub fn validate(&self) -> Result<()> {
        let model = Model::build(&self.model)?;
        if self.m < 2 {
            return Err(Error::Config("m must be at least 2".into()));
        }
        if let Some(k0) = self.k0 {
            if k0 >= self.m {
                return Err(Error::Config(format!("k0 = {k0} must be below m = {}", self.m)));
            }
        }
        if self.mesh.d == 0 {
            return Err(Error::Config("mesh needs at least one subdomain".into()));
        }
        if let Some(p) = &self.mesh.proportions {
            if p.len() != self.mesh.d {
                return Err(Error::Config(format!("{} proportions given for D = {}", p.len(), self.mesh.d)));
            }
        }
        let mesh = self.mesh.build(self.mesh.l.unwrap_or(1.0))?;
        match self.k {
            ScaleSpec::Fixed(k) if !(k > 0.0 && k.is_finite()) => return Err(Error::Config(format!("K must be positive, got {k}"))),
            ScaleSpec::Auto { auto } if !(auto > 0.0) => return Err(Error::Config("auto K needs a positive target".into())),
            _ => {}
        }
        if !(self.truncation > 0.0 && self.truncation < 1.0) {
            return Err(Error::Config("truncation must lie in (0, 1)".into()));
        }
        if let Some(hint) = &self.hint {
            let ok = matches!(
                (hint, &self.model),
                (SeedHint::LorenzWord { .. }, ModelKind::Lorenz { .. })
                    | (SeedHint::Lyapunov { .. }, ModelKind::Crtbp { .. })
                    | (SeedHint::PlanarLyapunov { .. }, ModelKind::Crfbp { .. })
                    | (SeedHint::Point { .. }, _)
            );
            if !ok {
                return Err(Error::Config(format!("seed hint does not apply to model {}", model.name())));
            }
        }
        let problem = OrbitProblem { model: model.clone(), formulation: self.formulation()?, mesh: mesh.clone(), m: self.m, newton: self.newton };
        // Probe guess with nonzero entries so distance-type rows stay finite.
        let mut guess = PeriodicPiecewise::zeros(mesh, model.dim(), self.m);
        guess.coeffs.iter_mut().for_each(|c| *c = 1.0);
        build_system(&problem, &guess).map(|_| ())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed, solve and validate the orbit described by a config.
pub fn run_orbit(cfg: &RunConfig) -> Result<(Orbit, f64)> {
    let model = Model::build(&cfg.model)?;
    let hint = cfg.hint.as_ref().ok_or_else(|| Error::Config("orbit runs need a seed hint".into()))?;
    let seed = seed_orbit(&model, hint)?;
    info!("seed: period {:.10}, return gap {:.2e}", seed.period, seed.gap);
    let l = cfg.mesh.l.unwrap_or(seed.period / 2.0);
    let mesh = cfg.mesh.build(l)?;
    let guess = seed_guess(&model, &seed, mesh.proportions(), cfg.m)?;
    let problem = OrbitProblem { model, formulation: cfg.formulation()?, mesh, m: cfg.m, newton: cfg.newton };
    let orbit = solve_orbit(&problem, &guess)?;
    let defect = validate_orbit(&orbit, 20, &cfg.flow)?;
    Ok((orbit, defect))
}

/// Re-solve from a previous orbit (warm start).
pub fn rerun_orbit(cfg: &RunConfig, previous: &Orbit) -> Result<Orbit> {
    let mesh = cfg.mesh.build(previous.half_period())?;
    let problem = OrbitProblem { model: previous.model.clone(), formulation: previous.formulation.clone(), mesh, m: cfg.m, newton: cfg.newton };
    solve_orbit(&problem, &previous.gamma)
}

fn stability_of(cfg: &RunConfig) -> Result<Stability> {
    cfg.stability.ok_or_else(|| Error::Config("stability (stable or unstable) is required".into()))
}

pub fn run_bundle(cfg: &RunConfig, orbit: &Orbit) -> Result<FloquetBundle> {
    solve_bundle(orbit, stability_of(cfg)?, &cfg.bundle_options())
}

pub fn run_manifold(cfg: &RunConfig, orbit: &Orbit) -> Result<ManifoldParam> {
    let stability = stability_of(cfg)?;
    match cfg.k {
        ScaleSpec::Fixed(_) => {
            let bundle = solve_bundle(orbit, stability, &cfg.bundle_options())?;
            solve_manifold(orbit, &bundle, cfg.n, &cfg.newton)
        }
        ScaleSpec::Auto { auto } => {
            let choice = choose_scale(orbit, stability, cfg.n, auto, &cfg.bundle_options())?;
            info!("scale search: K = {:.6e} after {} probes", choice.k, choice.probes);
            Ok(choice.manifold)
        }
    }
}

/// Every distinct connection found, the picked one and its assembled trajectory.
#[derive(Clone, Debug)]
pub struct ConnectRun {
    pub found: Vec<ConnectionResult>,
    pub picked: usize,
    pub trajectory: AssembledTrajectory,
}

pub fn run_connect(cfg: &RunConfig, stable: &ManifoldParam, unstable: &ManifoldParam) -> Result<ConnectRun> {
    let found = match cfg.connection.as_ref().ok_or_else(|| Error::Config("connect needs a `connection` section".into()))? {
        ConnectionSpec::Short(o) => short_connections(stable, unstable, o)?,
        ConnectionSpec::Bvp(o) => bvp_connections(stable, unstable, o)?,
    };
    if found.is_empty() {
        return Err(Error::NotConverged { iterations: 0, residual: f64::INFINITY });
    }
    if cfg.pick >= found.len() {
        return Err(Error::Config(format!("pick = {} but only {} connection(s) were found", cfg.pick, found.len())));
    }
    let trajectory = assemble_trajectory(stable, unstable, &found[cfg.pick], cfg.truncation, 400, &cfg.flow)?;
    Ok(ConnectRun { picked: cfg.pick, found, trajectory })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Orbit,
    Bundle,
    Manifold,
    Connection,
}

/// Everything an artifact can hold.
#[derive(Clone, Debug)]
pub enum Payload {
    Orbit(Orbit),
    Bundle { orbit: Orbit, bundle: FloquetBundle },
    Manifold(ManifoldParam),
    Connection { result: ConnectionResult, alternatives: Vec<ConnectionResult>, trajectory: Option<AssembledTrajectory> },
}

impl Payload {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Payload::Orbit(_) => ArtifactKind::Orbit,
            Payload::Bundle { .. } => ArtifactKind::Bundle,
            Payload::Manifold(_) => ArtifactKind::Manifold,
            Payload::Connection { .. } => ArtifactKind::Connection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRef {
    pub name: String,
    /// Axis names, slowest first.
    pub layout: Vec<String>,
    pub shape: Vec<usize>,
    /// Byte offset of the length prefix inside the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: RunConfig,
    pub config_hash: String,
    /// Seconds since the epoch; `SOURCE_DATE_EPOCH` wins when set, for reproducible files.
    pub created: u64,
    pub residuals: Vec<(String, f64)>,
    pub crate_version: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArtifactHeader {
    format: String,
    version: u32,
    kind: ArtifactKind,
    provenance: Provenance,
    blob: Option<String>,
    blob_sha256: Option<String>,
    arrays: Vec<ArrayRef>,
    /// The payload with every coefficient array moved into the blob.
    payload: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Artifact {
    pub payload: Payload,
    pub provenance: Provenance,
}

fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Provenance {
    pub fn new(config: &RunConfig, residuals: Vec<(String, f64)>) -> Provenance {
        Provenance {
            config: config.clone(),
            config_hash: config.hash(),
            created: now(),
            residuals,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

struct BlobWriter {
    bytes: Vec<u8>,
    arrays: Vec<ArrayRef>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, layout: &[&str], shape: Vec<usize>, data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(ArrayRef {
            name: name.into(),
            layout: layout.iter().map(|s| s.to_string()).collect(),
            shape,
            offset: self.bytes.len() as u64,
        });
        self.bytes.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_array(blob: &[u8], r: &ArrayRef) -> Result<Vec<f64>> {
    let o = r.offset as usize;
    let head = blob.get(o..o + 8).ok_or_else(|| Error::Artifact(format!("array {} lies outside the blob", r.name)))?;
    let n = u64::from_le_bytes(head.try_into().expect("eight bytes")) as usize;
    if n != r.shape.iter().product::<usize>() {
        return Err(Error::Artifact(format!("array {}: prefix {n} does not match shape {:?}", r.name, r.shape)));
    }
    let body = blob.get(o + 8..o + 8 + 8 * n).ok_or_else(|| Error::Artifact(format!("array {} is truncated", r.name)))?;
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect())
}

const IJK: [&str; 3] = ["i", "j", "k"];

fn shape_of(p: &PeriodicPiecewise) -> Vec<usize> {
    vec![p.mesh.d(), p.dim, p.m]
}

fn strip(p: &mut PeriodicPiecewise) -> Vec<f64> {
    std::mem::take(&mut p.coeffs)
}

impl Artifact {
    pub fn new(payload: Payload, provenance: Provenance) -> Artifact {
        Artifact { payload, provenance }
    }

    pub fn kind(&self) -> ArtifactKind {
        self.payload.kind()
    }

    fn split(&self) -> Result<(serde_json::Value, BlobWriter)> {
        let mut w = BlobWriter { bytes: Vec::new(), arrays: Vec::new() };
        let value = match &self.payload {
            Payload::Orbit(o) => {
                let mut o = o.clone();
                let c = strip(&mut o.gamma);
                w.push("gamma", &IJK, shape_of(&o.gamma), &c);
                serde_json::to_value(&o)?
            }
            Payload::Bundle { orbit, bundle } => {
                let (mut o, mut b) = (orbit.clone(), bundle.clone());
                let c = strip(&mut o.gamma);
                w.push("gamma", &IJK, shape_of(&o.gamma), &c);
                let c = strip(&mut b.v);
                w.push("v", &IJK, shape_of(&b.v), &c);
                serde_json::json!({ "orbit": o, "bundle": b })
            }
            Payload::Manifold(man) => {
                let mut man = man.clone();
                let mut all = strip(&mut man.orbit.gamma);
                all.extend(strip(&mut man.bundle.v));
                for a in man.taylor.iter_mut() {
                    all.extend(strip(a));
                }
                let mut shape = vec![man.taylor.len() + 2];
                shape.extend(shape_of(&man.orbit.gamma));
                w.push("coefficients", &["alpha", "i", "j", "k"], shape, &all);
                serde_json::to_value(&man)?
            }
            Payload::Connection { result, alternatives, trajectory } => {
                if let Some(t) = trajectory {
                    let dim = t.rows.first().map_or(0, |r| r.2.len());
                    let mut data = Vec::with_capacity(t.rows.len() * (dim + 2));
                    for (seg, time, x) in &t.rows {
                        data.push(*seg as f64);
                        data.push(*time);
                        data.extend_from_slice(x);
                    }
                    w.push("trajectory", &["row", "segment_time_state"], vec![t.rows.len(), dim + 2], &data);
                }
                let gaps = trajectory.as_ref().map(|t| (t.start_gap, t.end_gap));
                serde_json::json!({ "result": result, "alternatives": alternatives, "gaps": gaps })
            }
        };
        Ok((value, w))
    }

    /// Writes `path` (JSON) and, when there are arrays, `path` with extension `bin`.
    /// Both files are written to a temporary name and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (payload, w) = self.split()?;
        let blob_path = path.with_extension("bin");
        let has_blob = !w.arrays.is_empty();
        let header = ArtifactHeader {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            kind: self.kind(),
            provenance: self.provenance.clone(),
            blob: has_blob.then(|| blob_path.file_name().expect("file name").to_string_lossy().into_owned()),
            blob_sha256: has_blob.then(|| hex(&Sha256::digest(&w.bytes))),
            arrays: w.arrays.clone(),
            payload,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        if has_blob {
            write_atomic(&blob_path, &w.bytes)?;
        }
        let mut text = serde_json::to_vec_pretty(&header)?;
        text.push(b'\n');
        write_atomic(path, &text)
    }

    pub fn load(path: &Path) -> Result<Artifact> {
        let text = fs::read(path)?;
        let header: ArtifactHeader = serde_json::from_slice(&text).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
        if header.format != ARTIFACT_FORMAT || header.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!("unsupported artifact {} v{}", header.format, header.version)));
        }
        if header.provenance.config.hash() != header.provenance.config_hash {
            return Err(Error::Artifact("embedded config does not match its hash".into()));
        }
        let blob = match &header.blob {
            Some(name) => {
                let bytes = fs::read(path.with_file_name(name))?;
                if Some(hex(&Sha256::digest(&bytes))) != header.blob_sha256 {
                    return Err(Error::Artifact(format!("blob {name} fails its checksum")));
                }
                bytes
            }
            None => Vec::new(),
        };
        let array = |name: &str| -> Result<(Vec<f64>, &ArrayRef)> {
            let r = header.arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::Artifact(format!("missing array {name}")))?;
            Ok((read_array(&blob, r)?, r))
        };
        let fill = |p: &mut PeriodicPiecewise, data: Vec<f64>| -> Result<()> {
            if data.len() != p.mesh.d() * p.dim * p.m {
                return Err(Error::Artifact("coefficient count does not match the mesh".into()));
            }
            p.coeffs = data;
            Ok(())
        };
        let payload = match header.kind {
            ArtifactKind::Orbit => {
                let mut o: Orbit = serde_json::from_value(header.payload)?;
                fill(&mut o.gamma, array("gamma")?.0)?;
                Payload::Orbit(o)
            }
            ArtifactKind::Bundle => {
                #[derive(Deserialize)]
                struct B {
                    orbit: Orbit,
                    bundle: FloquetBundle,
                }
                let mut b: B = serde_json::from_value(header.payload)?;
                fill(&mut b.orbit.gamma, array("gamma")?.0)?;
                fill(&mut b.bundle.v, array("v")?.0)?;
                Payload::Bundle { orbit: b.orbit, bundle: b.bundle }
            }
            ArtifactKind::Manifold => {
                let mut man: ManifoldParam = serde_json::from_value(header.payload)?;
                let (all, r) = array("coefficients")?;
                let block = r.shape[1..].iter().product::<usize>();
                if r.shape[0] != man.taylor.len() + 2 {
                    return Err(Error::Artifact("coefficient block has the wrong order count".into()));
                }
                let mut chunks = all.chunks_exact(block).map(|c| c.to_vec());
                fill(&mut man.orbit.gamma, chunks.next().expect("order 0"))?;
                fill(&mut man.bundle.v, chunks.next().expect("order 1"))?;
                for a in man.taylor.iter_mut() {
                    fill(a, chunks.next().expect("counted above"))?;
                }
                Payload::Manifold(man)
            }
            ArtifactKind::Connection => {
                #[derive(Deserialize)]
                struct C {
                    result: ConnectionResult,
                    #[serde(default)]
                    alternatives: Vec<ConnectionResult>,
                    gaps: Option<(f64, f64)>,
                }
                let c: C = serde_json::from_value(header.payload)?;
                let trajectory = match (c.gaps, header.arrays.iter().any(|a| a.name == "trajectory")) {
                    (Some((start_gap, end_gap)), true) => {
                        let (data, r) = array("trajectory")?;
                        let rows = data.chunks_exact(r.shape[1]).map(|row| (row[0] as u8, row[1], row[2..].to_vec())).collect();
                        Some(AssembledTrajectory { rows, start_gap, end_gap })
                    }
                    _ => None,
                };
                Payload::Connection { result: c.result, alternatives: c.alternatives, trajectory }
            }
        };
        Ok(Artifact { payload, provenance: header.provenance })
    }

    pub fn orbit(&self) -> Result<&Orbit> {
        match &self.payload {
            Payload::Orbit(o) | Payload::Bundle { orbit: o, .. } => Ok(o),
            Payload::Manifold(m) => Ok(&m.orbit),
            Payload::Connection { .. } => Err(Error::Artifact("connection artifacts hold no orbit".into())),
        }
    }

    pub fn manifold(&self) -> Result<&ManifoldParam> {
        match &self.payload {
            Payload::Manifold(m) => Ok(m),
            _ => Err(Error::Artifact(format!("expected a manifold artifact, found {:?}", self.kind()))),
        }
    }
}

/// Writes through a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Artifact(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Seventeen significant digits, enough to round-trip any f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path)?)
}

fn state_header(first: &[&str], dim: usize) -> Vec<String> {
    first.iter().map(|s| s.to_string()).chain((1..=dim).map(|j| format!("x{j}"))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub model: ModelKind,
    pub stability: Stability,
    pub lambda: f64,
    pub period: f64,
    pub proportions: Vec<f64>,
    pub domain_starts: Vec<f64>,
    pub n_t: usize,
    pub n_sigma: usize,
    /// Subdomain of each `t` row block, for coloring.
    pub t_domain: Vec<usize>,
    pub columns: Vec<String>,
}

/// Grid values `t_a = a tau / n_t`, `sigma_b = -1 + 2 b / (n_sigma - 1)`.
pub fn grid_axes(period: f64, n_t: usize, n_sigma: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_t == 0 || n_sigma < 2 {
        return Err(Error::Config("export grid needs n_t >= 1 and n_sigma >= 2".into()));
    }
    let ts = (0..n_t).map(|a| period * a as f64 / n_t as f64).collect();
    let ss = (0..n_sigma).map(|b| -1.0 + 2.0 * b as f64 / (n_sigma - 1) as f64).collect();
    Ok((ts, ss))
}

/// CSV rows `(t, sigma, x1..xM)` for a `n_t x n_sigma` grid, plus a JSON sidecar.
pub fn export_grid(man: &ManifoldParam, n_t: usize, n_sigma: usize, csv_path: &Path) -> Result<GridMeta> {
    let (ts, ss) = grid_axes(man.period(), n_t, n_sigma)?;
    let dim = man.orbit.gamma.dim;
    let columns = state_header(&["t", "sigma"], dim);
    let mut w = csv_writer(csv_path)?;
    w.write_record(&columns)?;
    for &t in &ts {
        for &s in &ss {
            let x = man.eval(t, s)?;
            let row: Vec<String> = [t, s].iter().chain(x.iter()).map(|v| fmt17(*v)).collect();
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let mesh = &man.orbit.gamma.mesh;
    let meta = GridMeta {
        model: man.orbit.model.kind.clone(),
        stability: man.stability(),
        lambda: man.lambda,
        period: man.period(),
        proportions: mesh.proportions().to_vec(),
        domain_starts: (0..mesh.d()).map(|i| mesh.start(i)).collect(),
        n_t,
        n_sigma,
        t_domain: ts.iter().map(|&t| mesh.locate(t).0).collect(),
        columns,
    };
    write_atomic(&csv_path.with_extension("json"), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

/// CSV rows `(alpha, tail_norm)`.
pub fn export_decay(man: &ManifoldParam, csv_path: &Path) -> Result<()> {
    let mut w = csv_writer(csv_path)?;
    w.write_record(["alpha", "norm"])?;
    for a in 0..=man.n {
        w.write_record([a.to_string(), fmt17(man.order_norm(a))])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV rows `(t, x1..xM)` sampled evenly over one period.
pub fn export_orbit(orbit: &Orbit, samples: usize, csv_path: &Path) -> Result<()> {
    let mut w = csv_writer(csv_path)?;
    w.write_record(state_header(&["t"], orbit.gamma.dim))?;
    for s in 0..samples {
        let t = orbit.period() * s as f64 / samples as f64;
        let row: Vec<String> = std::iter::once(t).chain(orbit.eval(t)).map(fmt17).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV rows `(segment, t, x1..xM)`; segments 0, 1, 2 are unstable tail, flight and stable tail.
pub fn export_trajectory(traj: &AssembledTrajectory, csv_path: &Path) -> Result<()> {
    let dim = traj.rows.first().map_or(0, |r| r.2.len());
    let mut w = csv_writer(csv_path)?;
    w.write_record(state_header(&["segment", "t"], dim))?;
    for (seg, t, x) in &traj.rows {
        let row: Vec<String> = std::iter::once(seg.to_string()).chain(std::iter::once(*t).chain(x.iter().copied()).map(fmt17)).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub kind: ArtifactKind,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl ValidationReport {
    fn new(kind: ArtifactKind) -> Self {
        ValidationReport { kind, checks: Vec::new(), pass: true }
    }

    fn push(&mut self, name: impl Into<String>, value: f64, tolerance: f64) {
        let pass = value <= tolerance;
        self.pass &= pass;
        self.checks.push(Check { name: name.into(), value, tolerance, pass });
    }

    /// Checks that could not run are recorded as failures rather than raised.
    fn push_result(&mut self, name: &str, value: Result<f64>, tolerance: f64) {
        match value {
            Ok(v) => self.push(name, v, tolerance),
            Err(e) => {
                log::warn!("{name}: {e}");
                self.push(name, f64::INFINITY, tolerance);
            }
        }
    }
}

fn lift_defect(orbit: &Orbit, points: impl Iterator<Item = Vec<f64>>) -> f64 {
    let lift = &orbit.model.lift;
    points.map(|x| lift.consistency(&x)).fold(0.0, f64::max)
}

fn energy_spread(orbit: &Orbit, points: impl Iterator<Item = Vec<f64>>) -> Option<f64> {
    let e0 = orbit.model.energy(&orbit.eval(0.0))?;
    Some(points.filter_map(|x| orbit.model.energy(&x)).map(|e| (e - e0).abs()).fold(0.0, f64::max))
}

/// Runs the configured checks; failures are reported, never raised.
pub fn validate_artifact(art: &Artifact, spec: &ValidateSpec, flow: &FlowOptions) -> ValidationReport {
    let mut rep = ValidationReport::new(art.kind());
    match &art.payload {
        Payload::Orbit(o) | Payload::Bundle { orbit: o, .. } => {
            rep.push_result("orbit_flow_defect", validate_orbit(o, 20, flow), spec.orbit_tol);
            let pts = (0..spec.samples).map(|s| o.eval(o.period() * s as f64 / spec.samples as f64));
            rep.push("lift_consistency", lift_defect(o, pts.clone()), spec.lift_tol);
            if let Some(e) = energy_spread(o, pts) {
                rep.push("energy_constancy", e, spec.energy_tol);
            }
        }
        Payload::Manifold(man) => {
            let o = &man.orbit;
            rep.push_result("orbit_flow_defect", validate_orbit(o, 20, flow), spec.orbit_tol);
            for &t0 in &spec.t0 {
                rep.push_result(&format!("conjugacy_error_mean(t0={t0})"), conjugacy_error(man, t0, spec.samples, flow).map(|e| e.mean), spec.conjugacy_tol);
            }
            let pts = (0..spec.samples).map(|s| o.eval(o.period() * s as f64 / spec.samples as f64));
            rep.push("lift_consistency_orbit", lift_defect(o, pts.clone()), spec.lift_tol);
            if let Some(e) = energy_spread(o, pts) {
                rep.push("energy_constancy", e, spec.energy_tol);
            }
        }
        Payload::Connection { result, trajectory, .. } => {
            rep.push("connection_residual", result.residual, 1e-8);
            if let Some(t) = trajectory {
                rep.push("tail_gap_unstable", t.start_gap, 1e-6);
                rep.push("tail_gap_stable", t.end_gap, 1e-6);
            }
        }
    }
    rep
}

/// Default artifact and export file names inside an output directory.
pub fn artifact_path(out: &Path, stem: &str) -> PathBuf {
    out.join(format!("{stem}.json"))
}
