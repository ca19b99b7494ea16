//! Problem configuration: a plain-text sectioned key-value format with SI
//! units spelled out in key names, a validator that reports *all* violations
//! at once, and a builder that turns a validated config into the mesh,
//! material table, network, and optimization problem pieces.
//!
//! Format sketch:
//!
//! ```text
//! mode optimize                 # or: forward
//!
//! [mesh]
//! nx 40
//! ny 20
//! lx_m 0.4
//! ly_m 0.2
//! thickness_m 0.01
//!
//! [phase gel]
//! g_pa 1e6
//! chi water 0.2
//!
//! [solvent water]
//! molar_volume_m3_per_mol 1.8e-5
//! temperature_k 298
//! mu0_j_per_mol 0
//! mu_dry_j_per_mol -1e5
//! mu_wet_j_per_mol -100
//!
//! [dirichlet]
//! set left
//! comp x
//! value_m 0
//!
//! [load_case swell]
//! solvent water
//! ```
//!
//! `#` starts a comment; sections named `[kind arg]` may repeat where noted.
//! Omitted optional sections take the documented defaults, and the serialized
//! echo ([`ProblemConfig::to_text`]) spells every default out.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fem::{
    BoundaryConditions, DirichletSpec, DofComp, FemModel, LoadSchedule, NewtonSettings,
};
use crate::field::{DesignNetwork, NetworkSpec};
use crate::material::{MaterialTable, Phase, Solvent, SolventEnvironment};
use crate::mesh::build_rect_mesh;
use crate::opt::{
    BarrierSchedule, BlockedForceSpec, Constraint, ContinuationSchedules, LoadCase, OptSettings,
    ProjectionSchedule,
};

/// What the driver does with the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Solve the fixed region layout forward under every load case and write
    /// the deformed states.
    Forward,
    /// Run the design optimization loop.
    Optimize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    pub lx_m: f64,
    pub ly_m: f64,
    pub thickness_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub name: String,
    pub g_pa: f64,
    pub eta_f_pa: f64,
    /// `(solvent name, chi)` pairs; every declared solvent must appear.
    pub chi: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolventConfig {
    pub name: String,
    pub molar_volume_m3_per_mol: f64,
    pub temperature_k: f64,
    pub mu0_j_per_mol: f64,
    pub mu_dry_j_per_mol: f64,
    pub mu_wet_j_per_mol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSetConfig {
    pub name: String,
    /// `x0 y0 x1 y1` in meters; nodes inside (inclusive) join the set.
    pub box_m: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletConfig {
    pub set: String,
    pub comp: DofComp,
    pub value_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseConfig {
    pub name: String,
    pub solvent: String,
}

/// Where shape-objective target displacements come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    /// Inline rows `x_m y_m ux_m uy_m`.
    Points(Vec<[f64; 4]>),
    /// Sample locations whose targets are generated by a forward solve of
    /// the region layout under the objective's load case.
    SamplesFromRegions(Vec<[f64; 2]>),
    /// CSV file with rows `x_m,y_m,ux_m,uy_m`.
    File(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveConfig {
    Shape {
        case: String,
        target: TargetSpec,
    },
    BlockedForce {
        case: String,
        set: String,
        comp: DofComp,
        sign: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintConfig {
    Volume {
        phases: Vec<String>,
        bound: f64,
    },
    Grayness,
    ReactionFloor {
        case: String,
        set: String,
        comp: DofComp,
        sign: f64,
        floor_n: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub seed: u64,
    pub num_fourier: usize,
    pub hidden: usize,
    pub theta_head: bool,
    /// `None` selects the mesh-matched automatic bandwidth.
    pub bandwidth: Option<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            seed: 0,
            num_fourier: 64,
            hidden: 40,
            theta_head: false,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub n_steps: usize,
    pub beta: f64,
    pub newton_tol_rel: f64,
    pub newton_max_iterations: usize,
    pub max_subdivisions: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let n = NewtonSettings::default();
        let s = LoadSchedule::default();
        SolverConfig {
            n_steps: s.n_steps,
            beta: s.beta,
            newton_tol_rel: n.tol_rel,
            newton_max_iterations: n.max_iterations,
            max_subdivisions: n.max_subdivisions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptLoopConfig {
    pub max_iterations: usize,
    pub loss_window: usize,
    pub loss_tol: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub tau0: f64,
    pub tau_growth: f64,
    pub p_start: f64,
    pub p_step: f64,
    pub p_cap: f64,
    pub xi_start: f64,
    pub xi_step: f64,
    pub xi_floor: f64,
}

impl Default for OptLoopConfig {
    fn default() -> Self {
        let o = OptSettings::default();
        OptLoopConfig {
            max_iterations: o.max_iterations,
            loss_window: o.loss_window,
            loss_tol: o.loss_tol,
            learning_rate: o.learning_rate,
            clip_norm: o.clip_norm,
            tau0: o.barrier.tau0,
            tau_growth: o.barrier.growth,
            p_start: o.continuation.p_start,
            p_step: o.continuation.p_step,
            p_cap: o.continuation.p_cap,
            xi_start: o.continuation.xi_start,
            xi_step: o.continuation.xi_step,
            xi_floor: o.continuation.xi_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionConfig {
    pub eta: f64,
    pub beta_start: f64,
    pub beta_step: f64,
    pub beta_cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub directory: String,
    /// Snapshot cadence in iterations.
    pub snapshot_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: "out".to_string(),
            snapshot_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionConfig {
    pub phase: String,
    pub box_m: [f64; 4],
    pub theta_deg: f64,
}

/// A fully parsed and validated problem description (pure data).
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub mode: RunMode,
    pub mesh: MeshConfig,
    pub phases: Vec<PhaseConfig>,
    pub solvents: Vec<SolventConfig>,
    pub node_sets: Vec<NodeSetConfig>,
    pub dirichlet: Vec<DirichletConfig>,
    pub cases: Vec<CaseConfig>,
    pub objective: Option<ObjectiveConfig>,
    pub constraints: Vec<ConstraintConfig>,
    pub network: NetworkConfig,
    pub solver: SolverConfig,
    pub opt: OptLoopConfig,
    pub projection: Option<ProjectionConfig>,
    pub output: OutputConfig,
    pub regions: Vec<RegionConfig>,
}

// ---------------------------------------------------------------------------
// Lexing
// ---------------------------------------------------------------------------

struct RawEntry {
    key: String,
    values: Vec<String>,
    line: usize,
}

struct RawSection {
    kind: String,
    arg: Option<String>,
    line: usize,
    entries: Vec<RawEntry>,
}

fn lex(text: &str, violations: &mut Vec<String>) -> (Vec<RawEntry>, Vec<RawSection>) {
    let mut top = Vec::new();
    let mut sections: Vec<RawSection> = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let Some(inner) = inner.strip_suffix(']') else {
                violations.push(format!("line {line_no}: unterminated section header '{line}'"));
                continue;
            };
            let mut parts = inner.split_whitespace();
            let Some(kind) = parts.next() else {
                violations.push(format!("line {line_no}: empty section header"));
                continue;
            };
            let arg = parts.next().map(|s| s.to_string());
            if parts.next().is_some() {
                violations.push(format!(
                    "line {line_no}: section header '[{inner}]' has more than one argument"
                ));
            }
            sections.push(RawSection {
                kind: kind.to_string(),
                arg,
                line: line_no,
                entries: Vec::new(),
            });
        } else {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap().to_string();
            let values: Vec<String> = parts.map(|s| s.to_string()).collect();
            let entry = RawEntry {
                key,
                values,
                line: line_no,
            };
            match sections.last_mut() {
                Some(s) => s.entries.push(entry),
                None => top.push(entry),
            }
        }
    }
    (top, sections)
}

// ---------------------------------------------------------------------------
// Section reading helpers
// ---------------------------------------------------------------------------

/// Wraps one section's entries, tracking which keys were consumed so that
/// leftovers can be reported as unknown keys.
struct SectionReader<'a> {
    label: String,
    entries: &'a [RawEntry],
    used: Vec<bool>,
    violations: &'a mut Vec<String>,
}

impl<'a> SectionReader<'a> {
    fn new(label: String, entries: &'a [RawEntry], violations: &'a mut Vec<String>) -> Self {
        let used = vec![false; entries.len()];
        SectionReader {
            label,
            entries,
            used,
            violations,
        }
    }

    fn violation(&mut self, line: usize, msg: impl AsRef<str>) {
        self.violations
            .push(format!("line {line}: [{}] {}", self.label, msg.as_ref()));
    }

    /// Single-occurrence key with one value; records a violation on
    /// duplicates or parse failure.
    fn scalar<T: std::str::FromStr>(&mut self, key: &str) -> Option<T> {
        let mut found: Option<(usize, &RawEntry)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.key == key {
                self.used[i] = true;
                if found.is_some() {
                    self.violation(e.line, format!("duplicate key '{key}'"));
                } else {
                    found = Some((i, e));
                }
            }
        }
        let (_, e) = found?;
        if e.values.len() != 1 {
            self.violation(e.line, format!("key '{key}' needs exactly one value"));
            return None;
        }
        match e.values[0].parse::<T>() {
            Ok(v) => Some(v),
            Err(_) => {
                self.violation(e.line, format!("cannot parse '{}' for '{key}'", e.values[0]));
                None
            }
        }
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        let present = self.entries.iter().any(|e| e.key == key);
        match self.scalar::<T>(key) {
            Some(v) => v,
            None => {
                if !present {
                    let line = self.entries.first().map(|e| e.line).unwrap_or(0);
                    self.violation(line, format!("missing required key '{key}'"));
                }
                default
            }
        }
    }

    fn optional<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        self.scalar::<T>(key).unwrap_or(default)
    }

    /// All occurrences of a repeatable key, each with its value list.
    fn repeated(&mut self, key: &str) -> Vec<(&'a RawEntry, usize)> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.key == key {
                self.used[i] = true;
                out.push((e, e.line));
            }
        }
        out
    }

    fn comp(&mut self, key: &str) -> DofComp {
        match self.required::<String>(key, "x".to_string()).as_str() {
            "x" => DofComp::X,
            "y" => DofComp::Y,
            other => {
                let line = self.entries.first().map(|e| e.line).unwrap_or(0);
                self.violation(line, format!("'{key}' must be x or y, got '{other}'"));
                DofComp::X
            }
        }
    }

    /// `x0 y0 x1 y1` under one key.
    fn box4(&mut self, key: &str) -> [f64; 4] {
        let mut out = [0.0; 4];
        let occurrences = self.repeated(key);
        match occurrences.as_slice() {
            [] => {
                let line = self.entries.first().map(|e| e.line).unwrap_or(0);
                self.violation(line, format!("missing required key '{key}'"));
            }
            [(e, line)] => {
                if e.values.len() != 4 {
                    self.violation(*line, format!("'{key}' needs 4 values: x0 y0 x1 y1"));
                } else {
                    for (k, v) in e.values.iter().enumerate() {
                        match v.parse::<f64>() {
                            Ok(x) => out[k] = x,
                            Err(_) => {
                                self.violation(*line, format!("cannot parse '{v}' in '{key}'"))
                            }
                        }
                    }
                    if out[0] > out[2] || out[1] > out[3] {
                        self.violation(*line, format!("'{key}' box has x0 > x1 or y0 > y1"));
                    }
                }
            }
            many => {
                let line = many[1].1;
                self.violation(line, format!("duplicate key '{key}'"));
            }
        }
        out
    }

    /// Reports unconsumed keys; call last.
    fn finish(self) {
        for (i, e) in self.entries.iter().enumerate() {
            if !self.used[i] {
                let (label, key, line) = (self.label.clone(), e.key.clone(), e.line);
                self.violations
                    .push(format!("line {line}: [{label}] unknown key '{key}'"));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Parses and validates a config; returns every violation at once.
pub fn parse_config(text: &str) -> Result<ProblemConfig> {
    let mut violations = Vec::new();
    let (top, sections) = lex(text, &mut violations);

    // ---- Top level: mode. ----
    let mut mode = RunMode::Optimize;
    for e in &top {
        match e.key.as_str() {
            "mode" => match e.values.first().map(|s| s.as_str()) {
                Some("forward") => mode = RunMode::Forward,
                Some("optimize") => mode = RunMode::Optimize,
                other => violations.push(format!(
                    "line {}: mode must be forward or optimize, got '{}'",
                    e.line,
                    other.unwrap_or("")
                )),
            },
            k => violations.push(format!("line {}: unknown top-level key '{k}'", e.line)),
        }
    }

    // ---- Collect sections by kind, checking singletons and arguments. ----
    let mut mesh: Option<MeshConfig> = None;
    let mut phases: Vec<PhaseConfig> = Vec::new();
    let mut solvents: Vec<SolventConfig> = Vec::new();
    let mut node_sets: Vec<NodeSetConfig> = Vec::new();
    let mut dirichlet: Vec<DirichletConfig> = Vec::new();
    let mut cases: Vec<CaseConfig> = Vec::new();
    let mut objective: Option<ObjectiveConfig> = None;
    let mut constraints: Vec<ConstraintConfig> = Vec::new();
    let mut network = NetworkConfig::default();
    let mut saw_network = false;
    let mut solver = SolverConfig::default();
    let mut saw_solver = false;
    let mut opt = OptLoopConfig::default();
    let mut saw_opt = false;
    let mut projection: Option<ProjectionConfig> = None;
    let mut output = OutputConfig::default();
    let mut saw_output = false;
    let mut regions: Vec<RegionConfig> = Vec::new();

    for s in &sections {
        let label = match &s.arg {
            Some(a) => format!("{} {a}", s.kind),
            None => s.kind.clone(),
        };
        let need_arg = |arg: &Option<String>, violations: &mut Vec<String>| -> String {
            match arg {
                Some(a) => a.clone(),
                None => {
                    violations.push(format!(
                        "line {}: [{}] section needs a name argument",
                        s.line, s.kind
                    ));
                    String::new()
                }
            }
        };
        let no_arg = |arg: &Option<String>, violations: &mut Vec<String>| {
            if arg.is_some() {
                violations.push(format!(
                    "line {}: [{}] section takes no argument",
                    s.line, s.kind
                ));
            }
        };
        match s.kind.as_str() {
            "mesh" => {
                no_arg(&s.arg, &mut violations);
                if mesh.is_some() {
                    violations.push(format!("line {}: duplicate [mesh] section", s.line));
                }
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                let m = MeshConfig {
                    nx: r.required("nx", 1),
                    ny: r.required("ny", 1),
                    lx_m: r.required("lx_m", 1.0),
                    ly_m: r.required("ly_m", 1.0),
                    thickness_m: r.required("thickness_m", 1.0),
                };
                r.finish();
                mesh = Some(m);
            }
            "phase" => {
                let name = need_arg(&s.arg, &mut violations);
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                let g_pa = r.required("g_pa", 1.0);
                let eta_f_pa = r.optional("eta_f_pa", 0.0);
                let mut chi = Vec::new();
                for (e, line) in r.repeated("chi") {
                    if e.values.len() != 2 {
                        r.violation(line, "'chi' needs: chi <solvent> <value>");
                        continue;
                    }
                    match e.values[1].parse::<f64>() {
                        Ok(v) => chi.push((e.values[0].clone(), v)),
                        Err(_) => r.violation(
                            line,
                            format!("cannot parse chi value '{}'", e.values[1]),
                        ),
                    }
                }
                r.finish();
                phases.push(PhaseConfig {
                    name,
                    g_pa,
                    eta_f_pa,
                    chi,
                });
            }
            "solvent" => {
                let name = need_arg(&s.arg, &mut violations);
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                let sc = SolventConfig {
                    name,
                    molar_volume_m3_per_mol: r.required("molar_volume_m3_per_mol", 1e-5),
                    temperature_k: r.required("temperature_k", 298.0),
                    mu0_j_per_mol: r.required("mu0_j_per_mol", 0.0),
                    mu_dry_j_per_mol: r.required("mu_dry_j_per_mol", -1e5),
                    mu_wet_j_per_mol: r.required("mu_wet_j_per_mol", -100.0),
                };
                r.finish();
                solvents.push(sc);
            }
            "node_set" => {
                let name = need_arg(&s.arg, &mut violations);
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                let box_m = r.box4("box_m");
                r.finish();
                node_sets.push(NodeSetConfig { name, box_m });
            }
            "dirichlet" => {
                no_arg(&s.arg, &mut violations);
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                let d = DirichletConfig {
                    set: r.required("set", String::new()),
                    comp: r.comp("comp"),
                    value_m: r.optional("value_m", 0.0),
                };
                r.finish();
                dirichlet.push(d);
            }
            "load_case" => {
                let name = need_arg(&s.arg, &mut violations);
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                let c = CaseConfig {
                    name,
                    solvent: r.required("solvent", String::new()),
                };
                r.finish();
                cases.push(c);
            }
            "objective" => {
                if objective.is_some() {
                    violations.push(format!("line {}: duplicate [objective] section", s.line));
                }
                let kind = need_arg(&s.arg, &mut violations);
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                let obj = match kind.as_str() {
                    "shape" => {
                        let case = r.required("case", String::new());
                        let mut points = Vec::new();
                        for (e, line) in r.repeated("target_point_m") {
                            let vals: Vec<f64> = e
                                .values
                                .iter()
                                .filter_map(|v| v.parse().ok())
                                .collect();
                            if vals.len() != 4 || e.values.len() != 4 {
                                r.violation(
                                    line,
                                    "'target_point_m' needs: x_m y_m ux_m uy_m",
                                );
                            } else {
                                points.push([vals[0], vals[1], vals[2], vals[3]]);
                            }
                        }
                        let mut samples = Vec::new();
                        for (e, line) in r.repeated("sample_point_m") {
                            let vals: Vec<f64> = e
                                .values
                                .iter()
                                .filter_map(|v| v.parse().ok())
                                .collect();
                            if vals.len() != 2 || e.values.len() != 2 {
                                r.violation(line, "'sample_point_m' needs: x_m y_m");
                            } else {
                                samples.push([vals[0], vals[1]]);
                            }
                        }
                        let file: Option<String> = r.scalar("target_file");
                        let styles = usize::from(!points.is_empty())
                            + usize::from(!samples.is_empty())
                            + usize::from(file.is_some());
                        if styles != 1 {
                            r.violation(
                                s.line,
                                "shape objective needs exactly one of target_point_m rows, \
                                 sample_point_m rows, or target_file",
                            );
                        }
                        let target = if !points.is_empty() {
                            TargetSpec::Points(points)
                        } else if !samples.is_empty() {
                            TargetSpec::SamplesFromRegions(samples)
                        } else {
                            TargetSpec::File(file.unwrap_or_default())
                        };
                        Some(ObjectiveConfig::Shape { case, target })
                    }
                    "blocked_force" => {
                        let case = r.required("case", String::new());
                        let set = r.required("set", String::new());
                        let comp = r.comp("comp");
                        let sign: f64 = r.required("sign", -1.0);
                        if sign != 1.0 && sign != -1.0 {
                            r.violation(s.line, format!("sign must be -1 or 1, got {sign}"));
                        }
                        Some(ObjectiveConfig::BlockedForce {
                            case,
                            set,
                            comp,
                            sign,
                        })
                    }
                    other => {
                        r.violation(
                            s.line,
                            format!("objective kind must be shape or blocked_force, got '{other}'"),
                        );
                        None
                    }
                };
                r.finish();
                if let Some(o) = obj {
                    objective = Some(o);
                }
            }
            "constraint" => {
                let kind = need_arg(&s.arg, &mut violations);
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                match kind.as_str() {
                    "volume" => {
                        let mut phase_names = Vec::new();
                        match r.repeated("phases").as_slice() {
                            [] => r.violation(s.line, "missing required key 'phases'"),
                            [(e, _)] => {
                                phase_names = e.values.clone();
                            }
                            many => {
                                let line = many[1].1;
                                r.violation(line, "duplicate key 'phases'");
                            }
                        }
                        let bound = r.required("bound", 0.5);
                        constraints.push(ConstraintConfig::Volume {
                            phases: phase_names,
                            bound,
                        });
                    }
                    "grayness" => {
                        constraints.push(ConstraintConfig::Grayness);
                    }
                    "reaction_floor" => {
                        let case = r.required("case", String::new());
                        let set = r.required("set", String::new());
                        let comp = r.comp("comp");
                        let sign: f64 = r.required("sign", 1.0);
                        if sign != 1.0 && sign != -1.0 {
                            r.violation(s.line, format!("sign must be -1 or 1, got {sign}"));
                        }
                        let floor_n = r.required("floor_n", 0.0);
                        constraints.push(ConstraintConfig::ReactionFloor {
                            case,
                            set,
                            comp,
                            sign,
                            floor_n,
                        });
                    }
                    other => r.violation(
                        s.line,
                        format!(
                            "constraint kind must be volume, grayness, or reaction_floor, got '{other}'"
                        ),
                    ),
                }
                r.finish();
            }
            "network" => {
                no_arg(&s.arg, &mut violations);
                if saw_network {
                    violations.push(format!("line {}: duplicate [network] section", s.line));
                }
                saw_network = true;
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                network.seed = r.optional("seed", network.seed);
                network.num_fourier = r.optional("num_fourier", network.num_fourier);
                network.hidden = r.optional("hidden", network.hidden);
                network.theta_head = r.optional::<u8>("theta_head", 0) != 0;
                if let Some(bw) = r.scalar::<String>("bandwidth") {
                    if bw == "auto" {
                        network.bandwidth = None;
                    } else {
                        match bw.parse::<f64>() {
                            Ok(v) => network.bandwidth = Some(v),
                            Err(_) => {
                                let line = s.line;
                                r.violation(
                                    line,
                                    format!("bandwidth must be a number or 'auto', got '{bw}'"),
                                );
                            }
                        }
                    }
                }
                r.finish();
            }
            "solver" => {
                no_arg(&s.arg, &mut violations);
                if saw_solver {
                    violations.push(format!("line {}: duplicate [solver] section", s.line));
                }
                saw_solver = true;
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                solver.n_steps = r.optional("n_steps", solver.n_steps);
                solver.beta = r.optional("beta", solver.beta);
                solver.newton_tol_rel = r.optional("newton_tol_rel", solver.newton_tol_rel);
                solver.newton_max_iterations =
                    r.optional("newton_max_iterations", solver.newton_max_iterations);
                solver.max_subdivisions = r.optional("max_subdivisions", solver.max_subdivisions);
                r.finish();
            }
            "opt" => {
                no_arg(&s.arg, &mut violations);
                if saw_opt {
                    violations.push(format!("line {}: duplicate [opt] section", s.line));
                }
                saw_opt = true;
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                opt.max_iterations = r.optional("max_iterations", opt.max_iterations);
                opt.loss_window = r.optional("loss_window", opt.loss_window);
                opt.loss_tol = r.optional("loss_tol", opt.loss_tol);
                opt.learning_rate = r.optional("learning_rate", opt.learning_rate);
                opt.clip_norm = r.optional("clip_norm", opt.clip_norm);
                opt.tau0 = r.optional("tau0", opt.tau0);
                opt.tau_growth = r.optional("tau_growth", opt.tau_growth);
                opt.p_start = r.optional("p_start", opt.p_start);
                opt.p_step = r.optional("p_step", opt.p_step);
                opt.p_cap = r.optional("p_cap", opt.p_cap);
                opt.xi_start = r.optional("xi_start", opt.xi_start);
                opt.xi_step = r.optional("xi_step", opt.xi_step);
                opt.xi_floor = r.optional("xi_floor", opt.xi_floor);
                r.finish();
            }
            "projection" => {
                no_arg(&s.arg, &mut violations);
                if projection.is_some() {
                    violations.push(format!("line {}: duplicate [projection] section", s.line));
                }
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                let p = ProjectionConfig {
                    eta: r.optional("eta", 0.5),
                    beta_start: r.required("beta_start", 1.0),
                    beta_step: r.optional("beta_step", 0.0),
                    beta_cap: r.required("beta_cap", 8.0),
                };
                r.finish();
                projection = Some(p);
            }
            "output" => {
                no_arg(&s.arg, &mut violations);
                if saw_output {
                    violations.push(format!("line {}: duplicate [output] section", s.line));
                }
                saw_output = true;
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                output.directory = r.optional("directory", output.directory.clone());
                output.snapshot_every = r.optional("snapshot_every", output.snapshot_every);
                r.finish();
            }
            "region" => {
                no_arg(&s.arg, &mut violations);
                let mut r = SectionReader::new(label, &s.entries, &mut violations);
                let reg = RegionConfig {
                    phase: r.required("phase", String::new()),
                    box_m: r.box4("box_m"),
                    theta_deg: r.optional("theta_deg", 0.0),
                };
                r.finish();
                regions.push(reg);
            }
            other => {
                violations.push(format!("line {}: unknown section kind '{other}'", s.line));
            }
        }
    }

    let Some(mesh) = mesh else {
        violations.push("missing required [mesh] section".to_string());
        return Err(Error::Config(violations));
    };

    let config = ProblemConfig {
        mode,
        mesh,
        phases,
        solvents,
        node_sets,
        dirichlet,
        cases,
        objective,
        constraints,
        network,
        solver,
        opt,
        projection,
        output,
        regions,
    };
    validate(&config, &mut violations);
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(violations))
    }
}

/// Loads and validates a config file.
pub fn load_config(path: &Path) -> Result<ProblemConfig> {
    let text = crate::io::read_text(path)?;
    parse_config(&text)
}

// ---------------------------------------------------------------------------
// Semantic validation
// ---------------------------------------------------------------------------

fn validate(c: &ProblemConfig, v: &mut Vec<String>) {
    // Mesh ranges.
    if c.mesh.nx == 0 || c.mesh.ny == 0 {
        v.push("[mesh] nx and ny must be at least 1".to_string());
    }
    if !(c.mesh.lx_m > 0.0) || !(c.mesh.ly_m > 0.0) || !(c.mesh.thickness_m > 0.0) {
        v.push("[mesh] lx_m, ly_m, thickness_m must be positive".to_string());
    }

    // Phases.
    if c.phases.is_empty() {
        v.push("at least one [phase] section is required".to_string());
    }
    let mut phase_names = BTreeSet::new();
    for p in &c.phases {
        if !phase_names.insert(p.name.as_str()) {
            v.push(format!("duplicate phase name '{}'", p.name));
        }
        if !(p.g_pa > 0.0) {
            v.push(format!("[phase {}] g_pa must be positive", p.name));
        }
        if p.eta_f_pa < 0.0 {
            v.push(format!("[phase {}] eta_f_pa must be nonnegative", p.name));
        }
        let mut seen = BTreeSet::new();
        for (s, _) in &p.chi {
            if !seen.insert(s.as_str()) {
                v.push(format!("[phase {}] duplicate chi entry for '{s}'", p.name));
            }
            if !c.solvents.iter().any(|sv| &sv.name == s) {
                v.push(format!("[phase {}] chi references unknown solvent '{s}'", p.name));
            }
        }
        for sv in &c.solvents {
            if !p.chi.iter().any(|(s, _)| s == &sv.name) {
                v.push(format!(
                    "[phase {}] missing chi entry for solvent '{}'",
                    p.name, sv.name
                ));
            }
        }
    }

    // Solvents.
    if c.solvents.is_empty() {
        v.push("at least one [solvent] section is required".to_string());
    }
    let mut solvent_names = BTreeSet::new();
    for s in &c.solvents {
        if !solvent_names.insert(s.name.as_str()) {
            v.push(format!("duplicate solvent name '{}'", s.name));
        }
        if !(s.molar_volume_m3_per_mol > 0.0) {
            v.push(format!(
                "[solvent {}] molar_volume_m3_per_mol must be positive",
                s.name
            ));
        }
        if !(s.temperature_k > 0.0) {
            v.push(format!("[solvent {}] temperature_k must be positive", s.name));
        }
        if !(s.mu_dry_j_per_mol < s.mu_wet_j_per_mol) {
            v.push(format!(
                "[solvent {}] needs mu_dry_j_per_mol < mu_wet_j_per_mol (got {} vs {})",
                s.name, s.mu_dry_j_per_mol, s.mu_wet_j_per_mol
            ));
        }
        if s.mu_wet_j_per_mol > s.mu0_j_per_mol {
            v.push(format!(
                "[solvent {}] mu_wet_j_per_mol must not exceed mu0_j_per_mol",
                s.name
            ));
        }
    }

    // Node sets.
    let mut set_names: BTreeSet<&str> = ["left", "right", "bottom", "top"].into();
    for ns in &c.node_sets {
        if !set_names.insert(ns.name.as_str()) {
            v.push(format!(
                "node set '{}' collides with an existing set name",
                ns.name
            ));
        }
    }
    let set_exists = |name: &str| set_names.contains(name);

    // Dirichlet.
    if c.dirichlet.is_empty() {
        v.push(
            "at least one [dirichlet] section is required (an unconstrained body has a \
             singular stiffness matrix)"
                .to_string(),
        );
    }
    for d in &c.dirichlet {
        if !set_exists(&d.set) {
            v.push(format!("[dirichlet] references unknown node set '{}'", d.set));
        }
    }

    // Load cases.
    if c.cases.is_empty() {
        v.push("at least one [load_case] section is required".to_string());
    }
    let mut case_names = BTreeSet::new();
    for lc in &c.cases {
        if !case_names.insert(lc.name.as_str()) {
            v.push(format!("duplicate load case name '{}'", lc.name));
        }
        if !solvent_names.contains(lc.solvent.as_str()) {
            v.push(format!(
                "[load_case {}] references unknown solvent '{}'",
                lc.name, lc.solvent
            ));
        }
    }
    let case_exists = |name: &str| case_names.contains(name);

    // Mode/objective pairing.
    match (c.mode, &c.objective) {
        (RunMode::Optimize, None) => {
            v.push("optimize mode requires an [objective] section".to_string())
        }
        (RunMode::Forward, Some(_)) => {
            v.push("forward mode does not take an [objective] section".to_string())
        }
        _ => {}
    }
    if c.mode == RunMode::Forward && c.regions.is_empty() {
        v.push("forward mode requires at least one [region] section".to_string());
    }

    // Objective details.
    if let Some(obj) = &c.objective {
        match obj {
            ObjectiveConfig::Shape { case, target } => {
                if !case_exists(case) {
                    v.push(format!("[objective shape] references unknown load case '{case}'"));
                }
                match target {
                    TargetSpec::SamplesFromRegions(pts) => {
                        if c.regions.is_empty() {
                            v.push(
                                "shape objective samples targets from regions, but no [region] \
                                 sections are defined"
                                    .to_string(),
                            );
                        }
                        if pts.is_empty() {
                            v.push("shape objective has no sample points".to_string());
                        }
                    }
                    TargetSpec::Points(pts) => {
                        if pts.is_empty() {
                            v.push("shape objective has no target points".to_string());
                        }
                    }
                    TargetSpec::File(f) => {
                        if f.is_empty() {
                            v.push("shape objective target_file is empty".to_string());
                        }
                    }
                }
            }
            ObjectiveConfig::BlockedForce { case, set, .. } => {
                if !case_exists(case) {
                    v.push(format!(
                        "[objective blocked_force] references unknown load case '{case}'"
                    ));
                }
                if !set_exists(set) {
                    v.push(format!(
                        "[objective blocked_force] references unknown node set '{set}'"
                    ));
                }
            }
        }
    }

    // Constraints.
    for cc in &c.constraints {
        match cc {
            ConstraintConfig::Volume { phases, bound } => {
                if phases.is_empty() {
                    v.push("[constraint volume] has an empty phase list".to_string());
                }
                for p in phases {
                    if !phase_names.contains(p.as_str()) {
                        v.push(format!(
                            "[constraint volume] references unknown phase '{p}'"
                        ));
                    }
                }
                if !(*bound > 0.0 && *bound <= 1.0) {
                    v.push(format!(
                        "[constraint volume] bound must lie in (0, 1], got {bound}"
                    ));
                }
            }
            ConstraintConfig::Grayness => {}
            ConstraintConfig::ReactionFloor { case, set, .. } => {
                if !case_exists(case) {
                    v.push(format!(
                        "[constraint reaction_floor] references unknown load case '{case}'"
                    ));
                }
                if !set_exists(set) {
                    v.push(format!(
                        "[constraint reaction_floor] references unknown node set '{set}'"
                    ));
                }
            }
        }
    }

    // Network.
    if c.network.num_fourier == 0 || c.network.hidden == 0 {
        v.push("[network] num_fourier and hidden must be at least 1".to_string());
    }
    if let Some(bw) = c.network.bandwidth {
        if !(bw > 0.0) {
            v.push(format!("[network] bandwidth must be positive, got {bw}"));
        }
    }

    // Solver.
    if c.solver.n_steps == 0 {
        v.push("[solver] n_steps must be at least 1".to_string());
    }
    if !(c.solver.beta > 0.0) {
        v.push("[solver] beta must be positive".to_string());
    }
    if !(c.solver.newton_tol_rel > 0.0) {
        v.push("[solver] newton_tol_rel must be positive".to_string());
    }
    if c.solver.newton_max_iterations == 0 {
        v.push("[solver] newton_max_iterations must be at least 1".to_string());
    }

    // Optimizer loop.
    let o = &c.opt;
    if o.max_iterations == 0 {
        v.push("[opt] max_iterations must be at least 1".to_string());
    }
    if o.loss_window == 0 {
        v.push("[opt] loss_window must be at least 1".to_string());
    }
    if !(o.loss_tol > 0.0) || !(o.learning_rate > 0.0) || !(o.clip_norm > 0.0) {
        v.push("[opt] loss_tol, learning_rate, clip_norm must be positive".to_string());
    }
    if !(o.tau0 > 0.0) || !(o.tau_growth >= 1.0) {
        v.push("[opt] needs tau0 > 0 and tau_growth >= 1".to_string());
    }
    if !(o.p_start >= 1.0) || !(o.p_cap >= o.p_start) || o.p_step < 0.0 {
        v.push("[opt] needs p_start >= 1, p_cap >= p_start, p_step >= 0".to_string());
    }
    if !(o.xi_floor > 0.0) || !(o.xi_start >= o.xi_floor) || o.xi_step < 0.0 {
        v.push("[opt] needs xi_floor > 0, xi_start >= xi_floor, xi_step >= 0".to_string());
    }

    // Projection.
    if let Some(p) = &c.projection {
        if !(p.eta > 0.0 && p.eta < 1.0) {
            v.push(format!("[projection] eta must lie in (0, 1), got {}", p.eta));
        }
        if p.beta_start < 0.0 || p.beta_cap < p.beta_start || p.beta_step < 0.0 {
            v.push(
                "[projection] needs beta_start >= 0, beta_cap >= beta_start, beta_step >= 0"
                    .to_string(),
            );
        }
    }

    // Output.
    if c.output.directory.is_empty() {
        v.push("[output] directory must not be empty".to_string());
    }
    if c.output.snapshot_every == 0 {
        v.push("[output] snapshot_every must be at least 1".to_string());
    }

    // Regions.
    for r in &c.regions {
        if !phase_names.contains(r.phase.as_str()) {
            v.push(format!("[region] references unknown phase '{}'", r.phase));
        }
        if !r.theta_deg.is_finite() {
            v.push("[region] theta_deg must be finite".to_string());
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization (config echo)
// ---------------------------------------------------------------------------

fn comp_str(c: DofComp) -> &'static str {
    match c {
        DofComp::X => "x",
        DofComp::Y => "y",
    }
}

impl ProblemConfig {
    /// Serializes the fully defaulted config; `parse_config(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "mode {}\n\n",
            match self.mode {
                RunMode::Forward => "forward",
                RunMode::Optimize => "optimize",
            }
        ));
        s.push_str(&format!(
            "[mesh]\nnx {}\nny {}\nlx_m {}\nly_m {}\nthickness_m {}\n\n",
            self.mesh.nx, self.mesh.ny, self.mesh.lx_m, self.mesh.ly_m, self.mesh.thickness_m
        ));
        for p in &self.phases {
            s.push_str(&format!(
                "[phase {}]\ng_pa {}\neta_f_pa {}\n",
                p.name, p.g_pa, p.eta_f_pa
            ));
            for (solvent, chi) in &p.chi {
                s.push_str(&format!("chi {solvent} {chi}\n"));
            }
            s.push('\n');
        }
        for sv in &self.solvents {
            s.push_str(&format!(
                "[solvent {}]\nmolar_volume_m3_per_mol {}\ntemperature_k {}\nmu0_j_per_mol {}\n\
                 mu_dry_j_per_mol {}\nmu_wet_j_per_mol {}\n\n",
                sv.name,
                sv.molar_volume_m3_per_mol,
                sv.temperature_k,
                sv.mu0_j_per_mol,
                sv.mu_dry_j_per_mol,
                sv.mu_wet_j_per_mol
            ));
        }
        for ns in &self.node_sets {
            s.push_str(&format!(
                "[node_set {}]\nbox_m {} {} {} {}\n\n",
                ns.name, ns.box_m[0], ns.box_m[1], ns.box_m[2], ns.box_m[3]
            ));
        }
        for d in &self.dirichlet {
            s.push_str(&format!(
                "[dirichlet]\nset {}\ncomp {}\nvalue_m {}\n\n",
                d.set,
                comp_str(d.comp),
                d.value_m
            ));
        }
        for lc in &self.cases {
            s.push_str(&format!("[load_case {}]\nsolvent {}\n\n", lc.name, lc.solvent));
        }
        if let Some(obj) = &self.objective {
            match obj {
                ObjectiveConfig::Shape { case, target } => {
                    s.push_str(&format!("[objective shape]\ncase {case}\n"));
                    match target {
                        TargetSpec::Points(pts) => {
                            for p in pts {
                                s.push_str(&format!(
                                    "target_point_m {} {} {} {}\n",
                                    p[0], p[1], p[2], p[3]
                                ));
                            }
                        }
                        TargetSpec::SamplesFromRegions(pts) => {
                            for p in pts {
                                s.push_str(&format!("sample_point_m {} {}\n", p[0], p[1]));
                            }
                        }
                        TargetSpec::File(f) => s.push_str(&format!("target_file {f}\n")),
                    }
                    s.push('\n');
                }
                ObjectiveConfig::BlockedForce {
                    case,
                    set,
                    comp,
                    sign,
                } => {
                    s.push_str(&format!(
                        "[objective blocked_force]\ncase {case}\nset {set}\ncomp {}\nsign {sign}\n\n",
                        comp_str(*comp)
                    ));
                }
            }
        }
        for cc in &self.constraints {
            match cc {
                ConstraintConfig::Volume { phases, bound } => {
                    s.push_str(&format!(
                        "[constraint volume]\nphases {}\nbound {bound}\n\n",
                        phases.join(" ")
                    ));
                }
                ConstraintConfig::Grayness => s.push_str("[constraint grayness]\n\n"),
                ConstraintConfig::ReactionFloor {
                    case,
                    set,
                    comp,
                    sign,
                    floor_n,
                } => {
                    s.push_str(&format!(
                        "[constraint reaction_floor]\ncase {case}\nset {set}\ncomp {}\nsign {sign}\nfloor_n {floor_n}\n\n",
                        comp_str(*comp)
                    ));
                }
            }
        }
        s.push_str(&format!(
            "[network]\nseed {}\nnum_fourier {}\nhidden {}\ntheta_head {}\nbandwidth {}\n\n",
            self.network.seed,
            self.network.num_fourier,
            self.network.hidden,
            u8::from(self.network.theta_head),
            match self.network.bandwidth {
                Some(b) => b.to_string(),
                None => "auto".to_string(),
            }
        ));
        s.push_str(&format!(
            "[solver]\nn_steps {}\nbeta {}\nnewton_tol_rel {}\nnewton_max_iterations {}\nmax_subdivisions {}\n\n",
            self.solver.n_steps,
            self.solver.beta,
            self.solver.newton_tol_rel,
            self.solver.newton_max_iterations,
            self.solver.max_subdivisions
        ));
        let o = &self.opt;
        s.push_str(&format!(
            "[opt]\nmax_iterations {}\nloss_window {}\nloss_tol {}\nlearning_rate {}\nclip_norm {}\n\
             tau0 {}\ntau_growth {}\np_start {}\np_step {}\np_cap {}\nxi_start {}\nxi_step {}\nxi_floor {}\n\n",
            o.max_iterations, o.loss_window, o.loss_tol, o.learning_rate, o.clip_norm,
            o.tau0, o.tau_growth, o.p_start, o.p_step, o.p_cap, o.xi_start, o.xi_step, o.xi_floor
        ));
        if let Some(p) = &self.projection {
            s.push_str(&format!(
                "[projection]\neta {}\nbeta_start {}\nbeta_step {}\nbeta_cap {}\n\n",
                p.eta, p.beta_start, p.beta_step, p.beta_cap
            ));
        }
        s.push_str(&format!(
            "[output]\ndirectory {}\nsnapshot_every {}\n\n",
            self.output.directory, self.output.snapshot_every
        ));
        for r in &self.regions {
            s.push_str(&format!(
                "[region]\nphase {}\nbox_m {} {} {} {}\ntheta_deg {}\n\n",
                r.phase, r.box_m[0], r.box_m[1], r.box_m[2], r.box_m[3], r.theta_deg
            ));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Building
// ---------------------------------------------------------------------------

/// Objective with names resolved to indices; the shape target may still need
/// resolution (file read or layout forward solve) by the driver.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltObjective {
    Shape { case: usize, target: TargetSpec },
    BlockedForce { case: usize, spec: BlockedForceSpec },
}

/// Fixed one-hot phase layout painted from region boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutFields {
    /// One-hot densities per element.
    pub rho: Vec<Vec<f64>>,
    /// Fiber angle (radians) per element per Gauss point.
    pub theta: Vec<[f64; 4]>,
}

/// Everything heavy, constructed from a validated config.
pub struct BuiltProblem {
    pub model: FemModel,
    pub table: MaterialTable,
    pub net: DesignNetwork,
    pub cases: Vec<LoadCase>,
    pub objective: Option<BuiltObjective>,
    pub constraints: Vec<Constraint>,
    pub schedule: LoadSchedule,
    pub newton: NewtonSettings,
    pub settings: OptSettings,
    /// Present when the config paints regions; required in forward mode.
    pub layout: Option<LayoutFields>,
}

impl ProblemConfig {
    /// Constructs the mesh, model, material table, network, and problem
    /// pieces. Geometry-dependent violations (empty node-set boxes, region
    /// gaps) surface here as configuration errors.
    pub fn build(&self) -> Result<BuiltProblem> {
        let mut violations = Vec::new();

        let mut mesh = build_rect_mesh(
            self.mesh.nx,
            self.mesh.ny,
            self.mesh.lx_m,
            self.mesh.ly_m,
            self.mesh.thickness_m,
        )?;
        for ns in &self.node_sets {
            let nodes = mesh.nodes_in_box(ns.box_m[0], ns.box_m[1], ns.box_m[2], ns.box_m[3]);
            if nodes.is_empty() {
                violations.push(format!("node set '{}' box matches no nodes", ns.name));
                continue;
            }
            mesh.add_node_set(&ns.name, nodes)?;
        }

        let bc = BoundaryConditions {
            dirichlet: self
                .dirichlet
                .iter()
                .map(|d| DirichletSpec {
                    node_set: d.set.clone(),
                    comp: d.comp,
                    value: d.value_m,
                })
                .collect(),
            tractions: vec![],
        };

        let table = MaterialTable {
            phases: self
                .phases
                .iter()
                .map(|p| Phase {
                    name: p.name.clone(),
                    shear_modulus: p.g_pa,
                    fiber_stiffness: p.eta_f_pa,
                    // chi ordered by solvent declaration order.
                    chi: self
                        .solvents
                        .iter()
                        .map(|sv| {
                            p.chi
                                .iter()
                                .find(|(n, _)| n == &sv.name)
                                .map(|(_, x)| *x)
                                .unwrap_or(f64::NAN)
                        })
                        .collect(),
                })
                .collect(),
            solvents: self
                .solvents
                .iter()
                .map(|sv| Solvent {
                    name: sv.name.clone(),
                    environment: SolventEnvironment {
                        molar_volume: sv.molar_volume_m3_per_mol,
                        temperature: sv.temperature_k,
                        mu0: sv.mu0_j_per_mol,
                    },
                    mu_dry: sv.mu_dry_j_per_mol,
                    mu_wet: sv.mu_wet_j_per_mol,
                })
                .collect(),
        };

        let layout = if self.regions.is_empty() {
            None
        } else {
            let n_ph = self.phases.len();
            let tol = 1e-9 * (self.mesh.lx_m.powi(2) + self.mesh.ly_m.powi(2)).sqrt();
            let mut rho = Vec::with_capacity(mesh.num_elements());
            let mut theta = Vec::with_capacity(mesh.num_elements());
            let mut uncovered = 0usize;
            for e in 0..mesh.num_elements() {
                let c = mesh.element_centroid(e);
                // Later regions paint over earlier ones.
                let hit = self.regions.iter().rev().find(|r| {
                    c[0] >= r.box_m[0] - tol
                        && c[0] <= r.box_m[2] + tol
                        && c[1] >= r.box_m[1] - tol
                        && c[1] <= r.box_m[3] + tol
                });
                match hit {
                    Some(r) => {
                        let m = self
                            .phases
                            .iter()
                            .position(|p| p.name == r.phase)
                            .unwrap_or(0);
                        let mut row = vec![0.0; n_ph];
                        row[m] = 1.0;
                        rho.push(row);
                        let rad = (r.theta_deg.to_radians()).rem_euclid(std::f64::consts::PI);
                        theta.push([rad; 4]);
                    }
                    None => {
                        uncovered += 1;
                        rho.push(vec![0.0; n_ph]);
                        theta.push([0.0; 4]);
                    }
                }
            }
            let layout_required = self.mode == RunMode::Forward
                || matches!(
                    &self.objective,
                    Some(ObjectiveConfig::Shape {
                        target: TargetSpec::SamplesFromRegions(_),
                        ..
                    })
                );
            if uncovered > 0 && layout_required {
                violations.push(format!(
                    "{uncovered} of {} elements are not covered by any [region] box",
                    mesh.num_elements()
                ));
            }
            Some(LayoutFields { rho, theta })
        };

        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }

        let model = FemModel::new(mesh, &bc)?;

        let bandwidth = self
            .network
            .bandwidth
            .unwrap_or_else(|| NetworkSpec::default_bandwidth(self.mesh.nx, self.mesh.ny));
        let net = DesignNetwork::init(
            NetworkSpec {
                seed: self.network.seed,
                num_fourier: self.network.num_fourier,
                hidden: self.network.hidden,
                n_phases: self.phases.len(),
                theta_head: self.network.theta_head,
                bandwidth,
            },
            [[0.0, 0.0], [self.mesh.lx_m, self.mesh.ly_m]],
        )?;

        let solvent_index = |name: &str| {
            table
                .solvent_index(name)
                .expect("validated solvent reference")
        };
        let case_index = |name: &str| {
            self.cases
                .iter()
                .position(|c| c.name == name)
                .expect("validated case reference")
        };
        let cases: Vec<LoadCase> = self
            .cases
            .iter()
            .map(|c| LoadCase {
                name: c.name.clone(),
                solvent: solvent_index(&c.solvent),
            })
            .collect();

        let objective = self.objective.as_ref().map(|obj| match obj {
            ObjectiveConfig::Shape { case, target } => BuiltObjective::Shape {
                case: case_index(case),
                target: target.clone(),
            },
            ObjectiveConfig::BlockedForce {
                case,
                set,
                comp,
                sign,
            } => BuiltObjective::BlockedForce {
                case: case_index(case),
                spec: BlockedForceSpec {
                    node_set: set.clone(),
                    comp: *comp,
                    sign: *sign,
                },
            },
        });

        let constraints: Vec<Constraint> = self
            .constraints
            .iter()
            .map(|cc| match cc {
                ConstraintConfig::Volume { phases, bound } => Constraint::Volume {
                    phases: phases
                        .iter()
                        .map(|p| table.phase_index(p).expect("validated phase reference"))
                        .collect(),
                    bound: *bound,
                },
                ConstraintConfig::Grayness => Constraint::Grayness,
                ConstraintConfig::ReactionFloor {
                    case,
                    set,
                    comp,
                    sign,
                    floor_n,
                } => Constraint::ReactionFloor {
                    case: case_index(case),
                    spec: BlockedForceSpec {
                        node_set: set.clone(),
                        comp: *comp,
                        sign: *sign,
                    },
                    floor_n: *floor_n,
                },
            })
            .collect();

        let schedule = LoadSchedule {
            n_steps: self.solver.n_steps,
            beta: self.solver.beta,
        };
        let newton = NewtonSettings {
            tol_rel: self.solver.newton_tol_rel,
            max_iterations: self.solver.newton_max_iterations,
            max_subdivisions: self.solver.max_subdivisions,
            ..NewtonSettings::default()
        };
        let settings = OptSettings {
            max_iterations: self.opt.max_iterations,
            min_iterations: 0,
            loss_window: self.opt.loss_window,
            loss_tol: self.opt.loss_tol,
            learning_rate: self.opt.learning_rate,
            clip_norm: self.opt.clip_norm,
            barrier: BarrierSchedule {
                tau0: self.opt.tau0,
                growth: self.opt.tau_growth,
            },
            continuation: ContinuationSchedules {
                p_start: self.opt.p_start,
                p_step: self.opt.p_step,
                p_cap: self.opt.p_cap,
                xi_start: self.opt.xi_start,
                xi_step: self.opt.xi_step,
                xi_floor: self.opt.xi_floor,
            },
            projection: self.projection.as_ref().map(|p| ProjectionSchedule {
                eta: p.eta,
                beta_start: p.beta_start,
                beta_step: p.beta_step,
                beta_cap: p.beta_cap,
            }),
        };

        Ok(BuiltProblem {
            model,
            table,
            net,
            cases,
            objective,
            constraints,
            schedule,
            newton,
            settings,
            layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn full_config_text() -> String {
        r#"
# A config exercising every section kind.
mode optimize

[mesh]
nx 8
ny 4
lx_m 0.4
ly_m 0.2
thickness_m 0.01

[phase gel]
g_pa 1e6
eta_f_pa 0
chi water 0.2
chi oil 5.0

[phase elastomer]
g_pa 2e7
chi water 5.0
chi oil 5.0

[phase void]
g_pa 1e4
chi water 5.0
chi oil 5.0

[solvent water]
molar_volume_m3_per_mol 1.8e-5
temperature_k 298
mu0_j_per_mol 0
mu_dry_j_per_mol -1e5
mu_wet_j_per_mol -100

[solvent oil]
molar_volume_m3_per_mol 1e-4
temperature_k 298
mu0_j_per_mol 0
mu_dry_j_per_mol -1e5
mu_wet_j_per_mol -200

[node_set output]
box_m 0.4 0.1 0.4 0.1

[dirichlet]
set left
comp x
value_m 0

[dirichlet]
set left
comp y

[dirichlet]
set output
comp x

[load_case swell]
solvent water

[load_case organo]
solvent oil

[objective blocked_force]
case swell
set output
comp x
sign -1

[constraint volume]
phases gel elastomer
bound 0.4

[constraint grayness]

[constraint reaction_floor]
case organo
set output
comp x
sign 1
floor_n 5

[network]
seed 3
num_fourier 16
hidden 24
theta_head 1
bandwidth 1.5

[solver]
n_steps 10
beta 0.05
newton_tol_rel 1e-7

[opt]
max_iterations 50
learning_rate 4e-3

[projection]
eta 0.5
beta_start 1
beta_step 0.05
beta_cap 6

[output]
directory out/full
snapshot_every 10

[region]
phase gel
box_m 0 0 0.4 0.1
theta_deg 30

[region]
phase elastomer
box_m 0 0.1 0.4 0.2
"#
        .to_string()
    }

    #[test]
    fn full_config_round_trips_through_serialization() {
        let parsed = parse_config(&full_config_text()).unwrap();
        let echoed = parsed.to_text();
        let reparsed = parse_config(&echoed).unwrap();
        assert_eq!(parsed, reparsed);
        // A second serialize is byte-stable.
        assert_eq!(echoed, reparsed.to_text());
    }

    #[test]
    fn omitted_sections_take_documented_defaults() {
        let text = r#"
mode optimize
[mesh]
nx 4
ny 2
lx_m 0.4
ly_m 0.2
thickness_m 0.01
[phase gel]
g_pa 1e6
chi water 0.2
[solvent water]
molar_volume_m3_per_mol 1.8e-5
temperature_k 298
mu0_j_per_mol 0
mu_dry_j_per_mol -1e5
mu_wet_j_per_mol -100
[dirichlet]
set left
comp x
[dirichlet]
set left
comp y
[load_case swell]
solvent water
[objective shape]
case swell
target_point_m 0.4 0.1 0 -0.01
"#;
        let c = parse_config(text).unwrap();
        assert_eq!(c.network, NetworkConfig::default());
        assert_eq!(c.solver, SolverConfig::default());
        assert_eq!(c.opt, OptLoopConfig::default());
        assert_eq!(c.output, OutputConfig::default());
        assert!(c.projection.is_none());
        assert_eq!(c.opt.max_iterations, 250);
        assert_eq!(c.opt.loss_window, 5);
        assert_relative_eq!(c.opt.learning_rate, 5e-3);
        // The echo spells the defaults out.
        let echo = c.to_text();
        assert!(echo.contains("max_iterations 250"));
        assert!(echo.contains("bandwidth auto"));
    }

    #[test]
    fn violations_are_collected_not_first_only() {
        let text = r#"
mode optimize
[mesh]
nx 0
ny 2
lx_m 0.4
ly_m 0.2
thickness_m 0.01
[phase gel]
g_pa -5
chi water 0.2
[solvent water]
molar_volume_m3_per_mol 1.8e-5
temperature_k 298
mu0_j_per_mol 0
mu_dry_j_per_mol -100
mu_wet_j_per_mol -2000
[dirichlet]
set nowhere
comp x
[load_case swell]
solvent missing
[objective shape]
case swell
target_point_m 0.1 0.1 0 0
"#;
        let err = parse_config(text).unwrap_err();
        let Error::Config(v) = err else {
            panic!("expected config error")
        };
        let all = v.join("\n");
        assert!(all.contains("nx and ny"), "{all}");
        assert!(all.contains("g_pa must be positive"), "{all}");
        assert!(all.contains("mu_dry_j_per_mol < mu_wet_j_per_mol"), "{all}");
        assert!(all.contains("unknown node set 'nowhere'"), "{all}");
        assert!(all.contains("unknown solvent 'missing'"), "{all}");
        assert!(v.len() >= 5, "expected many violations, got {v:?}");
    }

    #[test]
    fn missing_chi_and_unknown_keys_are_violations() {
        let text = r#"
mode optimize
[mesh]
nx 2
ny 2
lx_m 0.1
ly_m 0.1
thickness_m 0.01
wrong_key 5
[phase gel]
g_pa 1e6
[solvent water]
molar_volume_m3_per_mol 1.8e-5
temperature_k 298
mu0_j_per_mol 0
mu_dry_j_per_mol -1e5
mu_wet_j_per_mol -100
[dirichlet]
set left
comp x
[load_case swell]
solvent water
[objective shape]
case swell
target_point_m 0.05 0.05 0 0
"#;
        let Error::Config(v) = parse_config(text).unwrap_err() else {
            panic!("expected config error")
        };
        let all = v.join("\n");
        assert!(all.contains("unknown key 'wrong_key'"), "{all}");
        assert!(all.contains("missing chi entry for solvent 'water'"), "{all}");
    }

    #[test]
    fn mode_objective_pairing_is_enforced() {
        // Optimize without objective.
        let base = r#"
[mesh]
nx 2
ny 2
lx_m 0.1
ly_m 0.1
thickness_m 0.01
[phase gel]
g_pa 1e6
chi water 0.2
[solvent water]
molar_volume_m3_per_mol 1.8e-5
temperature_k 298
mu0_j_per_mol 0
mu_dry_j_per_mol -1e5
mu_wet_j_per_mol -100
[dirichlet]
set left
comp x
[load_case swell]
solvent water
"#;
        let text = format!("mode optimize\n{base}");
        let Error::Config(v) = parse_config(&text).unwrap_err() else {
            panic!("expected config error")
        };
        assert!(v.join("\n").contains("requires an [objective]"));

        // Forward without regions.
        let text = format!("mode forward\n{base}");
        let Error::Config(v) = parse_config(&text).unwrap_err() else {
            panic!("expected config error")
        };
        assert!(v.join("\n").contains("requires at least one [region]"));

        // Forward with a full-cover region parses.
        let text = format!("mode forward\n{base}\n[region]\nphase gel\nbox_m 0 0 0.1 0.1\n");
        parse_config(&text).unwrap();
    }

    #[test]
    fn build_resolves_indices_sets_and_layout() {
        let c = parse_config(&full_config_text()).unwrap();
        let built = c.build().unwrap();

        // Table layout follows declaration order; chi columns follow solvent
        // order.
        assert_eq!(built.table.phases.len(), 3);
        assert_eq!(built.table.phases[0].name, "gel");
        assert_eq!(built.table.phases[0].chi, vec![0.2, 5.0]);
        assert_eq!(built.table.solvents[1].name, "oil");

        // Node set from the box resolves to the single mid-right node.
        assert_eq!(built.model.mesh.node_set("output").unwrap().len(), 1);

        // Case and constraint indices.
        assert_eq!(built.cases[1].solvent, 1);
        match &built.objective {
            Some(BuiltObjective::BlockedForce { case, spec }) => {
                assert_eq!(*case, 0);
                assert_eq!(spec.node_set, "output");
                assert_eq!(spec.sign, -1.0);
            }
            other => panic!("unexpected objective {other:?}"),
        }
        match &built.constraints[0] {
            Constraint::Volume { phases, bound } => {
                assert_eq!(phases, &vec![0, 1]);
                assert_relative_eq!(*bound, 0.4);
            }
            other => panic!("unexpected constraint {other:?}"),
        }
        match &built.constraints[2] {
            Constraint::ReactionFloor { case, floor_n, .. } => {
                assert_eq!(*case, 1);
                assert_relative_eq!(*floor_n, 5.0);
            }
            other => panic!("unexpected constraint {other:?}"),
        }

        // Layout paints one-hot rows with the later region winning, and the
        // fiber angle lands in radians.
        let layout = built.layout.as_ref().unwrap();
        let n_el = built.model.mesh.num_elements();
        assert_eq!(layout.rho.len(), n_el);
        for row in &layout.rho {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0);
        }
        // Element centroids below y = 0.1 are gel (with the 30 degree
        // angle), above are elastomer.
        for e in 0..n_el {
            let c = built.model.mesh.element_centroid(e);
            if c[1] < 0.1 {
                assert_eq!(layout.rho[e][0], 1.0);
                assert_relative_eq!(layout.theta[e][0], 30f64.to_radians());
            } else {
                assert_eq!(layout.rho[e][1], 1.0);
                assert_eq!(layout.theta[e][0], 0.0);
            }
        }

        // Settings carried through.
        assert_eq!(built.settings.max_iterations, 50);
        assert_relative_eq!(built.settings.learning_rate, 4e-3);
        assert!(built.settings.projection.is_some());
        assert_eq!(built.schedule.n_steps, 10);
        assert_relative_eq!(built.newton.tol_rel, 1e-7);
        assert_eq!(built.net.spec().n_phases, 3);
        assert!(built.net.spec().theta_head);
    }

    #[test]
    fn build_flags_empty_set_boxes_and_region_gaps() {
        let mut c = parse_config(&full_config_text()).unwrap();
        c.node_sets[0].box_m = [9.0, 9.0, 9.5, 9.5];
        let v = match c.build() {
            Err(Error::Config(v)) => v,
            _ => panic!("expected config error"),
        };
        assert!(v.join("\n").contains("matches no nodes"));

        // A region gap in forward mode is a violation.
        let mut c = parse_config(&full_config_text()).unwrap();
        c.mode = RunMode::Forward;
        c.objective = None;
        c.regions.pop(); // drop the elastomer cover
        let v = match c.build() {
            Err(Error::Config(v)) => v,
            _ => panic!("expected config error"),
        };
        assert!(v.join("\n").contains("not covered by any [region]"));
    }

    #[test]
    fn auto_bandwidth_follows_the_mesh() {
        let mut c = parse_config(&full_config_text()).unwrap();
        c.network.bandwidth = None;
        let built = c.build().unwrap();
        assert_relative_eq!(built.net.spec().bandwidth, 8.0 / 20.0);
    }
}
